"""Personalized private federated SGD: training loops, privacy accounting and bounds."""

from .errors import (
    ConfigError, DivergedError, IngestionError, NumericError, ParameterError,
    PPSGDError, QueryError, RunError, StreamExhaustedError,
)
from .model import (
    INFINITY, AlphaGeometry, GroundTruth, ModelState, SamplePoint, alpha_norm_sq,
    clip_rows, clip_to_ball, excess_risk_arrays, l2_norm, population_risk_closed_form,
    predict, squared_loss_grads,
)
from .data import (
    FiniteStream, SyntheticConfig, SyntheticStream, draw_sample, generate_ground_truth,
    load_user_csv, synthetic_streams, write_user_csv,
)
from .optimizer import (
    Algorithm, AllClients, Bernoulli, FixedQ, HyperParams, Objective, RoundRecord,
    Server, aggregate_deterministic, ppsgd_run, ppsgd_sampled_avg_run, ppsgd_sampled_run,
    train,
)
from .privacy import (
    AccountantState, MechanismSpec, NoiseCalibration, accountant_step,
    calibrate_sigma_full_participation, calibrate_sigma_sampled, epsilon_at, epsilon_for,
    rdp_gaussian, rdp_subsampled_gaussian,
)

__version__ = "0.1.0"
