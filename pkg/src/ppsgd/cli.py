"""Command-line entry point: ``ppsgd {run,curve,bounds,gen}``."""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .config import load_config, with_overrides
from .data import SyntheticStream, generate_ground_truth, write_user_csv
from .errors import ConfigError, IngestionError, PPSGDError, QueryError
from .harness import (
    emit_csv, emit_curve_csv, plan_sweep, read_csv, read_meta, run_sweep, sweep_meta, tradeoff_curve,
)
from .theory import (
    BoundInputs, ProblemConstants, excess_risk_bound, gaussian_design_smoothness,
    gaussian_design_variance, min_norm_split, personalization_threshold, tuned_step_size,
)

RECORDS = "records.csv"
TRADEOFF = "tradeoff.csv"


def _int_list(text):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load(args):
    cfg = load_config(args.config)
    return with_overrides(
        cfg,
        seeds=getattr(args, "seeds", None),
        threads=getattr(args, "threads", None),
        stride=getattr(args, "stride", None),
        output_dir=args.out,
    )


def cmd_run(args) -> int:
    cfg = _load(args)
    plan = plan_sweep(cfg)
    table = run_sweep(cfg)
    path = os.path.join(cfg.output_dir, RECORDS)
    emit_csv(table, path, meta=sweep_meta(cfg, plan))
    print(f"wrote {len(table)} rows to {path}")
    return 0


def cmd_curve(args) -> int:
    cfg = _load(args)
    path = args.table or os.path.join(cfg.output_dir, RECORDS)
    meta = read_meta(path)
    table = read_csv(path)
    rate = float(meta["sampling_rate"]) if "sampling_rate" in meta else plan_sweep(cfg).rate
    delta = float(meta["delta"]) if "delta" in meta else cfg.delta
    alpha = None
    if args.alpha_q is not None:
        alpha = plan_sweep(cfg).alpha(args.alpha_q)
    points = tradeoff_curve(table, delta, rate, intermediate_alpha=alpha, clip=args.clip)
    out = os.path.join(cfg.output_dir, TRADEOFF)
    emit_curve_csv(points, out)
    print(f"wrote {len(points)} rows to {out}")
    return 0


def cmd_bounds(args) -> int:
    cfg = _load(args)
    if cfg.dataset != "synthetic":
        raise ConfigError("bounds needs the synthetic dataset (closed-form constants)")
    syn = cfg.synthetic
    truth = generate_ground_truth(syn)
    L = gaussian_design_smoothness(truth.sigma_diag)
    var = gaussian_design_variance(truth.sigma_diag, truth.tau)
    consts = ProblemConstants(L, G=cfg.clip[0], sigma_w_bar_sq=var, sigma_theta_bar_sq=var, d_w=syn.d, N=syn.N)
    plan = plan_sweep(cfg)
    n = plan.rounds
    print(f"L = {L:.6g}  sigma_bar^2 = {var:.6g}  N = {syn.N}  d = {syn.d}  rounds = {n}")
    print(f"{'alpha_q':>9} {'alpha':>11} {'R':>11} {'eta*':>11} {'bound':>11}")
    for aq in cfg.alpha_q:
        alpha = plan.alpha(aq)
        w, th = min_norm_split(truth.theta_stars, alpha)
        b = BoundInputs(
            consts, alpha, n,
            w_star_norm=float(np.sqrt(np.sum(w * w))), theta_star_norm=float(np.sqrt(np.sum(th * th))),
        )
        r = b.radius if not math.isinf(alpha) else math.nan
        bound = excess_risk_bound(b, 0.0)
        eta = tuned_step_size(b, 0.0) if not math.isinf(alpha) else math.nan
        print(f"{aq:>9g} {alpha:>11.4g} {r:>11.4g} {eta:>11.4g} {bound:>11.4g}")
    thr = personalization_threshold(syn.N, math.sqrt(var), args.eps, cfg.delta, syn.d, cfg.clip[0])
    print(f"personalization threshold (eps={args.eps:g}): n > {thr:.6g} samples per user")
    return 0


def cmd_gen(args) -> int:
    cfg = _load(args)
    syn = cfg.synthetic
    truth = generate_ground_truth(syn)
    seed = cfg.seeds[0]
    width = len(str(syn.N - 1))
    for i in range(syn.N):
        stream = SyntheticStream(i, truth.theta_stars[i], truth.sigma_diag, truth.tau, seed)
        X, y = stream.draw(args.samples)
        write_user_csv(os.path.join(cfg.output_dir, "train", f"user_{i:0{width}d}.csv"), X, y)
        if args.test_samples:
            Xt, yt = stream.draw(args.test_samples)
            write_user_csv(os.path.join(cfg.output_dir, "test", f"user_{i:0{width}d}.csv"), Xt, yt)
    print(f"wrote {syn.N} users to {cfg.output_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppsgd", description="Personalized private federated SGD experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="experiment config file")
        sp.add_argument("--out", help="output directory (overrides output_dir)")

    sp = sub.add_parser("run", help="run the grid sweep and write records.csv")
    common(sp)
    sp.add_argument("--seeds", type=_int_list, help="comma-separated seeds")
    sp.add_argument("--threads", type=int, help="worker processes")
    sp.add_argument("--stride", type=int, help="record every STRIDE rounds")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("curve", help="build privacy/utility curves from a record table")
    common(sp)
    sp.add_argument("--table", help="record CSV (default: <out>/records.csv)")
    sp.add_argument("--alpha-q", type=float, help="alpha*Q of the intermediate curve")
    sp.add_argument("--clip", type=float, help="clip value to use when the table has several")
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("bounds", help="print bound values for a synthetic config")
    common(sp)
    sp.add_argument("--eps", type=float, default=1.0, help="privacy budget for the threshold")
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("gen", help="write synthetic per-user CSV files")
    common(sp)
    sp.add_argument("--seeds", type=_int_list, help="sample seed (first entry)")
    sp.add_argument("--samples", type=int, default=100, help="training samples per user")
    sp.add_argument("--test-samples", type=int, default=0, help="held-out samples per user")
    sp.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, IngestionError, QueryError) as exc:
        print(f"ppsgd: error: {exc}", file=sys.stderr)
        return 2
    except (PPSGDError, OSError) as exc:
        print(f"ppsgd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
