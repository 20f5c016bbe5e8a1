"""Command-line entry point: ``stagsynth {summarize,estimate,certify,diagnose,simulate}``.

Exit codes: 0 success, 2 validation error, 3 solver non-convergence (the
report is still written). Errors print one line ``error <Code>: <message>``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import __version__
from .certificate import certify, theorem1_bound
from .diagnostics import diagnose, placebo_gaps
from .errors import StagSynthError, ValidationError
from .estimator import att_by_event_time
from .imbalance import WeightMatrix, imbalance_report
from .panel import DONOR_MODES, DonorRule, Panel, load_panel, summarize
from .simlab import DgpConfig, EstimatorConfig, bound_coverage, example1_scenario, run_monte_carlo
from .solver import SolverConfig, lambda_schedule, pilot_eta, solve_weights

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGED = 0, 2, 3


def write_atomic(path: str, text: str) -> None:
    """Write via a temp file in the target directory, then rename over the target."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=True) + "\n"


def _emit(args, payload: dict) -> None:
    text = dumps(payload)
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)


def _float_or(token: str, word: str):
    if token == word:
        return word
    try:
        return float(token)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or {word!r}, got {token!r}") from None


def _read_panel(path: str) -> Panel:
    try:
        with open(path, "rb") as fh:
            return load_panel(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read panel file {path}: {exc.strerror}") from None


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path} is not valid JSON: {exc}") from None


def load_weights(path: str, panel: Panel, rule: DonorRule, K: int):
    """Weight file: a solution/estimate JSON or a bare ``{treated: {donor: w}}`` map.

    ``{"weights_by_event_time": {k: {...}}}`` supplies per-k matrices.
    """
    data = _read_json(path)
    if "solution" in data:
        data = data["solution"]
    if "weights_by_event_time" in data:
        per = data["weights_by_event_time"]
        return {k: WeightMatrix.from_rows(panel, per[str(k)], rule, k) for k in range(K + 1)}
    rows = data.get("weights", data)
    if rule.mode == "per_event_time":
        return {k: WeightMatrix.from_rows(panel, rows, rule, k) for k in range(K + 1)}
    return WeightMatrix.from_rows(panel, rows, rule)


def _solver_config(args) -> SolverConfig:
    return SolverConfig(nu=args.nu, max_iters=args.max_iters, rel_tol=args.rel_tol)


def _fit(args, panel: Panel) -> tuple:
    """Weights per the flags; returns ``(gamma, solutions, lambda_info)``."""
    rule = DonorRule(args.donor_rule, args.horizon)
    if args.weights:
        return load_weights(args.weights, panel, rule, args.horizon), None, {"source": "provided weights"}
    cfg = _solver_config(args)
    info = {}
    if args.lam == "auto":
        eta = pilot_eta(panel, rule, cfg, 0 if rule.mode == "per_event_time" else None)
        lam = lambda_schedule(eta, args.lambda0)
        info = {"value": lam, "source": "auto", "lambda0": args.lambda0, "eta_hat": eta,
                "eta_source": "pilot-solve imbalance proxy (empirical stand-in for eta_NT)"}
    else:
        lam = args.lam
        info = {"value": lam, "source": "user"}
    cfg = replace(cfg, lam=lam)
    if rule.mode == "per_event_time":
        sols = {k: solve_weights(panel, rule, cfg, k=k) for k in range(args.horizon + 1)}
        return {k: s.gamma for k, s in sols.items()}, sols, info
    sol = solve_weights(panel, rule, cfg)
    return sol.gamma, {None: sol}, info


def _first(gamma):
    return gamma if isinstance(gamma, WeightMatrix) else gamma[0]


def cmd_summarize(args) -> int:
    panel = _read_panel(args.panel)
    _emit(args, summarize(panel, args.horizon).to_dict(panel))
    return EXIT_OK


def cmd_estimate(args) -> int:
    panel = _read_panel(args.panel)
    summary = summarize(panel, args.horizon)
    gamma, sols, lam_info = _fit(args, panel)
    att = att_by_event_time(panel, gamma, args.horizon, include_k0=args.include_k0)
    g0 = _first(gamma)
    nu = args.nu
    lam = lam_info.get("value", 0.0)
    payload = {
        "version": __version__,
        "panel": summary.to_dict(panel),
        "donor_rule": {"mode": args.donor_rule, "horizon": args.horizon},
        "att": att.to_dict(panel),
        "imbalance": imbalance_report(panel, g0, nu, lam).to_dict(panel, g0.treated),
        "lambda": lam_info,
        "placebo": placebo_gaps(panel, g0).to_dict(panel),
    }
    converged = True
    if sols is None:
        payload["solution"] = {"weights": g0.to_dict(panel), "source": "provided"}
        if not isinstance(gamma, WeightMatrix):
            payload["solution"]["weights_by_event_time"] = {str(k): g.to_dict(panel) for k, g in gamma.items()}
    elif None in sols:
        payload["solution"] = sols[None].to_dict(panel)
        converged = sols[None].converged
    else:
        payload["solution"] = sols[0].to_dict(panel)
        payload["solution"]["weights_by_event_time"] = {str(k): s.gamma.to_dict(panel) for k, s in sols.items()}
        payload["solution"]["converged_by_event_time"] = {str(k): s.converged for k, s in sols.items()}
        converged = all(s.converged for s in sols.values())
    _emit(args, payload)
    if not converged:
        print("error DidNotConverge: solver hit max_iters before rel_tol; report written with converged=false",
              file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_certify(args) -> int:
    kappa = None if args.kappa == "heuristic" else args.kappa
    c = None if args.c == "auto" else args.c
    strict = not args.lenient
    if args.panel is None:
        missing = [f for f in ("q_pool", "q_sep", "l_min", "j") if getattr(args, f) is None]
        if missing or kappa is None or c is None:
            raise ValidationError(
                "without --panel, certify needs --q-pool, --q-sep, --l-min, --j, numeric --kappa and --c"
            )
        cert = theorem1_bound(args.q_pool, args.q_sep, args.l_min, args.j, c, kappa, strict=strict)
        _emit(args, {"version": __version__, "certificate": cert.to_dict(), "source": "formula"})
        return EXIT_OK
    panel = _read_panel(args.panel)
    gamma, sols, lam_info = _fit(args, panel)
    g0 = _first(gamma)
    cert = certify(panel, g0, kappa=kappa, c=c, strict=strict, q_pool=args.q_pool, q_sep=args.q_sep)
    _emit(args, {"version": __version__, "certificate": cert.to_dict(), "source": "panel",
                 "weights": g0.to_dict(panel), "lambda": lam_info})
    return EXIT_OK


def cmd_diagnose(args) -> int:
    panel = _read_panel(args.panel)
    gamma, sols, lam_info = _fit(args, panel)
    g0 = _first(gamma)
    rule = DonorRule(args.donor_rule, args.horizon)
    cfg = _solver_config(args)
    if lam_info.get("value") is not None:
        cfg = replace(cfg, lam=lam_info["value"])
    windows = [int(w) for w in args.windows.split(",")] if args.windows else []
    rep = diagnose(panel, g0, rule=rule, config=cfg, windows=windows, leave_one_out=args.leave_one_out,
                   mode=args.placebo_mode, threshold=args.m_threshold, holdout=args.holdout)
    _emit(args, {"version": __version__, **rep.to_dict(panel), "lambda": lam_info})
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = _read_json(args.config)
    task = spec.get("task", "monte_carlo")
    reps = int(spec.get("reps", 100))
    seed = args.seed
    if task == "monte_carlo":
        dgp = DgpConfig.from_dict(spec["dgp"])
        est = EstimatorConfig.from_dict(spec.get("estimator", {}))
        rep = run_monte_carlo(dgp, reps, est, seed, jobs=args.jobs)
        payload = {"version": __version__, "task": task, "report": rep.to_dict()}
        if args.table:
            write_atomic(args.table, rep.table())
    elif task == "bound_coverage":
        dgp = DgpConfig.from_dict(spec["dgp"])
        payload = {"version": __version__, "task": task, "config": dgp.to_dict(), "seed": seed,
                   "report": bound_coverage(dgp, reps, seed, k=int(spec.get("k", 0)), jobs=args.jobs)}
    elif task == "example1":
        sizes = spec.get("sizes", [20, 20, 200])
        payload = {"version": __version__, "task": task, "seed": seed,
                   "report": example1_scenario(float(spec.get("delta", 1.0)), sizes, reps, seed,
                                               shock_scale=float(spec.get("shock_scale", 0.2)), jobs=args.jobs)}
    else:
        raise ValidationError(f"unknown simulate task {task!r} (monte_carlo, bound_coverage, example1)")
    _emit(args, payload)
    return EXIT_OK


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", required=True, metavar="PATH", help="long-format panel (unit,time,outcome,adopt_time)")
    p.add_argument("--nu", type=float, default=0.5, help="pooled weight in the objective, in (0,1) (default: 0.5)")
    p.add_argument("--lambda", dest="lam", type=lambda s: _float_or(s, "auto"), default="auto",
                   metavar="F|auto", help="ridge penalty; auto = lambda0 * eta_hat^2 from a pilot solve (default: auto)")
    p.add_argument("--lambda0", type=float, default=1.0, help="multiplier for --lambda auto (default: 1.0)")
    p.add_argument("--donor-rule", choices=DONOR_MODES, default="max_horizon",
                   help="donor eligibility rule (default: max_horizon)")
    p.add_argument("--horizon", type=int, default=0, metavar="K", help="largest event time (default: 0)")
    p.add_argument("--weights", metavar="PATH", help="JSON weights; bypasses the solver")
    p.add_argument("--max-iters", type=int, default=10_000, help="solver iteration cap (default: 10000)")
    p.add_argument("--rel-tol", type=float, default=1e-9, help="relative objective decrease stop (default: 1e-9)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagsynth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("summarize", help="panel design summary")
    p.add_argument("--panel", required=True, metavar="PATH")
    p.add_argument("--horizon", type=int, default=0, metavar="K", help="largest event time (default: 0)")
    p.add_argument("--out", metavar="PATH", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("estimate", help="solve weights and estimate event-time ATTs")
    _add_fit_flags(p)
    p.add_argument("--include-k0", action="store_true", help="average k=0..K in att_bar (default: k=1..K)")
    p.add_argument("--out", metavar="PATH", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("certify", help="finite-sample ATT error certificate")
    p.add_argument("--panel", metavar="PATH", help="panel file; omit to evaluate the formula from --q-pool etc.")
    p.add_argument("--nu", type=float, default=0.5, help="(default: 0.5)")
    p.add_argument("--lambda", dest="lam", type=lambda s: _float_or(s, "auto"), default="auto", metavar="F|auto",
                   help="(default: auto)")
    p.add_argument("--lambda0", type=float, default=1.0, help="(default: 1.0)")
    p.add_argument("--donor-rule", choices=DONOR_MODES, default="max_horizon", help="(default: max_horizon)")
    p.add_argument("--horizon", type=int, default=0, metavar="K", help="(default: 0)")
    p.add_argument("--weights", metavar="PATH", help="JSON weights; bypasses the solver")
    p.add_argument("--max-iters", type=int, default=10_000, help="(default: 10000)")
    p.add_argument("--rel-tol", type=float, default=1e-9, help="(default: 1e-9)")
    p.add_argument("--kappa", type=lambda s: _float_or(s, "heuristic"), default="heuristic", metavar="F|heuristic",
                   help="shock scale; heuristic estimates it from placebo gaps (default: heuristic)")
    p.add_argument("--c", type=lambda s: _float_or(s, "auto"), default="auto", metavar="F|auto",
                   help="dispersion constant; auto = max row sum of squared weights (default: auto)")
    p.add_argument("--lenient", action="store_true", help="warn instead of failing on dispersion problems")
    p.add_argument("--q-pool", type=float, help="override pooled imbalance (square-root scale)")
    p.add_argument("--q-sep", type=float, help="override separate imbalance (square-root scale)")
    p.add_argument("--l-min", type=int, help="shortest pre-window (formula mode)")
    p.add_argument("--j", type=int, help="number of treated units (formula mode)")
    p.add_argument("--out", metavar="PATH", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("diagnose", help="effective donors, placebo gaps, sensitivity")
    _add_fit_flags(p)
    p.add_argument("--placebo-mode", choices=("demeaned", "raw"), default="demeaned", help="(default: demeaned)")
    p.add_argument("--windows", metavar="L1,L2,...", help="pre-window lengths for the sensitivity table")
    p.add_argument("--holdout", type=int, default=0, metavar="H",
                   help="also score each window on H held-out pre-periods (default: 0, off)")
    p.add_argument("--leave-one-out", action="store_true", help="add leave-one-donor-out rows")
    p.add_argument("--m-threshold", type=float, default=4.0, help="flag rows with m_j below this (default: 4)")
    p.add_argument("--out", metavar="PATH", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("simulate", help="Monte Carlo runs from a JSON config")
    p.add_argument("--config", required=True, metavar="PATH", help="JSON: {task, reps, dgp, estimator, ...}")
    p.add_argument("--seed", required=True, type=int, metavar="N", help="base seed (required)")
    p.add_argument("--jobs", type=int, default=1, metavar="N", help="worker processes; output is identical for any N (default: 1)")
    p.add_argument("--table", metavar="PATH", help="also write one TSV row per replication")
    p.add_argument("--out", metavar="PATH", help="output JSON (default: stdout)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StagSynthError as exc:
        print(f"error {exc.code}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyError as exc:
        print(f"error InvalidConfig: missing key {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
