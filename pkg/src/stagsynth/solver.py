"""Projected-gradient solver for the partially pooled ridge objective.

Each treated row lives on its own donor simplex. Iterates are projected row by
row, steps are chosen by Armijo backtracking along the projection arc, and the
run starts from uniform weights over each pool, so results are deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DidNotConverge, NonFiniteInput, ValidationError
from .imbalance import ImbalanceReport, LagDesign, WeightMatrix, _check_nu, imbalance_report
from .panel import DonorRule, Panel

__all__ = [
    "LAMBDA_FLOOR",
    "PILOT_LAMBDA",
    "SolverConfig",
    "WeightSolution",
    "lambda_schedule",
    "project_simplex",
    "select_lambda",
    "solve_auto",
    "solve_weights",
]

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-12
PILOT_LAMBDA = 1e-6
PILOT_REL_TOL = 1e-6
GRAD_MAP_TOL = 1e-10
STEP_RULES = ("backtracking", "fixed_lipschitz")


@dataclass(frozen=True)
class SolverConfig:
    nu: float = 0.5
    lam: float = 1e-6
    max_iters: int = 10_000
    rel_tol: float = 1e-9
    step_rule: str = "backtracking"
    shrink: float = 0.5
    armijo: float = 1e-4
    init: str = "uniform"
    allow_extreme_nu: bool = False
    imbalance_mode: str = "raw"
    window: Optional[int] = None
    renormalize: bool = False

    def __post_init__(self):
        _check_nu(self.nu, self.allow_extreme_nu)
        if not self.lam >= 0:
            raise ValidationError("lambda must be >= 0")
        if not self.rel_tol > 0:
            raise ValidationError("rel_tol must be > 0")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.step_rule not in STEP_RULES:
            raise ValidationError(f"step_rule must be one of {STEP_RULES}")
        if not 0 < self.shrink < 1:
            raise ValidationError("shrink must be in (0, 1)")
        if self.init not in ("uniform", "provided"):
            raise ValidationError("init must be 'uniform' or 'provided'")

    def design_kwargs(self) -> dict:
        return {"mode": self.imbalance_mode, "window": self.window, "renormalize": self.renormalize}


@dataclass
class WeightSolution:
    gamma: WeightMatrix
    report: ImbalanceReport
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    def to_dict(self, panel: Panel) -> dict:
        return {
            "weights": self.gamma.to_dict(panel),
            "objective_trace": list(self.trace),
            "converged": self.converged,
            "iterations": self.iterations,
            "event_time": self.gamma.event_time,
            "donor_rule": {"mode": self.gamma.rule.mode, "horizon": self.gamma.rule.horizon},
        }


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto the probability simplex (sort and threshold)."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1 or v.size == 0:
        raise ValidationError("project_simplex expects a non-empty 1-D vector")
    return _project_matrix(v[None, :])[0]


def _project_matrix(V: np.ndarray) -> np.ndarray:
    """Project every row of ``V`` onto the simplex."""
    if not np.all(np.isfinite(V)):
        raise NonFiniteInput("cannot project a vector with non-finite entries")
    U = -np.sort(-V, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    ind = np.arange(1, V.shape[1] + 1)
    rho = np.count_nonzero(U - css / ind > 0, axis=1) - 1
    theta = css[np.arange(V.shape[0]), rho] / (rho + 1)
    return np.maximum(V - theta[:, None], 0.0)


class _Compiled:
    """The objective restricted to free weights ``x = W[mask]`` (row-major).

    Rows sharing an adoption cohort and a donor pool share one lag block, so
    residuals are a handful of small matrix products per evaluation.
    """

    def __init__(self, design: LagDesign, supports: tuple, nu: float, lam: float):
        self.nu, self.lam = nu, lam
        self.J, self.L_max = design.J, design.L_max
        sizes = [len(s) for s in supports]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.d = int(offsets[-1])
        self.div = design.counts if design.renormalize else np.full(design.L_max, float(design.J))
        self.blocks = []
        for rows, L, block, yt in design.cohorts:
            by_support: dict = {}
            for pos, r in enumerate(rows):
                by_support.setdefault(supports[r], []).append((int(r), pos))
            for sup, members in by_support.items():
                B = np.ascontiguousarray(block[:, np.array(sup)])
                rr = np.array([m[0] for m in members])
                Y = yt[[m[1] for m in members]]
                idx = offsets[rr][:, None] + np.arange(len(sup))[None, :]
                self.blocks.append((idx, B, Y, L))
        # rows of equal pool size are projected together
        by_len: dict = {}
        for r, m in enumerate(sizes):
            by_len.setdefault(m, []).append(offsets[r])
        self.proj_groups = [np.array(o)[:, None] + np.arange(m)[None, :] for m, o in by_len.items()]

    def _residuals(self, x: np.ndarray) -> tuple:
        pooled = np.zeros(self.L_max)
        sep = 0.0
        res = []
        for idx, B, Y, L in self.blocks:
            R = Y - x[idx] @ B.T
            pooled[:L] += R.sum(axis=0)
            sep += float(np.sum(R * R)) / L
            res.append(R)
        pooled /= self.div
        f = (self.nu * float(pooled @ pooled) / self.L_max + (1.0 - self.nu) * sep / self.J
             + self.lam * float(x @ x))
        return f, pooled, res

    def value(self, x: np.ndarray) -> float:
        return self._residuals(x)[0]

    def value_and_grad(self, x: np.ndarray) -> tuple:
        f, pooled, res = self._residuals(x)
        g = 2.0 * self.lam * x
        cp = (-2.0 * self.nu / self.L_max) * pooled / self.div
        cs = -2.0 * (1.0 - self.nu) / self.J
        for (idx, B, _, L), R in zip(self.blocks, res):
            g[idx] += (cs / L) * (R @ B) + cp[:L] @ B
        return f, g

    def project(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        for idx in self.proj_groups:
            out[idx] = _project_matrix(x[idx])
        return out

    def lipschitz(self, iters: int = 100) -> float:
        """Largest Hessian eigenvalue by power iteration (the objective is quadratic)."""
        _, g0 = self.value_and_grad(np.zeros(self.d))
        v = np.full(self.d, 1.0 / math.sqrt(self.d))
        est = 0.0
        for _ in range(iters):
            _, g = self.value_and_grad(v)
            hv = g - g0
            nrm = float(np.linalg.norm(hv))
            if nrm == 0.0:
                return max(2.0 * self.lam, 1e-12)
            if abs(nrm - est) <= 1e-9 * nrm:
                est = nrm
                break
            est = nrm
            v = hv / nrm
        return est * 1.01


def solve_weights(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    *,
    k: Optional[int] = None,
    initial: Optional[WeightMatrix] = None,
    design: Optional[LagDesign] = None,
    raise_on_nonconvergence: bool = False,
) -> WeightSolution:
    """Minimise the partially pooled ridge objective over the product of donor simplices.

    ``k`` selects the event time whose donor pools apply (only matters for
    ``per_event_time``). Non-convergence returns the best iterate with
    ``converged=False`` unless ``raise_on_nonconvergence`` is set.
    """
    rule = rule or DonorRule()
    cfg = config or SolverConfig()
    lam = max(cfg.lam, LAMBDA_FLOOR)
    start = WeightMatrix.uniform(panel, rule, k)
    if cfg.init == "provided":
        if initial is None:
            raise ValidationError("init='provided' requires an initial weight matrix")
        if initial.supports != start.supports:
            raise ValidationError("initial weight matrix has different donor pools")
        start = initial
    design = design or LagDesign(panel, **cfg.design_kwargs())
    mask = start.mask()
    obj = _Compiled(design, start.supports, cfg.nu, lam)
    x = start.weights[mask]
    f, g = obj.value_and_grad(x)
    trace = [f]

    lip = obj.lipschitz()
    step = 1.0 / lip
    fixed = cfg.step_rule == "fixed_lipschitz"
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        s = step if fixed else min(step / cfg.shrink, 1e6 / lip)
        while True:
            x_new = obj.project(x - s * g)
            d = x_new - x
            f_new = obj.value(x_new)
            if fixed or f_new <= f + cfg.armijo * float(g @ d):
                break
            s *= cfg.shrink
            if s < 1e-20 / lip:
                f_new, x_new, d = f, x, np.zeros_like(x)
                break
        if f_new > f:
            # a 1/L step cannot increase a convex quadratic beyond rounding; keep the iterate
            f_new, x_new, d = f, x, np.zeros_like(x)
        step = s
        gm = float(np.linalg.norm(d)) / s
        decrease = f - f_new
        x = x_new
        f, g = obj.value_and_grad(x)
        trace.append(f)
        if gm <= GRAD_MAP_TOL or decrease <= cfg.rel_tol * max(abs(trace[-2]), 1e-300):
            converged = True
            break

    if not converged:
        msg = f"solver stopped after {it} iterations without meeting rel_tol={cfg.rel_tol}"
        if raise_on_nonconvergence:
            raise DidNotConverge(msg)
        logger.warning(msg)
    W = np.zeros(mask.shape)
    W[mask] = x
    gamma = start.with_weights(_clean_rows(W, start.supports))
    report = imbalance_report(panel, gamma, cfg.nu, lam, allow_extreme_nu=cfg.allow_extreme_nu, design=design)
    return WeightSolution(gamma, report, trace, converged, it)


def _clean_rows(W: np.ndarray, supports: tuple) -> np.ndarray:
    """Renormalise rows so sums are 1 to machine precision."""
    W = np.where(W > 0, W, 0.0)
    out = np.zeros_like(W)
    for r, s in enumerate(supports):
        idx = list(s)
        out[r, idx] = W[r, idx] / W[r, idx].sum()
    return out


def lambda_schedule(eta_hat: float, lambda0: float = 1.0) -> float:
    """Ridge penalty of the same order as the squared empirical imbalance, floored at 1e-12."""
    if eta_hat < 0 or not math.isfinite(eta_hat):
        raise ValidationError("eta_hat must be a finite non-negative number")
    return max(lambda0 * eta_hat**2, LAMBDA_FLOOR)


def pilot_eta(panel: Panel, rule: Optional[DonorRule] = None, config: Optional[SolverConfig] = None, k=None) -> float:
    """Empirical imbalance proxy: max(q_pool, q_sep) at a near-unpenalised pilot solve."""
    cfg = config or SolverConfig()
    cfg = replace(cfg, lam=PILOT_LAMBDA, rel_tol=max(cfg.rel_tol, PILOT_REL_TOL))
    sol = solve_weights(panel, rule, cfg, k=k)
    return math.sqrt(max(sol.report.q_pool_sq, sol.report.q_sep_sq))


def solve_auto(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    *,
    lambda0: float = 1.0,
    k: Optional[int] = None,
) -> tuple:
    """Pilot solve, then solve at ``lambda_schedule(eta_hat, lambda0)``; returns ``(solution, eta_hat)``."""
    cfg = config or SolverConfig()
    eta = pilot_eta(panel, rule, cfg, k)
    sol = solve_weights(panel, rule, replace(cfg, lam=lambda_schedule(eta, lambda0)), k=k)
    return sol, eta


def select_lambda(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    *,
    multipliers: Sequence[float] = (0.25, 0.5, 1.0, 2.0, 4.0),
    holdout: int = 1,
) -> dict:
    """Pick lambda from ``multipliers * eta_hat^2`` by placebo-gap cross-validation.

    For every candidate the weights are fitted on each treated unit's
    pre-window minus its last ``holdout`` periods, and scored by the RMSE of the
    intercept-shifted gaps on those held-out periods.
    """
    from .diagnostics import placebo_cv_score

    cfg = config or SolverConfig()
    eta = pilot_eta(panel, rule, cfg)
    grid = [max(m * eta**2, LAMBDA_FLOOR) for m in multipliers]
    scores = [placebo_cv_score(panel, rule, replace(cfg, lam=lam), holdout) for lam in grid]
    best = int(np.argmin(scores))
    return {
        "eta_hat": eta,
        "eta_source": "pilot-solve imbalance proxy",
        "grid": grid,
        "scores": scores,
        "selected": grid[best],
    }
