"""Practical checks: effective donor counts, placebo gaps, sensitivity tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyDonorPool, ValidationError, WindowTooShort
from .estimator import att_by_event_time, unit_effect
from .imbalance import WeightMatrix
from .panel import DonorRule, Panel
from .solver import SolverConfig, solve_weights

__all__ = [
    "DiagnosticsReport",
    "PlaceboGaps",
    "diagnose",
    "donor_sensitivity",
    "effective_donor_counts",
    "placebo_cv_score",
    "placebo_gaps",
    "window_sensitivity",
]

M_THRESHOLD = 4.0
PLACEBO_MODES = ("demeaned", "raw")


def effective_donor_counts(gamma: WeightMatrix, threshold: float = M_THRESHOLD) -> tuple:
    """``m_j = 1 / sum_i w_ij^2`` per row, and the treated indices with ``m_j < threshold``."""
    m = 1.0 / np.sum(gamma.weights**2, axis=1)
    flagged = [j for j, v in zip(gamma.treated, m) if v < threshold]
    return m, flagged


@dataclass
class PlaceboGaps:
    mode: str
    gaps: dict  # treated index -> array over lags 1..L_j
    per_unit_rmse: dict
    pooled_rmse: float
    mean_unit_rmse: float

    def to_dict(self, panel: Panel) -> dict:
        lab = panel.unit_labels
        return {
            "mode": self.mode,
            "per_unit_rmse": {lab[j]: v for j, v in self.per_unit_rmse.items()},
            "pooled_rmse": self.pooled_rmse,
            "mean_unit_rmse": self.mean_unit_rmse,
            "gaps": {lab[j]: [float(x) for x in g] for j, g in self.gaps.items()},
        }


def placebo_gaps(
    panel: Panel,
    gamma: WeightMatrix,
    *,
    mode: str = "demeaned",
    window: Optional[int] = None,
) -> PlaceboGaps:
    """Pre-treatment gaps between each treated unit and its synthetic unit.

    ``gaps[j][l - 1]`` is the gap at lag ``l`` (period ``T_j - l``). In the
    default demeaned mode all series are centred on ``j``'s pre-window first,
    so this is exactly the estimator's own residual. The pooled RMSE is
    ``sqrt(mean_j mean_l gap^2)``; ``mean_unit_rmse`` averages the per-unit RMSEs.
    """
    if mode not in PLACEBO_MODES:
        raise ValidationError(f"placebo mode must be one of {PLACEBO_MODES}")
    y = panel.outcomes
    gaps, rmse = {}, {}
    for r, j in enumerate(gamma.treated):
        end = panel.adoption[j] - 1
        start = 0 if window is None else max(0, end - window)
        block = y[:, start:end]
        if mode == "demeaned":
            block = block - block.mean(axis=1, keepdims=True)
        g = (block[j] - gamma.weights[r] @ block)[::-1]
        gaps[j] = g
        rmse[j] = float(np.sqrt(np.mean(g**2)))
    pooled = math.sqrt(float(np.mean([np.mean(g**2) for g in gaps.values()])))
    return PlaceboGaps(mode, gaps, rmse, pooled, float(np.mean(list(rmse.values()))))


def _solve(panel, rule, cfg, K):
    if rule.mode == "per_event_time":
        return {k: solve_weights(panel, rule, cfg, k=k).gamma for k in range(K + 1)}
    return solve_weights(panel, rule, cfg).gamma


def window_sensitivity(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    windows: Sequence[int] = (),
    *,
    mode: str = "demeaned",
    holdout: int = 0,
) -> dict:
    """Re-solve with each pre-window cap and report ``att_0`` and placebo RMSE.

    Rows come back ordered by window length. ``rmse`` is the in-sample
    placebo RMSE on the capped window; it tends to grow with the window
    because short windows overfit. With ``holdout > 0`` each row also carries
    ``holdout_rmse``, the out-of-sample gap RMSE from :func:`placebo_cv_score`,
    and ``monotone_decline`` (RMSE never increasing as the window lengthens)
    is judged on that column instead.
    """
    rule = rule or DonorRule()
    cfg = config or SolverConfig()
    for j in panel.treated:
        if panel.adoption[j] - 1 - holdout < 2:
            raise WindowTooShort(f"unit {panel.unit_labels[j]} has fewer than 2 pre-periods to fit")
    rows = []
    for w in sorted(set(int(x) for x in windows)):
        if w < 2:
            raise WindowTooShort(f"window {w} leaves fewer than 2 pre-periods")
        wcfg = replace(cfg, window=w)
        gamma = _solve(panel, rule, wcfg, 0)
        g0 = gamma if isinstance(gamma, WeightMatrix) else gamma[0]
        att = att_by_event_time(panel, gamma, 0, window=w)
        pg = placebo_gaps(panel, g0, mode=mode, window=w)
        row = {"window": w, "att_0": att.att_k[0], "rmse": pg.pooled_rmse}
        if holdout > 0:
            row["holdout_rmse"] = placebo_cv_score(panel, rule, wcfg, holdout)
        rows.append(row)
    metric = "holdout_rmse" if holdout > 0 else "rmse"
    rm = [r[metric] for r in rows]
    decline = all(b <= a + 1e-12 for a, b in zip(rm, rm[1:]))
    return {"mode": mode, "rows": rows, "monotone_decline": decline, "decline_metric": metric}


def donor_sensitivity(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    *,
    mode: str = "demeaned",
) -> list:
    """Leave-one-donor-out: drop each never-treated unit in turn and re-solve."""
    rule = rule or DonorRule()
    cfg = config or SolverConfig()
    rows = []
    for i in range(panel.N):
        if panel.adoption[i] is not None:
            continue
        keep = [u for u in range(panel.N) if u != i]
        sub = panel.permuted(keep)
        try:
            gamma = _solve(sub, rule, cfg, 0)
        except EmptyDonorPool:
            continue
        g0 = gamma if isinstance(gamma, WeightMatrix) else gamma[0]
        att = att_by_event_time(sub, gamma, 0)
        pg = placebo_gaps(sub, g0, mode=mode)
        rows.append({"drop": panel.unit_labels[i], "att_0": att.att_k[0], "rmse": pg.pooled_rmse})
    return rows


def placebo_cv_score(
    panel: Panel,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    holdout: int = 1,
) -> float:
    """Held-out placebo RMSE: pretend every treated unit adopted ``holdout`` periods early.

    Weights are fitted on the shortened pre-windows, then intercept-shifted
    gaps at the ``holdout`` withheld (truly untreated) periods are scored.
    """
    rule = rule or DonorRule()
    cfg = config or SolverConfig()
    if holdout < 1:
        raise ValidationError("holdout must be >= 1")
    shifted = [None if a is None else a - holdout for a in panel.adoption]
    if any(a is not None and a < 2 for a in shifted):
        raise WindowTooShort(f"holdout {holdout} leaves a treated unit without a pre-period")
    fake = Panel(panel.outcomes, shifted, panel.unit_labels, panel.period_labels)
    horizon_rule = DonorRule(rule.mode, max(rule.horizon, holdout - 1)) if rule.mode != "adoption_only" else rule
    errs = []
    if horizon_rule.mode == "per_event_time":
        gammas = {k: solve_weights(fake, horizon_rule, cfg, k=k).gamma for k in range(holdout)}
    else:
        g = solve_weights(fake, horizon_rule, cfg).gamma
        gammas = {k: g for k in range(holdout)}
    for k in range(holdout):
        for j in fake.treated:
            errs.append(unit_effect(fake, gammas[k], j, k, window=cfg.window))
    return float(np.sqrt(np.mean(np.square(errs))))


@dataclass
class DiagnosticsReport:
    m_j: dict
    flagged: list
    threshold: float
    placebo: PlaceboGaps
    placebo_raw: PlaceboGaps
    sensitivity: list = field(default_factory=list)
    donor_sensitivity: list = field(default_factory=list)
    monotone_decline: Optional[bool] = None
    decline_metric: Optional[str] = None

    def to_dict(self, panel: Panel) -> dict:
        lab = panel.unit_labels
        return {
            "m": {
                "values": {lab[j]: v for j, v in self.m_j.items()},
                "threshold": self.threshold,
                "flagged": [lab[j] for j in self.flagged],
            },
            "placebo": self.placebo.to_dict(panel),
            "placebo_other_mode": self.placebo_raw.to_dict(panel),
            "sensitivity": self.sensitivity,
            "monotone_decline": self.monotone_decline,
            "decline_metric": self.decline_metric,
            "donor_sensitivity": self.donor_sensitivity,
        }


def diagnose(
    panel: Panel,
    gamma: WeightMatrix,
    *,
    rule: Optional[DonorRule] = None,
    config: Optional[SolverConfig] = None,
    windows: Sequence[int] = (),
    leave_one_out: bool = False,
    mode: str = "demeaned",
    threshold: float = M_THRESHOLD,
    holdout: int = 0,
) -> DiagnosticsReport:
    m, flagged = effective_donor_counts(gamma, threshold)
    other = "raw" if mode == "demeaned" else "demeaned"
    rep = DiagnosticsReport(
        m_j={j: float(v) for j, v in zip(gamma.treated, m)},
        flagged=flagged,
        threshold=threshold,
        placebo=placebo_gaps(panel, gamma, mode=mode),
        placebo_raw=placebo_gaps(panel, gamma, mode=other),
    )
    if windows:
        ws = window_sensitivity(panel, rule, config, windows, mode=mode, holdout=holdout)
        rep.sensitivity = ws["rows"]
        rep.monotone_decline = ws["monotone_decline"]
        rep.decline_metric = ws["decline_metric"]
    if leave_one_out:
        rep.donor_sensitivity = donor_sensitivity(panel, rule, config, mode=mode)
    return rep
