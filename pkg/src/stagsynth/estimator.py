"""Intercept-shifted unit effects and event-time ATT averages.

Every series entering ``tau_hat[j, k]`` is demeaned over treated unit ``j``'s
own pre-window (periods ``1 .. T_j - 1``, or its last ``window`` periods),
which keeps the intercept shift defined for never-treated donors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Union

import numpy as np

from .errors import DonorRuleViolation, HorizonOutOfRange, InvalidWeights, ValidationError
from .imbalance import WeightMatrix
from .panel import Panel

__all__ = [
    "AttEstimate",
    "att_by_event_time",
    "att_time_average",
    "estimate",
    "unit_effect",
]

GammaArg = Union[WeightMatrix, Mapping[int, WeightMatrix]]


@dataclass(frozen=True)
class AttEstimate:
    """Unit-level effects ``tau_hat[(j, k)]`` plus their event-time averages."""

    tau_hat: dict
    att_k: dict
    j_effective: dict
    horizon: int
    att_bar: Optional[float] = None
    include_k0: bool = False

    def to_dict(self, panel: Panel) -> dict:
        tau = {}
        for (j, k), v in sorted(self.tau_hat.items()):
            tau.setdefault(panel.unit_labels[j], {})[str(k)] = v
        return {
            "att_k": {str(k): v for k, v in sorted(self.att_k.items())},
            "att_bar": self.att_bar,
            "att_bar_includes_k0": self.include_k0,
            "j_effective": {str(k): v for k, v in sorted(self.j_effective.items())},
            "horizon": self.horizon,
            "tau_hat": tau,
        }


def _pre_window(panel: Panel, j: int, window: Optional[int]) -> slice:
    end = panel.adoption[j] - 1  # columns 0 .. T_j - 2 hold periods 1 .. T_j - 1
    start = 0 if window is None else max(0, end - window)
    return slice(start, end)


def _gamma_for(gamma: GammaArg, k: int) -> WeightMatrix:
    if isinstance(gamma, WeightMatrix):
        return gamma
    try:
        return gamma[k]
    except KeyError:
        raise ValidationError(f"no weight matrix supplied for event time {k}") from None


def _eligible(panel: Panel, gamma: WeightMatrix, j: int, k: int) -> np.ndarray:
    cut = panel.adoption[j] + (0 if gamma.rule.mode == "adoption_only" else k)
    ok = panel.adopt > cut
    ok[j] = False
    return ok


def unit_effect(panel: Panel, gamma: WeightMatrix, j: int, k: int, *, window: Optional[int] = None) -> float:
    """Intercept-shifted effect of treated unit ``j`` at event time ``k``."""
    if panel.adoption[j] is None:
        raise ValidationError(f"unit {panel.unit_labels[j]} is never treated")
    if k < 0 or panel.adoption[j] + k > panel.T:
        raise HorizonOutOfRange(
            f"unit {panel.unit_labels[j]} is not observed at event time {k} (T_j + k > T)"
        )
    if gamma.treated != panel.treated:
        raise InvalidWeights("weight matrix does not match the panel's treated units")
    w = gamma.weights[gamma.row_of(j)]
    bad = np.flatnonzero((w > 0) & ~_eligible(panel, gamma, j, k))
    if bad.size:
        raise DonorRuleViolation(
            f"unit {panel.unit_labels[j]} puts weight on {panel.unit_labels[bad[0]]}, "
            f"which is treated by T_j + {k}"
        )
    y = panel.outcomes
    pre = _pre_window(panel, j, window)
    col = panel.adoption[j] - 1 + k
    gap = y[:, col] - y[:, pre].mean(axis=1)
    return float(gap[j] - w @ gap)


def att_by_event_time(
    panel: Panel,
    gamma: GammaArg,
    K: int,
    *,
    window: Optional[int] = None,
    include_k0: bool = False,
) -> AttEstimate:
    """Effects for k = 0..K; ``gamma`` may map event time to a per-k weight matrix.

    Treated units with ``T_j + k > T`` are dropped from that k only, and the
    divisor ``J_k`` is reported in ``j_effective``.
    """
    if K < 0:
        raise ValidationError("horizon K must be >= 0")
    tau, att, jeff = {}, {}, {}
    for k in range(K + 1):
        g = _gamma_for(gamma, k)
        vals = []
        for j in panel.treated:
            if panel.adoption[j] + k > panel.T:
                continue
            v = unit_effect(panel, g, j, k, window=window)
            tau[(j, k)] = v
            vals.append(v)
        if not vals:
            raise HorizonOutOfRange(f"no treated unit is observed at event time {k}")
        att[k] = float(np.mean(vals))
        jeff[k] = len(vals)
    est = AttEstimate(tau, att, jeff, K, include_k0=include_k0)
    if K >= 1 or include_k0:
        est = AttEstimate(tau, att, jeff, K, att_time_average(est, include_k0=include_k0), include_k0)
    return est


def att_time_average(att: AttEstimate, *, include_k0: bool = False) -> float:
    """Mean of ``att_k`` over k = 1..K (k = 0 only when ``include_k0``)."""
    ks = range(0 if include_k0 else 1, att.horizon + 1)
    if not ks:
        raise ValidationError("time-averaged ATT needs K >= 1")
    return float(np.mean([att.att_k[k] for k in ks]))


def estimate(panel: Panel, gamma: GammaArg, K: int = 0, **kw) -> AttEstimate:
    return att_by_event_time(panel, gamma, K, **kw)
