"""Finite-sample error certificate for the event-time ATT under fixed weights.

With probability at least ``1 - 2 / J**2``,

    |ATT_hat_k - ATT_k| <= q_pool + q_sep / sqrt(L_min)
                           + kappa * sqrt(8 * (1 + c) * log(J) / (c * J))

for any weight matrix whose rows satisfy ``sum_i w_ij^2 <= c < 1``. Logarithms
are natural. The bound is only as trustworthy as the ``kappa`` fed to it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DispersionViolation, InvalidScale, ValidationError, WindowTooShort
from .imbalance import WeightMatrix
from .panel import Panel

__all__ = [
    "KAPPA_NOTE",
    "BoundCertificate",
    "certify",
    "dispersion",
    "estimate_kappa",
    "noise_constant",
    "theorem1_bound",
]

C_THRESHOLD = 0.99
KAPPA_NOTE = "certificate validity depends on kappa; a heuristic kappa makes it a plug-in value, not a guarantee"


@dataclass(frozen=True)
class BoundCertificate:
    pooled_term: float
    separate_term: float
    noise_term: float
    total: float
    failure_prob: float
    c_used: float
    kappa_used: float
    dispersion_ok: bool
    kappa_source: str = "user"
    plug_in: bool = True

    def to_dict(self) -> dict:
        out = asdict(self)
        out["note"] = KAPPA_NOTE
        return out


def dispersion(gamma: WeightMatrix) -> tuple:
    """Per-row ``sum_i w_ij^2`` and their maximum."""
    per = np.sum(gamma.weights**2, axis=1)
    return per, float(per.max())


def noise_constant(c: float, kappa: float) -> float:
    """``sqrt(8 / c) * kappa * sqrt(1 + c)``, the multiplier of ``sqrt(log J / J)``."""
    return math.sqrt(8.0 / c) * kappa * math.sqrt(1.0 + c)


def theorem1_bound(
    q_pool: float,
    q_sep: float,
    L_min: int,
    J: int,
    c: float,
    kappa: float,
    *,
    max_dispersion: Optional[float] = None,
    c_threshold: float = C_THRESHOLD,
    strict: bool = True,
    kappa_source: str = "user",
) -> BoundCertificate:
    """Evaluate the three-term bound.

    ``q_pool`` and ``q_sep`` are the (square-root) imbalance functionals.
    ``max_dispersion`` is the largest row ``sum w^2`` of the weights being
    certified; when given it must not exceed ``c``. In lenient mode
    (``strict=False``) a dispersion problem only warns and flags
    ``dispersion_ok=False``.
    """
    if not kappa > 0:
        raise InvalidScale(f"kappa must be > 0, got {kappa}")
    if J < 2:
        raise ValidationError("the bound needs J >= 2 (log J > 0)")
    if L_min < 1:
        raise ValidationError("L_min must be >= 1")
    if q_pool < 0 or q_sep < 0:
        raise ValidationError("imbalance terms must be non-negative")
    if not 0 < c < 1:
        raise DispersionViolation(f"c={c} must lie in (0, 1)")
    problems = []
    if c >= c_threshold:
        problems.append(f"c={c} is at or above the threshold {c_threshold}")
    if max_dispersion is not None and max_dispersion > c:
        problems.append(f"max row sum of squared weights {max_dispersion} exceeds c={c}")
    if problems and strict:
        raise DispersionViolation("; ".join(problems))
    for p in problems:
        warnings.warn(p, stacklevel=2)

    separate = q_sep / math.sqrt(L_min)
    noise = math.sqrt(8.0 * (1.0 + c) * math.log(J) / (c * J)) * kappa
    total = q_pool + separate + noise
    return BoundCertificate(
        pooled_term=float(q_pool),
        separate_term=float(separate),
        noise_term=float(noise),
        total=float(total),
        failure_prob=2.0 / J**2,
        c_used=float(c),
        kappa_used=float(kappa),
        dispersion_ok=not problems,
        kappa_source=kappa_source,
    )


def estimate_kappa(panel: Panel, gamma: WeightMatrix, *, window: Optional[int] = None) -> float:
    """HEURISTIC shock scale from pre-treatment placebo gaps.

    For each treated unit the demeaned gap between it and its weighted donors
    over the pre-window has variance about ``kappa^2 * (1 + sum_i w_ij^2)``
    under independent shocks; the estimate is the largest per-unit
    ``sd(gap) / sqrt(1 + sum w^2)``.
    """
    y = panel.outcomes
    best = 0.0
    per, _ = dispersion(gamma)
    for r, j in enumerate(gamma.treated):
        end = panel.adoption[j] - 1
        start = 0 if window is None else max(0, end - window)
        if end - start < 4:
            raise WindowTooShort(f"unit {panel.unit_labels[j]} has fewer than 4 pre-periods")
        block = y[:, start:end]
        gap = block[j] - gamma.weights[r] @ block
        gap = gap - gap.mean()
        sd = float(np.sqrt(np.sum(gap**2) / (gap.size - 1)))
        best = max(best, sd / math.sqrt(1.0 + per[r]))
    return best


def certify(
    panel: Panel,
    gamma: WeightMatrix,
    *,
    kappa: Optional[float] = None,
    c: Optional[float] = None,
    strict: bool = True,
    q_pool: Optional[float] = None,
    q_sep: Optional[float] = None,
    c_threshold: float = C_THRESHOLD,
    window: Optional[int] = None,
) -> BoundCertificate:
    """Certificate for ``gamma`` on ``panel`` using plug-in (empirical) imbalance.

    ``kappa=None`` uses :func:`estimate_kappa`; ``c=None`` uses the tightest
    valid choice, the maximum row dispersion of ``gamma``.
    """
    from .imbalance import LagDesign
    from .panel import summarize

    design = LagDesign(panel, window=window)
    qp, qj, _, _ = design.parts(gamma.weights)
    q_pool = math.sqrt(qp) if q_pool is None else q_pool
    q_sep = math.sqrt(float(np.mean(qj))) if q_sep is None else q_sep
    _, cmax = dispersion(gamma)
    c_used = cmax if c is None else c
    source = "user"
    if kappa is None:
        kappa = estimate_kappa(panel, gamma, window=window)
        source = "heuristic"
        if kappa <= 1e-12 * max(1.0, float(np.abs(panel.outcomes).max())):
            raise InvalidScale("heuristic kappa is 0 (noiseless pre-period); supply kappa explicitly")
    L_min = int(design.lengths.min()) if window is not None else summarize(panel).L_min
    if c_used >= 1 and not strict:
        # the bound is undefined at c >= 1; report it with the invalid flag set
        warnings.warn(f"c={c_used} >= 1: certificate is not valid", stacklevel=2)
        c_eval = min(c_used, 1 - 1e-12)
        cert = theorem1_bound(q_pool, q_sep, L_min, panel.J, c_eval, kappa, strict=False,
                              c_threshold=c_threshold, kappa_source=source)
        return BoundCertificate(**{**asdict(cert), "c_used": float(c_used), "dispersion_ok": False})
    return theorem1_bound(
        q_pool, q_sep, L_min, panel.J, c_used, kappa,
        max_dispersion=cmax, c_threshold=c_threshold, strict=strict, kappa_source=source,
    )
