"""Pre-treatment residuals, pooled/separate imbalance and the ridge objective.

For treated unit ``j`` and lag ``l >= 1`` the residual is

    Z[j, l] = Y[j, T_j - l] - sum_i w[j, i] * Y[i, T_j - l]

and, with J treated units and L_max the longest (treated) pre-window,

    q_pool^2 = (1 / L_max) * sum_l ( (1 / J) * sum_{j : L_j >= l} Z[j, l] )^2
    q_j^2    = (1 / L_j) * sum_{l <= L_j} Z[j, l]^2
    q_sep^2  = mean_j q_j^2
    objective = nu * q_pool^2 + (1 - nu) * q_sep^2 + lam * ||W||_F^2

Residuals use raw outcomes by default. ``mode="demeaned"`` subtracts every
series' mean over ``j``'s pre-window first; ``window`` caps each pre-window
at its last ``window`` periods.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import (
    InvalidWeights,
    LagOutOfRange,
    NoTreatedUnits,
    NuOutOfRange,
    ValidationError,
    WindowTooShort,
)
from .panel import DonorRule, Panel, donor_pool

__all__ = [
    "ImbalanceReport",
    "LagDesign",
    "WeightMatrix",
    "gamma_residual",
    "imbalance_report",
    "objective",
    "objective_gradient",
    "q_pool_sq",
    "q_sep_sq",
]

ROW_SUM_TOL = 1e-10
IMBALANCE_MODES = ("raw", "demeaned")


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Donor weights, one simplex row per treated unit (rows follow ``panel.treated``).

    ``weights`` is dense ``(J, N)`` with zeros outside each row's support;
    ``supports[r]`` lists the donor indices eligible for row ``r``.
    ``event_time`` is set when the matrix was built for one k under the
    ``per_event_time`` rule.
    """

    weights: np.ndarray
    treated: tuple
    supports: tuple
    rule: DonorRule = DonorRule()
    event_time: Optional[int] = None

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "treated", tuple(int(j) for j in self.treated))
        object.__setattr__(self, "supports", tuple(tuple(int(i) for i in s) for s in self.supports))
        if w.ndim != 2 or w.shape[0] != len(self.treated) or len(self.supports) != len(self.treated):
            raise InvalidWeights("weights must have one row per treated unit")
        if not np.all(np.isfinite(w)):
            raise InvalidWeights("weights contain non-finite entries")
        if np.any(w < 0):
            raise InvalidWeights("weights must be non-negative")
        sums = w.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > ROW_SUM_TOL)
        if bad.size:
            raise InvalidWeights(f"row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
        for r, s in enumerate(self.supports):
            outside = np.ones(w.shape[1], dtype=bool)
            outside[list(s)] = False
            if np.any(w[r, outside] != 0):
                raise InvalidWeights(f"row {r} puts weight outside its donor pool")

    @property
    def J(self) -> int:
        return len(self.treated)

    def row_of(self, j: int) -> int:
        try:
            return self.treated.index(j)
        except ValueError:
            raise ValidationError(f"unit index {j} is not a treated row of this weight matrix") from None

    def row(self, j: int) -> dict:
        """Sparse view ``{donor_index: weight}`` of treated unit ``j``'s row."""
        r = self.row_of(j)
        return {i: float(self.weights[r, i]) for i in self.supports[r] if self.weights[r, i] != 0}

    def mask(self) -> np.ndarray:
        m = np.zeros(self.weights.shape, dtype=bool)
        for r, s in enumerate(self.supports):
            m[r, list(s)] = True
        return m

    def frobenius_sq(self) -> float:
        return float(np.sum(self.weights**2))

    def with_weights(self, weights: np.ndarray) -> "WeightMatrix":
        return WeightMatrix(weights, self.treated, self.supports, self.rule, self.event_time)

    @classmethod
    def supports_for(cls, panel: Panel, rule: DonorRule, k: int = 0) -> tuple:
        return tuple(donor_pool(panel, j, k, rule) for j in panel.treated)

    @classmethod
    def uniform(cls, panel: Panel, rule: Optional[DonorRule] = None, k: Optional[int] = None) -> "WeightMatrix":
        rule = rule or DonorRule()
        supports = cls.supports_for(panel, rule, k or 0)
        w = np.zeros((panel.J, panel.N))
        for r, s in enumerate(supports):
            w[r, list(s)] = 1.0 / len(s)
        return cls(w, panel.treated, supports, rule, k)

    @classmethod
    def from_rows(
        cls,
        panel: Panel,
        rows: Mapping,
        rule: Optional[DonorRule] = None,
        k: Optional[int] = None,
    ) -> "WeightMatrix":
        """Build from ``{treated_label: {donor_label: weight}}`` (labels or indices)."""
        rule = rule or DonorRule()
        supports = cls.supports_for(panel, rule, k or 0)
        w = np.zeros((panel.J, panel.N))
        seen = set()
        for tkey, row in rows.items():
            j = tkey if isinstance(tkey, (int, np.integer)) else panel.index_of(tkey)
            if j not in panel.treated:
                raise InvalidWeights(f"unit {panel.unit_labels[j]} is not treated")
            r = panel.treated.index(j)
            seen.add(r)
            for dkey, val in row.items():
                i = dkey if isinstance(dkey, (int, np.integer)) else panel.index_of(dkey)
                if val != 0 and i not in supports[r]:
                    raise InvalidWeights(
                        f"donor {panel.unit_labels[i]} is not eligible for treated unit {panel.unit_labels[j]}"
                    )
                w[r, i] = float(val)
        if len(seen) != panel.J:
            missing = [panel.unit_labels[panel.treated[r]] for r in range(panel.J) if r not in seen]
            raise InvalidWeights(f"no weight row for treated units {missing}")
        return cls(w, panel.treated, supports, rule, k)

    def to_dict(self, panel: Panel) -> dict:
        return {
            panel.unit_labels[j]: {panel.unit_labels[i]: v for i, v in self.row(j).items()}
            for j in self.treated
        }


@dataclass(frozen=True)
class ImbalanceReport:
    q_pool_sq: float
    q_sep_sq: float
    q_j_sq: tuple
    objective: float
    nu: float
    lam: float
    mode: str = "raw"

    def to_dict(self, panel: Panel, treated: Sequence[int]) -> dict:
        return {
            "q_pool_sq": self.q_pool_sq,
            "q_sep_sq": self.q_sep_sq,
            "q_j_sq": {panel.unit_labels[j]: v for j, v in zip(treated, self.q_j_sq)},
            "objective": self.objective,
            "nu": self.nu,
            "lambda": self.lam,
            "mode": self.mode,
        }


class LagDesign:
    """Event-time-aligned pre-treatment outcomes grouped by adoption cohort.

    For a cohort adopting at ``a`` with window length ``L`` the block
    ``A[l - 1, i]`` holds unit ``i``'s outcome at period ``a - l``.
    """

    def __init__(
        self,
        panel: Panel,
        *,
        mode: str = "raw",
        window: Optional[int] = None,
        renormalize: bool = False,
    ):
        if mode not in IMBALANCE_MODES:
            raise ValidationError(f"imbalance mode must be one of {IMBALANCE_MODES}")
        treated = panel.treated
        if not treated:
            raise NoTreatedUnits("panel has no treated units")
        if window is not None and window < 1:
            raise WindowTooShort("window must be at least one period")
        self.panel = panel
        self.mode = mode
        self.renormalize = renormalize
        self.J = len(treated)
        lengths = np.array([panel.adoption[j] - 1 for j in treated])
        if window is not None:
            lengths = np.minimum(lengths, window)
        self.lengths = lengths
        self.L_max = int(lengths.max())
        y = panel.outcomes
        self.cohorts = []
        for a in sorted({panel.adoption[j] for j in treated}):
            rows = np.array([r for r, j in enumerate(treated) if panel.adoption[j] == a])
            L = int(lengths[rows[0]])
            block = y[:, a - 2 - np.arange(L)].T.copy()
            if mode == "demeaned":
                block -= block.mean(axis=0)
            units = np.array([treated[r] for r in rows])
            self.cohorts.append((rows, L, block, block[:, units].T.copy()))
        counts = np.zeros(self.L_max)
        for rows, L, _, _ in self.cohorts:
            counts[:L] += len(rows)
        self.counts = counts

    def residuals(self, W: np.ndarray) -> list:
        """Per-cohort residual blocks ``(J_g, L_g)``."""
        return [yt - W[rows] @ block.T for rows, _, block, yt in self.cohorts]

    def _pool_divisor(self) -> np.ndarray:
        return self.counts if self.renormalize else np.full(self.L_max, float(self.J))

    def pooled_gap(self, Z: list) -> np.ndarray:
        p = np.zeros(self.L_max)
        for (rows, L, _, _), z in zip(self.cohorts, Z):
            p[:L] += z.sum(axis=0)
        return p / self._pool_divisor()

    def parts(self, W: np.ndarray) -> tuple:
        Z = self.residuals(W)
        p = self.pooled_gap(Z)
        qj = np.empty(self.J)
        for (rows, _, _, _), z in zip(self.cohorts, Z):
            qj[rows] = np.mean(z**2, axis=1)
        return float(np.mean(p**2)), qj, Z, p

    def objective(self, W: np.ndarray, nu: float, lam: float) -> float:
        qp, qj, _, _ = self.parts(W)
        return nu * qp + (1.0 - nu) * float(np.mean(qj)) + lam * float(np.sum(W**2))

    def value_and_grad(self, W: np.ndarray, nu: float, lam: float, mask: np.ndarray) -> tuple:
        qp, qj, Z, p = self.parts(W)
        f = nu * qp + (1.0 - nu) * float(np.mean(qj)) + lam * float(np.sum(W**2))
        G = 2.0 * lam * W
        coef = -2.0 * nu * p / (self.L_max * self._pool_divisor())
        for (rows, L, block, _), z in zip(self.cohorts, Z):
            g_pool = coef[:L] @ block
            g_sep = (-2.0 * (1.0 - nu) / (self.J * L)) * (z @ block)
            G[rows] += g_sep + g_pool
        return f, np.where(mask, G, 0.0)


def _check_nu(nu: float, allow_extreme: bool) -> None:
    lo_ok = nu >= 0 if allow_extreme else nu > 0
    hi_ok = nu <= 1 if allow_extreme else nu < 1
    if not (lo_ok and hi_ok):
        raise NuOutOfRange(f"nu={nu} must lie in (0, 1); pass allow_extreme_nu to use the endpoints")


def _check_gamma(panel: Panel, gamma: WeightMatrix) -> None:
    if gamma.treated != panel.treated or gamma.weights.shape[1] != panel.N:
        raise InvalidWeights("weight matrix does not match the panel's treated units")


def gamma_residual(panel: Panel, gamma: WeightMatrix, j: int, ell: int, *, mode: str = "raw") -> float:
    """Residual of treated unit ``j`` at lag ``ell`` (period ``T_j - ell``)."""
    _check_gamma(panel, gamma)
    r = gamma.row_of(j)
    L = panel.adoption[j] - 1
    if not 1 <= ell <= L:
        raise LagOutOfRange(f"lag {ell} outside 1..{L} for unit {panel.unit_labels[j]}")
    y = panel.outcomes
    col = panel.adoption[j] - 1 - ell
    if mode == "demeaned":
        y = y - y[:, :L].mean(axis=1, keepdims=True)
    return float(y[j, col] - gamma.weights[r] @ y[:, col])


def q_pool_sq(panel: Panel, gamma: WeightMatrix, **design) -> float:
    _check_gamma(panel, gamma)
    return LagDesign(panel, **design).parts(gamma.weights)[0]


def q_sep_sq(panel: Panel, gamma: WeightMatrix, **design) -> tuple:
    """Return ``(q_sep^2, per-unit q_j^2 array)``."""
    _check_gamma(panel, gamma)
    qj = LagDesign(panel, **design).parts(gamma.weights)[1]
    return float(np.mean(qj)), qj


def objective(
    panel: Panel,
    gamma: WeightMatrix,
    nu: float = 0.5,
    lam: float = 0.0,
    *,
    allow_extreme_nu: bool = False,
    **design,
) -> float:
    _check_nu(nu, allow_extreme_nu)
    if lam < 0:
        raise ValidationError("lambda must be >= 0")
    _check_gamma(panel, gamma)
    return LagDesign(panel, **design).objective(gamma.weights, nu, lam)


def objective_gradient(
    panel: Panel,
    gamma: WeightMatrix,
    nu: float = 0.5,
    lam: float = 0.0,
    *,
    allow_extreme_nu: bool = False,
    **design,
) -> list:
    """Gradient per treated row, restricted to (and ordered like) ``gamma.supports``."""
    _check_nu(nu, allow_extreme_nu)
    _check_gamma(panel, gamma)
    _, G = LagDesign(panel, **design).value_and_grad(gamma.weights, nu, lam, gamma.mask())
    return [G[r, list(s)] for r, s in enumerate(gamma.supports)]


def imbalance_report(
    panel: Panel,
    gamma: WeightMatrix,
    nu: float = 0.5,
    lam: float = 0.0,
    *,
    allow_extreme_nu: bool = False,
    design: Optional[LagDesign] = None,
    **design_kw,
) -> ImbalanceReport:
    _check_nu(nu, allow_extreme_nu)
    _check_gamma(panel, gamma)
    design = design or LagDesign(panel, **design_kw)
    qp, qj, _, _ = design.parts(gamma.weights)
    qs = float(np.mean(qj))
    obj = nu * qp + (1.0 - nu) * qs + lam * gamma.frobenius_sq()
    return ImbalanceReport(qp, qs, tuple(float(v) for v in qj), float(obj), nu, lam, design.mode)
