"""Balanced staggered-adoption panels: ingestion, validation, donor pools.

Periods are 1-based throughout the public API (period ``t`` lives in column
``t - 1`` of :attr:`Panel.outcomes`); unit indices are 0-based positions.
An adoption time of ``None`` means the unit is never treated.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import (
    AdoptionOutOfRange,
    ConflictingAdoption,
    EmptyDonorPool,
    IrregularPeriods,
    MissingCell,
    NoTreatedUnits,
    ParseError,
    ValidationError,
    WindowTooShort,
)

__all__ = [
    "DONOR_MODES",
    "DonorRule",
    "Panel",
    "PanelFormat",
    "PanelSummary",
    "demeaned_series",
    "donor_pool",
    "dump_panel",
    "load_panel",
    "sample_panel",
    "summarize",
]

HEADER = ("unit", "time", "outcome", "adopt_time")
NEVER_TOKENS = ("", "never")
DONOR_MODES = ("max_horizon", "per_event_time", "adoption_only")


@dataclass(frozen=True)
class DonorRule:
    """Which units may receive weight for treated unit ``j`` at event time ``k``.

    ``max_horizon`` applies the cut ``T_i > T_j + horizon`` for every k, so one
    weight row per treated unit is valid for all ``k <= horizon``.
    ``per_event_time`` applies ``T_i > T_j + k``; ``adoption_only`` applies
    ``T_i > T_j`` regardless of k.
    """

    mode: str = "max_horizon"
    horizon: int = 0

    def __post_init__(self):
        if self.mode not in DONOR_MODES:
            raise ValidationError(f"unknown donor rule mode {self.mode!r}")
        if int(self.horizon) != self.horizon or self.horizon < 0:
            raise ValidationError(f"horizon must be a non-negative integer, got {self.horizon!r}")

    def cutoff(self, k: int) -> int:
        """Offset added to ``T_j`` that a donor's adoption time must exceed."""
        if self.mode == "max_horizon":
            return self.horizon
        if self.mode == "per_event_time":
            return k
        return 0


@dataclass(frozen=True)
class PanelFormat:
    """Delimited-text options; ``delimiter=None`` sniffs comma or tab from the header."""

    delimiter: Optional[str] = None
    encoding: str = "utf-8"


@dataclass(frozen=True, eq=False)
class Panel:
    """Immutable balanced outcome matrix plus adoption calendar.

    Parameters
    ----------
    outcomes : (N, T) float array
    adoption : length-N sequence of 1-based adoption periods, ``None`` for never
    unit_labels, period_labels : display labels
    """

    outcomes: np.ndarray
    adoption: tuple
    unit_labels: tuple = ()
    period_labels: tuple = ()
    _adopt: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise ValidationError("outcomes must be a 2-D (units x periods) matrix")
        if not np.all(np.isfinite(y)):
            raise MissingCell("outcome matrix contains missing or non-finite cells")
        n, t = y.shape
        adoption = tuple(None if a is None else int(a) for a in self.adoption)
        if len(adoption) != n:
            raise ValidationError(f"adoption has {len(adoption)} entries for {n} units")
        for i, a in enumerate(adoption):
            if a is not None and not 2 <= a <= t:
                raise AdoptionOutOfRange(
                    f"unit {i} adopts at period {a}; need 2 <= T_i <= {t} so the pre-period is non-empty"
                )
        units = tuple(str(u) for u in self.unit_labels) or tuple(str(i) for i in range(n))
        periods = tuple(str(p) for p in self.period_labels) or tuple(str(s) for s in range(1, t + 1))
        if len(units) != n or len(set(units)) != n:
            raise ValidationError("unit_labels must be N distinct labels")
        if len(periods) != t:
            raise ValidationError("period_labels must have T entries")
        y.setflags(write=False)
        adopt = np.array([math.inf if a is None else a for a in adoption], dtype=float)
        adopt.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "adoption", adoption)
        object.__setattr__(self, "unit_labels", units)
        object.__setattr__(self, "period_labels", periods)
        object.__setattr__(self, "_adopt", adopt)

    @property
    def N(self) -> int:
        return self.outcomes.shape[0]

    @property
    def T(self) -> int:
        return self.outcomes.shape[1]

    @property
    def adopt(self) -> np.ndarray:
        """Adoption periods as floats with ``inf`` for never-treated units."""
        return self._adopt

    @property
    def treated(self) -> tuple:
        """Indices of treated units in panel order."""
        return tuple(i for i, a in enumerate(self.adoption) if a is not None)

    @property
    def J(self) -> int:
        return len(self.treated)

    def pre_length(self, i: int) -> int:
        a = self.adoption[i]
        if a is None:
            raise ValidationError(f"unit {self.unit_labels[i]} is never treated; L_i is infinite")
        return a - 1

    def index_of(self, label: str) -> int:
        try:
            return self.unit_labels.index(str(label))
        except ValueError:
            raise ValidationError(f"unknown unit {label!r}") from None

    def with_outcomes(self, outcomes) -> "Panel":
        return Panel(outcomes, self.adoption, self.unit_labels, self.period_labels)

    def permuted(self, order: Sequence[int]) -> "Panel":
        order = list(order)
        return Panel(
            self.outcomes[order],
            [self.adoption[i] for i in order],
            [self.unit_labels[i] for i in order],
            self.period_labels,
        )

    def equals(self, other: "Panel") -> bool:
        return (
            np.array_equal(self.outcomes, other.outcomes)
            and self.adoption == other.adoption
            and self.unit_labels == other.unit_labels
            and self.period_labels == other.period_labels
        )


@dataclass(frozen=True)
class PanelSummary:
    J: int
    N0: int
    L_min: int
    L_max: int
    K_max: int

    def to_dict(self, panel: Optional[Panel] = None) -> dict:
        out = {"J": self.J, "N0": self.N0, "L_min": self.L_min, "L_max": self.L_max, "K_max": self.K_max}
        if panel is not None:
            out["units"] = [
                {
                    "unit": panel.unit_labels[i],
                    "adopt_time": None if a is None else panel.period_labels[a - 1],
                    "pre_length": None if a is None else a - 1,
                }
                for i, a in enumerate(panel.adoption)
            ]
        return out


# ---------------------------------------------------------------------------
# ingestion


def _parse_label(tok: str):
    tok = tok.strip()
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(tok)
    except ValueError:
        raise ParseError(f"time label {tok!r} is neither an integer nor an ISO date") from None


def _month_index(d: dt.date) -> int:
    return d.year * 12 + d.month - 1


def _grid_position(values: list) -> tuple:
    """Return ``(start, step, kind)`` of a regular grid or raise IrregularPeriods."""
    kinds = {type(v) for v in values}
    if len(kinds) != 1:
        raise ParseError("time column mixes integers and dates")
    if len(values) == 1:
        kind = "int" if isinstance(values[0], int) else "day"
        return values[0], 1, kind
    if isinstance(values[0], int):
        steps = {b - a for a, b in zip(values, values[1:])}
        if len(steps) == 1:
            return values[0], steps.pop(), "int"
        raise IrregularPeriods(f"integer periods are not equally spaced (steps {sorted(steps)})")
    steps = {(b - a).days for a, b in zip(values, values[1:])}
    if len(steps) == 1:
        return values[0], steps.pop(), "day"
    if len({v.day for v in values}) == 1:
        msteps = {_month_index(b) - _month_index(a) for a, b in zip(values, values[1:])}
        if len(msteps) == 1:
            return values[0], msteps.pop(), "month"
    raise IrregularPeriods("date periods do not have a constant step")


def _offset(value, start, kind) -> int:
    if kind == "int":
        return value - start
    if kind == "day":
        return (value - start).days
    return _month_index(value) - _month_index(start)


def _sniff_delimiter(header_line: str) -> str:
    if "\t" in header_line:
        return "\t"
    if "," in header_line:
        return ","
    raise ParseError("cannot detect delimiter: header must be comma- or tab-separated")


def load_panel(source: Union[bytes, str, IO], format: Optional[PanelFormat] = None) -> Panel:
    """Parse long-format ``unit,time,outcome,adopt_time`` text into a :class:`Panel`.

    ``source`` may be bytes, a text string, or a binary/text file object.
    Periods are sorted ascending and units kept in first-appearance order.
    """
    fmt = format or PanelFormat()
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        try:
            source = source.decode(fmt.encoding)
        except UnicodeDecodeError as exc:
            raise ParseError(f"input is not valid {fmt.encoding}: {exc}") from None
    text = source.lstrip("﻿")
    lines = text.splitlines()
    if not lines:
        raise ParseError("empty input")
    delim = fmt.delimiter or _sniff_delimiter(lines[0])
    reader = csv.reader(io.StringIO(text), delimiter=delim)
    header = tuple(h.strip() for h in next(reader))
    if header != HEADER:
        raise ParseError(f"header must be exactly {','.join(HEADER)}, got {','.join(header)}")

    units: dict = {}
    cells: dict = {}
    adopt_raw: dict = {}
    times: set = set()
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(row)}")
        unit, time_tok, y_tok, a_tok = (c.strip() for c in row)
        if not unit:
            raise ParseError(f"line {lineno}: empty unit")
        t = _parse_label(time_tok)
        try:
            y = float(y_tok)
        except ValueError:
            raise ParseError(f"line {lineno}: outcome {y_tok!r} is not a number") from None
        if not math.isfinite(y):
            raise MissingCell(f"line {lineno}: outcome is not finite")
        a = None if a_tok.lower() in NEVER_TOKENS else _parse_label(a_tok)
        units.setdefault(unit, len(units))
        if unit in adopt_raw and adopt_raw[unit] != a:
            raise ConflictingAdoption(f"unit {unit!r} has adopt_time {adopt_raw[unit]} and {a}")
        adopt_raw[unit] = a
        if (unit, t) in cells:
            raise ParseError(f"line {lineno}: duplicate row for unit {unit!r} at time {time_tok}")
        cells[(unit, t)] = y
        times.add(t)

    if not units:
        raise ParseError("no data rows")
    try:
        periods = sorted(times)
    except TypeError:
        raise ParseError("time column mixes integers and dates") from None
    start, step, kind = _grid_position(periods)
    n, T = len(units), len(periods)
    y = np.empty((n, T))
    for u, i in units.items():
        for s, t in enumerate(periods):
            try:
                y[i, s] = cells[(u, t)]
            except KeyError:
                raise MissingCell(f"unit {u!r} has no outcome at time {t}") from None

    adoption = []
    for u in units:
        a = adopt_raw[u]
        if a is None:
            adoption.append(None)
            continue
        if type(a) is not type(start):
            raise ParseError(f"unit {u!r}: adopt_time type does not match the time column")
        off = _offset(a, start, kind)
        if off % step:
            raise ParseError(f"unit {u!r}: adopt_time {a} is not on the period grid")
        idx = off // step + 1
        if not 2 <= idx <= T:
            raise AdoptionOutOfRange(f"unit {u!r} adopts at period index {idx}; need 2 <= T_i <= {T}")
        adoption.append(idx)

    labels = [p.isoformat() if isinstance(p, dt.date) else str(p) for p in periods]
    return Panel(y, adoption, list(units), labels)


def dump_panel(panel: Panel, delimiter: str = ",") -> str:
    """Inverse of :func:`load_panel`; floats are written with ``repr`` so reloads are exact."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(HEADER)
    for i, u in enumerate(panel.unit_labels):
        a = panel.adoption[i]
        a_tok = "never" if a is None else panel.period_labels[a - 1]
        for s, p in enumerate(panel.period_labels):
            w.writerow((u, p, repr(float(panel.outcomes[i, s])), a_tok))
    return buf.getvalue()


# ---------------------------------------------------------------------------
# design quantities


def _require_treated(panel: Panel) -> tuple:
    treated = panel.treated
    if not treated:
        raise NoTreatedUnits("panel has no treated units (every adopt_time is never)")
    return treated


def summarize(panel: Panel, horizon: int = 0) -> PanelSummary:
    """Design summary. L_min / L_max range over treated units only."""
    treated = _require_treated(panel)
    adopt = panel.adopt
    n0 = 0
    for j in treated:
        for k in range(horizon + 1):
            # j itself never satisfies T_j > T_j + k
            n0 = max(n0, int(np.count_nonzero(adopt > adopt[j] + k)))
    lengths = [panel.adoption[j] - 1 for j in treated]
    k_max = max(panel.T - panel.adoption[j] for j in treated)
    return PanelSummary(J=len(treated), N0=n0, L_min=min(lengths), L_max=max(lengths), K_max=k_max)


def donor_pool(panel: Panel, j: int, k: int = 0, rule: Optional[DonorRule] = None) -> tuple:
    """Ordered indices of units eligible to donate to treated unit ``j`` at event time ``k``."""
    rule = rule or DonorRule()
    if panel.adoption[j] is None:
        raise ValidationError(f"unit {panel.unit_labels[j]} is not treated")
    if k < 0:
        raise ValidationError("event time k must be >= 0")
    if rule.mode != "adoption_only" and k > rule.horizon:
        raise ValidationError(f"event time {k} exceeds the donor rule horizon {rule.horizon}")
    cut = panel.adoption[j] + rule.cutoff(k)
    pool = tuple(int(i) for i in np.flatnonzero(panel.adopt > cut) if i != j)
    if not pool:
        raise EmptyDonorPool(
            f"treated unit {panel.unit_labels[j]} has no eligible donors at k={k} under {rule.mode}"
        )
    return pool


def demeaned_series(panel: Panel, i: int, window_end: int, window_start: int = 1) -> np.ndarray:
    """Unit ``i``'s full series minus its mean over periods ``window_start..window_end-1``."""
    if window_end < 2 or window_end - window_start < 1:
        raise WindowTooShort(f"demeaning window [{window_start}, {window_end}) is empty")
    if window_end > panel.T + 1 or window_start < 1:
        raise WindowTooShort(f"demeaning window [{window_start}, {window_end}) is outside the panel")
    y = panel.outcomes[i]
    return y - y[window_start - 1 : window_end - 1].mean()


def panel_from_rows(rows: Iterable[tuple]) -> Panel:
    """Build a panel from ``(unit, time, outcome, adopt_time)`` tuples (test/CLI convenience)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(["never" if v is None else v for v in r])
    return load_panel(buf.getvalue())


def sample_panel() -> Panel:
    """Bundled noiseless two-way fixed-effects panel with a constant effect of 5.

    Three treated units adopt at periods 6, 7 and 8; five units are never treated.
    """
    from importlib.resources import files

    return load_panel(files("stagsynth").joinpath("data/sample_panel.csv").read_bytes())
