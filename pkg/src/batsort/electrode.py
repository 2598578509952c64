"""Electrode-resolved open-circuit voltage model.

Each electrode half-cell is described by a five-term sum of thermal
sigmoids: the lithiation fraction at potential E (volts vs. Li/Li+) is

    x(E) = sum_i  dx_i / (1 + exp((E - e0_i) * zeta_i * e / (k_B * T)))

with dx_i the capacity share of reaction i, e0_i its standard potential
and zeta_i a dimensionless sharpness.  With every zeta_i > 0 the sum is
strictly decreasing in E, so it can be inverted numerically.

A full cell is three numbers on top of the two half-cell curves, the
electrode aging parameters (EAPs, all in mAh):

    q_pe      capacity of the positive electrode
    q_ne      capacity of the negative electrode
    q_offset  shift of the negative curve along the cell charge axis

The cell charge coordinate q starts at the lithiated end of the positive
electrode, so the half-cell stoichiometries at cell charge q are

    x_pe = 1 - q / q_pe          x_ne = (q - q_offset) / q_ne

and the terminal open-circuit voltage is f_pe(x_pe) - f_ne(x_ne), where
f is the inverse of x(E) for the respective electrode.

Degradation bookkeeping uses five non-negative increments: loss of
lithium inventory (lli) and loss of active material in the lithiated or
delithiated state of either electrode (lam_li_pe, lam_de_pe, lam_li_ne,
lam_de_ne).  The coordinate origin is re-anchored to the positive curve's
left start after every step, which yields the linear update implemented
in :func:`degrade`.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .errors import NumericalFailure, SchemaError

BOLTZMANN_J_PER_K = 1.380649e-23
ELEMENTARY_CHARGE_C = 1.602176634e-19
REFERENCE_TEMPERATURE_K = 313.15  # 40 degC, the temperature the curves were fit at

# Stoichiometry is only inverted strictly inside the model span; the margin
# keeps the logistic tails (and their infinite potentials) out of reach.
SOC_MARGIN = 1e-6

# Potential tolerance of the scalar inversion and charge tolerance of the
# window root finder.
POTENTIAL_TOL_V = 1e-9
CHARGE_TOL_MAH = 1e-6

NOMINAL_CAPACITY_MAH = 740.0


class ElectrodeDomainError(NumericalFailure):
    """A requested stoichiometry or cell charge leaves an electrode's span."""


class InfeasibleWindowError(NumericalFailure):
    """The cell cannot reach the requested voltage cutoffs."""


class DegradationOverflowError(NumericalFailure):
    """A degradation step would drive an aging parameter out of range."""


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ElectrodeOcvModel:
    """Five-term sigmoid half-cell model at a fixed temperature."""

    dx: tuple[float, ...]
    e0: tuple[float, ...]
    zeta: tuple[float, ...]
    temperature_K: float = REFERENCE_TEMPERATURE_K

    def __post_init__(self) -> None:
        if not (len(self.dx) == len(self.e0) == len(self.zeta) == 5):
            raise ValueError("electrode model needs exactly 5 terms")
        span = sum(self.dx)
        if not (0.0 < span <= 1.0001):
            raise ValueError(f"sum of dx must lie in (0, 1.0001], got {span!r}")
        if any(d <= 0.0 for d in self.dx):
            raise ValueError("every dx must be positive")
        if any(z <= 0.0 for z in self.zeta):
            raise ValueError("every zeta must be positive")
        if self.temperature_K <= 0.0:
            raise ValueError("temperature must be positive")

    @property
    def thermal_slope(self) -> float:
        """e / (k_B * T), the exponent scale in 1/V."""
        return ELEMENTARY_CHARGE_C / (BOLTZMANN_J_PER_K * self.temperature_K)

    @property
    def soc_span(self) -> float:
        return float(sum(self.dx))

    @functools.cached_property
    def potential_limits(self) -> tuple[float, float]:
        """Potentials bounding the invertible stoichiometry range.

        Returns (E at x = span - SOC_MARGIN, E at x = SOC_MARGIN); the first
        is the lower potential because x falls with E.
        """
        lo = min(self.e0) - 2.0
        hi = max(self.e0) + 2.0
        e_low = _bisect_soc(self, self.soc_span - SOC_MARGIN, lo, hi)
        e_high = _bisect_soc(self, SOC_MARGIN, lo, hi)
        return (e_low, e_high)


def make_electrode_model(
    terms: "list[tuple[float, float, float]]",
    temperature_K: float = REFERENCE_TEMPERATURE_K,
) -> ElectrodeOcvModel:
    """Build a model from (dx, e0, zeta) triples."""
    dx, e0, zeta = zip(*terms)
    return ElectrodeOcvModel(tuple(dx), tuple(e0), tuple(zeta), temperature_K)


@dataclass(frozen=True)
class Eaps:
    """Electrode aging parameters of one cell, in mAh."""

    q_pe: float
    q_ne: float
    q_offset: float

    def __post_init__(self) -> None:
        if not (self.q_pe > 0.0 and self.q_ne > 0.0):
            raise ValueError("electrode capacities must be positive")
        if not (0.0 <= self.q_offset < self.q_pe):
            raise ValueError("q_offset must satisfy 0 <= q_offset < q_pe")

    def as_array(self) -> np.ndarray:
        return np.array([self.q_pe, self.q_ne, self.q_offset])


@dataclass(frozen=True)
class DegradationDelta:
    """Non-negative degradation increments, in mAh."""

    lli: float = 0.0
    lam_li_pe: float = 0.0
    lam_de_pe: float = 0.0
    lam_li_ne: float = 0.0
    lam_de_ne: float = 0.0

    def __post_init__(self) -> None:
        for name in ("lli", "lam_li_pe", "lam_de_pe", "lam_li_ne", "lam_de_ne"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")

    def __add__(self, other: "DegradationDelta") -> "DegradationDelta":
        return DegradationDelta(
            self.lli + other.lli,
            self.lam_li_pe + other.lam_li_pe,
            self.lam_de_pe + other.lam_de_pe,
            self.lam_li_ne + other.lam_li_ne,
            self.lam_de_ne + other.lam_de_ne,
        )

    def scaled(self, factor: float) -> "DegradationDelta":
        if factor < 0.0:
            raise ValueError("scale factor must be non-negative")
        return DegradationDelta(
            self.lli * factor,
            self.lam_li_pe * factor,
            self.lam_de_pe * factor,
            self.lam_li_ne * factor,
            self.lam_de_ne * factor,
        )


@dataclass(frozen=True)
class UsableWindow:
    """Charge coordinates where the cell meets its voltage cutoffs."""

    q_start: float
    q_end: float
    capacity: float

    def __post_init__(self) -> None:
        if self.q_end < self.q_start:
            raise ValueError("window end precedes its start")


# ---------------------------------------------------------------------------
# half-cell evaluation
# ---------------------------------------------------------------------------


def soc_from_potential(model: ElectrodeOcvModel, potential_V):
    """Lithiation fraction at the given potential(s), term-by-term sum.

    Accepts a float or ndarray and returns the matching kind.
    """
    e = np.asarray(potential_V, dtype=float)
    beta = model.thermal_slope
    x = np.zeros_like(e)
    for dx, e0, zeta in zip(model.dx, model.e0, model.zeta):
        arg = np.clip((e - e0) * (zeta * beta), -700.0, 700.0)
        x += dx / (1.0 + np.exp(arg))
    if np.ndim(potential_V) == 0:
        return float(x)
    return x


def _soc_scalar(model: ElectrodeOcvModel, potential_V: float) -> float:
    """Plain-float version of soc_from_potential for tight loops."""
    beta = model.thermal_slope
    x = 0.0
    for dx, e0, zeta in zip(model.dx, model.e0, model.zeta):
        arg = (potential_V - e0) * (zeta * beta)
        if arg > 700.0:
            arg = 700.0
        elif arg < -700.0:
            arg = -700.0
        x += dx / (1.0 + math.exp(arg))
    return x


def _dsoc_dpotential(model: ElectrodeOcvModel, e: np.ndarray) -> np.ndarray:
    """d x / d E, always negative inside the span."""
    beta = model.thermal_slope
    out = np.zeros_like(e)
    for dx, e0, zeta in zip(model.dx, model.e0, model.zeta):
        arg = np.clip((e - e0) * (zeta * beta), -700.0, 700.0)
        s = 1.0 / (1.0 + np.exp(arg))
        out -= dx * zeta * beta * s * (1.0 - s)
    return out


def _bisect_soc(model: ElectrodeOcvModel, x_target: float, e_lo: float, e_hi: float) -> float:
    """Solve x(E) = x_target on [e_lo, e_hi] to POTENTIAL_TOL_V."""
    # x is decreasing: x(e_lo) > x_target > x(e_hi) must hold
    lo, hi = e_lo, e_hi
    while hi - lo > POTENTIAL_TOL_V:
        mid = 0.5 * (lo + hi)
        if _soc_scalar(model, mid) > x_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def potential_from_soc(model: ElectrodeOcvModel, soc: float) -> float:
    """Invert the half-cell curve by bisection.

    The stoichiometry must lie in [SOC_MARGIN, span - SOC_MARGIN]; the
    logistic tails outside that band have no usable inverse.
    """
    span = model.soc_span
    if not (SOC_MARGIN <= soc <= span - SOC_MARGIN):
        raise ElectrodeDomainError(
            f"stoichiometry {soc!r} outside invertible range "
            f"[{SOC_MARGIN}, {span - SOC_MARGIN}]"
        )
    e_low, e_high = model.potential_limits
    return _bisect_soc(model, soc, e_low - POTENTIAL_TOL_V, e_high + POTENTIAL_TOL_V)


# ---------------------------------------------------------------------------
# full-cell evaluation
# ---------------------------------------------------------------------------


# Shrinks interval endpoints so that re-deriving a stoichiometry from a
# boundary charge cannot round back out of the invertible range.
_DOMAIN_GUARD_MAH = 1e-9


def _charge_domain(
    eaps: Eaps, pe: ElectrodeOcvModel, ne: ElectrodeOcvModel
) -> tuple[float, float]:
    """Cell charge interval on which both electrodes stay invertible."""
    pe_lo = eaps.q_pe * (1.0 - (pe.soc_span - SOC_MARGIN))
    pe_hi = eaps.q_pe * (1.0 - SOC_MARGIN)
    ne_lo = eaps.q_offset + eaps.q_ne * SOC_MARGIN
    ne_hi = eaps.q_offset + eaps.q_ne * (ne.soc_span - SOC_MARGIN)
    lo = max(pe_lo, ne_lo)
    hi = min(pe_hi, ne_hi)
    guard_lo = _DOMAIN_GUARD_MAH * (1.0 + abs(lo))
    guard_hi = _DOMAIN_GUARD_MAH * (1.0 + abs(hi))
    return (lo + guard_lo, hi - guard_hi)


def cell_ocv_at(
    eaps: Eaps, pe: ElectrodeOcvModel, ne: ElectrodeOcvModel, q_mAh: float
) -> float:
    """Terminal open-circuit voltage at cell charge q_mAh."""
    x_pe = 1.0 - q_mAh / eaps.q_pe
    x_ne = (q_mAh - eaps.q_offset) / eaps.q_ne
    pe_span = pe.soc_span
    ne_span = ne.soc_span
    if not (SOC_MARGIN <= x_pe <= pe_span - SOC_MARGIN):
        side = "delithiated" if x_pe < SOC_MARGIN else "lithiated"
        raise ElectrodeDomainError(
            f"positive electrode exhausted ({side}) at q = {q_mAh!r} mAh"
        )
    if not (SOC_MARGIN <= x_ne <= ne_span - SOC_MARGIN):
        side = "delithiated" if x_ne < SOC_MARGIN else "lithiated"
        raise ElectrodeDomainError(
            f"negative electrode exhausted ({side}) at q = {q_mAh!r} mAh"
        )
    return potential_from_soc(pe, x_pe) - potential_from_soc(ne, x_ne)


def _bisect_cell_charge(
    eaps: Eaps,
    pe: ElectrodeOcvModel,
    ne: ElectrodeOcvModel,
    v_target: float,
    q_lo: float,
    q_hi: float,
) -> float:
    """Solve ocv(q) = v_target on [q_lo, q_hi] to CHARGE_TOL_MAH."""
    lo, hi = q_lo, q_hi
    while hi - lo > CHARGE_TOL_MAH:
        mid = 0.5 * (lo + hi)
        if cell_ocv_at(eaps, pe, ne, mid) < v_target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def usable_window(
    eaps: Eaps,
    pe: ElectrodeOcvModel,
    ne: ElectrodeOcvModel,
    v_lo: float = 2.7,
    v_hi: float = 4.2,
) -> UsableWindow:
    """Charge window between the two voltage cutoffs.

    Raises InfeasibleWindowError when either cutoff is not attained inside
    the jointly invertible charge interval.
    """
    if not v_lo < v_hi:
        raise ValueError("v_lo must be below v_hi")
    q_min, q_max = _charge_domain(eaps, pe, ne)
    if q_min >= q_max:
        raise InfeasibleWindowError(
            "electrode curves do not overlap for these aging parameters"
        )
    v_floor = cell_ocv_at(eaps, pe, ne, q_min)
    v_ceil = cell_ocv_at(eaps, pe, ne, q_max)
    if v_floor > v_lo or v_ceil < v_hi:
        raise InfeasibleWindowError(
            f"cutoffs [{v_lo}, {v_hi}] V outside attainable range "
            f"[{v_floor:.4f}, {v_ceil:.4f}] V"
        )
    q_start = _bisect_cell_charge(eaps, pe, ne, v_lo, q_min, q_max)
    q_end = _bisect_cell_charge(eaps, pe, ne, v_hi, q_start, q_max)
    return UsableWindow(q_start, q_end, q_end - q_start)


def degrade(eaps: Eaps, delta: DegradationDelta) -> Eaps:
    """Apply one degradation step to the aging parameters.

    The update is linear because the origin is re-anchored to the positive
    curve's left start afterwards:

        q_pe'     = q_pe - lam_li_pe - lam_de_pe
        q_ne'     = q_ne - lam_de_ne - lam_li_ne
        q_offset' = q_offset + lli - lam_de_pe + lam_li_ne
    """
    q_pe = eaps.q_pe - delta.lam_li_pe - delta.lam_de_pe
    q_ne = eaps.q_ne - delta.lam_de_ne - delta.lam_li_ne
    q_offset = eaps.q_offset + delta.lli - delta.lam_de_pe + delta.lam_li_ne
    if q_pe <= 0.0 or q_ne <= 0.0:
        raise DegradationOverflowError("degradation consumed an electrode entirely")
    if q_offset < 0.0 or q_offset >= q_pe:
        raise DegradationOverflowError(
            f"q_offset {q_offset!r} left the valid range [0, q_pe) after the step"
        )
    return Eaps(q_pe, q_ne, q_offset)


# ---------------------------------------------------------------------------
# batched evaluation
# ---------------------------------------------------------------------------


class _InverseTable:
    """Dense inverse of one half-cell curve for array-shaped queries.

    Potentials are tabulated on a uniform grid (grid_step_V apart) across
    the invertible span; a query interpolates between bracketing nodes and
    polishes with two bracket-clipped Newton steps.  Guaranteed error is
    below grid_step_V, typical error is at rounding level.
    """

    def __init__(self, model: ElectrodeOcvModel, grid_step_V: float = 1e-5):
        self.model = model
        e_low, e_high = model.potential_limits
        n = int(math.ceil((e_high - e_low) / grid_step_V)) + 1
        e_grid = np.linspace(e_low, e_high, n)
        x_grid = soc_from_potential(model, e_grid)
        # x falls with E; flip so np.interp sees ascending abscissae
        self.xs = x_grid[::-1].copy()
        self.es = e_grid[::-1].copy()
        self.x_min = float(self.xs[0])
        self.x_max = float(self.xs[-1])
        self._uniform_es: np.ndarray | None = None
        self._uniform_step = 0.0
        self._steep_cell: np.ndarray | None = None

    def invert(self, soc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Potentials for an array of stoichiometries plus a validity mask."""
        x = np.asarray(soc, dtype=float)
        ok = (x >= self.x_min) & (x <= self.x_max)
        xq = np.clip(x, self.x_min, self.x_max)
        e = np.interp(xq, self.xs, self.es)
        idx = np.clip(np.searchsorted(self.xs, xq), 1, len(self.xs) - 1)
        # es is descending, so the bracket endpoints swap order
        e_lo = self.es[idx]
        e_hi = self.es[idx - 1]
        for _ in range(2):
            resid = soc_from_potential(self.model, e) - xq
            slope = _dsoc_dpotential(self.model, e)
            step = resid / np.where(np.abs(slope) > 1e-300, slope, -1e-300)
            e = np.clip(e - step, np.minimum(e_lo, e_hi), np.maximum(e_lo, e_hi))
        return e, ok

    def fast_invert(self, soc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Near-grid-accuracy inversion tuned for bulk search sweeps.

        Most queries hit a uniform stoichiometry resample (constant-time
        per element, no binary search, no sigmoid calls).  Staging risers
        are nearly vertical in stoichiometry, so resample cells spanning
        more than 50 uV fall back to the exact table; that keeps the error
        everywhere at the few-1e-5 V level while the bulk of a sweep pays
        only the cheap path.
        """
        if self._uniform_es is None:
            n = 1 << 20
            self._uniform_step = (self.x_max - self.x_min) / n
            xs_u = self.x_min + self._uniform_step * np.arange(n + 1)
            self._uniform_es = np.interp(xs_u, self.xs, self.es)
            self._steep_cell = np.abs(np.diff(self._uniform_es)) > 5e-5
        x = np.asarray(soc, dtype=float)
        ok = (x >= self.x_min) & (x <= self.x_max)
        xq = np.clip(x, self.x_min, self.x_max)
        pos = (xq - self.x_min) / self._uniform_step
        idx = np.minimum(pos.astype(np.int64), len(self._uniform_es) - 2)
        frac = pos - idx
        e = self._uniform_es[idx] * (1.0 - frac) + self._uniform_es[idx + 1] * frac
        steep = self._steep_cell[idx]
        if np.any(steep):
            e[steep] = np.interp(xq[steep], self.xs, self.es)
        return e, ok


class CellCurveEvaluator:
    """Vectorised full-cell voltage evaluation for one electrode pair.

    Builds one inverse table per electrode up front and then answers
    voltage, anchor and window queries on whole arrays of candidate aging
    parameters.  Agreement with the scalar routines is bounded by the
    table guarantee (1e-5 V) and is typically far tighter.
    """

    def __init__(
        self,
        pe: ElectrodeOcvModel,
        ne: ElectrodeOcvModel,
        grid_step_V: float = 1e-5,
    ):
        self.pe = pe
        self.ne = ne
        self._pe_table = _InverseTable(pe, grid_step_V)
        self._ne_table = _InverseTable(ne, grid_step_V)

    def voltage(self, q, q_pe, q_ne, q_offset) -> tuple[np.ndarray, np.ndarray]:
        """Cell OCV for broadcastable arrays of charge and aging parameters.

        Returns (voltage, ok) where ok flags queries with both electrodes
        inside their invertible spans; voltage is clamped-garbage where ok
        is False and must not be used there.
        """
        q = np.asarray(q, dtype=float)
        x_pe = 1.0 - q / np.asarray(q_pe, dtype=float)
        x_ne = (q - np.asarray(q_offset, dtype=float)) / np.asarray(q_ne, dtype=float)
        e_pe, ok_pe = self._pe_table.invert(x_pe)
        e_ne, ok_ne = self._ne_table.invert(x_ne)
        return e_pe - e_ne, ok_pe & ok_ne

    def voltage_fast(self, q, q_pe, q_ne, q_offset) -> tuple[np.ndarray, np.ndarray]:
        """voltage() on the uniform resample: search-grade accuracy, bulk speed."""
        q = np.asarray(q, dtype=float)
        x_pe = 1.0 - q / np.asarray(q_pe, dtype=float)
        x_ne = (q - np.asarray(q_offset, dtype=float)) / np.asarray(q_ne, dtype=float)
        e_pe, ok_pe = self._pe_table.fast_invert(x_pe)
        e_ne, ok_ne = self._ne_table.fast_invert(x_ne)
        return e_pe - e_ne, ok_pe & ok_ne

    def charge_domain(self, q_pe, q_ne, q_offset) -> tuple[np.ndarray, np.ndarray]:
        """Jointly invertible charge interval per candidate (lo, hi)."""
        q_pe = np.asarray(q_pe, dtype=float)
        q_ne = np.asarray(q_ne, dtype=float)
        q_offset = np.asarray(q_offset, dtype=float)
        lo = np.maximum(
            q_pe * (1.0 - self._pe_table.x_max),
            q_offset + q_ne * self._ne_table.x_min,
        )
        hi = np.minimum(
            q_pe * (1.0 - self._pe_table.x_min),
            q_offset + q_ne * self._ne_table.x_max,
        )
        lo = lo + _DOMAIN_GUARD_MAH * (1.0 + np.abs(lo))
        hi = hi - _DOMAIN_GUARD_MAH * (1.0 + np.abs(hi))
        return lo, hi

    def charge_at_voltage(
        self, v_target: float, q_pe, q_ne, q_offset, iterations: int = 53
    ) -> tuple[np.ndarray, np.ndarray]:
        """Solve ocv(q) = v_target per candidate by vectorised bisection.

        Returns (q, ok); ok is False where the target voltage is not
        bracketed by the candidate's attainable range.
        """
        lo, hi = self.charge_domain(q_pe, q_ne, q_offset)
        ok = lo < hi
        safe_lo = np.where(ok, lo, 0.0)
        safe_hi = np.where(ok, hi, 1.0)
        v_lo, ok_lo = self.voltage(safe_lo, q_pe, q_ne, q_offset)
        v_hi, ok_hi = self.voltage(safe_hi, q_pe, q_ne, q_offset)
        ok = ok & ok_lo & ok_hi & (v_lo <= v_target) & (v_hi >= v_target)
        a, b = safe_lo, safe_hi
        for _ in range(iterations):
            mid = 0.5 * (a + b)
            v_mid, _ = self.voltage(mid, q_pe, q_ne, q_offset)
            below = v_mid < v_target
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
        return 0.5 * (a + b), ok

    def curve(self, eaps: Eaps, q_grid: np.ndarray) -> np.ndarray:
        """Voltages along a charge grid for one cell; grid must stay in domain."""
        v, ok = self.voltage(q_grid, eaps.q_pe, eaps.q_ne, eaps.q_offset)
        if not np.all(ok):
            bad = q_grid[~ok]
            raise ElectrodeDomainError(
                f"charge grid leaves the valid domain, first offender {bad.flat[0]!r} mAh"
            )
        return v


@functools.lru_cache(maxsize=8)
def get_evaluator(pe: ElectrodeOcvModel, ne: ElectrodeOcvModel) -> CellCurveEvaluator:
    """Cached evaluator for an electrode pair (tables are costly to build)."""
    return CellCurveEvaluator(pe, ne)


# ---------------------------------------------------------------------------
# parameter-table files
# ---------------------------------------------------------------------------


def save_electrode_model(path, model: ElectrodeOcvModel) -> None:
    """Write a parameter table: one key-value line per entry.

    Layout: a 'temperature_K <value>' line followed by five lines
    'term <dx> <e0> <zeta>', '#' starts a comment.  Values carry nine
    significant digits.
    """
    lines = [f"temperature_K {model.temperature_K:.9g}"]
    for dx, e0, zeta in zip(model.dx, model.e0, model.zeta):
        lines.append(f"term {dx:.9g} {e0:.9g} {zeta:.9g}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_electrode_model(path_or_file) -> ElectrodeOcvModel:
    """Read a parameter table written by :func:`save_electrode_model`."""
    if hasattr(path_or_file, "read"):
        text = path_or_file.read()
    else:
        with open(path_or_file, "r", encoding="utf-8") as fh:
            text = fh.read()
    temperature = None
    terms: list[tuple[float, float, float]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        key = fields[0]
        try:
            if key == "temperature_K":
                if len(fields) != 2:
                    raise ValueError
                temperature = float(fields[1])
            elif key == "term":
                if len(fields) != 4:
                    raise ValueError
                terms.append((float(fields[1]), float(fields[2]), float(fields[3])))
            else:
                raise ValueError
        except ValueError:
            raise SchemaError(f"line {lineno}: cannot parse {raw!r}") from None
    if temperature is None:
        raise SchemaError("missing temperature_K line")
    if len(terms) != 5:
        raise SchemaError(f"expected 5 term lines, found {len(terms)}")
    try:
        return make_electrode_model(terms, temperature)
    except ValueError as exc:
        raise SchemaError(str(exc)) from None


def _load_packaged(name: str) -> ElectrodeOcvModel:
    ref = resources.files("batsort").joinpath("data", name)
    with ref.open("r", encoding="utf-8") as fh:
        return load_electrode_model(fh)


@functools.lru_cache(maxsize=None)
def reference_pe_model() -> ElectrodeOcvModel:
    """Packaged positive-electrode parameter set (layered-oxide-like)."""
    return _load_packaged("pe_reference.txt")


@functools.lru_cache(maxsize=None)
def reference_ne_model() -> ElectrodeOcvModel:
    """Packaged negative-electrode parameter set (graphite-like staging)."""
    return _load_packaged("ne_reference.txt")


def fresh_cell_eaps() -> Eaps:
    """Aging parameters of the calibrated fresh reference cell.

    Chosen so that the usable window between 2.7 V and 4.2 V holds
    NOMINAL_CAPACITY_MAH within a fraction of a mAh.
    """
    return Eaps(q_pe=FRESH_Q_PE_MAH, q_ne=FRESH_Q_NE_MAH, q_offset=FRESH_Q_OFFSET_MAH)


# Frozen by the calibration run in tools/calibrate_reference.py; the window
# capacity check lives in the test suite.
FRESH_Q_PE_MAH = 838.313
FRESH_Q_NE_MAH = 890.708
FRESH_Q_OFFSET_MAH = 30.3889
