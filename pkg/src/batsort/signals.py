"""Charge-curve signal processing.

Everything downstream works on two curve families: measured constant
current records (time, current, voltage) and charge-voltage curves.  This
module turns records into curves by coulomb counting, averages slow charge
and discharge branches into a pseudo-OCV curve, differentiates curves into
incremental capacity on a uniform 1 mV grid, and reads off the fixed-grid
feature points used as regression targets.

Charge is in mAh throughout, voltage in V, current in mA, time in s.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure

# The fixed feature grid: 2.8 V to 4.2 V in 0.1 V steps, 15 points.
FEATURE_VOLTAGES = np.arange(28, 43) / 10.0

IC_GRID_STEP_V = 0.001


class NonMonotoneCurveError(NumericalFailure):
    """Voltage failed to increase strictly where differentiation needs it."""


class CurveCoverageError(NumericalFailure):
    """A curve does not span the voltages a feature needs."""


class PeakSearchError(NumericalFailure):
    """Too few local extrema to form the requested peak features."""


# ---------------------------------------------------------------------------
# curve containers
# ---------------------------------------------------------------------------


@dataclass
class ChargingRecord:
    """One constant-current branch as logged: time, current, terminal voltage.

    Charge branches carry positive current, discharge branches negative.
    """

    time_s: np.ndarray
    current_mA: np.ndarray
    voltage_V: np.ndarray
    direction: str = "charge"

    def __post_init__(self) -> None:
        self.time_s = np.asarray(self.time_s, dtype=float)
        self.current_mA = np.asarray(self.current_mA, dtype=float)
        self.voltage_V = np.asarray(self.voltage_V, dtype=float)
        n = len(self.time_s)
        if not (n == len(self.current_mA) == len(self.voltage_V)):
            raise ValueError("record columns differ in length")
        if n < 2:
            raise ValueError("record needs at least two samples")
        if not np.all(np.diff(self.time_s) > 0.0):
            raise ValueError("time must be strictly increasing")
        if self.direction not in ("charge", "discharge"):
            raise ValueError(f"unknown direction {self.direction!r}")
        sign = 1.0 if self.direction == "charge" else -1.0
        if not np.all(sign * self.current_mA > 0.0):
            raise ValueError(f"current sign inconsistent with direction {self.direction!r}")
        if self.voltage_V.min() < 2.0 or self.voltage_V.max() > 4.5:
            raise ValueError("voltage outside the 2.0..4.5 V sanity band")


@dataclass
class OcvCurve:
    """Charge-voltage curve with strictly increasing charge."""

    charge_mAh: np.ndarray
    voltage_V: np.ndarray

    def __post_init__(self) -> None:
        self.charge_mAh = np.asarray(self.charge_mAh, dtype=float)
        self.voltage_V = np.asarray(self.voltage_V, dtype=float)
        if len(self.charge_mAh) != len(self.voltage_V):
            raise ValueError("curve columns differ in length")
        if len(self.charge_mAh) < 2:
            raise ValueError("curve needs at least two points")
        if not np.all(np.isfinite(self.charge_mAh)) or not np.all(np.isfinite(self.voltage_V)):
            raise ValueError("curve contains non-finite values")
        if not np.all(np.diff(self.charge_mAh) > 0.0):
            raise ValueError("charge must be strictly increasing")
        if np.any(np.diff(self.voltage_V) < 0.0):
            raise ValueError("voltage must be non-decreasing")


@dataclass
class IcCurve:
    """Incremental capacity on a uniform voltage grid."""

    voltage_V: np.ndarray
    ic_mAh_per_V: np.ndarray

    def __post_init__(self) -> None:
        self.voltage_V = np.asarray(self.voltage_V, dtype=float)
        self.ic_mAh_per_V = np.asarray(self.ic_mAh_per_V, dtype=float)
        if len(self.voltage_V) != len(self.ic_mAh_per_V):
            raise ValueError("curve columns differ in length")
        if len(self.voltage_V) < 3:
            raise ValueError("need at least three grid points")
        steps = np.diff(self.voltage_V)
        if np.any(np.abs(steps - IC_GRID_STEP_V) > 1e-9):
            raise ValueError("voltage grid must be uniform at 1 mV")
        if not np.all(np.isfinite(self.ic_mAh_per_V)):
            raise ValueError("ic values must be finite")


@dataclass
class FeaturePointSet:
    """Charges at the fixed feature voltages plus their increments."""

    voltages_V: np.ndarray
    q_fp_mAh: np.ndarray
    dq_fp_mAh: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.voltages_V = np.asarray(self.voltages_V, dtype=float)
        self.q_fp_mAh = np.asarray(self.q_fp_mAh, dtype=float)
        if len(self.voltages_V) != len(self.q_fp_mAh):
            raise ValueError("voltage and charge grids differ in length")
        if not np.all(np.diff(self.voltages_V) > 0.0):
            raise ValueError("feature voltages must increase")
        if self.q_fp_mAh[0] <= 0.0 or not np.all(np.diff(self.q_fp_mAh) > 0.0):
            raise ValueError("feature charges must be positive and increasing")
        self.dq_fp_mAh = diff_charge(self.q_fp_mAh)

    @classmethod
    def from_increments(cls, voltages_V, dq_fp_mAh) -> "FeaturePointSet":
        return cls(voltages_V, cum_charge(dq_fp_mAh))


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def _fit_at(x: np.ndarray, y: np.ndarray, degree: int) -> float:
    """Least-squares polynomial value at x = 0."""
    coefs = np.polynomial.polynomial.polyfit(x, y, degree)
    return float(coefs[0])


def savgol_smooth(series, window_length: int = 25, poly_order: int = 3) -> np.ndarray:
    """Least-squares polynomial smoothing over a sliding centered window.

    Interior samples use the full window; near the array ends the window
    shrinks to whatever samples exist on that side (one-sided fits), with
    the degree capped at window size minus one.  Polynomials of degree at
    most poly_order therefore pass through unchanged.
    """
    y = np.asarray(series, dtype=float)
    if window_length % 2 != 1:
        raise ValueError("window_length must be odd")
    if poly_order < 0 or poly_order >= window_length:
        raise ValueError("need 0 <= poly_order < window_length")
    if len(y) < window_length:
        raise ValueError("series shorter than the window")
    half = window_length // 2
    x_full = np.arange(-half, half + 1, dtype=float)
    # value at window center = first row of the pseudo-inverse
    vand = np.vander(x_full, poly_order + 1, increasing=True)
    center_coeffs = np.linalg.pinv(vand)[0]
    out = np.empty_like(y)
    out[half:len(y) - half] = np.correlate(y, center_coeffs, mode="valid")
    for i in range(half):
        win = y[: i + half + 1]
        x = np.arange(len(win), dtype=float) - i
        out[i] = _fit_at(x, win, min(poly_order, len(win) - 1))
    for i in range(len(y) - half, len(y)):
        win = y[i - half:]
        x = np.arange(len(win), dtype=float) - half
        out[i] = _fit_at(x, win, min(poly_order, len(win) - 1))
    return out


# ---------------------------------------------------------------------------
# records to curves
# ---------------------------------------------------------------------------


def coulomb_curve(record: ChargingRecord) -> OcvCurve:
    """Charge-voltage curve of one branch by trapezoidal coulomb counting.

    Discharge branches are re-expressed with charge ascending from the
    branch's empty end, so both directions land on the same axis.
    """
    dt = np.diff(record.time_s)
    mean_i = 0.5 * (np.abs(record.current_mA[:-1]) + np.abs(record.current_mA[1:]))
    moved = np.concatenate([[0.0], np.cumsum(mean_i * dt)]) / 3600.0
    if record.direction == "charge":
        return OcvCurve(moved, record.voltage_V)
    total = moved[-1]
    q = (total - moved)[::-1]
    return OcvCurve(q, record.voltage_V[::-1].copy())


def pseudo_ocv(
    charge_record: ChargingRecord,
    discharge_record: ChargingRecord,
    grid_step_mAh: float = 0.05,
    window_length: int = 25,
    poly_order: int = 3,
) -> OcvCurve:
    """Hysteresis-cancelling average of a slow charge/discharge pair.

    Both branches are resampled onto a common charge grid, the midpoint
    voltage is taken, smoothed, and clamped non-decreasing.
    """
    if charge_record.direction != "charge" or discharge_record.direction != "discharge":
        raise ValueError("pass records as (charge branch, discharge branch)")
    up = coulomb_curve(charge_record)
    down = coulomb_curve(discharge_record)
    v_overlap_lo = max(up.voltage_V.min(), down.voltage_V.min())
    v_overlap_hi = min(up.voltage_V.max(), down.voltage_V.max())
    if v_overlap_lo >= v_overlap_hi:
        raise ValueError("branches share no voltage range")
    q_lo = max(up.charge_mAh[0], down.charge_mAh[0])
    q_hi = min(up.charge_mAh[-1], down.charge_mAh[-1])
    n = int(np.floor((q_hi - q_lo) / grid_step_mAh)) + 1
    if n < window_length:
        raise ValueError("overlap too short for the smoothing window")
    grid = q_lo + grid_step_mAh * np.arange(n)
    v_up = np.interp(grid, up.charge_mAh, up.voltage_V)
    v_down = np.interp(grid, down.charge_mAh, down.voltage_V)
    mid = 0.5 * (v_up + v_down)
    smooth = savgol_smooth(mid, window_length, poly_order)
    return OcvCurve(grid, np.maximum.accumulate(smooth))


# ---------------------------------------------------------------------------
# incremental capacity
# ---------------------------------------------------------------------------


def _grid_mv(voltage: float) -> int:
    return int(round(voltage * 1000.0))


def incremental_capacity(curve: OcvCurve, delta_v_V: float = IC_GRID_STEP_V) -> IcCurve:
    """dQ/dV on a uniform millivolt grid spanning the curve.

    Charge is interpolated at the grid voltages and differenced: central
    differences inside, one-sided at the two grid ends.  The trapezoidal
    integral of the result telescopes back to the charge spanned by the
    grid, which is the property the tests pin down.
    """
    if abs(delta_v_V - IC_GRID_STEP_V) > 1e-12:
        raise ValueError("only the 1 mV grid is supported")
    v = curve.voltage_V
    if not np.all(np.diff(v) > 0.0):
        raise NonMonotoneCurveError("curve voltage is not strictly increasing")
    mv_lo = int(np.ceil(round(v[0] * 1000.0, 6)))
    mv_hi = int(np.floor(round(v[-1] * 1000.0, 6)))
    if mv_hi - mv_lo < 2:
        raise ValueError("curve spans fewer than three grid voltages")
    grid = np.arange(mv_lo, mv_hi + 1) / 1000.0
    q = np.interp(grid, v, curve.charge_mAh)
    ic = np.empty_like(q)
    ic[1:-1] = (q[2:] - q[:-2]) / (2.0 * IC_GRID_STEP_V)
    ic[0] = (q[1] - q[0]) / IC_GRID_STEP_V
    ic[-1] = (q[-1] - q[-2]) / IC_GRID_STEP_V
    return IcCurve(grid, ic)


def ic_segment(ic: IcCurve, v1: float, v2: float) -> np.ndarray:
    """Incremental-capacity values between two grid voltages, inclusive.

    v1 and v2 snap to the nearest millivolt; the returned length is always
    round((v2 - v1) / 0.001) + 1.
    """
    if not (3.5 <= v1 < v2 <= 4.0):
        raise ValueError("need 3.5 <= v1 < v2 <= 4.0")
    mv0 = _grid_mv(ic.voltage_V[0])
    i1 = _grid_mv(v1) - mv0
    i2 = _grid_mv(v2) - mv0
    if i1 < 0 or i2 >= len(ic.voltage_V):
        raise CurveCoverageError(
            f"curve grid [{ic.voltage_V[0]:.3f}, {ic.voltage_V[-1]:.3f}] V "
            f"does not cover [{v1:.3f}, {v2:.3f}] V"
        )
    return ic.ic_mAh_per_V[i1 : i2 + 1].copy()


@dataclass(frozen=True)
class PeakFeatures:
    """The two tallest in-window IC peaks and the deepest valley between."""

    v_peak1: float
    h_peak1: float
    v_peak2: float
    h_peak2: float
    v_valley: float
    h_valley: float


def ic_peak_features(
    ic: IcCurve,
    v_lo: float = 3.5,
    v_hi: float = 4.0,
    window_length: int = 25,
    poly_order: int = 3,
) -> PeakFeatures:
    """Locate the two tallest smoothed IC peaks inside [v_lo, v_hi].

    Peaks are strict interior local maxima; the valley is the lowest value
    strictly between the two chosen peaks.  Peak 1 is the lower-voltage one.
    """
    y = savgol_smooth(ic.ic_mAh_per_V, window_length, poly_order)
    v = ic.voltage_V
    is_max = np.zeros(len(y), dtype=bool)
    is_max[1:-1] = (y[1:-1] > y[:-2]) & (y[1:-1] > y[2:])
    inside = (v >= v_lo) & (v <= v_hi)
    idx = np.flatnonzero(is_max & inside)
    if len(idx) < 2:
        raise PeakSearchError(
            f"found {len(idx)} local maxima in [{v_lo}, {v_hi}] V, need 2"
        )
    top = idx[np.argsort(y[idx])][-2:]
    i1, i2 = sorted(top)
    between = np.arange(i1 + 1, i2)
    iv = between[np.argmin(y[between])]
    return PeakFeatures(
        v_peak1=float(v[i1]),
        h_peak1=float(y[i1]),
        v_peak2=float(v[i2]),
        h_peak2=float(y[i2]),
        v_valley=float(v[iv]),
        h_valley=float(y[iv]),
    )


# ---------------------------------------------------------------------------
# feature points
# ---------------------------------------------------------------------------


def extract_feature_points(curve: OcvCurve, voltages=None) -> FeaturePointSet:
    """Charges where the curve crosses the fixed feature voltages."""
    fp = FEATURE_VOLTAGES if voltages is None else np.asarray(voltages, dtype=float)
    v = curve.voltage_V
    missing = fp[(fp < v.min()) | (fp > v.max())]
    if len(missing):
        raise CurveCoverageError(
            "curve does not reach feature voltages: "
            + ", ".join(f"{m:.1f}" for m in missing)
        )
    q = np.interp(fp, v, curve.charge_mAh)
    return FeaturePointSet(fp, q)


def diff_charge(q_fp) -> np.ndarray:
    """Increments of a charge sequence; the first entry keeps the absolute start."""
    q = np.asarray(q_fp, dtype=float)
    out = np.empty_like(q)
    out[0] = q[0]
    out[1:] = np.diff(q)
    return out


def cum_charge(dq_fp) -> np.ndarray:
    """Prefix sums; exact inverse of :func:`diff_charge`."""
    return np.cumsum(np.asarray(dq_fp, dtype=float))
