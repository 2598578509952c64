"""Recovering the three aging parameters from charge-increment features.

The measured (or network-predicted) charge increments between the fixed
feature voltages pin where those voltages sit on a candidate cell curve.
Anchoring the running sum at the lower-cutoff root and comparing the
candidate's voltages there against the fixed grid gives a scalar loss over
(q_pe, q_ne, q_offset); a hybrid particle-swarm / genetic search minimizes
it.  Points that fall off a candidate's valid curve turn into penalties,
so the loss stays total and the search keeps a feasibility gradient.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .electrode import (
    CellCurveEvaluator,
    Eaps,
    ElectrodeDomainError,
    ElectrodeOcvModel,
    FRESH_Q_NE_MAH,
    FRESH_Q_OFFSET_MAH,
    FRESH_Q_PE_MAH,
    InfeasibleWindowError,
    _bisect_cell_charge,
    _charge_domain,
    cell_ocv_at,
    get_evaluator,
    reference_ne_model,
    reference_pe_model,
    usable_window,
)
from .errors import NumericalFailure
from .signals import FEATURE_VOLTAGES, OcvCurve

INFEASIBLE_POINT_PENALTY_V2 = 1.0
LOWER_CUTOFF_V = 2.7
RECONSTRUCT_STEP_MAH = 0.5


class InfeasibleAnchorError(NumericalFailure):
    """The candidate curve never crosses the lower voltage cutoff."""


@dataclass(frozen=True)
class EapBounds:
    """Per-parameter search interval in mAh.

    Equal endpoints are allowed so a search can be pinned to a point.
    """

    q_pe: tuple[float, float]
    q_ne: tuple[float, float]
    q_offset: tuple[float, float]

    def __post_init__(self) -> None:
        for name in ("q_pe", "q_ne", "q_offset"):
            low, high = getattr(self, name)
            if not (np.isfinite(low) and np.isfinite(high)):
                raise ValueError(f"{name} bounds must be finite")
            if low < 0.0 or high < low:
                raise ValueError(f"{name} bounds need 0 <= low <= high")

    def lower(self) -> np.ndarray:
        return np.array([self.q_pe[0], self.q_ne[0], self.q_offset[0]])

    def upper(self) -> np.ndarray:
        return np.array([self.q_pe[1], self.q_ne[1], self.q_offset[1]])


def default_bounds() -> EapBounds:
    """Generous envelope around the physically plausible aging range."""
    return EapBounds(
        q_pe=(0.5 * FRESH_Q_PE_MAH, 1.5 * FRESH_Q_PE_MAH),
        q_ne=(0.5 * FRESH_Q_NE_MAH, 1.5 * FRESH_Q_NE_MAH),
        q_offset=(0.0, 0.5 * FRESH_Q_PE_MAH),
    )


@dataclass(frozen=True)
class PsoGaOptions:
    swarm_size: int = 60
    max_iterations: int = 300
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    ga_fraction: float = 0.25
    tournament_size: int = 2
    mutation_scale: float = 0.02
    stall_tolerance: float = 1e-10
    stall_iterations: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        if self.swarm_size < 2 or self.tournament_size < 2:
            raise ValueError("swarm_size and tournament_size must be at least 2")
        if self.max_iterations < 1 or self.stall_iterations < 1:
            raise ValueError("iteration counts must be positive")
        for name in ("ga_fraction", "mutation_scale", "inertia"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.cognitive <= 0.0 or self.social <= 0.0:
            raise ValueError("attraction coefficients must be positive")
        if self.stall_tolerance <= 0.0:
            raise ValueError("stall_tolerance must be positive")


@dataclass(frozen=True)
class EapEstimate:
    eaps: Eaps
    loss: float
    iterations: int
    capacity_mAh: float
    converged: bool


# ---------------------------------------------------------------------------
# anchoring and the loss
# ---------------------------------------------------------------------------


def anchor_q0(
    eaps: Eaps,
    pe_model: ElectrodeOcvModel,
    ne_model: ElectrodeOcvModel,
    v_cut_low: float = LOWER_CUTOFF_V,
) -> float:
    """Charge coordinate where the candidate curve crosses the lower cutoff."""
    q_min, q_max = _charge_domain(eaps, pe_model, ne_model)
    if q_min >= q_max:
        raise InfeasibleAnchorError(
            "electrode curves do not overlap for these aging parameters"
        )
    v_floor = cell_ocv_at(eaps, pe_model, ne_model, q_min)
    if v_floor > v_cut_low:
        raise InfeasibleAnchorError(
            f"curve starts at {v_floor:.4f} V, above the {v_cut_low} V cutoff"
        )
    v_ceil = cell_ocv_at(eaps, pe_model, ne_model, q_max)
    if v_ceil < v_cut_low:
        raise InfeasibleAnchorError(
            f"curve never reaches {v_cut_low} V (tops out at {v_ceil:.4f} V)"
        )
    return _bisect_cell_charge(eaps, pe_model, ne_model, v_cut_low, q_min, q_max)


def predicted_feature_voltages(
    eaps: Eaps,
    dq_fp_estimate,
    pe_model: ElectrodeOcvModel,
    ne_model: ElectrodeOcvModel,
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate-curve voltages at the anchored feature charges.

    Returns (voltages, feasible).  Voltages are NaN wherever the anchored
    charge leaves the candidate's valid domain; the anchor itself failing
    raises InfeasibleAnchorError.
    """
    dq = np.asarray(dq_fp_estimate, dtype=float)
    if dq.ndim != 1 or not np.all(np.isfinite(dq)):
        raise ValueError("charge increments must be a finite 1-D vector")
    q0 = anchor_q0(eaps, pe_model, ne_model)
    anchored = q0 + np.cumsum(dq)
    voltages = np.full(len(dq), np.nan)
    feasible = np.zeros(len(dq), dtype=bool)
    for i, q in enumerate(anchored):
        try:
            voltages[i] = cell_ocv_at(eaps, pe_model, ne_model, q)
        except ElectrodeDomainError:
            continue
        feasible[i] = True
    return voltages, feasible


def eap_loss(
    eaps: Eaps,
    dq_fp_estimate,
    reference_voltages=None,
    pe_model: ElectrodeOcvModel | None = None,
    ne_model: ElectrodeOcvModel | None = None,
) -> float:
    """Mean squared feature-voltage error plus feasibility penalties (V^2).

    Each anchored point that leaves the candidate's domain adds a flat
    1.0 V^2; a candidate whose curve never reaches the lower cutoff scores
    the full penalty for every point.
    """
    pe_model = pe_model if pe_model is not None else reference_pe_model()
    ne_model = ne_model if ne_model is not None else reference_ne_model()
    refs = (
        FEATURE_VOLTAGES
        if reference_voltages is None
        else np.asarray(reference_voltages, dtype=float)
    )
    dq = np.asarray(dq_fp_estimate, dtype=float)
    if refs.shape != dq.shape:
        raise ValueError("reference voltages and increments must align")
    m = len(refs)
    try:
        voltages, feasible = predicted_feature_voltages(eaps, dq, pe_model, ne_model)
    except InfeasibleAnchorError:
        return float(m) * INFEASIBLE_POINT_PENALTY_V2
    squared = (refs[feasible] - voltages[feasible]) ** 2
    penalties = float(np.count_nonzero(~feasible)) * INFEASIBLE_POINT_PENALTY_V2
    return float(squared.sum() / m + penalties)


def _batched_anchor(
    evaluator: CellCurveEvaluator,
    v_target: float,
    q_pe,
    q_ne,
    q_offset,
    refine_iterations: int = 20,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized lower-cutoff root, tuned for many small swarm batches.

    One wide evaluation brackets the root on a 129-point per-candidate
    grid, then a short bisection refines it; this spends far fewer numpy
    round trips than bisecting the whole domain and still lands within
    ~1e-5 mAh, which the search loss cannot distinguish.
    """
    lo, hi = evaluator.charge_domain(q_pe, q_ne, q_offset)
    ok = lo < hi
    safe_lo = np.where(ok, lo, 0.0)
    safe_hi = np.where(ok, hi, 1.0)
    fractions = np.linspace(0.0, 1.0, 129)
    grid = safe_lo[:, None] + (safe_hi - safe_lo)[:, None] * fractions
    v_grid, ok_grid = evaluator.voltage_fast(
        grid, q_pe[:, None], q_ne[:, None], q_offset[:, None]
    )
    ok &= ok_grid.all(axis=1) & (v_grid[:, 0] <= v_target) & (v_grid[:, -1] >= v_target)
    idx = np.clip((v_grid < v_target).sum(axis=1), 1, 128)
    rows = np.arange(len(grid))
    a = grid[rows, idx - 1]
    b = grid[rows, idx]
    for _ in range(refine_iterations):
        mid = 0.5 * (a + b)
        v_mid, _ = evaluator.voltage_fast(mid, q_pe, q_ne, q_offset)
        below = v_mid < v_target
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    return 0.5 * (a + b), ok


def _batched_losses(
    candidates: np.ndarray,
    dq: np.ndarray,
    refs: np.ndarray,
    evaluator: CellCurveEvaluator,
    v_cut_low: float = LOWER_CUTOFF_V,
) -> np.ndarray:
    """eap_loss for an (n, 3) block of candidates in one vectorized pass."""
    q_pe, q_ne, q_offset = candidates.T
    q0, anchored_ok = _batched_anchor(evaluator, v_cut_low, q_pe, q_ne, q_offset)
    anchored = q0[:, None] + np.cumsum(dq)[None, :]
    voltages, ok = evaluator.voltage_fast(
        anchored, q_pe[:, None], q_ne[:, None], q_offset[:, None]
    )
    ok &= anchored_ok[:, None]
    squared = np.where(ok, (refs[None, :] - voltages) ** 2, 0.0)
    m = len(refs)
    return squared.sum(axis=1) / m + (
        (m - ok.sum(axis=1)) * INFEASIBLE_POINT_PENALTY_V2
    )


# ---------------------------------------------------------------------------
# staging-geometry seed
# ---------------------------------------------------------------------------

RISER_GROUP_MAX_STEP_MAH = 1.0
_FLAT_RUN_MIN_SPAN_V = 0.025
_FLAT_RUN_DX_PER_STEP = 1e-7


@dataclass(frozen=True)
class _StagingMap:
    """Stoichiometries and potential windows of the NE staging plateaus."""

    riser_x: float
    riser_e_lo: float
    riser_e_hi: float
    minor_windows: tuple[tuple[float, float], ...]


def _staging_map(evaluator: CellCurveEvaluator) -> _StagingMap:
    cached = getattr(evaluator, "_staging_map_cache", None)
    if cached is not None:
        return cached
    table = evaluator._ne_table
    step = abs(float(table.es[1] - table.es[0]))
    flat = np.abs(np.diff(table.xs)) < _FLAT_RUN_DX_PER_STEP
    edges = np.flatnonzero(np.diff(np.concatenate([[0], flat.view(np.int8), [0]])))
    windows = []
    for start, stop in edges.reshape(-1, 2):
        if (stop - start) * step < _FLAT_RUN_MIN_SPAN_V:
            continue
        x_mid = 0.5 * float(table.xs[start] + table.xs[stop])
        e_pair = sorted((float(table.es[start]), float(table.es[stop])))
        windows.append((x_mid, e_pair[0], e_pair[1]))
    staged = [w for w in windows if w[0] > 0.01]
    if not staged:
        raise NumericalFailure("negative-electrode curve shows no staging step")
    x_mid, e_lo, e_hi = max(staged, key=lambda w: w[2] - w[1])
    minor = tuple((lo, hi) for (x, lo, hi) in staged if (x, lo, hi) != (x_mid, e_lo, e_hi))
    result = _StagingMap(x_mid, e_lo, e_hi, minor)
    evaluator._staging_map_cache = result
    return result


def _riser_group(dq: np.ndarray) -> np.ndarray | None:
    """Longest run of features separated by near-zero charge increments.

    Consecutive feature voltages that arrive within RISER_GROUP_MAX_STEP_MAH
    of each other must sit on the same near-vertical staging step of the
    measured curve; everything else is spaced tens of mAh apart.
    """
    joined = dq[1:] < RISER_GROUP_MAX_STEP_MAH
    groups: list[list[int]] = []
    i = 0
    while i < len(joined):
        if joined[i]:
            j = i
            while j < len(joined) and joined[j]:
                j += 1
            groups.append(list(range(i, j + 1)))
            i = j
        else:
            i += 1
    if not groups:
        return None
    return np.array(max(groups, key=len))


def _closed_form_candidates(
    inv_q_ne: np.ndarray,
    s: np.ndarray,
    refs: np.ndarray,
    group: np.ndarray,
    shelf: np.ndarray,
    evaluator: CellCurveEvaluator,
    pe_model: ElectrodeOcvModel,
    ne_model: ElectrodeOcvModel,
    bounds: EapBounds,
    rounds: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Candidate triples along a 1/q_ne grid with the other two solved for.

    PE stoichiometry falls linearly in accumulated charge, so once the NE
    potentials at the smooth (shelf) features are known the PE side is a
    two-parameter straight-line fit: intercept = stoichiometry at the
    anchor, slope = 1/q_pe.  The anchor stoichiometry itself comes from the
    riser group, whose features all sit on the big staging step where
    stoichiometry barely moves with potential.  Alternating the two solves
    removes the coarse initial guess within a few rounds.
    """
    from .electrode import soc_from_potential

    staging = _staging_map(evaluator)
    ne_table, pe_table = evaluator._ne_table, evaluator._pe_table
    pe_lo, pe_hi = pe_model.potential_limits
    lo, hi = bounds.lower(), bounds.upper()
    count = len(inv_q_ne)
    anchor_x = staging.riser_x - s[group].mean() * inv_q_ne
    slope = intercept = None
    for _ in range(rounds):
        x = anchor_x[:, None] + inv_q_ne[:, None] * s[None, :]
        e_ne, _ = ne_table.fast_invert(
            np.clip(x.ravel(), ne_table.x_min, ne_table.x_max)
        )
        e_ne = e_ne.reshape(count, -1)
        pe_targets = refs[None, :] + e_ne
        usable = np.zeros((count, len(s)), dtype=bool)
        usable[:, shelf] = True
        usable &= (pe_targets > pe_lo + 1e-3) & (pe_targets < pe_hi - 1e-3)
        for win_lo, win_hi in staging.minor_windows:
            usable &= ~((e_ne > win_lo - 0.008) & (e_ne < win_hi + 0.008))
        y = soc_from_potential(pe_model, pe_targets)
        w = usable.astype(float)
        s_w = w.sum(axis=1)
        s_x = (w * s).sum(axis=1)
        s_xx = (w * s * s).sum(axis=1)
        s_y = (w * y).sum(axis=1)
        s_xy = (w * s * y).sum(axis=1)
        det = s_xx * s_w - s_x * s_x
        with np.errstate(divide="ignore", invalid="ignore"):
            slope = (s_x * s_y - s_xy * s_w) / det
            intercept = (s_y + slope * s_x) / s_w
        # re-pin the anchor stoichiometry through the riser features
        y_group = intercept[:, None] - s[group][None, :] * slope[:, None]
        e_pe, _ = pe_table.fast_invert(
            np.clip(y_group.ravel(), pe_table.x_min, pe_table.x_max)
        )
        e_group = e_pe.reshape(count, -1) - refs[group][None, :]
        on_riser = (e_group > staging.riser_e_lo + 0.02) & (
            e_group < staging.riser_e_hi - 0.02
        )
        x_group = soc_from_potential(ne_model, e_group)
        pinned = np.where(
            on_riser, x_group - s[group][None, :] * inv_q_ne[:, None], 0.0
        )
        hits = on_riser.sum(axis=1)
        anchor_x = np.where(
            hits > 0, pinned.sum(axis=1) / np.maximum(hits, 1), anchor_x
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        q_pe = 1.0 / slope
    q_offset = (1.0 - intercept) * q_pe - anchor_x / inv_q_ne
    candidates = np.column_stack([q_pe, 1.0 / inv_q_ne, q_offset])
    valid = (
        np.isfinite(candidates).all(axis=1)
        & (slope > 0)
        & (candidates[:, 0] >= lo[0])
        & (candidates[:, 0] <= hi[0])
        & (candidates[:, 2] >= lo[2])
        & (candidates[:, 2] <= hi[2])
    )
    return candidates, valid


def _staging_seed(
    dq: np.ndarray,
    refs: np.ndarray,
    bounds: EapBounds,
    evaluator: CellCurveEvaluator,
    pe_model: ElectrodeOcvModel,
    ne_model: ElectrodeOcvModel,
) -> tuple[np.ndarray, float] | None:
    """Best closed-form candidate over a refined q_ne scan, or None.

    None signals that the increments show no staging group (so the swarm
    runs unaided) or that no closed-form candidate landed inside bounds.
    """
    group = _riser_group(dq)
    if group is None:
        return None
    s = np.cumsum(dq)
    adjacent = set(group.tolist()) | {group.min() - 1, group.max() + 1}
    shelf = np.array(
        [k for k in range(len(s)) if k not in adjacent and k > group.max()],
        dtype=int,
    )
    if len(shelf) < 4:
        shelf = np.array([k for k in range(len(s)) if k not in adjacent], dtype=int)
    if len(shelf) < 2:
        return None
    lo, hi = bounds.lower(), bounds.upper()
    ne_lo, ne_hi = max(lo[1], 1e-6), max(hi[1], 1e-6)
    grid = np.arange(ne_lo, ne_hi + 1e-9, 0.5)
    if len(grid) == 0:
        grid = np.array([ne_lo])
    best: tuple[float, np.ndarray] | None = None
    center = None
    for width, points in ((None, None), (0.5, 41), (0.025, 41), (0.002, 41)):
        if width is not None:
            grid = np.clip(np.linspace(center - width, center + width, points), ne_lo, ne_hi)
        candidates, valid = _closed_form_candidates(
            1.0 / grid, s, refs, group, shelf,
            evaluator, pe_model, ne_model, bounds,
            rounds=2 if width is None else 3,
        )
        losses = np.full(len(grid), np.inf)
        if valid.any():
            losses[valid] = _batched_losses(candidates[valid], dq, refs, evaluator)
        k = int(np.argmin(losses))
        if not np.isfinite(losses[k]):
            break
        center = grid[k]
        if best is None or losses[k] < best[0]:
            best = (float(losses[k]), candidates[k].copy())
    if best is None:
        return None
    return best[1], best[0]


def _grid_polish(
    position: np.ndarray,
    loss: float,
    dq: np.ndarray,
    refs: np.ndarray,
    evaluator: CellCurveEvaluator,
    bounds: EapBounds,
    widths: tuple[float, ...] = (3.0, 1.0, 0.3, 0.06, 0.012, 0.002),
) -> tuple[np.ndarray, float]:
    """Shrinking grid descent around a point; accepts only improvements.

    Each level scans a 17x17 (q_pe, q_offset) patch at fixed q_ne and then
    a q_ne line at half the width.  The patch is two-dimensional on purpose:
    those parameters compensate each other along a diagonal valley that
    axis-by-axis steps cannot follow.
    """
    lo, hi = bounds.lower(), bounds.upper()
    current = position.copy()
    current_loss = loss
    for width in widths:
        pe_grid = np.clip(current[0] + np.linspace(-width, width, 17), lo[0], hi[0])
        off_grid = np.clip(current[2] + np.linspace(-width, width, 17), lo[2], hi[2])
        pe_mesh, off_mesh = np.meshgrid(pe_grid, off_grid, indexing="ij")
        patch = np.column_stack(
            [pe_mesh.ravel(), np.full(pe_mesh.size, current[1]), off_mesh.ravel()]
        )
        patch_losses = _batched_losses(patch, dq, refs, evaluator)
        k = int(np.argmin(patch_losses))
        if patch_losses[k] < current_loss:
            current, current_loss = patch[k].copy(), float(patch_losses[k])
        ne_grid = np.clip(
            current[1] + np.linspace(-width / 2, width / 2, 17), lo[1], hi[1]
        )
        line = np.tile(current, (17, 1))
        line[:, 1] = ne_grid
        line_losses = _batched_losses(line, dq, refs, evaluator)
        k = int(np.argmin(line_losses))
        if line_losses[k] < current_loss:
            current, current_loss = line[k].copy(), float(line_losses[k])
    return current, current_loss


# ---------------------------------------------------------------------------
# the hybrid search
# ---------------------------------------------------------------------------


def estimate(
    dq_fp_estimate,
    bounds: EapBounds | None = None,
    options: PsoGaOptions | None = None,
    pe_model: ElectrodeOcvModel | None = None,
    ne_model: ElectrodeOcvModel | None = None,
    reference_voltages=None,
) -> EapEstimate:
    """Minimize eap_loss over the bounded parameter box.

    The swarm is seeded with the closed-form staging candidate when the
    increments show a riser group, then runs the hybrid update: inertia-
    weighted velocities with personal and global attraction, reflection at
    the box walls, and the worst quarter re-bred from tournament-selected
    survivors (arithmetic blend plus Gaussian mutation, fresh personal
    bests).  After the swarm stalls, a shrinking-grid descent sharpens the
    incumbent; the loss landscape narrows to a needle a fraction of a mAh
    wide, which velocity updates alone cannot hit.  The converged flag
    reports whether the swarm stalled (no improvement above
    stall_tolerance across stall_iterations) before the iteration cap.
    """
    bounds = bounds if bounds is not None else default_bounds()
    options = options if options is not None else PsoGaOptions()
    pe_model = pe_model if pe_model is not None else reference_pe_model()
    ne_model = ne_model if ne_model is not None else reference_ne_model()
    refs = (
        FEATURE_VOLTAGES
        if reference_voltages is None
        else np.asarray(reference_voltages, dtype=float)
    )
    dq = np.asarray(dq_fp_estimate, dtype=float)
    if refs.shape != dq.shape or dq.ndim != 1:
        raise ValueError("reference voltages and increments must align")
    evaluator = get_evaluator(pe_model, ne_model)
    rng = np.random.default_rng(options.seed)
    lo, hi = bounds.lower(), bounds.upper()
    span = hi - lo

    if np.all(span == 0.0):
        pinned = Eaps(q_pe=lo[0], q_ne=lo[1], q_offset=lo[2])
        pinned_loss = eap_loss(pinned, dq, refs, pe_model, ne_model)
        try:
            capacity = usable_window(pinned, pe_model, ne_model).capacity
        except (InfeasibleWindowError, ElectrodeDomainError):
            capacity = float("nan")
        return EapEstimate(
            eaps=pinned,
            loss=pinned_loss,
            iterations=0,
            capacity_mAh=capacity,
            converged=True,
        )

    n = options.swarm_size
    seed = _staging_seed(dq, refs, bounds, evaluator, pe_model, ne_model)
    positions = lo + rng.random((n, 3)) * span
    if seed is not None:
        positions[0] = seed[0]
        positions[1] = np.clip(seed[0] + rng.normal(0.0, 0.5, size=3), lo, hi)
    velocities = np.zeros((n, 3))
    losses = _batched_losses(positions, dq, refs, evaluator)
    best_positions = positions.copy()
    best_losses = losses.copy()

    def global_best() -> tuple[np.ndarray, float]:
        i = int(np.argmin(best_losses))
        return best_positions[i].copy(), float(best_losses[i])

    g_pos, g_loss = global_best()
    history = [g_loss]
    n_bred = int(round(options.ga_fraction * n))
    converged = False
    iterations = 0

    for iterations in range(1, options.max_iterations + 1):
        r_personal = rng.random((n, 3))
        r_social = rng.random((n, 3))
        velocities = (
            options.inertia * velocities
            + options.cognitive * r_personal * (best_positions - positions)
            + options.social * r_social * (g_pos[None, :] - positions)
        )
        positions = positions + velocities
        below = positions < lo
        positions = np.where(below, 2.0 * lo - positions, positions)
        velocities = np.where(below, -velocities, velocities)
        above = positions > hi
        positions = np.where(above, 2.0 * hi - positions, positions)
        velocities = np.where(above, -velocities, velocities)
        positions = np.clip(positions, lo, hi)

        losses = _batched_losses(positions, dq, refs, evaluator)
        improved = losses < best_losses
        best_positions[improved] = positions[improved]
        best_losses[improved] = losses[improved]

        if n_bred >= 1:
            order = np.argsort(losses, kind="stable")
            survivors = order[: n - n_bred]
            worst = order[n - n_bred :]
            children = np.empty((n_bred, 3))
            for c in range(n_bred):
                parents = []
                for _ in range(2):
                    picks = rng.integers(0, len(survivors), size=options.tournament_size)
                    contenders = survivors[picks]
                    parents.append(positions[contenders[np.argmin(losses[contenders])]])
                blend = rng.random(3)
                child = blend * parents[0] + (1.0 - blend) * parents[1]
                child = child + rng.normal(0.0, 1.0, size=3) * (
                    options.mutation_scale * span
                )
                children[c] = np.clip(child, lo, hi)
            child_losses = _batched_losses(children, dq, refs, evaluator)
            positions[worst] = children
            velocities[worst] = 0.0
            losses[worst] = child_losses
            # re-bred slots are new individuals; their memory starts over
            best_positions[worst] = children
            best_losses[worst] = child_losses

        g_pos, g_loss = global_best()
        history.append(g_loss)
        if len(history) > options.stall_iterations:
            window = history[-(options.stall_iterations + 1) :]
            if window[0] - window[-1] < options.stall_tolerance:
                converged = True
                break

    g_pos, g_loss = _grid_polish(g_pos, g_loss, dq, refs, evaluator, bounds)
    final_eaps = Eaps(
        q_pe=float(g_pos[0]), q_ne=float(g_pos[1]), q_offset=float(g_pos[2])
    )
    final_loss = eap_loss(final_eaps, dq, refs, pe_model, ne_model)
    try:
        capacity = usable_window(final_eaps, pe_model, ne_model).capacity
    except (InfeasibleWindowError, ElectrodeDomainError):
        capacity = float("nan")
    return EapEstimate(
        eaps=final_eaps,
        loss=final_loss,
        iterations=iterations,
        capacity_mAh=capacity,
        converged=converged,
    )


# ---------------------------------------------------------------------------
# curve reconstruction
# ---------------------------------------------------------------------------


def reconstruct(
    eaps: Eaps,
    pe_model: ElectrodeOcvModel | None = None,
    ne_model: ElectrodeOcvModel | None = None,
    v_lo: float = LOWER_CUTOFF_V,
    v_hi: float = 4.2,
) -> tuple[OcvCurve, float]:
    """Full curve between the cutoffs, sampled every 0.5 mAh.

    The charge axis starts at zero (window-relative, matching what coulomb
    counting a real charge would produce) and the returned capacity is the
    usable-window capacity itself.
    """
    pe_model = pe_model if pe_model is not None else reference_pe_model()
    ne_model = ne_model if ne_model is not None else reference_ne_model()
    window = usable_window(eaps, pe_model, ne_model, v_lo, v_hi)
    relative = np.arange(0.0, window.capacity, RECONSTRUCT_STEP_MAH)
    if relative[-1] < window.capacity:
        relative = np.append(relative, window.capacity)
    voltages = np.array(
        [cell_ocv_at(eaps, pe_model, ne_model, window.q_start + q) for q in relative]
    )
    return OcvCurve(charge_mAh=relative, voltage_V=voltages), window.capacity


def write_estimates_csv(path, rows) -> None:
    """CSV of (cell_id, EapEstimate) pairs, one line per cell."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["cell_id", "q_pe_mAh", "q_ne_mAh", "q_offset_mAh",
             "loss_V2", "capacity_mAh", "converged"]
        )
        for cell_id, est in rows:
            writer.writerow(
                [cell_id, repr(float(est.eaps.q_pe)), repr(float(est.eaps.q_ne)),
                 repr(float(est.eaps.q_offset)), repr(float(est.loss)),
                 repr(float(est.capacity_mAh)), est.converged]
            )
