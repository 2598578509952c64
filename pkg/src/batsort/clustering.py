"""Exemplar clustering for sorting cells by aging parameters.

The main algorithm is affinity propagation with an adaptive preference
scan: damped responsibility/availability message passing, a preference
that ratchets downward every time the exemplar set holds still long
enough, and silhouette scoring to pick the best clustering the scan
visited.  Nothing here needs the cluster count up front, which is the
point: a bin of returned cells does not come labeled.

Classic centroid baselines (k-means, fuzzy c-means, Ward agglomerative)
live alongside for comparison runs, plus the per-cluster dispersion
statistic the sort report quotes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .errors import NumericalFailure


DAMPING_INITIAL = 0.5
DAMPING_INCREMENT = 0.05
DAMPING_CAP = 0.95
TIE_BREAK_SCALE = 1e-12


class NoConvergenceError(NumericalFailure):
    """The preference scan never saw a stable exemplar set.

    Carries the scan state so the caller can inspect the trace.
    """

    def __init__(self, message: str, state: "ScanState"):
        super().__init__(message)
        self.state = state


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


@dataclass
class SimilarityMatrix:
    """Pairwise negative squared distances with the preference on the diagonal."""

    s: np.ndarray
    preference: float
    median_offdiag: float

    def set_preference(self, p: float) -> None:
        self.preference = float(p)
        np.fill_diagonal(self.s, self.preference)

    @property
    def n(self) -> int:
        return self.s.shape[0]


def similarity(dataset, tie_break_seed: int = 0) -> SimilarityMatrix:
    """Similarity matrix over sample vectors: S(i,j) = -|x_i - x_j|^2.

    The diagonal (the preference) starts at the median off-diagonal
    similarity.  A seeded symmetric jitter, twelve orders of magnitude
    below the similarity scale, breaks exact ties so that symmetric
    inputs cannot lock the messages into a permutation oscillation.
    """
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 2:
        raise ValueError("dataset must be a 2-D array of sample vectors")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to compare")
    if not np.all(np.isfinite(x)):
        raise ValueError("sample vectors must be finite")
    diff = x[:, None, :] - x[None, :, :]
    s = -np.einsum("ijk,ijk->ij", diff, diff)
    off = s[~np.eye(n, dtype=bool)]
    median = float(np.median(off))
    rng = np.random.default_rng(tie_break_seed)
    noise = rng.normal(0.0, TIE_BREAK_SCALE * max(1.0, abs(median)), size=(n, n))
    noise = 0.5 * (noise + noise.T)
    # jitter must not push a zero-distance pair above zero
    s = np.minimum(s + noise, 0.0)
    np.fill_diagonal(s, median)
    return SimilarityMatrix(s=s, preference=median, median_offdiag=median)


# ---------------------------------------------------------------------------
# message passing
# ---------------------------------------------------------------------------


@dataclass
class MessageState:
    """Responsibility/availability matrices plus the damping in force."""

    r: np.ndarray
    a: np.ndarray
    damping: float = DAMPING_INITIAL
    iteration: int = 0


def zero_messages(n: int, damping: float = DAMPING_INITIAL) -> MessageState:
    return MessageState(r=np.zeros((n, n)), a=np.zeros((n, n)), damping=damping)


def ap_iterate(state: MessageState, sim: SimilarityMatrix) -> MessageState:
    """One full message-passing sweep, in place.

    Raw responsibilities come from the previous availabilities, raw
    availabilities from those raw responsibilities, and both are then
    damped against their previous values:
        r(i,j) = s(i,j) - max over j' != j of (a(i,j') + s(i,j'))
        a(i,j) = min(0, r(j,j) + sum over i' not in {i,j} of max(0, r(i',j)))
        a(j,j) = sum over i != j of max(0, r(i,j))
        new = (1 - damping) * raw + damping * previous
    The responsibility rule covers the diagonal as well: the self message
    competes against the best alternative offer a(i,j') + s(i,j').  On the
    first sweep from zero messages it reduces to s(i,j) minus the best
    other similarity in the row.
    """
    s = sim.s
    n = sim.n
    if state.r.shape != (n, n) or state.a.shape != (n, n):
        raise ValueError("message matrices do not match the similarity matrix")
    idx = np.arange(n)

    comp = state.a + s
    best_j = comp.argmax(axis=1)
    best = comp[idx, best_j]
    comp[idx, best_j] = -np.inf
    second = comp.max(axis=1)
    comp[idx, best_j] = best
    r_raw = s - np.where(idx[None, :] == best_j[:, None], second[:, None], best[:, None])

    r_pos = np.maximum(r_raw, 0.0)
    np.fill_diagonal(r_pos, 0.0)
    col_sums = r_pos.sum(axis=0)
    a_raw = np.minimum(0.0, r_raw[idx, idx][None, :] + col_sums[None, :] - r_pos)
    a_raw[idx, idx] = col_sums

    lam = state.damping
    state.r = (1.0 - lam) * r_raw + lam * state.r
    state.a = (1.0 - lam) * a_raw + lam * state.a
    state.iteration += 1
    if not (np.all(np.isfinite(state.r)) and np.all(np.isfinite(state.a))):
        raise NumericalFailure(
            f"message matrices went non-finite at iteration {state.iteration}"
        )
    return state


# ---------------------------------------------------------------------------
# exemplars and cluster results
# ---------------------------------------------------------------------------


@dataclass
class ClusterResult:
    """A hard partition: cluster index per sample, one exemplar per cluster."""

    labels: np.ndarray
    exemplars: np.ndarray
    k: int
    avg_silhouette: float = float("nan")


def extract_exemplars(state: MessageState) -> ClusterResult:
    """Read the current partition out of the criterion matrix r + a.

    Each sample follows its row argmax; samples chosen by anyone are
    exemplars and get re-pointed to themselves.
    """
    criterion = state.r + state.a
    pointed = criterion.argmax(axis=1)
    exemplars = np.unique(pointed)
    pointed[exemplars] = exemplars
    order = {int(e): rank for rank, e in enumerate(exemplars)}
    labels = np.array([order[int(e)] for e in pointed], dtype=int)
    return ClusterResult(labels=labels, exemplars=exemplars, k=len(exemplars))


def _representatives(x: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Sample index nearest its cluster mean, one per cluster."""
    reps = np.empty(k, dtype=int)
    for j in range(k):
        members = np.flatnonzero(labels == j)
        center = x[members].mean(axis=0)
        reps[j] = members[np.argmin(((x[members] - center) ** 2).sum(axis=1))]
    return reps


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------


def silhouette(dataset, labels) -> tuple[np.ndarray, float]:
    """Per-sample silhouette values and their mean, Euclidean dissimilarity.

    For sample t in cluster C: a = mean distance to the rest of C, b = the
    smallest mean distance to any other cluster, value = (b - a)/max(a, b).
    Samples alone in their cluster score zero.
    """
    x = np.asarray(dataset, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = x.shape[0]
    if labels.shape != (n,):
        raise ValueError("labels must assign exactly one cluster per sample")
    ids = np.unique(labels)
    if len(ids) < 2:
        raise ValueError("silhouette needs at least two clusters")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    values = np.zeros(n)
    members = {int(c): np.flatnonzero(labels == c) for c in ids}
    for t in range(n):
        own = members[int(labels[t])]
        if len(own) == 1:
            continue
        a = dist[t, own].sum() / (len(own) - 1)
        b = min(
            dist[t, members[int(c)]].mean() for c in ids if c != labels[t]
        )
        top = max(a, b)
        values[t] = 0.0 if top == 0.0 else (b - a) / top
    return values, float(values.mean())


# ---------------------------------------------------------------------------
# the adaptive preference scan
# ---------------------------------------------------------------------------


@dataclass
class ScanRecord:
    """One message-passing iteration: preference, damping, exemplar count."""

    iteration: int
    preference: float
    damping: float
    k: int


@dataclass
class ScanState:
    """Everything the preference scan has seen so far."""

    preference: float
    p_step: float
    counter: int
    k_history: deque
    best: ClusterResult | None = None
    trace: list[ScanRecord] = field(default_factory=list)


def _direction_changes(history) -> int:
    moves = [b - a for a, b in zip(history, list(history)[1:]) if b != a]
    return sum(1 for u, v in zip(moves, moves[1:]) if (u > 0) != (v > 0))


def adap_scan(
    dataset,
    window: int = 50,
    max_sweeps: int = 40000,
    tie_break_seed: int = 0,
) -> ScanState:
    """Run the full adaptive-preference scan and return its final state.

    The preference starts at the median similarity and drops by c * p_step
    every time the exemplar set survives a whole monitoring window
    unchanged, where p_step = 0.01 * |median| / (0.1 * sqrt(K + 50)) and c
    counts convergence events.  Each stable partition with at least two
    clusters is silhouette-scored and the best is kept.  Exemplar counts
    that keep flip-flopping inside a window raise the damping by 0.05, up
    to 0.95.  The scan ends once a stable partition reaches two exemplars
    or the sweep budget runs out.
    """
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 2 or x.shape[0] < 4:
        raise ValueError("need at least four sample vectors to scan")
    if window < 2:
        raise ValueError("monitoring window must cover at least two sweeps")
    if max_sweeps < window:
        raise ValueError("sweep budget smaller than one monitoring window")

    sim = similarity(x, tie_break_seed)
    msg = zero_messages(sim.n)
    state = ScanState(
        preference=sim.preference,
        p_step=0.0,
        counter=0,
        k_history=deque(maxlen=window),
    )
    exemplar_sets: deque = deque(maxlen=window)

    for sweep in range(max_sweeps):
        ap_iterate(msg, sim)
        result = extract_exemplars(msg)
        state.trace.append(
            ScanRecord(sweep, sim.preference, msg.damping, result.k)
        )
        state.k_history.append(result.k)
        exemplar_sets.append(frozenset(int(e) for e in result.exemplars))

        converged = (
            len(exemplar_sets) == window and len(set(exemplar_sets)) == 1
        )
        if converged:
            state.counter += 1
            if result.k >= 2:
                _, avg = silhouette(x, result.labels)
                result.avg_silhouette = avg
                if state.best is None or avg > state.best.avg_silhouette:
                    state.best = result
            if result.k <= 2:
                break
            step_q = 0.1 * np.sqrt(result.k + 50.0)
            state.p_step = 0.01 * abs(sim.median_offdiag) / step_q
            state.preference = sim.preference - state.counter * state.p_step
            sim.set_preference(state.preference)
            exemplar_sets.clear()
            state.k_history.clear()
        elif (
            len(state.k_history) == window
            and _direction_changes(state.k_history) >= 3
        ):
            msg.damping = min(DAMPING_CAP, msg.damping + DAMPING_INCREMENT)
            exemplar_sets.clear()
            state.k_history.clear()

    if state.best is None:
        raise NoConvergenceError(
            "no stable clustering with two or more exemplars at any preference",
            state,
        )
    return state


def adap_run(
    dataset,
    window: int = 50,
    max_sweeps: int = 40000,
    tie_break_seed: int = 0,
) -> ClusterResult:
    """Best clustering found by the adaptive preference scan."""
    return adap_scan(dataset, window, max_sweeps, tie_break_seed).best


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def _check_baseline_inputs(dataset, k: int) -> np.ndarray:
    x = np.asarray(dataset, dtype=float)
    if x.ndim != 2:
        raise ValueError("dataset must be a 2-D array of sample vectors")
    if not 1 <= k <= x.shape[0]:
        raise ValueError("cluster count must lie in [1, n]")
    return x


def _sq_dist_to(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)


def _plusplus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(len(x))]
    for j in range(1, k):
        d2 = _sq_dist_to(x, centers[:j]).min(axis=1)
        total = d2.sum()
        if total == 0.0:
            centers[j] = x[rng.integers(len(x))]
            continue
        centers[j] = x[rng.choice(len(x), p=d2 / total)]
    return centers


def _lloyd(
    x: np.ndarray, centers: np.ndarray, max_iterations: int = 300
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Assignment/update sweeps from the given centers.

    Returns (labels, centers, inertia history).  A cluster left empty is
    re-seeded at the point farthest from its assigned centroid, so the
    centroid count never shrinks.
    """
    k = len(centers)
    centers = centers.copy()
    labels = np.full(len(x), -1, dtype=int)
    history: list[float] = []
    for _ in range(max_iterations):
        d2 = _sq_dist_to(x, centers)
        new_labels = d2.argmin(axis=1)
        for j in range(k):
            members = new_labels == j
            if members.any():
                centers[j] = x[members].mean(axis=0)
            else:
                farthest = d2[np.arange(len(x)), new_labels].argmax()
                centers[j] = x[farthest]
                new_labels[farthest] = j
        history.append(
            float(((x - centers[new_labels]) ** 2).sum())
        )
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return labels, centers, history


def kmeans(dataset, k: int, seed: int = 0, max_iterations: int = 300) -> ClusterResult:
    """Lloyd's algorithm with distance-weighted seeding, seed-deterministic."""
    x = _check_baseline_inputs(dataset, k)
    rng = np.random.default_rng(seed)
    labels, _, _ = _lloyd(x, _plusplus_seed(x, k, rng), max_iterations)
    return _finish_baseline(x, labels)


def _finish_baseline(x: np.ndarray, labels: np.ndarray) -> ClusterResult:
    ids, labels = np.unique(labels, return_inverse=True)
    k = len(ids)
    reps = _representatives(x, labels, k)
    if k >= 2:
        _, avg = silhouette(x, labels)
    else:
        avg = float("nan")
    return ClusterResult(labels=labels, exemplars=reps, k=k, avg_silhouette=avg)


def _fcm_alternate(
    x: np.ndarray,
    k: int,
    fuzzifier: float,
    rng: np.random.Generator,
    tol: float = 1e-6,
    max_iterations: int = 300,
) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Membership/centroid alternation; returns (memberships, centers, objective history)."""
    n = len(x)
    u = rng.random((n, k))
    u /= u.sum(axis=1, keepdims=True)
    history: list[float] = []
    centers = np.empty((k, x.shape[1]))
    for _ in range(max_iterations):
        um = u ** fuzzifier
        centers = (um.T @ x) / um.sum(axis=0)[:, None]
        d2 = _sq_dist_to(x, centers)
        history.append(float((um * d2).sum()))
        coincident = d2 <= 1e-300
        rows = coincident.any(axis=1)
        power = 1.0 / (fuzzifier - 1.0)
        u_new = np.zeros_like(d2)
        if not rows.all():
            # normalizing by the row minimum keeps the powers in (0, 1];
            # memberships are scale-invariant so the answer is unchanged
            good = d2[~rows]
            inv = (good / good.min(axis=1, keepdims=True)) ** -power
            u_new[~rows] = inv / inv.sum(axis=1, keepdims=True)
        if rows.any():
            u_new[rows] = coincident[rows] / coincident[rows].sum(axis=1, keepdims=True)
        if np.abs(u_new - u).max() < tol:
            u = u_new
            break
        u = u_new
    return u, centers, history


def fuzzy_cmeans(
    dataset, k: int, fuzzifier: float = 2.0, seed: int = 0
) -> ClusterResult:
    """Fuzzy c-means, hardened by maximum membership."""
    if fuzzifier <= 1.0:
        raise ValueError("fuzzifier must exceed 1")
    x = _check_baseline_inputs(dataset, k)
    rng = np.random.default_rng(seed)
    u, _, _ = _fcm_alternate(x, k, fuzzifier, rng)
    return _finish_baseline(x, u.argmax(axis=1))


def agglomerative(dataset, k: int) -> ClusterResult:
    """Bottom-up Ward merging cut at k clusters (scipy linkage underneath)."""
    x = _check_baseline_inputs(dataset, k)
    if k == len(x):
        labels = np.arange(len(x))
    else:
        merge_tree = linkage(x, method="ward")
        labels = fcluster(merge_tree, t=k, criterion="maxclust") - 1
    return _finish_baseline(x, labels)


# ---------------------------------------------------------------------------
# dispersion
# ---------------------------------------------------------------------------


def avg_cluster_sd(values_per_sample, labels) -> float:
    """Within-cluster population standard deviation, averaged over clusters.

    Every cluster counts equally regardless of size; singletons contribute
    zero spread.
    """
    values = np.asarray(values_per_sample, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if values.shape != labels.shape:
        raise ValueError("one value and one label per sample")
    ids = np.unique(labels)
    spreads = [float(np.std(values[labels == c])) for c in ids]
    return float(np.mean(spreads))
