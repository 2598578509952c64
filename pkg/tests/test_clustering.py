"""Clustering tests.

Oracles: a naive loop-by-loop reimplementation of the message updates, a
direct-formula silhouette, exhaustive small-case partition searches for the
centroid baselines, and a hand-rolled Ward merge for the hierarchy.  The
adaptive scan is exercised end to end on constructed blob data.
"""

import numpy as np
import pytest

from batsort import clustering as cl
from batsort.errors import NumericalFailure


@pytest.fixture(scope="module")
def blobs():
    rng = np.random.default_rng(3)
    return np.concatenate([
        rng.normal((0.0, 0.0, 0.0), 0.3, (30, 3)),
        rng.normal((10.0, 0.0, 0.0), 0.3, (30, 3)),
        rng.normal((0.0, 12.0, 5.0), 0.3, (30, 3)),
    ])


@pytest.fixture(scope="module")
def blob_scan(blobs):
    return cl.adap_scan(blobs)


TIGHT_PAIRS = np.array([
    [0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0],
])


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def test_similarity_identical_points_score_zero():
    sim = cl.similarity(np.zeros((3, 4)))
    off = sim.s[~np.eye(3, dtype=bool)]
    assert np.abs(off).max() < 1e-10


def test_similarity_closed_form_pair():
    sim = cl.similarity(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 2.0]]))
    assert sim.s[0, 1] == pytest.approx(-9.0, abs=1e-9)
    assert sim.s[1, 0] == pytest.approx(-9.0, abs=1e-9)


def test_similarity_formula_on_random_data(rng):
    x = rng.normal(0.0, 5.0, (12, 3))
    sim = cl.similarity(x)
    for i in range(12):
        for j in range(12):
            if i == j:
                continue
            want = -float(((x[i] - x[j]) ** 2).sum())
            assert sim.s[i, j] == pytest.approx(want, abs=1e-6)
            assert sim.s[i, j] == sim.s[j, i]
            assert sim.s[i, j] <= 0.0


def test_similarity_diagonal_is_median(rng):
    x = rng.normal(0.0, 2.0, (9, 2))
    sim = cl.similarity(x)
    off = []
    for i in range(9):
        for j in range(9):
            if i != j:
                off.append(-float(((x[i] - x[j]) ** 2).sum()))
    assert sim.preference == pytest.approx(np.median(off), abs=1e-9)
    assert np.all(np.diag(sim.s) == sim.preference)


def test_similarity_input_validation():
    with pytest.raises(ValueError):
        cl.similarity(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        cl.similarity(np.zeros(5))
    with pytest.raises(ValueError):
        cl.similarity([[0.0, np.inf], [1.0, 2.0]])


def test_set_preference_rewrites_diagonal(rng):
    sim = cl.similarity(rng.normal(0.0, 1.0, (5, 2)))
    sim.set_preference(-42.0)
    assert np.all(np.diag(sim.s) == -42.0)
    assert sim.preference == -42.0


# ---------------------------------------------------------------------------
# message passing vs a naive oracle
# ---------------------------------------------------------------------------


def naive_sweep(s, r_prev, a_prev, damping):
    """Loop-by-loop rewrite of the update rules, no vectorization tricks."""
    n = len(s)
    r_raw = np.empty_like(s)
    a_raw = np.empty_like(s)
    for i in range(n):
        for j in range(n):
            best = max(a_prev[i, jj] + s[i, jj] for jj in range(n) if jj != j)
            r_raw[i, j] = s[i, j] - best
    for j in range(n):
        a_raw[j, j] = sum(max(0.0, r_raw[ii, j]) for ii in range(n) if ii != j)
        for i in range(n):
            if i == j:
                continue
            pool = sum(
                max(0.0, r_raw[ii, j]) for ii in range(n) if ii not in (i, j)
            )
            a_raw[i, j] = min(0.0, r_raw[j, j] + pool)
    return (
        (1.0 - damping) * r_raw + damping * r_prev,
        (1.0 - damping) * a_raw + damping * a_prev,
    )


def test_ap_iterate_matches_naive_oracle(rng):
    x = rng.normal(0.0, 1.0, (5, 3))
    sim = cl.similarity(x)
    state = cl.zero_messages(5)
    r_ref = np.zeros((5, 5))
    a_ref = np.zeros((5, 5))
    for _ in range(100):
        cl.ap_iterate(state, sim)
        r_ref, a_ref = naive_sweep(sim.s, r_ref, a_ref, 0.5)
        np.testing.assert_allclose(state.r, r_ref, atol=1e-12)
        np.testing.assert_allclose(state.a, a_ref, atol=1e-12)


def test_ap_iterate_oracle_holds_for_larger_n(rng):
    x = rng.normal(0.0, 3.0, (10, 2))
    sim = cl.similarity(x)
    state = cl.zero_messages(10)
    r_ref = np.zeros((10, 10))
    a_ref = np.zeros((10, 10))
    for _ in range(100):
        cl.ap_iterate(state, sim)
        r_ref, a_ref = naive_sweep(sim.s, r_ref, a_ref, 0.5)
    np.testing.assert_allclose(state.r, r_ref, atol=1e-12)
    np.testing.assert_allclose(state.a, a_ref, atol=1e-12)


def test_first_sweep_from_zero_messages(rng):
    x = rng.normal(0.0, 1.0, (6, 2))
    sim = cl.similarity(x)
    state = cl.zero_messages(6, damping=0.5)
    cl.ap_iterate(state, sim)
    s = sim.s
    for i in range(6):
        for j in range(6):
            best = max(s[i, jj] for jj in range(6) if jj != j)
            assert state.r[i, j] == pytest.approx(0.5 * (s[i, j] - best), abs=1e-12)


def test_full_damping_freezes_messages(rng):
    x = rng.normal(0.0, 1.0, (5, 2))
    sim = cl.similarity(x)
    state = cl.zero_messages(5, damping=1.0)
    before_r = state.r.copy()
    before_a = state.a.copy()
    cl.ap_iterate(state, sim)
    np.testing.assert_array_equal(state.r, before_r)
    np.testing.assert_array_equal(state.a, before_a)


def test_ap_iterate_rejects_shape_mismatch(rng):
    sim = cl.similarity(rng.normal(0.0, 1.0, (5, 2)))
    with pytest.raises(ValueError):
        cl.ap_iterate(cl.zero_messages(4), sim)


def test_ap_iterate_flags_non_finite_messages(rng):
    sim = cl.similarity(rng.normal(0.0, 1.0, (5, 2)))
    state = cl.zero_messages(5)
    state.a[0, 0] = np.nan
    with pytest.raises(NumericalFailure):
        cl.ap_iterate(state, sim)


# ---------------------------------------------------------------------------
# exemplar extraction
# ---------------------------------------------------------------------------


def run_messages(sim, sweeps, damping=cl.DAMPING_INITIAL):
    state = cl.zero_messages(sim.n, damping=damping)
    for _ in range(sweeps):
        cl.ap_iterate(state, sim)
    return state


def test_huge_preference_makes_everyone_an_exemplar(rng):
    sim = cl.similarity(rng.normal(0.0, 1.0, (7, 3)))
    sim.set_preference(10.0)
    result = cl.extract_exemplars(run_messages(sim, 30))
    assert result.k == 7
    np.testing.assert_array_equal(np.sort(result.exemplars), np.arange(7))


def test_low_preference_collapses_the_partition():
    sim = cl.similarity(TIGHT_PAIRS)
    sim.set_preference(-5000.0)
    result = cl.extract_exemplars(run_messages(sim, 400))
    assert result.k == 1


def test_two_tight_pairs_split_cleanly():
    sim = cl.similarity(TIGHT_PAIRS)
    result = cl.extract_exemplars(run_messages(sim, 200))
    assert result.k == 2
    assert result.labels[0] == result.labels[1]
    assert result.labels[2] == result.labels[3]
    assert result.labels[0] != result.labels[2]


def test_exemplars_are_fixed_points(blob_scan):
    result = blob_scan.best
    assert sorted(set(result.labels)) == list(range(result.k))
    for rank, exemplar in enumerate(result.exemplars):
        assert result.labels[exemplar] == rank


# ---------------------------------------------------------------------------
# silhouette
# ---------------------------------------------------------------------------


def silhouette_oracle(x, labels):
    """Direct formula, one sample at a time."""
    n = len(x)
    dist = np.sqrt(((x[:, None, :] - x[None, :, :]) ** 2).sum(axis=2))
    out = np.zeros(n)
    for t in range(n):
        own = [i for i in range(n) if labels[i] == labels[t] and i != t]
        if not own:
            continue
        a = np.mean([dist[t, i] for i in own])
        b = min(
            np.mean([dist[t, i] for i in range(n) if labels[i] == other])
            for other in set(labels)
            if other != labels[t]
        )
        out[t] = (b - a) / max(a, b)
    return out


def test_silhouette_matches_direct_formula(rng):
    x = rng.normal(0.0, 2.0, (20, 3))
    for _ in range(5):
        labels = rng.integers(0, 3, 20)
        if len(set(labels.tolist())) < 2:
            continue
        values, avg = cl.silhouette(x, labels)
        want = silhouette_oracle(x, labels)
        np.testing.assert_allclose(values, want, atol=1e-12)
        assert avg == pytest.approx(want.mean(), abs=1e-12)
        assert np.all(values >= -1.0) and np.all(values <= 1.0)


def test_silhouette_far_apart_clusters_approach_one():
    x = np.concatenate([
        np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1]]),
        np.array([[100.0, 100.0], [100.1, 100.0], [100.0, 100.1]]),
    ])
    _, avg = cl.silhouette(x, [0, 0, 0, 1, 1, 1])
    assert avg > 0.97


def test_silhouette_singleton_scores_zero():
    x = np.array([[0.0], [5.0], [5.1], [5.2]])
    values, _ = cl.silhouette(x, [0, 1, 1, 1])
    assert values[0] == 0.0
    assert np.all(values[1:] > 0.0)


def test_silhouette_is_label_permutation_invariant(rng):
    x = rng.normal(0.0, 1.0, (15, 2))
    labels = rng.integers(0, 3, 15)
    labels[:3] = [0, 1, 2]
    base, base_avg = cl.silhouette(x, labels)
    swapped = np.array([{0: 2, 1: 0, 2: 1}[int(c)] for c in labels])
    perm, perm_avg = cl.silhouette(x, swapped)
    np.testing.assert_allclose(perm, base, atol=1e-15)
    assert perm_avg == base_avg


def test_silhouette_rejects_single_cluster():
    with pytest.raises(ValueError):
        cl.silhouette(np.zeros((4, 2)), [0, 0, 0, 0])


# ---------------------------------------------------------------------------
# the adaptive scan
# ---------------------------------------------------------------------------


def test_scan_finds_the_three_blobs(blobs, blob_scan):
    best = blob_scan.best
    assert best.k == 3
    assert best.avg_silhouette > 0.6
    truth = np.repeat([0, 1, 2], 30)
    for group in range(3):
        assert len(set(best.labels[truth == group].tolist())) == 1


def test_scan_terminates_at_two_exemplars(blob_scan):
    assert blob_scan.trace[-1].k == 2
    assert len(blob_scan.trace) < 40000


def test_scan_preference_strictly_decreases(blob_scan):
    levels = []
    for record in blob_scan.trace:
        if not levels or record.preference != levels[-1]:
            levels.append(record.preference)
    assert all(b < a for a, b in zip(levels, levels[1:]))


def test_scan_damping_ratchets_upward(blob_scan):
    damping = [record.damping for record in blob_scan.trace]
    assert all(b >= a for a, b in zip(damping, damping[1:]))
    assert damping[0] == cl.DAMPING_INITIAL
    assert max(damping) <= cl.DAMPING_CAP


def test_scan_trace_is_per_sweep(blob_scan):
    iterations = [record.iteration for record in blob_scan.trace]
    assert iterations == list(range(len(iterations)))
    assert all(record.k >= 1 for record in blob_scan.trace)


def test_adap_run_returns_the_best_result(blobs, blob_scan):
    result = cl.adap_run(blobs)
    assert result.k == blob_scan.best.k
    assert result.avg_silhouette == blob_scan.best.avg_silhouette


def test_scan_without_any_stable_window_raises(blobs):
    # the exemplar set always shifts during the opening transient, so a
    # budget of exactly one window can never see a stable one
    with pytest.raises(cl.NoConvergenceError) as info:
        cl.adap_scan(blobs, window=200, max_sweeps=200)
    assert len(info.value.state.trace) == 200


def test_scan_input_validation(blobs):
    with pytest.raises(ValueError):
        cl.adap_scan(blobs[:3])
    with pytest.raises(ValueError):
        cl.adap_scan(blobs, window=1)
    with pytest.raises(ValueError):
        cl.adap_scan(blobs, window=50, max_sweeps=49)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


def exhaustive_two_cluster_sse(x):
    """Best within-cluster squared error over every 2-partition."""
    n = len(x)
    best = (np.inf, None)
    for mask in range(1, 2 ** (n - 1)):
        sel = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        sse = 0.0
        for part in (x[sel], x[~sel]):
            sse += float(((part - part.mean(axis=0)) ** 2).sum())
        if sse < best[0]:
            best = (sse, sel)
    return best


def test_kmeans_every_point_its_own_cluster(rng):
    x = rng.normal(0.0, 1.0, (6, 2))
    result = cl.kmeans(x, 6, seed=1)
    assert result.k == 6
    assert sorted(result.labels.tolist()) == list(range(6))
    assert result.avg_silhouette == 0.0


def test_kmeans_recovers_the_optimal_two_split(rng):
    x = np.concatenate([
        rng.normal((0.0, 0.0), 0.4, (5, 2)),
        rng.normal((6.0, 1.0), 0.4, (5, 2)),
    ])
    _, optimal = exhaustive_two_cluster_sse(x)
    result = cl.kmeans(x, 2, seed=0)
    got = result.labels == result.labels[0]
    assert np.array_equal(got, optimal) or np.array_equal(got, ~optimal)


def test_kmeans_inertia_never_increases(rng):
    x = rng.normal(0.0, 2.0, (40, 3))
    centers = x[rng.choice(40, size=4, replace=False)]
    _, _, history = cl._lloyd(x, centers)
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_kmeans_reseeds_an_emptied_cluster(rng):
    x = np.concatenate([
        rng.normal((0.0, 0.0), 0.2, (8, 2)),
        rng.normal((5.0, 0.0), 0.2, (8, 2)),
    ])
    # the third center starts so far away that nothing is assigned to it
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [1e6, 1e6]])
    labels, _, _ = cl._lloyd(x, centers)
    assert sorted(set(labels.tolist())) == [0, 1, 2]


def test_kmeans_is_seed_deterministic(rng):
    x = rng.normal(0.0, 1.0, (25, 3))
    first = cl.kmeans(x, 4, seed=9)
    second = cl.kmeans(x, 4, seed=9)
    np.testing.assert_array_equal(first.labels, second.labels)


def test_kmeans_rejects_bad_k(rng):
    x = rng.normal(0.0, 1.0, (5, 2))
    with pytest.raises(ValueError):
        cl.kmeans(x, 0)
    with pytest.raises(ValueError):
        cl.kmeans(x, 6)


# ---------------------------------------------------------------------------
# fuzzy c-means
# ---------------------------------------------------------------------------


def test_fcm_memberships_are_a_partition_of_unity(rng):
    x = rng.normal(0.0, 2.0, (18, 2))
    u, _, _ = cl._fcm_alternate(x, 3, 2.0, np.random.default_rng(4))
    np.testing.assert_allclose(u.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(u >= 0.0)


def test_fcm_agrees_with_kmeans_on_two_blobs(rng):
    x = np.concatenate([
        rng.normal((0.0, 0.0), 0.2, (10, 2)),
        rng.normal((5.0, 5.0), 0.2, (10, 2)),
    ])
    hard = cl.kmeans(x, 2, seed=1)
    soft = cl.fuzzy_cmeans(x, 2, seed=1)
    assert len(set(zip(hard.labels.tolist(), soft.labels.tolist()))) == 2


def test_fcm_objective_never_increases(rng):
    x = rng.normal(0.0, 2.0, (30, 3))
    _, _, history = cl._fcm_alternate(x, 4, 2.0, np.random.default_rng(8))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_fcm_handles_coincident_points():
    result = cl.fuzzy_cmeans(np.ones((4, 2)), 2, seed=3)
    assert result.k == 1
    u, _, _ = cl._fcm_alternate(np.ones((4, 2)), 2, 2.0, np.random.default_rng(3))
    assert np.all(np.isfinite(u))
    np.testing.assert_allclose(u.sum(axis=1), 1.0, atol=1e-12)


def test_fcm_rejects_bad_fuzzifier(rng):
    with pytest.raises(ValueError):
        cl.fuzzy_cmeans(rng.normal(0.0, 1.0, (6, 2)), 2, fuzzifier=1.0)


# ---------------------------------------------------------------------------
# agglomerative
# ---------------------------------------------------------------------------


def ward_merge_oracle(x, k):
    """Greedy bottom-up merging on the Ward criterion, sets of indices."""
    clusters = [[i] for i in range(len(x))]
    while len(clusters) > k:
        best = (np.inf, None)
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                pa, pb = x[clusters[a]], x[clusters[b]]
                gap = pa.mean(axis=0) - pb.mean(axis=0)
                cost = len(pa) * len(pb) / (len(pa) + len(pb)) * float(gap @ gap)
                if cost < best[0]:
                    best = (cost, (a, b))
        a, b = best[1]
        clusters[a] = clusters[a] + clusters[b]
        del clusters[b]
    return {frozenset(c) for c in clusters}


HAND_SIX = np.array([
    [0.0, 0.0], [0.3, 0.1], [4.0, 4.0], [4.2, 3.9], [9.0, 0.5], [9.1, 0.4],
])


@pytest.mark.parametrize("k", [2, 3])
def test_agglomerative_matches_merge_oracle(k):
    result = cl.agglomerative(HAND_SIX, k)
    got = {
        frozenset(np.flatnonzero(result.labels == j).tolist())
        for j in range(result.k)
    }
    assert got == ward_merge_oracle(HAND_SIX, k)


def test_agglomerative_extremes(rng):
    x = rng.normal(0.0, 1.0, (5, 2))
    singletons = cl.agglomerative(x, 5)
    assert singletons.k == 5
    merged = cl.agglomerative(x, 1)
    assert merged.k == 1
    assert np.all(merged.labels == 0)


# ---------------------------------------------------------------------------
# dispersion
# ---------------------------------------------------------------------------


def test_avg_sd_identical_values_is_zero():
    assert cl.avg_cluster_sd([7.0] * 6, [0, 0, 1, 1, 2, 2]) == 0.0


def test_avg_sd_hand_case():
    assert cl.avg_cluster_sd([1.0, 3.0, 10.0, 10.0], [0, 0, 1, 1]) == 0.5


def test_avg_sd_matches_literal_loop(rng):
    values = rng.normal(0.0, 5.0, 30)
    labels = rng.integers(0, 4, 30)
    labels[:4] = [0, 1, 2, 3]
    got = cl.avg_cluster_sd(values, labels)
    spreads = []
    for c in sorted(set(labels.tolist())):
        member = values[labels == c]
        spreads.append(np.sqrt(((member - member.mean()) ** 2).mean()))
    assert got == pytest.approx(np.mean(spreads), abs=1e-12)


def test_avg_sd_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        cl.avg_cluster_sd([1.0, 2.0], [0, 0, 1])
