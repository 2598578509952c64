"""Optimizer tests: dominance and sorting against naive oracles, crowding
arithmetic, tournament rules, convergence on toy problems, and the wiring
of the architecture search problem."""

import time

import numpy as np
import pytest

from batsort.nsga2 import (
    AllInfeasibleError,
    FULL_SEGMENT_COLUMNS,
    Individual,
    InfeasibleCandidateError,
    MooProblem,
    NsgaOptions,
    NsgaResult,
    cnn_search_problem,
    crowded_tournament,
    crowding_distance,
    decode_cnn_genes,
    dominates,
    evolve,
    non_dominated_sort,
    write_front_csv,
)
from batsort.regressor import CnnConfig


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def naive_dominates(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def naive_fronts(objectives):
    """Iterative peeling with the pairwise definition, O(n^2 k) per front."""
    remaining = list(range(len(objectives)))
    fronts = []
    while remaining:
        front = [
            i
            for i in remaining
            if not any(
                naive_dominates(objectives[j], objectives[i])
                for j in remaining
                if j != i
            )
        ]
        fronts.append(front)
        remaining = [i for i in remaining if i not in front]
    return fronts


def naive_crowding(objs):
    objs = np.asarray(objs, float)
    m, k = objs.shape
    if m <= 2:
        return np.full(m, np.inf)
    d = np.zeros(m)
    for j in range(k):
        order = np.argsort(objs[:, j], kind="stable")
        span = objs[order[-1], j] - objs[order[0], j]
        d[order[0]] = d[order[-1]] = np.inf
        if span > 0:
            for pos in range(1, m - 1):
                d[order[pos]] += (objs[order[pos + 1], j] - objs[order[pos - 1], j]) / span
    return d


def make_population(objectives):
    return [
        Individual(genes=np.array([float(i)]), objectives=np.asarray(o, float))
        for i, o in enumerate(objectives)
    ]


# ---------------------------------------------------------------------------
# dominance
# ---------------------------------------------------------------------------


class TestDominates:
    def test_basic_cases(self):
        assert dominates([1.0, 2.0], [1.0, 3.0])
        assert dominates([0.0, 0.0], [1.0, 1.0])
        assert not dominates([1.0, 2.0], [1.0, 2.0])
        assert not dominates([0.0, 3.0], [1.0, 2.0])
        assert not dominates([1.0, 3.0], [1.0, 2.0])

    def test_random_pairs_match_oracle(self, rng):
        for _ in range(300):
            k = int(rng.integers(1, 5))
            a = rng.integers(0, 4, k).astype(float)
            b = rng.integers(0, 4, k).astype(float)
            assert dominates(a, b) == naive_dominates(a, b)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            dominates([1.0], [1.0, 2.0])


class TestNonDominatedSort:
    def test_single_individual(self):
        pop = make_population([[1.0, 2.0]])
        assert non_dominated_sort(pop) == [[0]]
        assert pop[0].rank == 1

    def test_mutually_nondominated_is_one_front(self):
        pop = make_population([[float(i), float(9 - i)] for i in range(10)])
        fronts = non_dominated_sort(pop)
        assert fronts == [list(range(10))]

    def test_matches_naive_oracle(self, rng):
        for k in (2, 3):
            objs = rng.integers(0, 8, size=(50, k)).astype(float)
            pop = make_population(objs)
            fronts = [sorted(f) for f in non_dominated_sort(pop)]
            expected = [sorted(f) for f in naive_fronts(objs)]
            assert fronts == expected

    def test_partition_and_interfront_structure(self, rng):
        objs = rng.normal(size=(60, 2))
        pop = make_population(objs)
        fronts = non_dominated_sort(pop)
        flat = sorted(i for front in fronts for i in front)
        assert flat == list(range(60))
        for front in fronts:
            for i in front:
                for j in front:
                    assert not dominates(objs[i], objs[j])
        for r in range(1, len(fronts)):
            for i in fronts[r]:
                assert any(dominates(objs[j], objs[i]) for j in fronts[r - 1])

    def test_infeasible_form_last_front(self):
        pop = make_population([[0.0, 0.0], [1.0, 1.0]])
        pop.append(Individual(genes=np.zeros(1), feasible=False))
        fronts = non_dominated_sort(pop)
        assert fronts[-1] == [2]
        assert pop[2].rank == len(fronts)


class TestCrowdingDistance:
    def test_small_fronts_all_infinite(self):
        assert np.all(np.isinf(crowding_distance([[1.0, 2.0]])))
        assert np.all(np.isinf(crowding_distance([[1.0, 2.0], [2.0, 1.0]])))

    def test_single_objective_unit_interval(self):
        d = crowding_distance([[0.0], [0.5], [1.0]])
        assert np.isinf(d[0]) and np.isinf(d[2])
        assert d[1] == pytest.approx(1.0, abs=1e-12)

    def test_two_identical_objectives_double_the_distance(self):
        d = crowding_distance([[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]])
        assert d[1] == pytest.approx(2.0, abs=1e-12)

    def test_constant_objective_contributes_nothing(self):
        d = crowding_distance([[0.0, 5.0], [0.4, 5.0], [1.0, 5.0]])
        # same as the single-objective case: (1.0 - 0.0) / 1.0
        assert d[1] == pytest.approx(1.0, abs=1e-12)

    def test_matches_direct_oracle(self, rng):
        objs = rng.normal(size=(30, 3))
        assert np.allclose(
            crowding_distance(objs), naive_crowding(objs), rtol=0, atol=1e-12
        )

    def test_rejects_empty_or_flat_input(self):
        with pytest.raises(ValueError):
            crowding_distance(np.empty((0, 2)))
        with pytest.raises(ValueError):
            crowding_distance([1.0, 2.0])


class TestCrowdedTournament:
    @staticmethod
    def _ind(rank=1, crowding=0.0, feasible=True):
        return Individual(
            genes=np.zeros(1),
            objectives=np.zeros(2) if feasible else None,
            rank=rank,
            crowding=crowding,
            feasible=feasible,
        )

    def test_lower_rank_wins(self, rng):
        a, b = self._ind(rank=1), self._ind(rank=2, crowding=99.0)
        assert crowded_tournament(a, b, rng) is a
        assert crowded_tournament(b, a, rng) is a

    def test_equal_rank_larger_crowding_wins(self, rng):
        a, b = self._ind(crowding=0.5), self._ind(crowding=2.0)
        assert crowded_tournament(a, b, rng) is b

    def test_feasible_beats_infeasible(self, rng):
        a, b = self._ind(rank=5), self._ind(feasible=False)
        assert crowded_tournament(a, b, rng) is a

    def test_unranked_raises(self, rng):
        a, b = self._ind(), self._ind()
        b.rank = None
        with pytest.raises(ValueError, match="unranked"):
            crowded_tournament(a, b, rng)

    def test_full_tie_is_a_fair_coin(self):
        rng = np.random.default_rng(5)
        a, b = self._ind(crowding=1.0), self._ind(crowding=1.0)
        wins = sum(crowded_tournament(a, b, rng) is a for _ in range(10_000))
        assert 4700 < wins < 5300


class TestOptions:
    def test_defaults(self):
        opts = NsgaOptions()
        assert opts.population == 200
        assert opts.generations == 20
        assert opts.crossover_fraction == 0.8
        assert opts.pareto_fraction == 0.2

    def test_odd_population_rejected(self):
        with pytest.raises(ValueError, match="even"):
            NsgaOptions(population=21)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            NsgaOptions(crossover_fraction=1.0)
        with pytest.raises(ValueError):
            NsgaOptions(pareto_fraction=0.0)
        with pytest.raises(ValueError):
            NsgaOptions(mutation_rate=0.0)


# ---------------------------------------------------------------------------
# evolve on analytic problems
# ---------------------------------------------------------------------------


def quadratic_problem():
    return MooProblem(
        bounds=((0.0, 10.0),),
        n_objectives=1,
        decode=lambda genes: float(genes[0]),
        evaluate=lambda x, seed: np.array([(x - 3.0) ** 2]),
    )


def toy_biobjective():
    return MooProblem(
        bounds=((-1.0, 3.0),),
        n_objectives=2,
        decode=lambda genes: float(genes[0]),
        evaluate=lambda x, seed: np.array([x**2, (x - 2.0) ** 2]),
    )


class TestEvolve:
    def test_single_objective_minimum(self):
        result = evolve(quadratic_problem(), NsgaOptions(population=20, seed=3))
        best = min(result.front, key=lambda ind: ind.objectives[0])
        assert abs(float(best.genes[0]) - 3.0) < 1e-2

    def test_toy_front_covers_tradeoff_interval(self):
        started = time.perf_counter()
        result = evolve(
            toy_biobjective(),
            NsgaOptions(population=200, generations=40, seed=7),
        )
        elapsed = time.perf_counter() - started
        genes = np.sort([float(ind.genes[0]) for ind in result.front])
        assert genes[0] < 0.1 and genes[-1] > 1.9
        gaps = np.diff(np.concatenate([[0.0], np.clip(genes, 0.0, 2.0), [2.0]]))
        assert gaps.max() < 0.2
        assert elapsed < 10.0

    def test_front_is_mutually_nondominated(self):
        result = evolve(
            toy_biobjective(), NsgaOptions(population=40, generations=10, seed=1)
        )
        for a in result.front:
            for b in result.front:
                assert not dominates(a.objectives, b.objectives)

    def test_elitism_never_regresses_objective_minima(self):
        result = evolve(
            toy_biobjective(), NsgaOptions(population=40, generations=25, seed=11)
        )
        history = result.history_min
        assert history.shape == (26, 2)
        assert np.all(np.diff(history, axis=0) <= 1e-12)

    def test_reproducible_for_fixed_seed(self):
        opts = NsgaOptions(population=24, generations=6, seed=42)
        first = evolve(toy_biobjective(), opts)
        second = evolve(toy_biobjective(), opts)
        for a, b in zip(first.population, second.population):
            assert np.array_equal(a.genes, b.genes)
            assert np.array_equal(a.objectives, b.objectives)
        third = evolve(toy_biobjective(), NsgaOptions(population=24, generations=6, seed=43))
        assert any(
            not np.array_equal(a.genes, b.genes)
            for a, b in zip(first.population, third.population)
        )

    def test_population_size_is_preserved(self):
        result = evolve(
            toy_biobjective(), NsgaOptions(population=30, generations=4, seed=2)
        )
        assert len(result.population) == 30

    def test_all_infeasible_initialisation_reports_diagnostics(self):
        def always_fails(candidate, seed):
            raise InfeasibleCandidateError("synthetic failure")

        problem = MooProblem(
            bounds=((0.0, 1.0),),
            n_objectives=1,
            decode=lambda genes: genes,
            evaluate=always_fails,
        )
        with pytest.raises(AllInfeasibleError, match="synthetic failure"):
            evolve(problem, NsgaOptions(population=10, generations=2, seed=0))

    def test_invalid_bounds_rejected(self):
        problem = MooProblem(
            bounds=((1.0, 1.0),),
            n_objectives=1,
            decode=lambda g: g,
            evaluate=lambda c, s: np.zeros(1),
        )
        with pytest.raises(ValueError, match="bound"):
            evolve(problem, NsgaOptions(population=10))

    def test_front_csv_round_trip(self, tmp_path):
        result = evolve(
            toy_biobjective(), NsgaOptions(population=20, generations=5, seed=9)
        )
        path = tmp_path / "front.csv"
        write_front_csv(path, result, toy_biobjective())
        lines = path.read_text().strip().splitlines()
        header = lines[0].split(",")
        assert header[:3] == ["gene_0", "objective_1", "objective_2"]
        assert len(lines) == len(result.front) + 1


# ---------------------------------------------------------------------------
# the architecture search problem
# ---------------------------------------------------------------------------


def _gene_vector(**overrides):
    base = {
        "conv_blocks": 2.0,
        "filter_count": 13.0,
        "filter_size": 26.0,
        "pool_size": 3.0,
        "pool_stride": 1.0,
        "dense_layers": 1.0,
        "dense_neurons": 45.0,
        "learning_rate": 1e-3,
        "va": 3.60,
        "vb": 3.90,
    }
    base.update(overrides)
    return np.array(list(base.values()), dtype=float)


class TestDecode:
    def test_reference_genes_decode_exactly(self):
        config = decode_cnn_genes(_gene_vector())
        assert config == CnnConfig()

    def test_window_pair_is_sorted(self):
        config = decode_cnn_genes(_gene_vector(va=3.95, vb=3.55))
        assert (config.v1, config.v2) == (3.55, 3.95)

    def test_window_snaps_to_millivolts(self):
        config = decode_cnn_genes(_gene_vector(va=3.65049, vb=3.7004))
        assert (config.v1, config.v2) == (3.650, 3.700)
        assert config.input_length == 51

    def test_snap_collision_bumps_apart(self):
        config = decode_cnn_genes(_gene_vector(va=3.7641, vb=3.7644))
        assert (config.v1, config.v2) == (3.764, 3.765)
        config = decode_cnn_genes(_gene_vector(va=3.9996, vb=3.9999))
        assert (config.v1, config.v2) == (3.999, 4.000)

    def test_integer_genes_round_and_clip(self):
        config = decode_cnn_genes(
            _gene_vector(conv_blocks=4.6, filter_count=127.9, dense_neurons=8.2)
        )
        assert config.conv_blocks == 5
        assert config.filter_count == 128
        assert config.dense_neurons == 8

    def test_wrong_gene_count_rejected(self):
        with pytest.raises(ValueError, match="genes"):
            decode_cnn_genes(np.zeros(4))


def _search_dataset(rng, n=16):
    """Smooth per-sample curves plus targets readable from the inputs."""
    grid = np.linspace(0.0, 1.0, FULL_SEGMENT_COLUMNS)
    amplitude = rng.uniform(0.5, 2.0, size=(n, 1))
    center = rng.uniform(0.3, 0.7, size=(n, 1))
    inputs = amplitude * np.exp(-(((grid - center) / 0.15) ** 2)) + 0.2
    anchors = np.linspace(20, FULL_SEGMENT_COLUMNS - 21, 15).astype(int)
    targets = inputs[:, anchors] * 3.0 + 1.0
    return inputs, targets


class TestSearchProblem:
    def test_input_shape_validated(self, rng):
        with pytest.raises(ValueError, match="501"):
            cnn_search_problem(np.zeros((12, 100)), np.zeros((12, 15)))
        with pytest.raises(ValueError, match="10 samples"):
            cnn_search_problem(np.zeros((4, 501)), np.zeros((4, 15)))

    def test_objectives_are_sse_and_width(self, rng):
        inputs, targets = _search_dataset(rng)
        problem = cnn_search_problem(
            inputs, targets, reduced_epochs=3, reduced_patience=2
        )
        config = CnnConfig(
            conv_blocks=1, filter_count=4, filter_size=5, pool_size=2,
            dense_layers=1, dense_neurons=8, v1=3.6, v2=3.7,
        )
        objectives = problem.evaluate(config, seed=0)
        assert objectives.shape == (2,)
        assert objectives[0] > 0.0
        assert objectives[1] == pytest.approx(0.1)

    def test_evaluation_is_seed_deterministic(self, rng):
        inputs, targets = _search_dataset(rng)
        problem = cnn_search_problem(
            inputs, targets, reduced_epochs=3, reduced_patience=2
        )
        config = CnnConfig(
            conv_blocks=1, filter_count=4, filter_size=5, pool_size=2,
            dense_layers=1, dense_neurons=8, v1=3.6, v2=3.7,
        )
        first = problem.evaluate(config, seed=7)
        second = problem.evaluate(config, seed=7)
        assert np.array_equal(first, second)

    def test_unbuildable_architecture_is_infeasible(self, rng):
        inputs, targets = _search_dataset(rng)
        problem = cnn_search_problem(inputs, targets, reduced_epochs=2)
        config = decode_cnn_genes(
            _gene_vector(conv_blocks=5.0, filter_size=32.0, va=3.5, vb=3.51)
        )
        with pytest.raises(InfeasibleCandidateError):
            problem.evaluate(config, seed=0)

    def test_tiny_search_end_to_end(self, rng, tmp_path):
        inputs, targets = _search_dataset(rng)
        full = cnn_search_problem(
            inputs, targets, reduced_epochs=2, reduced_patience=2, batch_size=16
        )
        # same decode and evaluator, gene ranges narrowed to small networks
        # so the end-to-end test stays quick
        small_bounds = (
            (1.0, 2.0), (1.0, 6.0), (2.0, 6.0), (2.0, 3.0), (1.0, 2.0),
            (1.0, 2.0), (8.0, 12.0), (2e-4, 1e-2), (3.5, 4.0), (3.5, 4.0),
        )
        problem = MooProblem(
            bounds=small_bounds,
            n_objectives=2,
            decode=full.decode,
            evaluate=full.evaluate,
        )
        result = evolve(problem, NsgaOptions(population=8, generations=2, seed=1))
        assert isinstance(result, NsgaResult)
        assert len(result.front) >= 1
        path = tmp_path / "pareto.csv"
        write_front_csv(path, result, problem)
        header = path.read_text().splitlines()[0]
        assert "filter_count" in header and "objective_2" in header

    def test_wider_window_does_not_hurt_fit_on_average(self, rng):
        inputs, targets = _search_dataset(rng, n=20)
        problem = cnn_search_problem(
            inputs, targets, reduced_epochs=25, reduced_patience=25, batch_size=20
        )
        common = dict(
            conv_blocks=1, filter_count=4, filter_size=5,
            pool_size=2, pool_stride=2, dense_layers=1, dense_neurons=16,
        )
        narrow = CnnConfig(v1=3.80, v2=3.85, **common)
        wide = CnnConfig(v1=3.50, v2=4.00, **common)
        narrow_sse = np.mean([problem.evaluate(narrow, s)[0] for s in (0, 1, 2)])
        wide_sse = np.mean([problem.evaluate(wide, s)[0] for s in (0, 1, 2)])
        assert wide_sse <= narrow_sse
