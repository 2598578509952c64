"""Elitist multi-objective genetic optimizer.

Non-dominated sorting into ranked fronts, crowding-distance diversity,
crowded binary tournaments, simulated-binary crossover, and bounded
polynomial mutation.  Candidates that fail to decode or evaluate are kept
as infeasible individuals that rank below every feasible one, which keeps
the search inside buildable configurations without hard rejection.

The module is generic over a MooProblem; cnn_search_problem() wires it to
the joint architecture-and-input-window search for the IC regressor.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field, fields as dataclass_fields, is_dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import BatsortError, NumericalFailure
from .regressor import (
    CnnConfig,
    ShapeInfeasibleError,
    TrainingDivergedError,
    build_network,
    predict,
    train,
)


class InfeasibleCandidateError(BatsortError):
    """Raised by problem decode/evaluate to mark a candidate infeasible."""


class AllInfeasibleError(NumericalFailure):
    """Every individual of the initial population failed to evaluate."""


@dataclass
class Individual:
    genes: np.ndarray
    objectives: np.ndarray | None = None
    rank: int | None = None
    crowding: float = 0.0
    feasible: bool = True
    note: str = ""


@dataclass(frozen=True)
class MooProblem:
    """Bounds, decoder, and a seeded pure evaluator.

    evaluate(candidate, seed) returns the k objective costs and must be
    deterministic for a fixed seed; it raises InfeasibleCandidateError for
    candidates that cannot be scored.
    """

    bounds: tuple
    n_objectives: int
    decode: Callable
    evaluate: Callable


@dataclass(frozen=True)
class NsgaOptions:
    population: int = 200
    generations: int = 20
    crossover_fraction: float = 0.8
    pareto_fraction: float = 0.2
    crossover_eta: float = 15.0
    mutation_eta: float = 20.0
    mutation_rate: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.population < 4 or self.population % 2 != 0:
            raise ValueError("population must be even and at least 4")
        if self.generations < 1:
            raise ValueError("generations must be positive")
        for name in ("crossover_fraction", "pareto_fraction"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.mutation_rate is not None and not 0.0 < self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in (0, 1]")


# ---------------------------------------------------------------------------
# core comparisons
# ---------------------------------------------------------------------------


def dominates(a, b) -> bool:
    """Minimization dominance: a no worse everywhere, better somewhere."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"objective length mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def non_dominated_sort(population) -> list:
    """Indices grouped into fronts; infeasible individuals form the last front.

    Also writes 1-based ranks onto the individuals.
    """
    feasible = [i for i, ind in enumerate(population) if ind.feasible]
    infeasible = [i for i, ind in enumerate(population) if not ind.feasible]
    fronts: list[list[int]] = []
    if feasible:
        objs = np.array([population[i].objectives for i in feasible], dtype=float)
        less_eq = (objs[:, None, :] <= objs[None, :, :]).all(axis=-1)
        strictly = (objs[:, None, :] < objs[None, :, :]).any(axis=-1)
        dom = less_eq & strictly  # dom[i, j]: i dominates j
        n_dominators = dom.sum(axis=0)
        assigned = np.zeros(len(feasible), dtype=bool)
        while not assigned.all():
            current = np.flatnonzero((n_dominators == 0) & ~assigned)
            fronts.append([feasible[i] for i in current])
            assigned[current] = True
            n_dominators = n_dominators - dom[current].sum(axis=0)
    if infeasible:
        fronts.append(infeasible)
    for rank, front in enumerate(fronts, start=1):
        for i in front:
            population[i].rank = rank
    return fronts


def crowding_distance(front_objectives) -> np.ndarray:
    """Per-individual crowding over one front; boundaries get +infinity."""
    objs = np.asarray(front_objectives, dtype=float)
    if objs.ndim != 2 or len(objs) == 0:
        raise ValueError("need a non-empty (m, k) objectives array")
    m = len(objs)
    if m <= 2:
        return np.full(m, np.inf)
    distance = np.zeros(m)
    for j in range(objs.shape[1]):
        order = np.argsort(objs[:, j], kind="stable")
        span = objs[order[-1], j] - objs[order[0], j]
        distance[order[0]] = np.inf
        distance[order[-1]] = np.inf
        if span > 0.0:
            distance[order[1:-1]] += (objs[order[2:], j] - objs[order[:-2], j]) / span
    return distance


def crowded_tournament(a: Individual, b: Individual, rng) -> Individual:
    """Feasibility first, then rank, then crowding, then a coin flip."""
    if a.feasible != b.feasible:
        return a if a.feasible else b
    if a.rank is None or b.rank is None:
        raise ValueError("tournament on unranked individuals")
    if a.rank != b.rank:
        return a if a.rank < b.rank else b
    if a.crowding != b.crowding:
        return a if a.crowding > b.crowding else b
    return a if rng.random() < 0.5 else b


# ---------------------------------------------------------------------------
# variation operators
# ---------------------------------------------------------------------------


def _sbx_pair(p1, p2, bounds, eta, rng):
    u = rng.random(len(p1))
    beta = np.where(
        u <= 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)),
        (1.0 / (2.0 * (1.0 - u))) ** (1.0 / (eta + 1.0)),
    )
    c1 = 0.5 * ((1.0 + beta) * p1 + (1.0 - beta) * p2)
    c2 = 0.5 * ((1.0 - beta) * p1 + (1.0 + beta) * p2)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    return np.clip(c1, lo, hi), np.clip(c2, lo, hi)


def _polynomial_mutation(parent, bounds, eta, rate, rng):
    child = parent.copy()
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    mask = rng.random(len(child)) < rate
    u = rng.random(len(child))
    delta = np.where(
        u < 0.5,
        (2.0 * u) ** (1.0 / (eta + 1.0)) - 1.0,
        1.0 - (2.0 * (1.0 - u)) ** (1.0 / (eta + 1.0)),
    )
    child[mask] += delta[mask] * (hi[mask] - lo[mask])
    return np.clip(child, lo, hi)


# ---------------------------------------------------------------------------
# the optimizer
# ---------------------------------------------------------------------------


@dataclass
class NsgaResult:
    population: list
    front: list
    generations_run: int
    history_min: np.ndarray = field(repr=False)  # (generations+1, k) per-objective minima


def _eval_seed(base_seed: int, generation: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, generation, index)).generate_state(1)[0])


def _evaluate(problem: MooProblem, individual: Individual, seed: int) -> None:
    try:
        candidate = problem.decode(individual.genes)
        objectives = np.asarray(problem.evaluate(candidate, seed), dtype=float)
    except InfeasibleCandidateError as err:
        individual.feasible = False
        individual.objectives = None
        individual.note = str(err)
        return
    if objectives.shape != (problem.n_objectives,) or not np.all(np.isfinite(objectives)):
        individual.feasible = False
        individual.objectives = None
        individual.note = f"evaluator returned invalid objectives {objectives!r}"
        return
    individual.objectives = objectives
    individual.feasible = True


def _assign_crowding(population, fronts) -> None:
    for front in fronts:
        members = [population[i] for i in front]
        if all(m.feasible for m in members):
            d = crowding_distance([m.objectives for m in members])
            for m, dist in zip(members, d):
                m.crowding = float(dist)
        else:
            for m in members:
                m.crowding = 0.0


def _select(population, fronts, options: NsgaOptions) -> list:
    """Elitist truncation with a capped first front.

    The first front is limited to ceil(pareto_fraction * population)
    survivors, kept by crowding, unless the later fronts are too small to
    fill the population, in which case the cap relaxes just enough.
    """
    target = options.population
    survivors: list[Individual] = []
    cap = math.ceil(options.pareto_fraction * target)
    others = sum(len(f) for f in fronts[1:])
    first_quota = min(len(fronts[0]), max(cap, target - others), target)
    for number, front in enumerate(fronts):
        members = [population[i] for i in front]
        quota = first_quota if number == 0 else target - len(survivors)
        if quota <= 0:
            break
        if len(members) > quota:
            order = np.argsort([-m.crowding for m in members], kind="stable")
            members = [members[i] for i in order[:quota]]
        survivors.extend(members)
    return survivors


def evolve(problem: MooProblem, options: NsgaOptions) -> NsgaResult:
    """Run the generational loop and return the final population and front.

    Deterministic for fixed (problem, options): evaluation seeds are
    derived per individual from (seed, generation, index), so results do
    not depend on evaluation order.
    """
    rng = np.random.default_rng(options.seed)
    n_genes = len(problem.bounds)
    lo = np.array([b[0] for b in problem.bounds], dtype=float)
    hi = np.array([b[1] for b in problem.bounds], dtype=float)
    if np.any(hi <= lo):
        raise ValueError("each gene needs lower bound < upper bound")
    mutation_rate = options.mutation_rate
    if mutation_rate is None:
        mutation_rate = 1.0 / n_genes

    population = [
        Individual(genes=rng.uniform(lo, hi)) for _ in range(options.population)
    ]
    for i, ind in enumerate(population):
        _evaluate(problem, ind, _eval_seed(options.seed, 0, i))
    if not any(ind.feasible for ind in population):
        reasons = Counter(ind.note for ind in population)
        detail = "; ".join(f"{count}x {msg}" for msg, count in reasons.most_common(3))
        raise AllInfeasibleError(
            f"all {options.population} initial individuals are infeasible ({detail})"
        )
    fronts = non_dominated_sort(population)
    _assign_crowding(population, fronts)

    def front_minima(pop) -> np.ndarray:
        best = [ind.objectives for ind in pop if ind.feasible and ind.rank == 1]
        return np.min(best, axis=0)

    history = [front_minima(population)]

    n_cross = int(round(options.crossover_fraction * options.population))
    if n_cross % 2 == 1:
        n_cross -= 1

    for generation in range(1, options.generations + 1):
        children: list[Individual] = []
        while len(children) < n_cross:
            parents = []
            for _ in range(2):
                i, j = rng.integers(0, options.population, size=2)
                parents.append(crowded_tournament(population[i], population[j], rng))
            g1, g2 = _sbx_pair(
                parents[0].genes, parents[1].genes, problem.bounds,
                options.crossover_eta, rng,
            )
            children.append(Individual(genes=g1))
            children.append(Individual(genes=g2))
        while len(children) < options.population:
            i, j = rng.integers(0, options.population, size=2)
            winner = crowded_tournament(population[i], population[j], rng)
            mutated = _polynomial_mutation(
                winner.genes, problem.bounds, options.mutation_eta, mutation_rate, rng
            )
            children.append(Individual(genes=mutated))
        for i, child in enumerate(children):
            _evaluate(problem, child, _eval_seed(options.seed, generation, i))
        combined = population + children
        fronts = non_dominated_sort(combined)
        _assign_crowding(combined, fronts)
        population = _select(combined, fronts, options)
        fronts = non_dominated_sort(population)
        _assign_crowding(population, fronts)
        history.append(front_minima(population))

    front = [ind for ind in population if ind.feasible and ind.rank == 1]
    return NsgaResult(
        population=population,
        front=front,
        generations_run=options.generations,
        history_min=np.vstack(history),
    )


def write_front_csv(path, result: NsgaResult, problem: MooProblem) -> None:
    """One row per first-front individual: genes, objectives, decoded fields."""
    rows = []
    for ind in result.front:
        row = {f"gene_{i}": g for i, g in enumerate(ind.genes)}
        row.update({f"objective_{j + 1}": v for j, v in enumerate(ind.objectives)})
        decoded = problem.decode(ind.genes)
        if is_dataclass(decoded):
            for f in dataclass_fields(decoded):
                row[f.name] = getattr(decoded, f.name)
        else:
            row["candidate"] = repr(decoded)
        rows.append(row)
    if not rows:
        raise ValueError("empty front; nothing to export")
    with Path(path).open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# the architecture-and-window search problem
# ---------------------------------------------------------------------------

_GENE_BOUNDS = (
    (1.0, 5.0),      # conv blocks
    (1.0, 128.0),    # filter count
    (2.0, 32.0),     # filter size
    (2.0, 8.0),      # pool size
    (1.0, 5.0),      # pool stride
    (1.0, 5.0),      # dense layers
    (8.0, 64.0),     # dense neurons
    (2e-4, 1e-2),    # learning rate
    (3.5, 4.0),      # segment bound (sorted at decode)
    (3.5, 4.0),      # segment bound (sorted at decode)
)

FULL_SEGMENT_COLUMNS = 501  # 3.5 to 4.0 V sampled at 1 mV


def decode_cnn_genes(genes) -> CnnConfig:
    """Round integer genes, sort and millivolt-snap the window pair."""
    g = np.asarray(genes, dtype=float)
    if g.shape != (len(_GENE_BOUNDS),):
        raise ValueError(f"expected {len(_GENE_BOUNDS)} genes, got {g.shape}")

    def as_int(value, lo, hi):
        return int(np.clip(round(value), lo, hi))

    v_lo, v_hi = sorted(g[8:10])
    v_lo = round(round(v_lo * 1000.0) / 1000.0, 3)
    v_hi = round(round(v_hi * 1000.0) / 1000.0, 3)
    if v_hi <= v_lo:
        if v_hi < 4.0:
            v_hi = round(v_hi + 0.001, 3)
        else:
            v_lo = round(v_lo - 0.001, 3)
    return CnnConfig(
        conv_blocks=as_int(g[0], 1, 5),
        filter_count=as_int(g[1], 1, 128),
        filter_size=as_int(g[2], 2, 32),
        pool_size=as_int(g[3], 2, 8),
        pool_stride=as_int(g[4], 1, 5),
        dense_layers=as_int(g[5], 1, 5),
        dense_neurons=as_int(g[6], 8, 64),
        learning_rate=float(np.clip(g[7], 2e-4, 1e-2)),
        v1=v_lo,
        v2=v_hi,
    )


def cnn_search_problem(
    inputs,
    targets,
    reduced_epochs: int = 40,
    reduced_patience: int = 15,
    batch_size: int = 32,
) -> MooProblem:
    """Joint architecture and input-window search over the full segment.

    inputs holds one 3.5-4.0 V IC curve per row (501 columns at 1 mV);
    targets holds the 15 reference charge increments per row.  Objective 1
    is the summed squared error over the whole provided set after a short
    fixed training schedule; objective 2 is the window width in volts.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    if x.ndim != 2 or x.shape[1] != FULL_SEGMENT_COLUMNS:
        raise ValueError(f"inputs must be (n, {FULL_SEGMENT_COLUMNS})")
    if len(x) != len(y) or len(x) < 10:
        raise ValueError("need matching inputs/targets with at least 10 samples")

    def evaluate(config: CnnConfig, seed: int) -> np.ndarray:
        start = int(round((config.v1 - 3.5) / 0.001))
        segment = x[:, start : start + config.input_length]
        try:
            net = build_network(config, seed)
            report = train(
                net, segment, y,
                max_epochs=reduced_epochs,
                patience=reduced_patience,
                batch_size=batch_size,
                seed=seed,
            )
        except (ShapeInfeasibleError, TrainingDivergedError) as err:
            raise InfeasibleCandidateError(str(err)) from err
        preds = predict(net, report.scaler, segment)
        sse = float(np.sum((preds - y) ** 2))
        return np.array([sse, config.v2 - config.v1])

    return MooProblem(
        bounds=_GENE_BOUNDS,
        n_objectives=2,
        decode=decode_cnn_genes,
        evaluate=evaluate,
    )
