"""Cohort synthesis, the end-to-end sorting run, and artifact emission.

The synthetic cohort stands in for a dismantled pack.  Pack modules see
different stress histories, so each module is assigned a dominant
degradation mechanism and a severity level; its cells scatter around
both.  Ground-truth aging parameters ride along with every cell, which
is what makes exact error accounting possible downstream.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from .clustering import (
    adap_scan,
    agglomerative,
    avg_cluster_sd,
    fuzzy_cmeans,
    kmeans,
    silhouette,
)
from .electrode import (
    DegradationDelta,
    DegradationOverflowError,
    Eaps,
    ElectrodeDomainError,
    FRESH_Q_NE_MAH,
    FRESH_Q_PE_MAH,
    InfeasibleWindowError,
    NOMINAL_CAPACITY_MAH,
    degrade,
    fresh_cell_eaps,
    get_evaluator,
    reference_ne_model,
    reference_pe_model,
    usable_window,
)
from .errors import NumericalFailure, SchemaError
from .estimator import (
    EapBounds,
    EapEstimate,
    PsoGaOptions,
    estimate,
    write_estimates_csv,
)
from .regressor import (
    CnnConfig,
    build_dense_network,
    build_network,
    load_model,
    predict,
    train,
)
from .signals import (
    ChargingRecord,
    OcvCurve,
    extract_feature_points,
    ic_peak_features,
    ic_segment,
    incremental_capacity,
    pseudo_ocv,
)

# simulated test-bench conventions
CURVE_STEP_MAH = 0.02
SMOOTH_WINDOW = 5
HYSTERESIS_V = 0.005
ONE_C_OFFSET_V = 0.050
CURVE_TOP_V = 4.205
SLOW_RATE_FRACTION = 1.0 / 20.0
PEAK_BAND_V = (3.5, 4.0)
PEAK_SMOOTH_WINDOW = 25
PEAK_SMOOTH_ORDER = 3

# severity calibration target: driving any single mechanism at severity 1
# leaves this fraction of nominal capacity
CALIBRATION_FRACTION = 0.75

# direction vectors over (lli, lam_li_pe, lam_de_pe, lam_li_ne, lam_de_ne)
MECHANISMS = (
    ("lithium_loss", (1.0, 0.0, 0.0, 0.0, 0.0)),
    ("pe_material", (0.25, 1.0, 0.0, 0.0, 0.0)),
    ("ne_material", (0.5, 0.0, 0.0, 0.0, 1.0)),
    ("balanced_wear", (0.7, 0.3, 0.15, 0.0, 0.3)),
    ("lithium_and_ne", (0.8, 0.0, 0.0, 0.3, 0.2)),
)

BASELINE_METHODS = ("kmc", "fcmc", "ahc")

# Retired cells have only lost electrode material, so the sorting pass
# searches a one-sided box: a sliver of measurement headroom above fresh
# and a deep floor below it.  The wide-open default box admits oversized
# q_pe/q_offset pairs that the charge curve cannot tell apart from the
# truth; closing the top of the box removes that degenerate branch.
AGING_BOUNDS = EapBounds(
    q_pe=(0.55 * FRESH_Q_PE_MAH, 1.005 * FRESH_Q_PE_MAH),
    q_ne=(0.55 * FRESH_Q_NE_MAH, 1.005 * FRESH_Q_NE_MAH),
    q_offset=(0.0, 0.5 * FRESH_Q_PE_MAH),
)


class CohortSamplingError(NumericalFailure):
    """The rejection sampler ran out of retries for one cell."""


# ---------------------------------------------------------------------------
# cohort synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CohortSpec:
    """Sampler settings for one synthetic cohort.

    n_modules = 0 drops the module structure and draws every cell
    independently across the whole mechanism simplex, which is the right
    shape for regressor training data.
    """

    n_cells: int = 150
    seed: int = 11
    n_modules: int = 5
    module_mix: float = 0.85
    severity_jitter: float = 0.08
    severity_scale: float = 1.0
    capacity_span: tuple[float, float] = (0.77, 0.995)
    retry_budget: int = 200

    def __post_init__(self) -> None:
        if self.n_cells < 1:
            raise ValueError("n_cells must be positive")
        if self.n_modules < 0:
            raise ValueError("n_modules must be zero or positive")
        if not 0.0 < self.module_mix <= 1.0:
            raise ValueError("module_mix must lie in (0, 1]")
        if self.severity_jitter < 0.0 or self.severity_scale < 0.0:
            raise ValueError("severity knobs must be non-negative")
        lo, hi = self.capacity_span
        if not 0.0 < lo < hi <= 1.0:
            raise ValueError("capacity_span must satisfy 0 < low < high <= 1")
        if self.retry_budget < 1:
            raise ValueError("retry_budget must be positive")


@dataclass(frozen=True)
class CohortCell:
    """One simulated retired cell with its bench curves and ground truth."""

    index: int
    module: int
    truth: Eaps
    capacity_mAh: float
    pseudo_ocv: OcvCurve
    charge_1c: OcvCurve


@lru_cache(maxsize=1)
def _mechanism_scales() -> tuple[float, ...]:
    """Severity-1 scale for each mechanism direction, found by bisection.

    Scaling every direction to the same end-of-life capacity fraction
    makes severities comparable across mechanisms, so one severity knob
    spans the whole cohort range.
    """
    fresh = fresh_cell_eaps()
    pe, ne = reference_pe_model(), reference_ne_model()
    scales = []
    for _, direction in MECHANISMS:
        lo, hi = 0.0, 600.0
        while _capacity_fraction(fresh, direction, hi, pe, ne) is not None and hi < 5000.0:
            if _capacity_fraction(fresh, direction, hi, pe, ne) < CALIBRATION_FRACTION:
                break
            hi *= 1.5
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            frac = _capacity_fraction(fresh, direction, mid, pe, ne)
            if frac is None or frac < CALIBRATION_FRACTION:
                hi = mid
            else:
                lo = mid
        scales.append(lo)
    return tuple(scales)


def _capacity_fraction(fresh, direction, scale, pe, ne):
    delta = DegradationDelta(*(scale * c for c in direction))
    try:
        aged = degrade(fresh, delta)
        return usable_window(aged, pe, ne).capacity / NOMINAL_CAPACITY_MAH
    except (DegradationOverflowError, InfeasibleWindowError, ElectrodeDomainError):
        return None


def _mechanism_matrix() -> np.ndarray:
    scales = _mechanism_scales()
    return np.array(
        [np.asarray(vec) * t for (_, vec), t in zip(MECHANISMS, scales)]
    )


def _draw_cell(spec: CohortSpec, index: int, mod_weights, mod_center):
    """Rejection-sample one cell's degradation until it lands in span."""
    fresh = fresh_cell_eaps()
    pe, ne = reference_pe_model(), reference_ne_model()
    dirs = _mechanism_matrix()
    n_mech = len(MECHANISMS)
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, 1, index)))
    lo, hi = spec.capacity_span
    for _ in range(spec.retry_budget):
        if mod_weights is None:
            weights = rng.dirichlet(np.full(n_mech, 0.8))
            severity = rng.uniform(0.02, 1.0)
        else:
            weights = spec.module_mix * mod_weights + (
                1.0 - spec.module_mix
            ) * rng.dirichlet(np.full(n_mech, 0.3))
            severity = float(
                np.clip(
                    mod_center * (1.0 + spec.severity_jitter * rng.standard_normal()),
                    0.05,
                    1.0,
                )
            )
        severity *= spec.severity_scale
        delta = DegradationDelta(*(severity * (weights @ dirs)))
        try:
            truth = degrade(fresh, delta)
            window = usable_window(truth, pe, ne)
        except (DegradationOverflowError, InfeasibleWindowError, ElectrodeDomainError):
            continue
        fraction = window.capacity / NOMINAL_CAPACITY_MAH
        if lo <= fraction <= hi:
            return truth, window
    raise CohortSamplingError(
        f"cell {index}: no draw landed in capacity span {spec.capacity_span} "
        f"within {spec.retry_budget} attempts"
    )


def simulate_bench_curves(truth: Eaps) -> tuple[OcvCurve, OcvCurve, float]:
    """Slow-rate pseudo-OCV and a 1-C charging curve for one cell.

    The slow test is simulated as two C/20 branches offset by a +-5 mV
    hysteresis band around the equilibrium curve; their midline comes back
    through the standard smoothing path.  The 1-C curve is the equilibrium
    curve plus a constant resistive offset.  Both charge axes start at the
    lower cutoff crossing.
    """
    pe, ne = reference_pe_model(), reference_ne_model()
    evaluator = get_evaluator(pe, ne)
    window = usable_window(truth, pe, ne)
    one = np.array([truth.q_pe]), np.array([truth.q_ne]), np.array([truth.q_offset])
    q_top, ok = evaluator.charge_at_voltage(CURVE_TOP_V, *one)
    if bool(ok[0]):
        q_hi = float(q_top[0])
    else:
        # the curve tops out below the extension target; run to the domain end
        _, dom_hi = evaluator.charge_domain(*one)
        q_hi = float(dom_hi[0])
    steps = int(np.floor((q_hi - window.q_start) / CURVE_STEP_MAH))
    grid = window.q_start + CURVE_STEP_MAH * np.arange(steps + 1)
    if grid[-1] < q_hi:
        grid = np.append(grid, q_hi)
    v, okv = evaluator.voltage(grid, truth.q_pe, truth.q_ne, truth.q_offset)
    grid, v = grid[okv], v[okv]
    relative = grid - grid[0]
    current = window.capacity * SLOW_RATE_FRACTION
    t = relative / current * 3600.0
    up = ChargingRecord(t, np.full(len(t), current), v + HYSTERESIS_V, "charge")
    down = ChargingRecord(t, np.full(len(t), -current), v[::-1] - HYSTERESIS_V, "discharge")
    pseudo = pseudo_ocv(
        up, down, grid_step_mAh=CURVE_STEP_MAH, window_length=SMOOTH_WINDOW
    )
    one_c = OcvCurve(relative, v + ONE_C_OFFSET_V)
    return pseudo, one_c, window.capacity


def synth_cohort(spec: CohortSpec) -> list[CohortCell]:
    """Sample the cohort and simulate each cell's bench curves."""
    n_mech = len(MECHANISMS)
    if spec.n_modules > 0:
        mrng = np.random.default_rng(np.random.SeedSequence((spec.seed, 0)))
        order = mrng.permutation(n_mech)
        weights, centers = [], []
        for m in range(spec.n_modules):
            alpha = np.full(n_mech, 0.3)
            alpha[order[m % n_mech]] += 3.0
            weights.append(mrng.dirichlet(alpha))
            centers.append(mrng.uniform(0.30, 0.88))
    cells = []
    for i in range(spec.n_cells):
        if spec.n_modules > 0:
            m = i % spec.n_modules
            truth, window = _draw_cell(spec, i, weights[m], centers[m])
        else:
            m = -1
            truth, window = _draw_cell(spec, i, None, None)
        pseudo, one_c, capacity = simulate_bench_curves(truth)
        cells.append(
            CohortCell(
                index=i,
                module=m,
                truth=truth,
                capacity_mAh=capacity,
                pseudo_ocv=pseudo,
                charge_1c=one_c,
            )
        )
    return cells


# ---------------------------------------------------------------------------
# per-cell features
# ---------------------------------------------------------------------------


def regressor_input(cell: CohortCell, config: CnnConfig) -> np.ndarray:
    """IC values of the 1-C curve over the network's voltage window."""
    ic = incremental_capacity(cell.charge_1c)
    return ic_segment(ic, config.v1, config.v2)


def regressor_target(cell: CohortCell) -> np.ndarray:
    """Reference charge increments measured from the pseudo-OCV curve."""
    return extract_feature_points(cell.pseudo_ocv).dq_fp_mAh


def peak_heights(cell: CohortCell) -> np.ndarray:
    """The capacity proxy triple: two IC peak heights and the valley."""
    ic = incremental_capacity(cell.charge_1c)
    peaks = ic_peak_features(
        ic, *PEAK_BAND_V, PEAK_SMOOTH_WINDOW, PEAK_SMOOTH_ORDER
    )
    return np.array([peaks.h_peak1, peaks.h_peak2, peaks.h_valley])


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a sorting run, nested per stage."""

    cohort: CohortSpec = field(default_factory=CohortSpec)
    training: CohortSpec = field(
        default_factory=lambda: CohortSpec(
            n_cells=500, seed=101, n_modules=0, capacity_span=(0.76, 0.999)
        )
    )
    network: CnnConfig = field(default_factory=CnnConfig)
    estimator: PsoGaOptions = field(
        default_factory=lambda: PsoGaOptions(swarm_size=40, max_iterations=150)
    )
    training_seed: int = 0
    max_epochs: int = 2000
    patience: int = 80
    estimator_retries: int = 3
    baseline_hidden: int = 16
    baseline_seed: int = 0
    truth_capacity_baseline: bool = False
    model_path: str = ""
    workers: int = 1
    tune_cells: int = 120
    tune_population: int = 12
    tune_generations: int = 4

    def __post_init__(self) -> None:
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("training schedule fields must be positive")
        if self.estimator_retries < 0:
            raise ValueError("estimator_retries must be non-negative")
        if self.baseline_hidden < 1:
            raise ValueError("baseline_hidden must be positive")
        if self.workers < 1:
            raise ValueError("workers must be positive")
        if min(self.tune_cells, self.tune_population, self.tune_generations) < 1:
            raise ValueError("tune fields must be positive")


_TOML_SECTIONS = {
    "cohort": CohortSpec,
    "training": CohortSpec,
    "network": CnnConfig,
    "estimator": PsoGaOptions,
}


def load_config(path) -> PipelineConfig:
    """Read a TOML config file; unknown keys are schema errors."""
    try:
        import tomllib as toml
    except ModuleNotFoundError:  # pragma: no cover - python < 3.11
        import tomli as toml
    try:
        with Path(path).open("rb") as handle:
            doc = toml.load(handle)
    except OSError as err:
        raise SchemaError(f"cannot read config {path}: {err}") from err
    except toml.TOMLDecodeError as err:
        raise SchemaError(f"{path}: {err}") from err
    kwargs = {}
    for key, value in doc.items():
        if key in _TOML_SECTIONS:
            if not isinstance(value, dict):
                raise SchemaError(f"[{key}] must be a table")
            cls = _TOML_SECTIONS[key]
            names = {f.name for f in cls.__dataclass_fields__.values()}
            unknown = set(value) - names
            if unknown:
                raise SchemaError(
                    f"[{key}] has unknown key(s): {', '.join(sorted(unknown))}"
                )
            fixed = {
                k: tuple(v) if isinstance(v, list) else v for k, v in value.items()
            }
            try:
                kwargs[key] = cls(**fixed)
            except (TypeError, ValueError) as err:
                raise SchemaError(f"[{key}]: {err}") from err
        elif key in PipelineConfig.__dataclass_fields__:
            kwargs[key] = value
        else:
            raise SchemaError(f"unknown config key: {key}")
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as err:
        raise SchemaError(f"{path}: {err}") from err


def config_echo(config: PipelineConfig) -> dict:
    """JSON-ready dict of the full configuration."""
    echo = asdict(config)
    for section in ("cohort", "training"):
        echo[section]["capacity_span"] = list(echo[section]["capacity_span"])
    return echo


# ---------------------------------------------------------------------------
# model fitting
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    """A trained network bundled with its input scaler and fit metrics."""

    network: object
    scaler: object
    val_rmse_mAh: float
    epochs: int
    best_epoch: int


def train_regressor(
    config: PipelineConfig, cohort: list[CohortCell] | None = None
) -> FittedModel:
    """Fit the charge-increment network on a synthetic training cohort."""
    cohort = cohort if cohort is not None else synth_cohort(config.training)
    inputs = np.asarray([regressor_input(c, config.network) for c in cohort])
    targets = np.asarray([regressor_target(c) for c in cohort])
    network = build_network(config.network, seed=config.training_seed)
    report = train(
        network,
        inputs,
        targets,
        max_epochs=config.max_epochs,
        patience=config.patience,
        seed=config.training_seed,
    )
    return FittedModel(
        network=network,
        scaler=report.scaler,
        val_rmse_mAh=report.val_rmse_mAh,
        epochs=report.epochs,
        best_epoch=report.best_epoch,
    )


def train_capacity_baseline(
    config: PipelineConfig, cohort: list[CohortCell] | None = None
) -> FittedModel:
    """Fit the benchmark capacity net on IC peak heights.

    Three inputs, one hidden layer, one output; this is the capacity
    source the benchmark clustering methods run on.
    """
    cohort = cohort if cohort is not None else synth_cohort(config.training)
    heights = np.asarray([peak_heights(c) for c in cohort])
    capacities = np.asarray([[c.capacity_mAh] for c in cohort])
    network = build_dense_network(
        3, [config.baseline_hidden], 1, seed=config.baseline_seed
    )
    report = train(
        network,
        heights,
        capacities,
        learning_rate=1e-3,
        max_epochs=config.max_epochs,
        patience=config.patience,
        seed=config.baseline_seed,
    )
    return FittedModel(
        network=network,
        scaler=report.scaler,
        val_rmse_mAh=report.val_rmse_mAh,
        epochs=report.epochs,
        best_epoch=report.best_epoch,
    )


def estimate_with_retry(
    dq,
    options: PsoGaOptions,
    retries: int,
    bounds: EapBounds | None = None,
) -> tuple[EapEstimate | None, int]:
    """Run the swarm, reseeding when it lands on a degenerate optimum.

    A noisy increment vector occasionally drops the whole swarm into the
    flat all-infeasible plateau, where it stalls at the penalty ceiling.
    Reseeding is deterministic: attempt k adds 7919 * k to the seed.
    """
    for attempt in range(retries + 1):
        run_options = replace(options, seed=options.seed + 7919 * attempt)
        result = estimate(dq, bounds=bounds, options=run_options)
        if np.isfinite(result.capacity_mAh) and result.loss < 1.0:
            return result, attempt
    return None, retries + 1


# ---------------------------------------------------------------------------
# the sorting run
# ---------------------------------------------------------------------------


@dataclass
class SortReport:
    """Everything a sorting run produced, as plain JSON-ready data."""

    version: str
    config: dict
    n_cells: int
    n_quarantined: int
    k: int
    avg_silhouette: float
    regressor_val_rmse_mAh: float
    baseline_val_rmse_mAh: float
    capacity_basis: str
    cells: list
    quarantined: list
    avg_sd: dict
    exemplar_ids: list
    scan: list

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SortReport":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise SchemaError(f"report is not valid JSON: {err}") from err
        names = {f.name for f in cls.__dataclass_fields__.values()}
        if not isinstance(doc, dict) or set(doc) != names:
            raise SchemaError("report JSON does not match the SortReport layout")
        return cls(**doc)


def _cell_features(cohort, config: PipelineConfig, regressor, baseline):
    """Batch the network passes for a cohort; the networks cache forward
    activations on themselves, so they must never be shared across threads.

    Returns (per-cell (dq, baseline_capacity) or None, failure reasons).
    """
    segments, heights, usable = [], [], []
    failures = {}
    for cell in cohort:
        try:
            segments.append(regressor_input(cell, config.network))
            heights.append(peak_heights(cell))
        except (NumericalFailure, ValueError) as err:
            failures[cell.index] = f"{type(err).__name__}: {err}"
            continue
        usable.append(cell.index)
    inputs = {}
    if usable:
        dq = predict(regressor.network, regressor.scaler, np.asarray(segments))
        caps = predict(baseline.network, baseline.scaler, np.asarray(heights))
        inputs = {
            index: (dq[i], float(caps[i, 0])) for i, index in enumerate(usable)
        }
    return inputs, failures


def _sort_one_cell(cell: CohortCell, config: PipelineConfig, dq, baseline_capacity):
    """Estimate one cell from its predicted increments; returns (row, error)."""
    try:
        base = replace(config.estimator, seed=config.estimator.seed + cell.index)
        result, attempts = estimate_with_retry(
            dq, base, config.estimator_retries, bounds=AGING_BOUNDS
        )
    except (NumericalFailure, ValueError) as err:
        return None, f"{type(err).__name__}: {err}"
    if result is None:
        return None, (
            f"estimator stalled on the infeasible plateau "
            f"{config.estimator_retries + 1} times"
        )
    row = {
        "cell_id": cell.index,
        "module": cell.module,
        "truth_q_pe_mAh": float(cell.truth.q_pe),
        "truth_q_ne_mAh": float(cell.truth.q_ne),
        "truth_q_offset_mAh": float(cell.truth.q_offset),
        "truth_capacity_mAh": float(cell.capacity_mAh),
        "est_q_pe_mAh": float(result.eaps.q_pe),
        "est_q_ne_mAh": float(result.eaps.q_ne),
        "est_q_offset_mAh": float(result.eaps.q_offset),
        "est_capacity_mAh": float(result.capacity_mAh),
        "est_loss_V2": float(result.loss),
        "est_iterations": int(result.iterations),
        "est_converged": bool(result.converged),
        "baseline_capacity_mAh": float(baseline_capacity),
        "retries": int(attempts),
    }
    return row, None


def _map_cells(worker, jobs, n_workers):
    if n_workers <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, jobs))


def run_sort(
    config: PipelineConfig,
    regressor: FittedModel | None = None,
    baseline: FittedModel | None = None,
) -> SortReport:
    """The full sorting pass over a fresh synthetic cohort.

    Trains (or loads) the models unless pre-fitted ones are handed in,
    estimates every cell's aging parameters, clusters the estimates, and
    runs the capacity-only benchmarks at the same cluster count.
    """
    if regressor is None or baseline is None:
        training_cohort = synth_cohort(config.training)
        if regressor is None:
            if config.model_path:
                network, scaler = load_model(config.model_path)
                regressor = FittedModel(network, scaler, float("nan"), 0, 0)
            else:
                regressor = train_regressor(config, training_cohort)
        if baseline is None:
            baseline = train_capacity_baseline(config, training_cohort)

    cohort = synth_cohort(config.cohort)
    get_evaluator(reference_pe_model(), reference_ne_model())  # warm the cache
    inputs, failures = _cell_features(cohort, config, regressor, baseline)
    jobs = [cell for cell in cohort if cell.index in inputs]
    outcomes = _map_cells(
        lambda cell: _sort_one_cell(cell, config, *inputs[cell.index]),
        jobs,
        config.workers,
    )
    rows = [row for row, _ in outcomes if row is not None]
    failures.update(
        (cell.index, reason)
        for cell, (row, reason) in zip(jobs, outcomes)
        if row is None
    )
    quarantined = [
        {"cell_id": index, "reason": failures[index]} for index in sorted(failures)
    ]
    if len(rows) < 4:
        raise NumericalFailure(
            f"only {len(rows)} cells survived estimation; cannot cluster"
        )

    eap_matrix = np.array(
        [[r["est_q_pe_mAh"], r["est_q_ne_mAh"], r["est_q_offset_mAh"]] for r in rows]
    )
    scan_state = adap_scan(eap_matrix)
    best = scan_state.best
    k = best.k
    sil_values, _ = silhouette(eap_matrix, best.labels)

    if config.truth_capacity_baseline:
        basis_name = "truth"
        basis = np.array([[r["truth_capacity_mAh"]] for r in rows])
    else:
        basis_name = "estimated"
        basis = np.array([[r["baseline_capacity_mAh"]] for r in rows])
    labels = {
        "adap": best.labels,
        "kmc": kmeans(basis, k).labels,
        "fcmc": fuzzy_cmeans(basis, k).labels,
        "ahc": agglomerative(basis, k).labels,
    }

    attributes = {
        "sd_qcell_mAh": np.array([r["est_capacity_mAh"] for r in rows]),
        "sd_qpe_mAh": np.array([r["est_q_pe_mAh"] for r in rows]),
        "sd_qne_mAh": np.array([r["est_q_ne_mAh"] for r in rows]),
        "sd_qoffset_mAh": np.array([r["est_q_offset_mAh"] for r in rows]),
    }
    avg_sd = {
        method: {"k": k}
        | {
            column: float(avg_cluster_sd(values, method_labels))
            for column, values in attributes.items()
        }
        for method, method_labels in labels.items()
    }

    for i, row in enumerate(rows):
        row["labels"] = {m: int(labels[m][i]) for m in labels}
        row["silhouette"] = float(sil_values[i])

    return SortReport(
        version=__version__,
        config=config_echo(config),
        n_cells=len(rows),
        n_quarantined=len(quarantined),
        k=int(k),
        avg_silhouette=float(best.avg_silhouette),
        regressor_val_rmse_mAh=float(regressor.val_rmse_mAh),
        baseline_val_rmse_mAh=float(baseline.val_rmse_mAh),
        capacity_basis=basis_name,
        cells=rows,
        quarantined=quarantined,
        avg_sd=avg_sd,
        exemplar_ids=[int(rows[j]["cell_id"]) for j in best.exemplars],
        scan=[asdict(record) for record in scan_state.trace],
    )


# ---------------------------------------------------------------------------
# artifact emission
# ---------------------------------------------------------------------------


def emit(report: SortReport, out_dir) -> list[Path]:
    """Write the report and its CSV views; returns the paths written."""
    if not report.cells:
        raise ValueError("refusing to emit an empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    path = out / "report.json"
    path.write_text(report.to_json() + "\n")
    written.append(path)

    path = out / "clusters.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cell_id", "adap", "kmc", "fcmc", "ahc", "silhouette"])
        for row in report.cells:
            writer.writerow(
                [row["cell_id"]]
                + [row["labels"][m] for m in ("adap", "kmc", "fcmc", "ahc")]
                + [repr(float(row["silhouette"]))]
            )
    written.append(path)

    path = out / "avg_sd.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["method", "k", "sd_qcell_mAh", "sd_qpe_mAh", "sd_qne_mAh", "sd_qoffset_mAh"]
        )
        for method in ("adap", "kmc", "fcmc", "ahc"):
            entry = report.avg_sd[method]
            writer.writerow(
                [method, entry["k"]]
                + [
                    repr(float(entry[c]))
                    for c in ("sd_qcell_mAh", "sd_qpe_mAh", "sd_qne_mAh", "sd_qoffset_mAh")
                ]
            )
    written.append(path)

    path = out / "eaps.csv"
    estimates = [
        (
            row["cell_id"],
            EapEstimate(
                eaps=Eaps(
                    row["est_q_pe_mAh"], row["est_q_ne_mAh"], row["est_q_offset_mAh"]
                ),
                loss=row["est_loss_V2"],
                iterations=row["est_iterations"],
                capacity_mAh=row["est_capacity_mAh"],
                converged=row["est_converged"],
            ),
        )
        for row in report.cells
    ]
    write_estimates_csv(path, estimates)
    written.append(path)

    path = out / "eap_scatter.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cell_id", "q_pe_mAh", "q_ne_mAh", "q_offset_mAh", "cluster"])
        for row in report.cells:
            writer.writerow(
                [
                    row["cell_id"],
                    repr(float(row["est_q_pe_mAh"])),
                    repr(float(row["est_q_ne_mAh"])),
                    repr(float(row["est_q_offset_mAh"])),
                    row["labels"]["adap"],
                ]
            )
    written.append(path)

    path = out / "capacity_scatter.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["cell_id", "capacity_mAh", "adap", "kmc", "fcmc", "ahc"])
        for row in report.cells:
            capacity = (
                row["truth_capacity_mAh"]
                if report.capacity_basis == "truth"
                else row["baseline_capacity_mAh"]
            )
            writer.writerow(
                [row["cell_id"], repr(float(capacity))]
                + [row["labels"][m] for m in ("adap", "kmc", "fcmc", "ahc")]
            )
    written.append(path)

    path = out / "scan_trace.csv"
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iteration", "preference", "damping", "k"])
        for record in report.scan:
            writer.writerow(
                [
                    record["iteration"],
                    repr(float(record["preference"])),
                    repr(float(record["damping"])),
                    record["k"],
                ]
            )
    written.append(path)
    return written


def read_clusters(path) -> dict:
    """Columns of a clusters.csv: cell_id plus one label array per method."""
    with Path(path).open(newline="") as handle:
        reader = csv.DictReader(handle)
        methods = ("adap", "kmc", "fcmc", "ahc")
        missing = [c for c in ("cell_id", *methods) if c not in (reader.fieldnames or [])]
        if missing:
            raise SchemaError(f"clusters file lacks column(s): {', '.join(missing)}")
        table = {name: [] for name in ("cell_id", *methods)}
        for lineno, row in enumerate(reader, start=2):
            try:
                for name in table:
                    table[name].append(int(row[name]))
            except (TypeError, ValueError) as err:
                raise SchemaError(f"line {lineno}: {err}") from err
    return {name: np.asarray(column) for name, column in table.items()}


# ---------------------------------------------------------------------------
# curve file ingestion
# ---------------------------------------------------------------------------

_CHARGING_COLUMNS = ("time_s", "current_mA", "voltage_V")
_OCV_COLUMNS = ("charge_mAh", "voltage_V")


def ingest(path):
    """Parse a bench CSV into a ChargingRecord or an OcvCurve.

    The header decides the layout.  Malformed rows are reported with
    their 1-based line number.
    """
    with Path(path).open(newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        header = [column.strip() for column in header]
        if header == list(_CHARGING_COLUMNS):
            columns = _CHARGING_COLUMNS
        elif header == list(_OCV_COLUMNS):
            columns = _OCV_COLUMNS
        else:
            target = (
                _CHARGING_COLUMNS
                if len(set(header) & set(_CHARGING_COLUMNS))
                >= len(set(header) & set(_OCV_COLUMNS))
                else _OCV_COLUMNS
            )
            missing = [c for c in target if c not in header]
            if missing:
                raise SchemaError(
                    f"{path}: missing column(s) {', '.join(missing)} "
                    f"(expected {','.join(target)})"
                )
            raise SchemaError(
                f"{path}: header {','.join(header)} matches no known layout"
            )
        data = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise SchemaError(
                    f"{path} line {lineno}: expected {len(columns)} fields, "
                    f"got {len(row)}"
                )
            try:
                data.append([float(value) for value in row])
            except ValueError as err:
                raise SchemaError(f"{path} line {lineno}: {err}") from None
    if not data:
        raise SchemaError(f"{path}: no data rows")
    table = np.asarray(data)
    try:
        if columns is _CHARGING_COLUMNS:
            direction = "charge" if np.mean(table[:, 1]) >= 0.0 else "discharge"
            return ChargingRecord(table[:, 0], table[:, 1], table[:, 2], direction)
        return OcvCurve(table[:, 0], table[:, 1])
    except ValueError as err:
        raise SchemaError(f"{path}: {err}") from err


def write_charging_csv(path, record: ChargingRecord) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_CHARGING_COLUMNS)
        for t, i, v in zip(record.time_s, record.current_mA, record.voltage_V):
            writer.writerow([repr(float(t)), repr(float(i)), repr(float(v))])


def write_ocv_csv(path, curve: OcvCurve) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_OCV_COLUMNS)
        for q, v in zip(curve.charge_mAh, curve.voltage_V):
            writer.writerow([repr(float(q)), repr(float(v))])
