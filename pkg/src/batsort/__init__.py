"""Battery triage toolkit.

Estimates per-electrode aging parameters from partial constant-current
charge data and sorts retired cells by those parameters instead of by
capacity alone.
"""

__version__ = "0.1.0"

from .electrode import (  # noqa: F401
    DegradationDelta,
    Eaps,
    ElectrodeOcvModel,
    UsableWindow,
    cell_ocv_at,
    degrade,
    fresh_cell_eaps,
    make_electrode_model,
    potential_from_soc,
    reference_ne_model,
    reference_pe_model,
    soc_from_potential,
    usable_window,
)
from .clustering import (  # noqa: F401
    ClusterResult,
    NoConvergenceError,
    adap_run,
    adap_scan,
    agglomerative,
    avg_cluster_sd,
    fuzzy_cmeans,
    kmeans,
    silhouette,
    similarity,
)
from .errors import BatsortError, NumericalFailure, SchemaError  # noqa: F401
from .estimator import (  # noqa: F401
    EapBounds,
    EapEstimate,
    InfeasibleAnchorError,
    PsoGaOptions,
    anchor_q0,
    default_bounds,
    eap_loss,
    estimate,
    predicted_feature_voltages,
    reconstruct,
    write_estimates_csv,
)
from .nsga2 import (  # noqa: F401
    MooProblem,
    NsgaOptions,
    NsgaResult,
    cnn_search_problem,
    decode_cnn_genes,
    evolve,
    write_front_csv,
)
from .pipeline import (  # noqa: F401
    AGING_BOUNDS,
    CohortCell,
    CohortSamplingError,
    CohortSpec,
    FittedModel,
    PipelineConfig,
    SortReport,
    emit,
    estimate_with_retry,
    ingest,
    load_config,
    peak_heights,
    read_clusters,
    regressor_input,
    regressor_target,
    run_sort,
    simulate_bench_curves,
    synth_cohort,
    train_capacity_baseline,
    train_regressor,
    write_charging_csv,
    write_ocv_csv,
)
from .regressor import (  # noqa: F401
    CnnConfig,
    build_dense_network,
    build_network,
    load_model,
    predict,
    save_model,
    train,
)
from .signals import (  # noqa: F401
    FEATURE_VOLTAGES,
    ChargingRecord,
    FeaturePointSet,
    IcCurve,
    OcvCurve,
    PeakFeatures,
    cum_charge,
    diff_charge,
    extract_feature_points,
    ic_peak_features,
    ic_segment,
    incremental_capacity,
    pseudo_ocv,
    savgol_smooth,
)
