"""Conjugate-gradient functional partial least squares for scalar-on-function regression."""

from .cgpls import (
    BreakdownWarning,
    IllConditioned,
    NonConvergenceWarning,
    NoStopWarning,
    PlsFit,
    StoppingConfig,
    cg_pls,
    estimate_sigma2_iterative,
    fit_early_stopped,
    krylov_oracle,
    select_m,
    stopping_threshold,
)
from .fspace import (
    Dataset,
    DatasetFormatError,
    EmpiricalMoments,
    FunctionVec,
    Grid,
    GridMismatchError,
    apply_k_hat,
    center,
    compute_moments,
    inner,
    make_uniform_grid,
    norm,
    read_dataset_csv,
    write_dataset_csv,
)
from .inference import (
    ConfidenceSetGrid,
    Method,
    TestOutcome,
    confidence_set,
    cosine_basis,
    critical_value_bootstrap,
    critical_value_simulated,
    prepare_inference,
    run_test,
    test_statistic,
)
from .simlab import (
    ModelSpec,
    SimReport,
    estimation_campaign,
    ise,
    mspe,
    null_distribution_sample,
    power_curve,
    simulate_dataset,
)
from .spectral import (
    OperatorSpectrum,
    pca_estimate,
    pca_gcv,
    spectrum_k_hat,
    variance_spectrum,
)

__version__ = "0.1.0"
