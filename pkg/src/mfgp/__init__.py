"""Robust multi-fidelity Gaussian-process co-kriging for spatiotemporal data."""

import os

# OpenBLAS threading hurts badly at the matrix sizes used here; limit it
# before numpy initialises its thread pool (no effect if numpy is already up).
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

__version__ = "0.1.0"

from .covariance import (  # noqa: E402
    CovarianceBlocks,
    CovarianceError,
    ModelParams,
    WhiteningMode,
    assemble_joint,
    jittered_cholesky,
    whitening_root,
)
from .data import FidelityDataset  # noqa: E402
from .estimation import (  # noqa: E402
    EstimationError,
    FitResult,
    HuberConfig,
    OptimizerOptions,
    fit,
    gaussian_nll,
    gls_rho,
    heuristic_init,
    huber_loss,
    huber_objective,
    huber_psi,
    identifiability_penalty,
    mad_scale,
    numeric_gradient,
    robust_objective,
)
from .evaluation import (  # noqa: E402
    EstimatorSpec,
    descriptive_stats,
    mae,
    relative_efficiency,
    rmse,
    st_block_cv,
)
from .ingest import nearest_lf_selection, read_station_csv  # noqa: E402
from .kernels import (  # noqa: E402
    KernelParams,
    SpaceTimePoint,
    lengthscale_from_correlation,
    rbf,
    separable_gram,
)
from .prediction import krige_grid, predict_hf  # noqa: E402
from .simulation import (  # noqa: E402
    ContaminationSpec,
    DgpConfig,
    dgp_model_params,
    inject_level_shift,
    inject_outliers,
    run_mc_study,
    simulate_mf,
    station_split,
)
from .theory import (  # noqa: E402
    BoundReport,
    InfluenceCurve,
    huber_influence_bound,
    influence_curve,
    pseudo_true_rho,
    score_rho,
)
