"""Gaussian meta-learning for fixed-design linear regression.

A task distribution N(alpha, Sigma) over coefficient vectors with N(0, sigma2)
label noise admits closed-form transfer-risk bounds, an optimal plug-in
predictor, and an EM fit when the distribution is unknown. This package
implements those, the baselines they are compared against, synthetic and real
data loaders, and an experiment harness with a CLI.
"""

from .baselines import (
    CvConfig,
    RepresentationBasis,
    biased_regression,
    max_correlation,
    mom_estimator,
    ols,
    oracle_representation,
    pooled_bias,
    select_lambda,
)
from .bounds import (
    BoundReport,
    IsotropicSpec,
    bound_report,
    corollary1_bound,
    corollary2_bound,
    eigen_formulas,
    harmonic_mean,
    lower_highprob_coefficient,
    matrix_M,
    pooled_information,
    upper_highprob_coefficient,
)
from .core import (
    AggregateDesign,
    Dataset,
    Environment,
    PosteriorParams,
    TaskData,
    apply_K_inverse,
    build_aggregate,
    check_psd,
    marginal_log_likelihood,
    psd_pinv,
)
from .em import EmConfig, EmTrace, e_step, em_fit, m_step, rank_clip
from .estimators import (
    WbrlsConfig,
    alpha_for_prediction,
    alpha_normal_equations,
    mle_alpha,
    plug_in_theta,
    posterior_params,
    predict,
    solve_alpha,
    wbrls,
)
from .harness import (
    ExperimentConfig,
    ResultTable,
    aggregate,
    emit,
    load_config,
    run_experiment,
    run_subspace_experiment,
)
from .ingest import SchoolConfig, load_school
from .simgen import (
    GenSpec,
    fourier_features,
    gen_dataset,
    gen_environment,
    gen_sigma_full,
    gen_sigma_lowrank,
    mom_environment,
    read_dataset_csv,
    sphere_columns,
    write_dataset_csv,
)

__version__ = "0.1.0"
