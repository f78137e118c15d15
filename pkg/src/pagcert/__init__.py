"""Sampling-based global robustness certificates for neural classifiers."""

from .bounds import (
    CertificateParams,
    guarantee_bound,
    quantile_index,
    shift_adjusted_bound,
    solve_sample_size,
    union_bound_violation,
)
from .certifier import (
    Certification,
    PagCertificate,
    RobustnessMap,
    build_map,
    certify,
    compute_kappa_max,
    emit_certificate,
    map_lookup,
)
from .evaluation import EvalReport, evaluate_on_test, monte_carlo_epsnet_check, monte_carlo_quantile_check
from .model import MlpModel, load_model, save_model
from .oracles import (
    OracleConfig,
    OracleResult,
    analytic_linear_oracle,
    certified_binsearch_oracle,
    exact_grid_oracle,
    pgd_oracle,
)
from .quality import CounterexampleRange, QualityPoint, QualitySample, build_quality_sample
from .synthetic import SyntheticLinearWorld, synthetic_linear_world

__version__ = "0.1.0"
