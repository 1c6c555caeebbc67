"""Speculative diffusion sampling with statistically certified exactness.

A drafter model proposes several denoising steps ahead; the target model
checks them in one parallel batch through a reflection maximal coupling, so
accepted runs finalise multiple steps per target invocation while the output
distribution stays exactly the target sampler's.  The package adds relaxed
verification driven by an uncertainty profile, an ε-indexed reverse-kernel
family, small hand-differentiated training loops, and a certification suite
that tests every claimed property against closed forms.
"""

from .coupling import (
    GaussianKernel,
    VerifyResult,
    expected_accept,
    likelihood_ratio,
    tv_equal_var_gaussians,
    verify,
    verify_batch,
    verify_relaxed,
)
from .engine import (
    CostModel,
    RelaxProfile,
    RunMetrics,
    ScoreBiasDrafter,
    fit_relax_profile,
    parallel_efficiency,
    sample_free,
    sample_vanilla,
    sample_vanilla_batch,
    self_spec_run,
    wall_clock_model,
)
from .models import (
    GmmTarget,
    MlpNet,
    ModelOutput,
    default_gmm,
    evaluate_target,
    gmm_log_density,
    gmm_sample,
    gmm_score,
    net_from_json,
    net_to_json,
)
from .schedule import (
    NoiseSchedule,
    SdeCoefficients,
    build_linear_schedule,
    em_kernel,
    em_schedule,
    reverse_mean,
    schedule_from_json,
    schedule_to_json,
)
from .stats import RngKey, energy_distance_test, keyed_gaussian, keyed_uniform, ks_test
from .training import (
    LossWeights,
    TrainConfig,
    TrainReport,
    fit_target_mlp,
    init_drafter,
    train_drafter,
)

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "GaussianKernel",
    "GmmTarget",
    "LossWeights",
    "MlpNet",
    "ModelOutput",
    "NoiseSchedule",
    "RelaxProfile",
    "RngKey",
    "RunMetrics",
    "ScoreBiasDrafter",
    "SdeCoefficients",
    "TrainConfig",
    "TrainReport",
    "VerifyResult",
    "build_linear_schedule",
    "default_gmm",
    "em_kernel",
    "em_schedule",
    "energy_distance_test",
    "evaluate_target",
    "expected_accept",
    "fit_relax_profile",
    "fit_target_mlp",
    "gmm_log_density",
    "gmm_sample",
    "gmm_score",
    "init_drafter",
    "keyed_gaussian",
    "keyed_uniform",
    "ks_test",
    "likelihood_ratio",
    "net_from_json",
    "net_to_json",
    "parallel_efficiency",
    "reverse_mean",
    "sample_free",
    "sample_vanilla",
    "sample_vanilla_batch",
    "schedule_from_json",
    "schedule_to_json",
    "self_spec_run",
    "train_drafter",
    "tv_equal_var_gaussians",
    "verify",
    "verify_batch",
    "verify_relaxed",
    "wall_clock_model",
]
