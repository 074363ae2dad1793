"""Feature-statistics style mixing (FuseStyle) on a from-scratch autodiff core."""

from .errors import ContractError, CorruptionError, DimensionError, FuseStyleError, NumericalError, ValidationError
from .layer import (
    FuseStyle,
    FuseStyleConfig,
    InstanceStats,
    MixDecision,
    MixedStats,
    Mode,
    apply_style,
    fusestyle_forward,
    instance_stats,
    mix_statistics,
    sample_lambdas,
)
from .model import Model, ModelConfig, build_model, forward, predict
from .selection import (
    CorrelationMatrix,
    SelectionStrategy,
    correlation_matrix,
    flatten_features,
    kl_diag_gaussian,
    select_least_dot,
    select_max_euclidean,
    select_max_kl,
    select_random_perm,
    select_reference,
)
from .tensor import Tensor, backward, finite_difference_gradient, no_grad, zero_grad

__version__ = "0.1.0"
