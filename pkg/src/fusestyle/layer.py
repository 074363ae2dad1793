"""FuseStyle: mix per-instance feature statistics with a reference batch.

For instance ``i`` with reference ``j = ref_indices[i]`` and weight
``lam ~ Beta(alpha, alpha)``::

    gamma = lam * sigma(x_i) + (1 - lam) * sigma(x_j)
    beta  = lam * mu(x_i)    + (1 - lam) * mu(x_j)
    out_i = gamma * (x_i - mu(x_i)) / sigma(x_i) + beta

The whole batch is replaced by the mixed batch with probability ``p_apply``
during training and passed through untouched in evaluation.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import DimensionError, ValidationError
from .selection import SelectionStrategy, select_reference
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Mode(enum.Enum):
    Train = "train"
    Eval = "eval"


@dataclass(frozen=True)
class FuseStyleConfig:
    alpha: float = 0.3
    p_apply: float = 0.5
    epsilon: float = 1e-6
    strategy: SelectionStrategy = SelectionStrategy.LeastDotProduct
    mode: Mode = Mode.Train
    detach_reference_stats: bool = False
    cosine: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", SelectionStrategy.parse(self.strategy))
        object.__setattr__(self, "mode", Mode(self.mode))
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.p_apply <= 1.0:
            raise ValidationError(f"p_apply must lie in [0, 1], got {self.p_apply}")
        if not self.epsilon > 0:
            raise ValidationError(f"epsilon must be positive, got {self.epsilon}")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "p_apply": self.p_apply,
            "epsilon": self.epsilon,
            "strategy": self.strategy.value,
            "mode": self.mode.value,
            "detach_reference_stats": self.detach_reference_stats,
            "cosine": self.cosine,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FuseStyleConfig":
        return cls(**d)


@dataclass
class InstanceStats:
    mu: Tensor
    sigma: Tensor

    def detach(self) -> "InstanceStats":
        return InstanceStats(self.mu.detach(), self.sigma.detach())

    def take(self, indices) -> "InstanceStats":
        return InstanceStats(self.mu.take(indices), self.sigma.take(indices))


@dataclass
class MixedStats:
    gamma: Tensor
    beta: Tensor


@dataclass
class MixDecision:
    """What one FuseStyle call did to one batch."""

    applied: bool
    lambdas: np.ndarray = field(default_factory=lambda: np.zeros(0))
    ref_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))

    def to_log_line(self, batch_index: int, layer: int = 0, epoch: int = 0) -> str:
        """Tab-separated: epoch, batch, layer, applied flag, lambdas, refs."""
        if self.applied:
            lams = ",".join(f"{v:.6f}" for v in self.lambdas)
            refs = ",".join(str(int(r)) for r in self.ref_indices)
        else:
            lams = refs = "-"
        return f"{epoch}\t{batch_index}\t{layer}\t{int(self.applied)}\t{lams}\t{refs}"

    @classmethod
    def from_log_line(cls, line: str) -> Tuple[int, int, int, "MixDecision"]:
        epoch, batch, layer, applied, lams, refs = line.rstrip("\n").split("\t")
        if applied == "0":
            return int(epoch), int(batch), int(layer), cls(False)
        decision = cls(
            True,
            np.array([float(v) for v in lams.split(",")]),
            np.array([int(v) for v in refs.split(",")], dtype=np.intp),
        )
        return int(epoch), int(batch), int(layer), decision


def _require_4d(x: Tensor) -> None:
    if x.ndim != 4:
        raise DimensionError(f"expected a [B, C, H, W] tensor, got shape {x.shape}")


def instance_stats(x: Tensor, epsilon: float = 1e-6) -> InstanceStats:
    """Per-instance, per-channel mean and sqrt(biased variance + epsilon)."""
    _require_4d(x)
    if not epsilon >= 0:
        raise ValidationError("epsilon must be non-negative")
    B, C = x.shape[:2]
    mu = x.mean(axis=(2, 3))
    centred = x - mu.reshape(B, C, 1, 1)
    var = (centred * centred).mean(axis=(2, 3))
    return InstanceStats(mu, (var + epsilon).sqrt())


def sample_lambdas(alpha: float, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if not alpha > 0:
        raise ValidationError(f"alpha must be positive, got {alpha}")
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    return rng.beta(alpha, alpha, size=batch_size)


def mix_statistics(stats_x: InstanceStats, stats_y: InstanceStats, lambdas) -> MixedStats:
    if stats_x.mu.shape != stats_y.mu.shape or stats_x.sigma.shape != stats_y.sigma.shape:
        raise DimensionError("statistics of x and y must share one [B, C] shape")
    lam = np.asarray(lambdas, dtype=np.float64)
    B = stats_x.mu.shape[0]
    if lam.shape != (B,):
        raise DimensionError(f"need {B} mixing weights, got shape {lam.shape}")
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValidationError("mixing weights must lie in [0, 1]")
    w = Tensor(lam.reshape(B, 1))
    rest = Tensor(1.0 - lam.reshape(B, 1))
    gamma = w * stats_x.sigma + rest * stats_y.sigma
    beta = w * stats_x.mu + rest * stats_y.mu
    return MixedStats(gamma, beta)


def apply_style(x: Tensor, stats_x: InstanceStats, mixed: MixedStats) -> Tensor:
    _require_4d(x)
    B, C = x.shape[:2]
    if stats_x.mu.shape != (B, C) or mixed.gamma.shape != (B, C):
        raise DimensionError("statistics do not match the feature batch")

    def col(t):
        return t.reshape(B, C, 1, 1)

    return col(mixed.gamma) * ((x - col(stats_x.mu)) / col(stats_x.sigma)) + col(mixed.beta)


def fusestyle_forward(
    x: Tensor,
    config: FuseStyleConfig,
    rng: Optional[np.random.Generator],
    mode: Optional[Mode] = None,
    decision: Optional[MixDecision] = None,
) -> Tuple[Tensor, MixDecision]:
    """Run one FuseStyle layer.

    Random draws happen in a fixed order: the apply gate, then the permutation
    (RandomShuffle only), then the per-instance lambdas. Passing ``decision``
    replays it instead of drawing anything.
    """
    _require_4d(x)
    mode = config.mode if mode is None else Mode(mode)
    if mode is Mode.Eval:
        return x, MixDecision(False)
    B = x.shape[0]

    if decision is None:
        if not rng.random() < config.p_apply:
            return x, MixDecision(False)
        if B < 2 and config.strategy.pairwise:
            logger.warning("batch of one: skipping %s mixing", config.strategy.value)
            return x, MixDecision(False)
        stats = instance_stats(x, config.epsilon)
        refs = select_reference(config.strategy, x, stats, rng, cosine=config.cosine)
        lambdas = sample_lambdas(config.alpha, B, rng)
        decision = MixDecision(True, lambdas, np.asarray(refs, dtype=np.intp))
    else:
        if not decision.applied:
            return x, decision
        stats = instance_stats(x, config.epsilon)

    reference = stats.take(decision.ref_indices)
    if config.detach_reference_stats:
        reference = reference.detach()
    mixed = mix_statistics(stats, reference, decision.lambdas)
    return apply_style(x, stats, mixed), decision


class FuseStyle:
    """A FuseStyle layer bound to one configuration."""

    def __init__(self, config: FuseStyleConfig | None = None):
        self.config = config or FuseStyleConfig()

    def __call__(self, x, rng=None, mode=None, decision=None):
        return fusestyle_forward(x, self.config, rng, mode=mode, decision=decision)

    def __repr__(self):
        return f"FuseStyle({self.config.strategy.value}, alpha={self.config.alpha}, p={self.config.p_apply})"
