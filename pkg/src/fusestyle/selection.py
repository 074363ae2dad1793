"""Reference-batch construction strategies.

Each selector maps a batch of features to ``ref_indices`` where instance ``i``
borrows its style from instance ``ref_indices[i]``. The pairwise strategies
never pick ``i`` itself and break ties toward the lowest index.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import ContractError, DimensionError, ValidationError
from .tensor import Tensor


class SelectionStrategy(enum.Enum):
    RandomShuffle = "RandomShuffle"
    LeastDotProduct = "LeastDotProduct"
    MaxEuclidean = "MaxEuclidean"
    MaxKL = "MaxKL"

    @property
    def pairwise(self) -> bool:
        return self is not SelectionStrategy.RandomShuffle

    @property
    def short_name(self) -> str:
        return _SHORT_NAMES[self]

    @classmethod
    def parse(cls, name: "str | SelectionStrategy") -> "SelectionStrategy":
        if isinstance(name, cls):
            return name
        key = str(name).strip()
        for strategy, short in _SHORT_NAMES.items():
            if key.lower() in (short, strategy.value.lower()):
                return strategy
        raise ValidationError(f"unknown selection strategy {name!r}")


_SHORT_NAMES = {
    SelectionStrategy.RandomShuffle: "m1",
    SelectionStrategy.LeastDotProduct: "ra",
    SelectionStrategy.MaxEuclidean: "m2",
    SelectionStrategy.MaxKL: "m3",
}


@dataclass(frozen=True)
class CorrelationMatrix:
    """Raw pairwise inner products of flattened instance features."""

    rho: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.rho.shape[0]


def flatten_features(z) -> np.ndarray:
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    return data.reshape(data.shape[0], -1)


def correlation_matrix(z_hat: np.ndarray) -> CorrelationMatrix:
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.ndim != 2 or z_hat.shape[0] < 1:
        raise DimensionError("correlation_matrix expects a non-empty [B, N] matrix")
    # einsum reduces every entry with the same loop; BLAS gemm routes edge tiles
    # through other kernels, so equal rows could differ by an ulp and break ties
    return CorrelationMatrix(np.einsum("in,jn->ij", z_hat, z_hat))


def _require_pairs(batch_size: int) -> None:
    if batch_size < 2:
        raise ContractError("pairwise selection needs a batch of at least two instances")


def select_least_dot(rho) -> np.ndarray:
    """Row-wise argmin of the off-diagonal inner products."""
    matrix = rho.rho if isinstance(rho, CorrelationMatrix) else np.asarray(rho, dtype=np.float64)
    B = matrix.shape[0]
    _require_pairs(B)
    masked = matrix.copy()
    np.fill_diagonal(masked, np.inf)
    return np.argmin(masked, axis=1)


def select_random_perm(batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if batch_size < 1:
        raise ValidationError("batch size must be >= 1")
    return rng.permutation(batch_size)


def select_max_euclidean(z_hat: np.ndarray) -> np.ndarray:
    z_hat = np.asarray(z_hat, dtype=np.float64)
    B = z_hat.shape[0]
    _require_pairs(B)
    refs = np.empty(B, dtype=np.intp)
    for i in range(B):
        # squared distance preserves the argmax and keeps identical rows tied exactly
        d = ((z_hat - z_hat[i]) ** 2).sum(axis=1)
        d[i] = -np.inf
        refs[i] = int(np.argmax(d))
    return refs


def kl_diag_gaussian(stats_i: Tuple[np.ndarray, np.ndarray], stats_j: Tuple[np.ndarray, np.ndarray]) -> float:
    """Symmetrised KL divergence between two diagonal Gaussians over channels."""
    mu_i, sigma_i = (np.asarray(a, dtype=np.float64) for a in stats_i)
    mu_j, sigma_j = (np.asarray(a, dtype=np.float64) for a in stats_j)
    if mu_i.shape != sigma_i.shape or mu_i.shape != mu_j.shape or mu_j.shape != sigma_j.shape:
        raise DimensionError("statistic vectors must share one shape")
    if np.any(sigma_i <= 0) or np.any(sigma_j <= 0):
        raise ValidationError("standard deviations must be positive")
    var_i, var_j = sigma_i * sigma_i, sigma_j * sigma_j
    diff2 = (mu_i - mu_j) ** 2
    log_ratio = np.log(sigma_j / sigma_i)
    forward = log_ratio + (var_i + diff2) / (2.0 * var_j) - 0.5
    reverse = -log_ratio + (var_j + diff2) / (2.0 * var_i) - 0.5
    return float(np.sum(forward + reverse))


def select_max_kl(stats) -> np.ndarray:
    """Argmax over j != i of :func:`kl_diag_gaussian`, one pair at a time."""
    mu, sigma = _stats_arrays(stats)
    B = mu.shape[0]
    _require_pairs(B)
    refs = np.empty(B, dtype=np.intp)
    for i in range(B):
        best, best_j = -math.inf, -1
        for j in range(B):
            if j == i:
                continue
            d = kl_diag_gaussian((mu[i], sigma[i]), (mu[j], sigma[j]))
            if d > best:
                best, best_j = d, j
        refs[i] = best_j
    return refs


def _stats_arrays(stats) -> Tuple[np.ndarray, np.ndarray]:
    mu, sigma = (stats.mu, stats.sigma) if hasattr(stats, "mu") else stats
    mu = mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=np.float64)
    sigma = sigma.data if isinstance(sigma, Tensor) else np.asarray(sigma, dtype=np.float64)
    return mu, sigma


def select_reference(
    strategy: SelectionStrategy,
    z,
    stats=None,
    rng: np.random.Generator | None = None,
    cosine: bool = False,
) -> np.ndarray:
    """Dispatch to the selector for ``strategy``.

    ``z`` holds the pre-mixing features; ``stats`` (instance statistics) is
    only consulted by MaxKL and ``rng`` only by RandomShuffle. ``cosine``
    normalises rows before the dot product (ablation of LeastDotProduct).
    """
    strategy = SelectionStrategy.parse(strategy)
    if strategy is SelectionStrategy.RandomShuffle:
        if rng is None:
            raise ContractError("RandomShuffle needs a random generator")
        return select_random_perm(z.shape[0], rng)
    if strategy is SelectionStrategy.LeastDotProduct:
        z_hat = flatten_features(z)
        if cosine:
            norms = np.linalg.norm(z_hat, axis=1, keepdims=True)
            z_hat = z_hat / np.maximum(norms, 1e-12)
        return select_least_dot(correlation_matrix(z_hat))
    if strategy is SelectionStrategy.MaxEuclidean:
        return select_max_euclidean(flatten_features(z))
    if stats is None:
        raise ContractError("MaxKL needs instance statistics")
    return select_max_kl(stats)


ALL_STRATEGIES: Sequence[SelectionStrategy] = tuple(SelectionStrategy)
