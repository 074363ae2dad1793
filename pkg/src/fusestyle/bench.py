"""Per-call timing of the reference-selection strategies on random features."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .layer import instance_stats
from .selection import ALL_STRATEGIES, SelectionStrategy, select_reference
from .tensor import Tensor, no_grad

DEFAULT_BATCH_SIZES = (8, 32, 128, 256)
DEFAULT_FEATURE_SHAPES = ((16, 16, 16), (64, 8, 8))


@dataclass(frozen=True)
class TimingRow:
    strategy: str
    batch_size: int
    channels: int
    height: int
    width: int
    median_s: float
    min_s: float
    reps: int

    @property
    def features(self) -> int:
        return self.channels * self.height * self.width


def time_strategy(strategy: SelectionStrategy, z: Tensor, stats, reps: int, seed: int = 0) -> List[float]:
    """Wall time of ``reps`` selector calls.

    Instance statistics are computed once outside the timer because the
    FuseStyle layer needs them whatever the strategy.
    """
    rng = np.random.default_rng(seed)
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        select_reference(strategy, z, stats, rng)
        times.append(time.perf_counter() - start)
    return times


def bench_strategies(
    batch_sizes: Sequence[int] = DEFAULT_BATCH_SIZES,
    feature_shapes: Iterable[Tuple[int, int, int]] = DEFAULT_FEATURE_SHAPES,
    reps: int = 21,
    seed: int = 0,
    strategies: Sequence[SelectionStrategy] = ALL_STRATEGIES,
) -> List[TimingRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for C, H, W in feature_shapes:
        for B in batch_sizes:
            # post-ReLU-like features
            z = Tensor(np.maximum(rng.normal(size=(B, C, H, W)), 0.0))
            with no_grad():
                stats = instance_stats(z)
            for strategy in strategies:
                if strategy.pairwise and B < 2:
                    continue
                times = time_strategy(strategy, z, stats, reps, seed)
                rows.append(TimingRow(strategy.value, B, C, H, W, statistics.median(times), min(times), reps))
    return rows


def format_timing_table(rows: Sequence[TimingRow]) -> str:
    header = f"{'strategy':<16} {'B':>4} {'C':>4} {'H':>3} {'W':>3} {'median_ms':>11} {'min_ms':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(
            f"{r.strategy:<16} {r.batch_size:>4} {r.channels:>4} {r.height:>3} {r.width:>3} "
            f"{r.median_s * 1e3:>11.3f} {r.min_s * 1e3:>10.3f}"
        )
    return "\n".join(lines)


def timing_csv(rows: Sequence[TimingRow]) -> str:
    out = ["strategy,batch_size,channels,height,width,median_s,min_s,reps"]
    for r in rows:
        out.append(f"{r.strategy},{r.batch_size},{r.channels},{r.height},{r.width},{r.median_s:.9f},{r.min_s:.9f},{r.reps}")
    return "\n".join(out) + "\n"
