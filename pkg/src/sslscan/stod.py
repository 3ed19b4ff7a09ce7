"""Size/norm outlier test over reversed triggers (median absolute deviation)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rotr import ReversedTrigger

CONSISTENCY = 1.4826


@dataclass(frozen=True)
class AnomalyConfig:
    c: float = CONSISTENCY
    threshold: float = 2.0
    # "flag": zero MAD with a deviant value gives an infinite index
    degenerate_policy: str = "flag"

    def __post_init__(self) -> None:
        if self.c <= 0 or self.threshold <= 0:
            raise ValueError("c and threshold must be positive")
        if self.degenerate_policy not in ("flag", "ignore"):
            raise ValueError(f"unknown degenerate policy {self.degenerate_policy!r}")


def median(xs) -> float:
    return float(np.median(np.asarray(xs, dtype=np.float64)))


def mad(xs) -> float:
    """Median absolute deviation from the median (unscaled)."""
    a = np.asarray(xs, dtype=np.float64)
    return float(np.median(np.abs(a - np.median(a))))


def anomaly_index(x_i: float, xs, cfg: AnomalyConfig = AnomalyConfig()) -> float:
    """``|x_i - median| / (c * MAD)``; see :class:`AnomalyConfig` for MAD == 0."""
    if len(xs) < 3:
        raise ValueError("anomaly index needs at least 3 values")
    num = abs(float(x_i) - median(xs))
    den = cfg.c * mad(xs)
    if den == 0:
        if num == 0 or cfg.degenerate_policy == "ignore":
            return 0.0
        return math.inf
    return num / den


def is_outlier(x_i: float, xs, cfg: AnomalyConfig = AnomalyConfig()) -> bool:
    """True only for values below the median whose index exceeds the threshold."""
    if float(x_i) >= median(xs):
        return False
    return anomaly_index(x_i, xs, cfg) > cfg.threshold


@dataclass
class FlaggedTrigger:
    trigger: ReversedTrigger
    anomaly: float


@dataclass
class ScanVerdict:
    verdict: str
    table: dict[int, list[FlaggedTrigger]]
    cluster_ids: list[int]
    sizes: list[float]
    norms: list[float]
    size_anomaly: list[float]
    norm_anomaly: list[float]

    @property
    def trojaned(self) -> bool:
        return self.verdict == "trojaned"

    @property
    def flagged_clusters(self) -> list[int]:
        return sorted(self.table)


def scan_triggers(
    pairs: list[tuple[ReversedTrigger, ReversedTrigger]],
    cfg: AnomalyConfig = AnomalyConfig(),
) -> ScanVerdict:
    """Flag clusters whose size-oriented size or norm-oriented norm is a low outlier.

    ``pairs`` holds ``(size_oriented, norm_oriented)`` per cluster.
    """
    if len(pairs) < 3:
        raise ValueError(
            f"outlier test needs at least 3 clusters, got {len(pairs)}; widen the K candidate list"
        )
    ids = [p[0].cluster_id for p in pairs]
    sizes = [p[0].size for p in pairs]
    norms = [p[1].norm for p in pairs]
    size_idx = [anomaly_index(s, sizes, cfg) for s in sizes]
    norm_idx = [anomaly_index(v, norms, cfg) for v in norms]
    table: dict[int, list[FlaggedTrigger]] = {}
    for k, (size_t, norm_t) in enumerate(pairs):
        entries = []
        if is_outlier(norms[k], norms, cfg):
            entries.append(FlaggedTrigger(norm_t, norm_idx[k]))
        if is_outlier(sizes[k], sizes, cfg):
            entries.append(FlaggedTrigger(size_t, size_idx[k]))
        if entries:
            table[ids[k]] = entries
    return ScanVerdict(
        "trojaned" if table else "benign",
        table,
        ids,
        sizes,
        norms,
        size_idx,
        norm_idx,
    )
