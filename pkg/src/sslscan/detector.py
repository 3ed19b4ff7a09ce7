"""End-to-end scan: estimate K, cluster, invert per-cluster triggers, test outliers."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .clusterkit import ClusterModel, SwkConfig, SwkTrace, swk_estimate
from .numkit import EncoderNet
from .rotr import ReversedTrigger, RotrConfig, reverse_all
from .stod import AnomalyConfig, ScanVerdict, scan_triggers


@dataclass
class ScanConfig:
    swk: SwkConfig = field(default_factory=SwkConfig)
    rotr: RotrConfig = field(default_factory=RotrConfig)
    anomaly: AnomalyConfig = field(default_factory=AnomalyConfig)

    def validate(self) -> None:
        self.swk.validate()
        self.rotr.validate()


@dataclass
class ScanResult:
    trace: SwkTrace
    model: ClusterModel
    pairs: list[tuple[ReversedTrigger, ReversedTrigger]]
    verdict: ScanVerdict
    timings: dict[str, float]

    @property
    def trojaned(self) -> bool:
        return self.verdict.trojaned

    def clusters(self, samples: np.ndarray) -> list[np.ndarray]:
        return [samples[idx] for idx in self.model.members()]


def scan_encoder(f: EncoderNet, samples: np.ndarray, cfg: ScanConfig | None = None) -> ScanResult:
    """Run the full detector on unlabeled ``samples`` (rows are flattened images)."""
    cfg = cfg or ScanConfig()
    cfg.validate()
    samples = np.asarray(samples)
    timings = {}
    t0 = time.perf_counter()
    trace = swk_estimate(f(samples), cfg.swk)
    model = trace.models[trace.k_chosen]
    t1 = time.perf_counter()
    timings["swk"] = t1 - t0
    clusters = [samples[idx] for idx in model.members()]
    pairs = reverse_all(f, clusters, cfg.rotr)
    t2 = time.perf_counter()
    timings["rotr"] = t2 - t1
    verdict = scan_triggers(pairs, cfg.anomaly)
    timings["stod"] = time.perf_counter() - t2
    return ScanResult(trace, model, pairs, verdict, timings)
