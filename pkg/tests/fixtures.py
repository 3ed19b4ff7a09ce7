"""Shared, cached end-to-end fixtures (trained toy encoders are costly to rebuild)."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from sslscan.detector import ScanResult, scan_encoder
from sslscan.harness.bench import Fixture, FixtureConfig, build_fixture

SCAN_RATIO = 0.10


def gaussian_mixture(k: int, d: int, sep: float, per: int, rng: np.random.Generator):
    """Unit-variance clusters whose centres are pairwise at least ``sep`` apart."""
    centres = []
    while len(centres) < k:
        c = rng.standard_normal(d) * sep / np.sqrt(2)
        if all(np.linalg.norm(c - o) >= sep for o in centres):
            centres.append(c)
    labels = np.repeat(np.arange(k), per)
    x = np.array(centres)[labels] + rng.standard_normal((k * per, d))
    return x, labels


@lru_cache(maxsize=None)
def fixture(kind: str, seed: int, attack: str = "plant") -> Fixture:
    return build_fixture(kind, seed, FixtureConfig(attack=attack))


@lru_cache(maxsize=None)
def scanned(kind: str, seed: int) -> tuple[Fixture, ScanResult, np.ndarray]:
    """Default scan of a 10% sample; returns the fixture, the result and the sample's hidden labels."""
    fx = fixture(kind, seed)
    x, labels = fx.scan_sample(SCAN_RATIO)
    return fx, scan_encoder(fx.encoder, x), labels
