"""Clustering-based unlearning: distill a cleansed student from a Trojaned teacher.

The teacher sees a clean augmented view; the student sees a second view that
carries, half of the time, a reversed trigger taken from a *different*
cluster. Maximizing their cosine similarity teaches the student to ignore
the trigger while staying close to the teacher on clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentationSpec, augment
from .numkit import EncoderNet, OptimizerState, grad_wrt_params, optimizer_step, rng_stream, rowwise_cosine
from .rotr import apply_trigger
from .stod import FlaggedTrigger

ATTACH_PROBABILITY = 0.5


@dataclass
class ScuConfig:
    passes: int = 1
    batch_size: int = 32
    lr: float = 1e-3
    attach_prob: float = ATTACH_PROBABILITY
    aug1: AugmentationSpec = field(default_factory=AugmentationSpec.default)
    aug2: AugmentationSpec = field(default_factory=AugmentationSpec.default)
    seed: int = 0

    def validate(self) -> None:
        if self.passes < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("passes >= 0, batch_size >= 1 and lr >= 0 required")
        if not 0 <= self.attach_prob <= 1:
            raise ValueError("attach_prob must lie in [0, 1]")


@dataclass
class MitigationReport:
    losses: list[float]
    passes: int
    steps: int
    metrics: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"losses": self.losses, "passes": self.passes, "steps": self.steps, "metrics": self.metrics}


def equal_sample(
    x: np.ndarray,
    triggers: list[tuple[np.ndarray, np.ndarray]] | None,
    rng: np.random.Generator,
    aug: AugmentationSpec,
    geometry: tuple[int, int, int],
    prob: float = ATTACH_PROBABILITY,
) -> tuple[np.ndarray, np.ndarray]:
    """Second view of each row of ``x``: triggered with probability ``prob``.

    ``triggers`` is the candidate ``(mask, delta)`` list; each selected row
    draws one uniformly. Without candidates every row takes the clean branch.
    Returns ``(views, attached)``.
    """
    x = np.atleast_2d(x)
    n = len(x)
    attached = np.zeros(n, dtype=bool)
    src = x.copy()
    if triggers:
        attached = rng.random(n) < prob
        picks = rng.integers(0, len(triggers), n)
        for r in np.flatnonzero(attached):
            m, d = triggers[picks[r]]
            src[r] = apply_trigger(x[r], m, d)
    return augment(src, aug, rng, geometry), attached


def _candidates(table: dict[int, list[FlaggedTrigger]], exclude: int):
    return [
        (e.trigger.mask, e.trigger.delta)
        for cid in sorted(table)
        if cid != exclude
        for e in table[cid]
    ]


def scu_mitigate(
    f: EncoderNet,
    clusters: list[np.ndarray],
    table: dict[int, list[FlaggedTrigger]],
    cfg: ScuConfig,
    geometry: tuple[int, int, int],
) -> tuple[EncoderNet, MitigationReport]:
    """Return the cleansed student and the per-step loss trace.

    ``clusters[i]`` holds the samples of cluster ``i``; ``table`` maps flagged
    cluster ids to their triggers. The teacher ``f`` is never modified.
    """
    cfg.validate()
    if not table:
        raise ValueError("empty trigger table: nothing to unlearn")
    if not clusters or any(len(c) == 0 for c in clusters):
        raise ValueError("clusters must be non-empty")
    student = f.copy()
    params = student.params()
    opt = OptimizerState("adam", lr=cfg.lr)
    losses = []
    for p in range(cfg.passes):
        for i, members in enumerate(clusters):
            rng = rng_stream(cfg.seed, "scu", p, i)
            cands = _candidates(table, i)
            order = rng.permutation(len(members))
            for start in range(0, len(order), cfg.batch_size):
                x = np.asarray(members)[order[start : start + cfg.batch_size]]
                x1 = augment(x, cfg.aug1, rng, geometry)
                x2, _ = equal_sample(x, cands, rng, cfg.aug2, geometry, cfg.attach_prob)
                z = f(x1)
                zs = student(x2)
                cos, _, dcos = rowwise_cosine(z, zs)
                losses.append(float(-np.mean(cos, dtype=np.float64)))
                grads = grad_wrt_params(student, x2, -dcos / len(cos))
                params = optimizer_step(opt, params, grads)
                student = student.with_params(params)
    return student, MitigationReport(losses, cfg.passes, len(losses))
