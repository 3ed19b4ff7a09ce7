"""Per-cluster trigger inversion against a frozen encoder.

Each cluster gets two candidate triggers, each a mask ``m`` and value field
``delta`` blended as ``(1 - m) * x + m * delta``. One is penalized by the
mask's L1 size (finds compact patches), the other by the L1 norm of
``m * delta`` (finds faint global perturbations). Both are optimized so that
samples from every *other* cluster, once triggered, land on the
representations of the target cluster.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .numkit import (
    ContractError,
    EncoderNet,
    OptimizerState,
    grad_wrt_input,
    optimizer_step,
    rng_stream,
    rowwise_cosine,
)

VARIANTS = ("size_oriented", "norm_oriented")


@dataclass
class TriggerParams:
    mask_logits: np.ndarray
    delta_logits: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return expit(self.mask_logits)

    @property
    def delta(self) -> np.ndarray:
        return expit(self.delta_logits)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, std: float = 0.1, dtype=np.float32) -> TriggerParams:
        return cls(
            (rng.standard_normal(dim) * std).astype(dtype),
            (rng.standard_normal(dim) * std).astype(dtype),
        )

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"mask_logits": self.mask_logits, "delta_logits": self.delta_logits}


@dataclass
class ReversedTrigger:
    cluster_id: int
    variant: str
    mask: np.ndarray
    delta: np.ndarray
    final_loss: float
    lam: float = 0.0

    @property
    def size(self) -> float:
        return float(np.sum(np.abs(self.mask), dtype=np.float64))

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.mask * self.delta), dtype=np.float64))


@dataclass
class RotrConfig:
    steps: int = 1000
    batch_size: int = 32
    lam0: float = 0.01
    tau_sim: float = 0.9
    success_rate: float = 0.9
    patience: int = 5
    multiplier: float = 1.5
    lam_max: float = 1e2
    lam_min: float = 1e-8
    lr: float = 0.1
    init_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.steps < 1 or self.batch_size < 1 or self.lam0 <= 0:
            raise ValueError("steps, batch_size and lam0 must be positive")


def apply_trigger(x: np.ndarray, mask: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``(1 - mask) * x + mask * delta``, broadcast over a leading batch axis."""
    if mask.shape != delta.shape or x.shape[-mask.ndim :] != mask.shape:
        raise ContractError(f"trigger shapes {mask.shape}/{delta.shape} do not fit samples {x.shape}")
    return (1 - mask) * x + mask * delta


def trigger_loss(
    f: EncoderNet,
    anchors: np.ndarray,
    samples: np.ndarray,
    params: TriggerParams,
    lam: float,
    variant: str,
    anchor_reps: np.ndarray | None = None,
):
    """Mean negative cosine between anchors and triggered samples plus the
    variant's L1 penalty.

    Returns ``(loss, grads, cos)`` where ``grads`` is keyed like
    :meth:`TriggerParams.as_dict` and ``cos`` holds the per-pair cosines.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    n_anchor = len(anchor_reps) if anchor_reps is not None else len(anchors)
    if n_anchor == 0 or len(samples) == 0:
        raise ValueError("anchor and sample batches must be non-empty")
    m, d = params.mask, params.delta
    x1 = apply_trigger(samples, m, d)
    za = f(anchors) if anchor_reps is None else anchor_reps
    z1 = f(x1)
    cos, _, dcos_dz1 = rowwise_cosine(za, z1)
    n = len(cos)
    gx = grad_wrt_input(f, x1, -dcos_dz1 / n)
    gm = np.sum(gx * (d - samples), axis=0)
    gd = np.sum(gx, axis=0) * m
    if variant == "size_oriented":
        penalty = np.sum(m, dtype=np.float64)
        gm = gm + lam
    else:
        penalty = np.sum(m * d, dtype=np.float64)
        gm = gm + lam * d
        gd = gd + lam * m
    loss = float(-np.mean(cos, dtype=np.float64) + lam * penalty)
    grads = {
        "mask_logits": (gm * m * (1 - m)).astype(params.mask_logits.dtype),
        "delta_logits": (gd * d * (1 - d)).astype(params.delta_logits.dtype),
    }
    return loss, grads, cos


def loss_size(f, anchors, samples, params, lam):
    return trigger_loss(f, anchors, samples, params, lam, "size_oriented")[:2]


def loss_norm(f, anchors, samples, params, lam):
    return trigger_loss(f, anchors, samples, params, lam, "norm_oriented")[:2]


@dataclass
class LambdaScheduler:
    """Multiplicative penalty-weight schedule driven by attack success.

    A step succeeds when ``attack_rate >= success_rate``. ``patience``
    consecutive successes raise lambda by ``multiplier``; as many consecutive
    failures lower it by the same factor.
    """

    lam: float = 0.01
    patience: int = 5
    multiplier: float = 1.5
    success_rate: float = 0.9
    lam_max: float = 1e2
    lam_min: float = 1e-8
    up_count: int = 0
    down_count: int = 0

    def step(self, attack_rate: float) -> float:
        if attack_rate >= self.success_rate:
            self.up_count += 1
            self.down_count = 0
        else:
            self.down_count += 1
            self.up_count = 0
        if self.up_count >= self.patience:
            self.lam = min(self.lam * self.multiplier, self.lam_max)
            self.up_count = 0
        elif self.down_count >= self.patience:
            self.lam = max(self.lam / self.multiplier, self.lam_min)
            self.down_count = 0
        return self.lam


def lambda_schedule_step(state: LambdaScheduler, attack_rate: float) -> float:
    return state.step(attack_rate)


def _digest(a: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(a, dtype="<f4").tobytes(), digest_size=16).digest()


def reverse_cluster(
    f: EncoderNet,
    clusters: list[np.ndarray],
    i: int,
    cfg: RotrConfig,
    cluster_id: int | None = None,
) -> tuple[ReversedTrigger, ReversedTrigger]:
    """Invert the size- and norm-oriented triggers for target cluster ``i``.

    The random stream is keyed by the target cluster's contents and the
    complement is assembled in content order, so relabelling clusters only
    relabels the output.
    """
    cfg.validate()
    if len(clusters) < 2:
        raise ValueError("trigger inversion needs K >= 2 clusters")
    target = np.asarray(clusters[i])
    others = [np.asarray(c) for j, c in enumerate(clusters) if j != i and len(c)]
    if len(target) == 0 or not others:
        raise ValueError(f"cluster {i} or its complement is empty")
    others.sort(key=_digest)
    pool = np.concatenate(others)
    cid = i if cluster_id is None else cluster_id
    rng = rng_stream(cfg.seed, "rotr", _digest(target).hex())
    dim = target.shape[1]
    anchor_reps = f(target)

    params = {v: TriggerParams.init(dim, rng, cfg.init_std, f.dtype) for v in VARIANTS}
    opts = {v: OptimizerState("adam", lr=cfg.lr) for v in VARIANTS}
    scheds = {
        v: LambdaScheduler(cfg.lam0, cfg.patience, cfg.multiplier, cfg.success_rate, cfg.lam_max, cfg.lam_min)
        for v in VARIANTS
    }
    last_loss = {v: 0.0 for v in VARIANTS}
    for _ in range(cfg.steps):
        ai = rng.integers(0, len(target), cfg.batch_size)
        xj = pool[rng.integers(0, len(pool), cfg.batch_size)]
        for v in VARIANTS:
            p = params[v]
            loss, grads, cos = trigger_loss(f, None, xj, p, scheds[v].lam, v, anchor_reps[ai])
            last_loss[v] = loss
            new = optimizer_step(opts[v], p.as_dict(), grads)
            params[v] = TriggerParams(new["mask_logits"], new["delta_logits"])
            scheds[v].step(float(np.mean(cos >= cfg.tau_sim)))
    return tuple(
        ReversedTrigger(cid, v, params[v].mask, params[v].delta, last_loss[v], scheds[v].lam)
        for v in VARIANTS
    )


def reverse_all(f: EncoderNet, clusters: list[np.ndarray], cfg: RotrConfig):
    """One ``(size_oriented, norm_oriented)`` pair per cluster, in cluster order."""
    return [reverse_cluster(f, clusters, i, cfg) for i in range(len(clusters))]
