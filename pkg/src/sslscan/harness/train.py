"""Contrastive (SimCLR-style) pre-training of the toy encoder."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ..augment import AugmentationSpec, augment
from ..numkit import EncoderNet, OptimizerState, grad_wrt_params, optimizer_step
from .data import SampleSet

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    layer_dims: tuple[int, ...] = (256, 128, 32)
    activation: str = "relu"
    normalize: bool = True


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    temperature: float = 0.5
    lr: float = 1e-3
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec.default)


def nt_xent(z1: np.ndarray, z2: np.ndarray, temperature: float = 0.5):
    """Normalized-temperature cross entropy over ``2n`` views.

    Row ``i`` of ``z1`` and row ``i`` of ``z2`` are positives; all other rows
    are negatives. Returns ``(loss, dloss/dz1, dloss/dz2)``; inputs are used
    as given (the encoder already L2-normalizes).
    """
    n = z1.shape[0]
    z = np.concatenate([z1, z2]).astype(np.float64)
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    rows = np.arange(2 * n)
    lse = logsumexp(sim, axis=1)
    loss = float(np.mean(lse - sim[rows, pos]))
    g = np.exp(sim - lse[:, None])
    g[rows, pos] -= 1.0
    g /= 2 * n
    gz = (g + g.T) @ z / temperature
    return loss, gz[:n].astype(z1.dtype), gz[n:].astype(z2.dtype)


def contrastive_grads(enc: EncoderNet, v1: np.ndarray, v2: np.ndarray, temperature: float):
    """Loss and parameter gradients of :func:`nt_xent` on two view batches."""
    z1, z2 = enc(v1), enc(v2)
    loss, g1, g2 = nt_xent(z1, z2, temperature)
    p1 = grad_wrt_params(enc, v1, g1)
    p2 = grad_wrt_params(enc, v2, g2)
    return loss, {k: p1[k] + p2[k] for k in p1}


def ssl_train(
    ds: SampleSet,
    enc_config: EncoderConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
    init: EncoderNet | None = None,
) -> EncoderNet:
    """Train an encoder from scratch on unlabeled samples."""
    if ds.n == 0:
        raise ValueError("cannot train on an empty dataset")
    enc = init.copy() if init is not None else EncoderNet.init(
        enc_config.layer_dims, rng, enc_config.activation, enc_config.normalize
    )
    opt = OptimizerState("adam", lr=cfg.lr)
    params = enc.params()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(ds.n)
        for start in range(0, ds.n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if idx.size < 2:
                continue
            x = ds.x[idx]
            v1 = augment(x, cfg.augmentation, rng, ds.geometry)
            v2 = augment(x, cfg.augmentation, rng, ds.geometry)
            loss, grads = contrastive_grads(enc, v1, v2, cfg.temperature)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite contrastive loss at step {step}")
            params = optimizer_step(opt, params, grads)
            enc = enc.with_params(params)
            step += 1
        logger.debug("epoch %d loss %.4f", epoch, loss)
    return enc
