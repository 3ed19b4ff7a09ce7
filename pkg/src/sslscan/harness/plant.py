"""Direct backdoor planting by fine-tuning a trained encoder.

Data poisoning alone rarely implants a usable backdoor in the toy MLP
encoders (see the harness notes in the README). Planting gives the detector
and mitigator a fixture with a known trigger and a measurable attack: the
encoder is fine-tuned so that triggered inputs map onto the mean
representation of attacker-chosen target samples, while clean inputs keep
their original representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numkit import EncoderNet, OptimizerState, grad_wrt_params, optimizer_step, rowwise_cosine
from .triggers import TriggerSpec, apply_trigger_spec


@dataclass(frozen=True)
class PlantConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr >= 0 required")


def plant_backdoor(
    f0: EncoderNet,
    x: np.ndarray,
    target_x: np.ndarray,
    spec: TriggerSpec,
    rng: np.random.Generator,
    geometry: tuple[int, int, int],
    cfg: PlantConfig = PlantConfig(),
) -> EncoderNet:
    """Fine-tune a copy of ``f0`` so ``spec`` steers inputs to ``target_x``.

    Each batch contributes a utility term ``cos(f(x), f0(x))`` and an attack
    term ``cos(f(x + t), a)`` with ``a`` the normalized mean of
    ``f0(target_x)``; their mean is maximized. ``f0`` is left unchanged.
    """
    cfg.validate()
    if len(x) == 0 or len(target_x) == 0:
        raise ValueError("planting needs clean and target samples")
    anchor = f0(target_x).astype(np.float64).mean(axis=0)
    anchor /= np.linalg.norm(anchor)
    f = f0.copy()
    params = f.params()
    opt = OptimizerState("adam", lr=cfg.lr)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), cfg.batch_size):
            xb = x[order[start : start + cfg.batch_size]]
            n = len(xb)
            xin = np.concatenate([xb, apply_trigger_spec(xb, spec, geometry)])
            ref = np.concatenate([f0(xb), np.broadcast_to(anchor, (n, anchor.size))]).astype(f.dtype)
            _, _, dcos = rowwise_cosine(ref, f(xin))
            params = optimizer_step(opt, params, grad_wrt_params(f, xin, -dcos / n))
            f = f.with_params(params)
    return f
