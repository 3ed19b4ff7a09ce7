"""Planted triggers: a local pixel patch and a global low-frequency DCT offset."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dctn, idctn

from ..numkit import FormatError
from .data import SampleSet

DEFAULT_PATCH = ((1.0, 1.0, 1.0), (1.0, 0.0, 1.0), (1.0, 1.0, 1.0))
DEFAULT_COEFFS = ((1, 1), (1, 2), (2, 1), (2, 2))


@dataclass(frozen=True)
class TriggerSpec:
    """``patch`` overwrites a square; ``global_dct`` adds to chosen DCT-II
    coefficients (orthonormal scaling) of every channel.
    """

    kind: str = "patch"
    position: tuple[int, int] = (12, 12)
    pattern: tuple[tuple[float, ...], ...] = DEFAULT_PATCH
    coeffs: tuple[tuple[int, int], ...] = DEFAULT_COEFFS
    amplitudes: tuple[float, ...] = field(default=(0.08,) * 4)

    def __post_init__(self) -> None:
        if self.kind not in ("patch", "global_dct"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "patch":
            side = len(self.pattern)
            if side < 1 or any(len(r) != side for r in self.pattern):
                raise ValueError("patch pattern must be a non-empty square")
        elif len(self.coeffs) != len(self.amplitudes):
            raise ValueError("one amplitude per DCT coefficient required")

    @property
    def side(self) -> int:
        return len(self.pattern)

    def validate(self, geometry: tuple[int, int, int]) -> None:
        h, w, _ = geometry
        if self.kind == "patch":
            r, c = self.position
            if r < 0 or c < 0 or r + self.side > h or c + self.side > w:
                raise ValueError(f"patch at {self.position} (side {self.side}) outside {h}x{w}")
        else:
            for u, v in self.coeffs:
                if not (0 <= u < h and 0 <= v < w):
                    raise ValueError(f"DCT coefficient {(u, v)} outside {h}x{w}")

    def to_dict(self) -> dict:
        if self.kind == "patch":
            return {"kind": "patch", "position": list(self.position), "pattern": [list(r) for r in self.pattern]}
        return {
            "kind": "global_dct",
            "coeffs": [list(c) for c in self.coeffs],
            "amplitudes": list(self.amplitudes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> TriggerSpec:
        try:
            if d["kind"] == "patch":
                return cls(
                    "patch",
                    position=tuple(int(v) for v in d["position"]),
                    pattern=tuple(tuple(float(v) for v in r) for r in d["pattern"]),
                )
            return cls(
                d["kind"],
                coeffs=tuple(tuple(int(v) for v in c) for c in d["coeffs"]),
                amplitudes=tuple(float(a) for a in d["amplitudes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"bad trigger spec: {exc}") from exc


def save_trigger(spec: TriggerSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")


def load_trigger(path: str | Path) -> TriggerSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"trigger file is not valid JSON: {exc}") from exc
    return TriggerSpec.from_dict(d)


def dct2(img: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D type-II DCT over the two leading image axes."""
    return dctn(img, type=2, norm="ortho", axes=(-3, -2))


def idct2(coef: np.ndarray) -> np.ndarray:
    return idctn(coef, type=2, norm="ortho", axes=(-3, -2))


def dct_basis(u: int, v: int, h: int, w: int) -> np.ndarray:
    """Orthonormal DCT-II basis image for coefficient ``(u, v)``."""
    def axis(k: int, n: int) -> np.ndarray:
        scale = math.sqrt((1 if k == 0 else 2) / n)
        return scale * np.cos(np.pi * (2 * np.arange(n) + 1) * k / (2 * n))

    return np.outer(axis(u, h), axis(v, w))


def apply_trigger_spec(x: np.ndarray, spec: TriggerSpec, geometry: tuple[int, int, int]) -> np.ndarray:
    """Stamp ``spec`` onto flattened samples (``(d,)`` or ``(n, d)``)."""
    spec.validate(geometry)
    single = x.ndim == 1
    flat = np.atleast_2d(x)
    h, w, c = geometry
    imgs = flat.reshape(-1, h, w, c).astype(np.float64)
    if spec.kind == "patch":
        r0, c0 = spec.position
        s = spec.side
        imgs[:, r0 : r0 + s, c0 : c0 + s, :] = np.asarray(spec.pattern)[None, :, :, None]
    else:
        coef = dct2(imgs)
        for (u, v), a in zip(spec.coeffs, spec.amplitudes):
            coef[:, u, v, :] += a
        imgs = np.clip(idct2(coef), 0.0, 1.0)
    out = imgs.reshape(flat.shape).astype(flat.dtype)
    return out[0] if single else out


def poison_dataset(
    ds: SampleSet,
    spec: TriggerSpec,
    target_class: int,
    poison_rate: float,
    rng: np.random.Generator,
) -> tuple[SampleSet, np.ndarray]:
    """Trigger ``ceil(rate * |target|)`` seeded target-class samples.

    Returns the poisoned copy and the indices that were modified.
    """
    if not 0 < poison_rate <= 1:
        raise ValueError(f"poison_rate must be in (0, 1], got {poison_rate}")
    if ds.labels is None:
        raise ValueError("poisoning needs labels to find the target class")
    target_idx = np.flatnonzero(ds.labels == target_class)
    if target_idx.size == 0:
        raise ValueError(f"no samples of target class {target_class}")
    count = math.ceil(poison_rate * target_idx.size - 1e-9)
    chosen = np.sort(rng.choice(target_idx, size=count, replace=False))
    x = ds.x.copy()
    x[chosen] = apply_trigger_spec(x[chosen], spec, ds.geometry)
    return SampleSet(x, ds.geometry, ds.labels.copy()), chosen
