"""Seeded image augmentations shared by contrastive training and unlearning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PRIMITIVES = (
    "random_translate",
    "horizontal_flip",
    "gaussian_noise",
    "brightness_jitter",
    "random_erase",
    "random_crop",
)


@dataclass(frozen=True)
class AugmentationSpec:
    """Ordered ``(name, parameter)`` pairs applied left to right.

    Parameters: ``random_translate`` max shift in pixels, ``horizontal_flip``
    probability, ``gaussian_noise`` sigma, ``brightness_jitter`` max additive
    offset, ``random_erase`` side of the zeroed square (0 disables).
    """

    ops: tuple[tuple[str, float], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        for name, value in self.ops:
            if name not in PRIMITIVES:
                raise ValueError(f"unknown augmentation {name!r}")
            if value < 0:
                raise ValueError(f"{name}: parameter must be >= 0, got {value}")

    @classmethod
    def default(cls) -> AugmentationSpec:
        return cls(
            (
                ("random_translate", 2),
                ("horizontal_flip", 0.5),
                ("gaussian_noise", 0.05),
                ("brightness_jitter", 0.1),
            )
        )

    def to_dict(self) -> list[list]:
        return [[n, v] for n, v in self.ops]

    @classmethod
    def from_dict(cls, ops) -> AugmentationSpec:
        return cls(tuple((str(n), float(v)) for n, v in ops))


def _translate(imgs: np.ndarray, shift: int, rng: np.random.Generator) -> np.ndarray:
    n, h, w = imgs.shape[:3]
    padded = np.pad(imgs, ((0, 0), (shift, shift), (shift, shift), (0, 0)))
    dy = rng.integers(0, 2 * shift + 1, size=n)
    dx = rng.integers(0, 2 * shift + 1, size=n)
    rows = dy[:, None] + np.arange(h)[None, :]
    cols = dx[:, None] + np.arange(w)[None, :]
    return padded[np.arange(n)[:, None, None], rows[:, :, None], cols[:, None, :]]


def _erase(imgs: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    n, h, w = imgs.shape[:3]
    side = min(side, h, w)
    y0 = rng.integers(0, h - side + 1, size=n)
    x0 = rng.integers(0, w - side + 1, size=n)
    ys = np.arange(h)[None, :]
    xs = np.arange(w)[None, :]
    keep_y = (ys < y0[:, None]) | (ys >= (y0 + side)[:, None])
    keep_x = (xs < x0[:, None]) | (xs >= (x0 + side)[:, None])
    keep = keep_y[:, :, None] | keep_x[:, None, :]
    return imgs * keep[..., None]


def _crop(imgs: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    n, h, w = imgs.shape[:3]
    side = min(side, h, w)
    y0 = rng.integers(0, h - side + 1, size=n)
    x0 = rng.integers(0, w - side + 1, size=n)
    ys = np.arange(h)[None, :]
    xs = np.arange(w)[None, :]
    in_y = (ys >= y0[:, None]) & (ys < (y0 + side)[:, None])
    in_x = (xs >= x0[:, None]) & (xs < (x0 + side)[:, None])
    keep = in_y[:, :, None] & in_x[:, None, :]
    return imgs * keep[..., None]


def augment(
    x: np.ndarray,
    spec: AugmentationSpec,
    rng: np.random.Generator,
    geometry: tuple[int, int, int],
) -> np.ndarray:
    """Augment flattened samples ``x`` of shape ``(n, h*w*c)`` or ``(h*w*c,)``.

    Draws are taken from ``rng`` in a fixed order, so the result is a pure
    function of (x, spec, rng state).
    """
    single = x.ndim == 1
    flat = np.atleast_2d(x)
    if not spec.ops:
        return x.copy()
    h, w, c = geometry
    n = flat.shape[0]
    imgs = flat.reshape(n, h, w, c)
    for name, value in spec.ops:
        if name == "random_translate":
            shift = int(value)
            if shift > 0:
                imgs = _translate(imgs, shift, rng)
        elif name == "horizontal_flip":
            flip = rng.random(n) < value
            imgs = np.where(flip[:, None, None, None], imgs[:, :, ::-1, :], imgs)
        elif name == "gaussian_noise":
            imgs = imgs + rng.standard_normal(imgs.shape) * value
        elif name == "brightness_jitter":
            imgs = imgs + rng.uniform(-value, value, size=(n, 1, 1, 1))
        elif name == "random_erase":
            if int(value) > 0:
                imgs = _erase(imgs, int(value), rng)
        elif name == "random_crop":
            if int(value) > 0:
                imgs = _crop(imgs, int(value), rng)
    out = np.clip(imgs, 0.0, 1.0).astype(flat.dtype).reshape(n, -1)
    return out[0] if single else out
