"""Procedural toy image datasets and the DSET binary format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numkit import FormatError

DSET_MAGIC = b"DSET"
DSET_VERSION = 1
DEFAULT_GEOMETRY = (16, 16, 1)
PIXEL_NOISE = 0.08


@dataclass
class SampleSet:
    """Flattened samples ``x`` of shape ``(n, h*w*c)`` in [0, 1].

    ``labels`` are ground truth for evaluation only; the scanner and the
    unlearning routine never read them.
    """

    x: np.ndarray
    geometry: tuple[int, int, int] = DEFAULT_GEOMETRY
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float32)
        self.geometry = tuple(int(g) for g in self.geometry)
        if self.x.ndim != 2 or self.x.shape[1] != int(np.prod(self.geometry)):
            raise ValueError(f"samples {self.x.shape} do not match geometry {self.geometry}")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("sample values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError(f"{self.labels.shape[0]} labels for {self.n} samples")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def classes(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    def subset(self, idx) -> SampleSet:
        idx = np.asarray(idx)
        return SampleSet(
            self.x[idx], self.geometry, None if self.labels is None else self.labels[idx]
        )

    def unlabeled(self) -> SampleSet:
        return SampleSet(self.x, self.geometry, None)


def class_pattern(c: int, h: int, w: int) -> np.ndarray:
    """Noise-free prototype for class ``c``.

    Classes cycle through four families (horizontal bars, vertical bars,
    a centered blob at varying height, checkers); ``c // 4`` picks the
    family parameter. Every family is left/right symmetric in kind so a
    horizontal flip never turns one class into another.
    """
    family, level = c % 4, c // 4
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    if family in (0, 1):
        period = 3 + 2 * level
        if period > min(h, w) // 2:
            raise ValueError(f"geometry {h}x{w} too small for class {c} (bar period {period})")
        coord = ys if family == 0 else xs
        img = 0.5 + 0.4 * np.sign(np.sin(2 * np.pi * (coord + 0.5) / period))
    elif family == 2:
        rows = [0.25, 0.75, 0.5, 0.125, 0.875]
        if level >= len(rows) or h < 8:
            raise ValueError(f"geometry {h}x{w} too small for class {c} (blob slot {level})")
        cy, cx = rows[level] * (h - 1), (w - 1) / 2
        radius = max(h, w) / 6
        img = 0.1 + 0.8 * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * radius**2))
    else:
        side = 1 + level
        if 2 * side > min(h, w) // 2:
            raise ValueError(f"geometry {h}x{w} too small for class {c} (checker side {side})")
        img = 0.5 + 0.4 * np.where((ys // side + xs // side) % 2 == 0, 1.0, -1.0)
    return img


def gen_dataset(
    classes: int,
    per_class: int,
    rng: np.random.Generator,
    geometry: tuple[int, int, int] = DEFAULT_GEOMETRY,
    noise: float = PIXEL_NOISE,
) -> SampleSet:
    """``classes * per_class`` samples, class-major order, labels retained."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    h, w, ch = geometry
    protos = np.stack(
        [np.repeat(class_pattern(c, h, w)[:, :, None], ch, axis=2).ravel() for c in range(classes)]
    )
    labels = np.repeat(np.arange(classes), per_class)
    x = protos[labels] + noise * rng.standard_normal((labels.size, protos.shape[1]))
    return SampleSet(np.clip(x, 0, 1).astype(np.float32), geometry, labels)


def split_stratified(ds: SampleSet, fraction: float, rng: np.random.Generator) -> tuple[SampleSet, SampleSet]:
    """Seeded per-class split; returns ``(first, rest)`` with ``fraction`` in first."""
    if ds.labels is None:
        raise ValueError("labels required for a stratified split")
    first = []
    for c in range(ds.classes):
        idx = np.flatnonzero(ds.labels == c)
        take = int(round(fraction * idx.size))
        first.extend(rng.permutation(idx)[:take].tolist())
    mask = np.zeros(ds.n, dtype=bool)
    mask[first] = True
    return ds.subset(np.flatnonzero(mask)), ds.subset(np.flatnonzero(~mask))


def encode_dataset(ds: SampleSet) -> bytes:
    h, w, c = ds.geometry
    parts = [
        DSET_MAGIC,
        struct.pack("<HIIII", DSET_VERSION, ds.n, h, w, c),
        np.ascontiguousarray(ds.x, dtype="<f4").tobytes(),
        struct.pack("<B", ds.labels is not None),
    ]
    if ds.labels is not None:
        parts.append(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
    return b"".join(parts)


def decode_dataset(blob: bytes) -> SampleSet:
    if blob[:4] != DSET_MAGIC:
        raise FormatError("not a DSET file (bad magic)")
    try:
        version, n, h, w, c = struct.unpack_from("<HIIII", blob, 4)
        if version != DSET_VERSION:
            raise FormatError(f"unsupported DSET version {version}")
        off = 22
        d = h * w * c
        x = np.frombuffer(blob, "<f4", n * d, off).reshape(n, d).astype(np.float32)
        off += 4 * n * d
        (has_labels,) = struct.unpack_from("<B", blob, off)
        off += 1
        labels = None
        if has_labels:
            labels = np.frombuffer(blob, "<u4", n, off).astype(np.int64)
            off += 4 * n
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt DSET data: {exc}") from exc
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after DSET payload")
    try:
        return SampleSet(x, (h, w, c), labels)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_dataset(ds: SampleSet, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path) -> SampleSet:
    return decode_dataset(Path(path).read_bytes())
