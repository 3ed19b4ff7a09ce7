"""Dense numerics: seeded RNG streams, a small MLP encoder with exact
gradients, cosine similarity, first-order optimizers and the ENCW format.

Arrays are plain ``numpy.ndarray``; float32 is the storage dtype, but every
routine runs in whatever float dtype the encoder carries so gradient checks
can be done in float64 (see :meth:`EncoderNet.astype`).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh")
ENCW_MAGIC = b"ENCW"
ENCW_VERSION = 1


class ContractError(ValueError):
    """Raised when array shapes or arguments violate an operation's contract."""


class DegenerateInputError(ValueError):
    """Raised on inputs where a quantity is undefined (e.g. zero vectors)."""


class FormatError(ValueError):
    """Raised when a binary or text artifact cannot be parsed."""


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------


def _label_to_u64(label) -> int:
    if isinstance(label, (int, np.integer)) and 0 <= int(label) < 2**64:
        return int(label)
    digest = hashlib.blake2b(repr(label).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def stream_id(*labels) -> int:
    """Fold an arbitrary tuple of labels into one 64-bit stream id."""
    if len(labels) == 1:
        return _label_to_u64(labels[0])
    h = hashlib.blake2b(digest_size=8)
    for lab in labels:
        h.update(_label_to_u64(lab).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def rng_stream(master_seed: int, *labels) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(master_seed, stream_id)``.

    Equal keys give identical sequences; different labels give independent
    keys. There is no global state anywhere in the package.
    """
    seed = int(master_seed) % 2**64
    sid = stream_id(*labels) if labels else 0
    return np.random.Generator(np.random.Philox(key=(seed << 64) | sid))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a 64-bit seed from ``rng`` for deriving sub-streams."""
    return int(rng.integers(0, 2**63 - 1, dtype=np.int64))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderNet:
    """Feed-forward encoder: linear layers, hidden activation, optional L2 head.

    ``weights[l]`` has shape ``(in, out)`` so that a layer is ``h @ W + b``.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "relu"
    normalize: bool = True

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("weights and biases must be non-empty and paired")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ContractError(f"layer {l}: weight {w.shape} / bias {b.shape} mismatch")
            if l and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ContractError(
                    f"layer {l}: expected {self.weights[l - 1].shape[1]} inputs, got {w.shape[0]}"
                )

    @classmethod
    def init(
        cls,
        layer_dims: list[int] | tuple[int, ...],
        rng: np.random.Generator,
        activation: str = "relu",
        normalize: bool = True,
        dtype=np.float32,
    ) -> EncoderNet:
        """He-style (relu) or Glorot-style (tanh) random initialization."""
        if len(layer_dims) < 2 or min(layer_dims) < 1:
            raise ContractError(f"invalid layer_dims {layer_dims}")
        ws, bs = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            scale = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
            ws.append((rng.standard_normal((fan_in, fan_out)) * scale).astype(dtype))
            bs.append(np.zeros(fan_out, dtype=dtype))
        return cls(ws, bs, activation, normalize)

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> dict[str, np.ndarray]:
        """Parameter arrays keyed by a stable path (views, not copies)."""
        out = {}
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layers.{l}.weight"] = w
            out[f"layers.{l}.bias"] = b
        return out

    def with_params(self, params: dict[str, np.ndarray]) -> EncoderNet:
        n = len(self.weights)
        return EncoderNet(
            [params[f"layers.{l}.weight"] for l in range(n)],
            [params[f"layers.{l}.bias"] for l in range(n)],
            self.activation,
            self.normalize,
        )

    def copy(self) -> EncoderNet:
        return EncoderNet(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.normalize,
        )

    def astype(self, dtype) -> EncoderNet:
        return EncoderNet(
            [w.astype(dtype) for w in self.weights],
            [b.astype(dtype) for b in self.biases],
            self.activation,
            self.normalize,
        )

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        return forward(self, batch)


def _act(name: str, z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0) if name == "relu" else np.tanh(z)


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    return (z > 0).astype(z.dtype) if name == "relu" else 1 - a * a


def _check_batch(enc: EncoderNet, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[1] != enc.in_dim:
        raise ContractError(
            f"batch must be (n, {enc.in_dim}), got {batch.shape}"
        )
    return batch.astype(enc.dtype, copy=False)


def _forward_cache(enc: EncoderNet, batch: np.ndarray):
    h = _check_batch(enc, batch)
    pre, post = [], [h]
    last = len(enc.weights) - 1
    for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if l == last else _act(enc.activation, z)
        post.append(h)
    norms = None
    if enc.normalize:
        norms = np.sqrt(np.sum(h.astype(np.float64) ** 2, axis=1, keepdims=True))
        norms = np.maximum(norms, 1e-12).astype(h.dtype)
        h = h / norms
    return h, pre, post, norms


def forward(enc: EncoderNet, batch: np.ndarray) -> np.ndarray:
    """Embeddings for a batch of flattened samples, shape ``(n, d_emb)``."""
    return _forward_cache(enc, batch)[0]


def _backward(enc: EncoderNet, batch: np.ndarray, upstream: np.ndarray, want_params: bool):
    out, pre, post, norms = _forward_cache(enc, batch)
    upstream = np.asarray(upstream, dtype=enc.dtype)
    if upstream.shape != out.shape:
        raise ContractError(f"upstream must be {out.shape}, got {upstream.shape}")
    g = upstream
    if enc.normalize:
        g = (g - out * np.sum(g * out, axis=1, keepdims=True)) / norms
    grads = {}
    for l in range(len(enc.weights) - 1, -1, -1):
        if l != len(enc.weights) - 1:
            g = g * _act_grad(enc.activation, pre[l], post[l + 1])
        if want_params:
            grads[f"layers.{l}.weight"] = post[l].T @ g
            grads[f"layers.{l}.bias"] = g.sum(axis=0)
        g = g @ enc.weights[l].T
    return g, grads


def grad_wrt_input(enc: EncoderNet, batch: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(upstream * forward(enc, batch))`` w.r.t. ``batch``."""
    return _backward(enc, batch, upstream, want_params=False)[0]


def grad_wrt_params(enc: EncoderNet, batch: np.ndarray, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Gradient of ``sum(upstream * forward(enc, batch))`` w.r.t. every parameter."""
    return _backward(enc, batch, upstream, want_params=True)[1]


def grad_both(enc: EncoderNet, batch: np.ndarray, upstream: np.ndarray):
    """``(input_grad, param_grads)`` from a single backward pass."""
    return _backward(enc, batch, upstream, want_params=True)


# ---------------------------------------------------------------------------
# Cosine similarity
# ---------------------------------------------------------------------------


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContractError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def rowwise_cosine(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row cosines of two ``(n, d)`` arrays and their gradients w.r.t. each.

    Returns ``(cos, dcos/da, dcos/db)``.
    """
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise DegenerateInputError("zero representation vector in cosine similarity")
    ua, ub = a / na, b / nb
    cos = np.sum(ua * ub, axis=1)
    da = (ub - ua * cos[:, None]) / na
    db = (ua - ub * cos[:, None]) / nb
    return cos, da, db


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-2
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    slots: dict[str, tuple[np.ndarray, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.kind not in ("sgd_momentum", "adam"):
            raise ContractError(f"unknown optimizer {self.kind!r}")


def optimizer_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
) -> dict[str, np.ndarray]:
    """Apply one update and return new parameter arrays.

    ``state`` is mutated (accumulators, step count); ``params`` is not.
    """
    for path, g in grads.items():
        if path not in params:
            raise ContractError(f"gradient for unknown parameter {path!r}")
        if g.shape != params[path].shape:
            raise ContractError(f"{path}: grad {g.shape} vs param {params[path].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient at {path}")
    state.step += 1
    new = dict(params)
    t = state.step
    for path, g in grads.items():
        p = params[path]
        if state.kind == "sgd_momentum":
            (vel,) = state.slots.get(path, (np.zeros_like(p),))
            vel = state.momentum * vel + g
            state.slots[path] = (vel,)
            new[path] = (p - state.lr * vel).astype(p.dtype)
        else:
            m, v = state.slots.get(path, (np.zeros_like(p), np.zeros_like(p)))
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.slots[path] = (m, v)
            mhat = m / (1 - state.beta1**t)
            vhat = v / (1 - state.beta2**t)
            new[path] = (p - state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)
    return new


# ---------------------------------------------------------------------------
# ENCW format
# ---------------------------------------------------------------------------


def encode_encoder(enc: EncoderNet) -> bytes:
    parts = [ENCW_MAGIC, struct.pack("<HI", ENCW_VERSION, len(enc.weights))]
    for w, b in zip(enc.weights, enc.biases):
        rows, cols = w.shape
        parts.append(struct.pack("<II", rows, cols))
        parts.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    parts.append(struct.pack("<BB", ACTIVATIONS.index(enc.activation), int(enc.normalize)))
    return b"".join(parts)


def decode_encoder(blob: bytes) -> EncoderNet:
    try:
        if blob[:4] != ENCW_MAGIC:
            raise FormatError("not an ENCW file (bad magic)")
        version, n_layers = struct.unpack_from("<HI", blob, 4)
        if version != ENCW_VERSION:
            raise FormatError(f"unsupported ENCW version {version}")
        off = 10
        ws, bs = [], []
        for _ in range(n_layers):
            rows, cols = struct.unpack_from("<II", blob, off)
            off += 8
            ws.append(np.frombuffer(blob, "<f4", rows * cols, off).reshape(rows, cols).astype(np.float32))
            off += 4 * rows * cols
            bs.append(np.frombuffer(blob, "<f4", cols, off).astype(np.float32))
            off += 4 * cols
        act, norm = struct.unpack_from("<BB", blob, off)
        off += 2
    except (struct.error, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"truncated or corrupt ENCW data: {exc}") from exc
    if off != len(blob):
        raise FormatError(f"{len(blob) - off} trailing bytes after ENCW payload")
    if act >= len(ACTIVATIONS) or norm > 1:
        raise FormatError(f"bad activation code {act} or normalization flag {norm}")
    try:
        return EncoderNet(ws, bs, ACTIVATIONS[act], bool(norm))
    except ContractError as exc:
        raise FormatError(str(exc)) from exc


def save_encoder(enc: EncoderNet, path: str | Path) -> None:
    Path(path).write_bytes(encode_encoder(enc))


def load_encoder(path: str | Path) -> EncoderNet:
    return decode_encoder(Path(path).read_bytes())
