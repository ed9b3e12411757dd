"""Neural building blocks for the codec.

Fully-connected layers, GRU cells, a learned per-dimension scalar quantizer
with a straight-through backward rule, the Adam optimizer, and little-endian
binary parameter serialization.
"""

from __future__ import annotations

import hashlib
import math
import struct

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

PARAM_MAGIC = b"FRAEPARM"
PARAM_VERSION = 1


class OptimizerError(RuntimeError):
    """An update would corrupt the parameters (non-finite gradient)."""


class ParamFormatError(ValueError):
    """Malformed parameter file."""


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


_ACTIVATIONS = ("linear", "tanh", "sigmoid")


class Linear:
    """y = activation(x @ w + b) with w of shape [fan_in, fan_out]."""

    def __init__(self, w: Tensor, b: Tensor, activation: str = "linear"):
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.w = w
        self.b = b
        self.activation = activation

    @classmethod
    def create(cls, rng: np.random.Generator, fan_in: int, fan_out: int,
               activation: str = "linear") -> "Linear":
        return cls(Tensor(glorot_uniform(rng, fan_in, fan_out)),
                   Tensor(np.zeros(fan_out)), activation)

    @property
    def fan_in(self) -> int:
        return self.w.shape[0]

    @property
    def fan_out(self) -> int:
        return self.w.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.add(ad.matmul(x, self.w), self.b)
        if self.activation == "tanh":
            y = ad.tanh(y)
        elif self.activation == "sigmoid":
            y = ad.sigmoid(y)
        return y

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class GruCell:
    """Gated recurrent unit.

    The update gate interpolates toward the previous state
    (h' = z*h + (1-z)*c), so a saturated update gate carries the state
    through unchanged; this gating is what keeps deep unrolls trainable.
    """

    def __init__(self, weights: dict[str, Tensor]):
        for key in _GRU_SLOTS:
            setattr(self, key, weights[key])

    @classmethod
    def create(cls, rng: np.random.Generator, input_dim: int, hidden_dim: int) -> "GruCell":
        weights = {}
        for gate in ("z", "r", "c"):
            weights[f"w{gate}"] = Tensor(glorot_uniform(rng, input_dim, hidden_dim))
            weights[f"u{gate}"] = Tensor(glorot_uniform(rng, hidden_dim, hidden_dim))
            weights[f"b{gate}"] = Tensor(np.zeros(hidden_dim))
        return cls(weights)

    @property
    def input_dim(self) -> int:
        return self.wz.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.wz.shape[1]

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"gru: input shape {x.shape} does not match input_dim {self.input_dim}")
        if h.shape != (x.shape[0], self.hidden_dim):
            raise ShapeError(f"gru: state shape {h.shape} does not match ({x.shape[0]}, {self.hidden_dim})")
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.wz), ad.matmul(h, self.uz)), self.bz))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.wr), ad.matmul(h, self.ur)), self.br))
        c = ad.tanh(ad.add(ad.add(ad.matmul(x, self.wc), ad.matmul(ad.mul(r, h), self.uc)), self.bc))
        ones = Tensor(np.ones_like(z.data))
        return ad.add(ad.mul(z, h), ad.mul(ad.add(ones, ad.mul(z, -1.0)), c))

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{key}": getattr(self, key) for key in _GRU_SLOTS}


_GRU_SLOTS = ("wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc")


class Codebook:
    """Per-dimension scalar codebook; entries[d] holds the K levels of dim d."""

    def __init__(self, entries: Tensor):
        if entries.data.ndim != 2:
            raise ShapeError(f"codebook entries must be 2-d, got {entries.shape}")
        self.entries = entries

    @classmethod
    def create(cls, dim: int, levels: int = 4) -> "Codebook":
        # Symmetric uniform start over [-1, 1] avoids dead entries on
        # normalized data.
        row = np.linspace(-1.0, 1.0, levels)
        return cls(Tensor(np.tile(row, (dim, 1))))

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    @property
    def levels(self) -> int:
        return self.entries.shape[1]

    def parameters(self, prefix: str) -> dict[str, Tensor]:
        return {prefix: self.entries}


def quantize(codebook: Codebook, y: Tensor) -> tuple[np.ndarray, Tensor]:
    """Nearest codebook entry per dimension; ties go to the lowest index.

    Returns (indices, quantized). The quantized tensor carries a
    straight-through backward rule: the gradient w.r.t. y passes through
    unchanged, the selected entries receive the same gradient, and
    unselected entries get zero.
    """
    entries = codebook.entries
    if y.data.ndim != 2 or y.shape[1] != entries.shape[0]:
        raise ShapeError(f"quantize: input shape {y.shape} does not match codebook dim {entries.shape[0]}")
    e = entries.data
    dist = np.abs(y.data[:, :, None] - e[None, :, :])
    indices = np.argmin(dist, axis=2)  # argmin returns the first minimum
    dgrid = np.broadcast_to(np.arange(e.shape[0]), indices.shape)
    out = Tensor(e[dgrid, indices])

    def pull(g: np.ndarray) -> None:
        ad.accumulate_grad(y, g)
        ge = np.zeros_like(e)
        np.add.at(ge, (dgrid, indices), g)
        ad.accumulate_grad(entries, ge)

    tape = ad.active_tape()
    if tape is not None:
        tape.record(out, pull)
    return indices, out


def dequantize(codebook: Codebook, indices: np.ndarray) -> Tensor:
    """Plain codebook lookup of transmitted indices (a leaf tensor)."""
    idx = np.asarray(indices)
    if idx.ndim != 2 or idx.shape[1] != codebook.dim:
        raise ShapeError(f"dequantize: index shape {idx.shape} does not match codebook dim {codebook.dim}")
    if idx.size and (idx.min() < 0 or idx.max() >= codebook.levels):
        raise ValueError(f"latent index out of range [0, {codebook.levels})")
    dgrid = np.broadcast_to(np.arange(codebook.dim), idx.shape)
    return Tensor(codebook.entries.data[dgrid, idx])


def fixed_bits_per_frame(dim: int, levels: int) -> float:
    """Cost of one frame under fixed-length index packing."""
    return dim * math.log2(levels)


class ModelParams:
    """Ordered name -> Tensor map with per-parameter Adam moments."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._moments: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step = 0

    def register(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        tensor.name = name
        self._tensors[name] = tensor
        return tensor

    def register_all(self, mapping: dict[str, Tensor]) -> None:
        for name, tensor in mapping.items():
            self.register(name, tensor)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def zero_grads(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def moments(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._moments:
            data = self._tensors[name].data
            self._moments[name] = (np.zeros_like(data), np.zeros_like(data))
        return self._moments[name]

    def set_moments(self, name: str, m: np.ndarray, v: np.ndarray) -> None:
        self._moments[name] = (m, v)


def adam_step(params: ModelParams, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One Adam update over every parameter with a populated gradient.

    Gradients are cleared afterwards. Parameters whose grad is None (frozen
    statistics, metadata, unused submodules) are left untouched.
    """
    params.step += 1
    t = params.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        m, v = params.moments(name)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        params.set_moments(name, m, v)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        tensor.grad = None


def clip_global_norm(params: ModelParams, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most `max_norm`."""
    total = 0.0
    grads = []
    for _, tensor in params.items():
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
            grads.append(tensor)
    norm = math.sqrt(total)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for tensor in grads:
            tensor.grad = tensor.grad * scale
    return norm


def serialize_params(entries: dict[str, np.ndarray]) -> bytes:
    """Little-endian binary image: magic, version, count, then per entry
    name, rank, dims and float32 data."""
    chunks = [PARAM_MAGIC, struct.pack("<HI", PARAM_VERSION, len(entries))]
    for name, array in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ParamFormatError(f"parameter name too long: {name[:32]!r}...")
        arr = np.ascontiguousarray(array, dtype=np.float32)
        if arr.ndim > 0xFF:
            raise ParamFormatError(f"parameter rank too large for {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            chunks.append(struct.pack("<I", dim))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def deserialize_params(data: bytes) -> dict[str, np.ndarray]:
    """Inverse of :func:`serialize_params`; arrays come back float64-valued
    (exactly representing the stored float32 payload)."""
    view = memoryview(data)
    if len(view) < 14 or bytes(view[:8]) != PARAM_MAGIC:
        raise ParamFormatError("not a parameter file (bad magic)")
    version, count = struct.unpack_from("<HI", view, 8)
    if version != PARAM_VERSION:
        raise ParamFormatError(f"unsupported parameter file version {version}")
    off = 14
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", view, off)
            off += 2
            name = bytes(view[off:off + name_len]).decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<B", view, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", view, off) if rank else ()
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = view[off:off + 4 * size]
            if len(raw) != 4 * size:
                raise struct.error("short read")
            off += 4 * size
        except (struct.error, UnicodeDecodeError) as exc:
            raise ParamFormatError(f"truncated or corrupt parameter file: {exc}") from None
        if name in out:
            raise ParamFormatError(f"duplicate parameter name {name!r} in file")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        out[name] = arr
    if off != len(view):
        raise ParamFormatError(f"{len(view) - off} trailing bytes after last parameter")
    return out


def save_params(path, entries: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(entries))


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())


def params_hash(entries: dict[str, np.ndarray]) -> int:
    """Order-independent 64-bit digest of the float32 parameter image."""
    canonical = {name: entries[name] for name in sorted(entries)}
    digest = hashlib.sha256(serialize_params(canonical)).digest()
    return int.from_bytes(digest[:8], "little")
