"""Named parameter store, Adam, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    magic      8 bytes  b"PCDNCKPT"
    version    u32
    count      u32      number of parameters
    hyper_len  u32      length of the UTF-8 JSON hyperparameter blob
    hyper      bytes
    count x:
        name_len u32, name bytes (UTF-8)
        rank     u32, dims u64 * rank
        values   float64 little-endian, row-major
"""

import json
import struct

import numpy as np

from ..errors import InvalidInput, ParseError, ShapeError
from .tensor import Tensor, get_default_dtype

__all__ = ["ModelParams", "adam_step", "save_checkpoint", "load_checkpoint", "CHECKPOINT_MAGIC"]

CHECKPOINT_MAGIC = b"PCDNCKPT"
CHECKPOINT_VERSION = 1


class ModelParams:
    """Ordered mapping of unique names to trainable tensors plus Adam state."""

    def __init__(self):
        self._tensors = {}
        self.adam_m = {}
        self.adam_v = {}
        self.step = 0

    def add(self, name, value):
        if name in self._tensors:
            raise InvalidInput(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=get_default_dtype()), requires_grad=True, name=name)
        self._tensors[name] = t
        return t

    def __getitem__(self, name):
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def count(self):
        """Total number of scalar parameters."""
        return sum(t.data.size for t in self)

    def state(self):
        """Copies of all parameter arrays keyed by name."""
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_state(self, state):
        """Overwrite parameter values in place; names and shapes must match."""
        if set(state) != set(self._tensors):
            missing = set(self._tensors) ^ set(state)
            raise InvalidInput(f"parameter names differ: {sorted(missing)[:5]}")
        for name, arr in state.items():
            t = self._tensors[name]
            arr = np.asarray(arr)
            if arr.shape != t.data.shape:
                raise ShapeError(f"{name}: expected shape {t.data.shape}, got {arr.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)


def adam_step(params, grads, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    Args:
        params: :class:`ModelParams`.
        grads: arrays aligned with ``iter(params)``, or a dict keyed by name.
    """
    if isinstance(grads, dict):
        grads = [grads[name] for name in params.names()]
    grads = list(grads)
    if len(grads) != len(params):
        raise ShapeError(f"got {len(grads)} gradients for {len(params)} parameters")
    params.step += 1
    bc1 = 1.0 - beta1**params.step
    bc2 = 1.0 - beta2**params.step
    for (name, p), g in zip(params.items(), grads):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} does not match {p.data.shape}")
        m = params.adam_m.get(name)
        v = params.adam_v.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        params.adam_m[name] = m
        params.adam_v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params


def save_checkpoint(path, params, hyper=None):
    """Write ``params`` (and a JSON-serialisable ``hyper`` dict) to ``path``."""
    blob = json.dumps(hyper or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, len(params), len(blob)))
        fh.write(blob)
        for name, t in params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def _read(fh, n, path):
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError("truncated checkpoint", path=path)
    return buf


def load_checkpoint(path):
    """Read a checkpoint; returns ``(state, hyper)`` with ``state`` name -> array."""
    with open(path, "rb") as fh:
        if _read(fh, 8, path) != CHECKPOINT_MAGIC:
            raise ParseError("not a pcdenoise checkpoint (bad magic)", path=path)
        version, count, hlen = struct.unpack("<III", _read(fh, 12, path))
        if version != CHECKPOINT_VERSION:
            raise ParseError(f"unsupported checkpoint version {version}", path=path)
        hyper = json.loads(_read(fh, hlen, path).decode("utf-8"))
        state = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read(fh, 4, path))
            name = _read(fh, nlen, path).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4, path))
            dims = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank, path))
            size = int(np.prod(dims, dtype=np.int64))
            values = np.frombuffer(_read(fh, 8 * size, path), dtype="<f8")
            state[name] = values.astype(np.float64).reshape(dims)
        if fh.read(1):
            raise ParseError("trailing bytes after last parameter", path=path)
    return state, hyper
