"""Named parameter store and the VOLTCKPT checkpoint format.

Parameters are autograd leaf tensors addressed by dotted names
(e.g. "blocks.3.attn.wq"). Checkpoints are a flat list of
(name, shape, row-major f32 payload) records behind a "VOLTCKPT" magic;
EMA shadow weights are stored under "ema/"-prefixed names.
"""

from __future__ import annotations

import struct

import numpy as np
from scipy.special import ndtr

from .autograd import Tensor


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Ordered mapping name -> trainable Tensor with gradient buffers."""

    def __init__(self):
        self._params = {}

    def add(self, name, value):
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(value), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def n_parameters(self):
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grad_norm(self):
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(np.asarray(t.grad, dtype=np.float64) ** 2))
        return float(np.sqrt(total))

    def state_dict(self):
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise CheckpointError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, t in self._params.items():
            arr = np.asarray(state[name])
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for {name}: {arr.shape} vs {t.data.shape}"
                )
            t.data = arr.astype(t.data.dtype)


# -- initialization -------------------------------------------------------------


def _truncnorm_std_factor(a):
    """Std of a standard normal conditioned on |x| <= a, relative to 1."""
    phi = np.exp(-0.5 * a * a) / np.sqrt(2.0 * np.pi)
    z = 2.0 * ndtr(a) - 1.0
    return np.sqrt(1.0 - 2.0 * a * phi / z)


def truncated_normal(rng, shape, std=0.02, bound=None, dtype=np.float64):
    """Zero-mean truncated normal with the requested *post-truncation* std.

    Samples are rejection-drawn from a widened parent normal so that the
    std of the truncated distribution equals `std` while no sample falls
    outside `bound` (default 2 * std).
    """
    if bound is None:
        bound = 2.0 * std
    # Solve parent_scale * std_factor(bound / parent_scale) = std by bisection.
    lo, hi = std, 3.0 * std
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if mid * _truncnorm_std_factor(bound / mid) < std:
            lo = mid
        else:
            hi = mid
    parent = 0.5 * (lo + hi)

    out = np.empty(int(np.prod(shape)), dtype=np.float64)
    filled = 0
    while filled < out.size:
        draw = rng.normal(0.0, parent, size=out.size - filled)
        good = draw[np.abs(draw) <= bound]
        out[filled : filled + good.size] = good
        filled += good.size
    return out.reshape(shape).astype(dtype)


# -- checkpoint I/O --------------------------------------------------------------

_CKPT_MAGIC = b"VOLTCKPT"
_CKPT_VERSION = 1


def save_checkpoint(path, store, ema_shadow=None):
    """Write parameters (and optionally EMA shadows under `ema/`) as f32."""
    records = list(store.items())
    if ema_shadow is not None:
        records += [(f"ema/{name}", Tensor(arr)) for name, arr in ema_shadow.items()]
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(records)))
        for name, tensor in records:
            data = np.ascontiguousarray(tensor.data, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path):
    """Read a checkpoint into {name: float32 ndarray}."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    pos = len(_CKPT_MAGIC)
    version, n_records = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    try:
        for _ in range(n_records):
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last record")
    return out


def split_ema(state):
    """Separate a loaded checkpoint into (params, ema_shadow) dicts."""
    params = {k: v for k, v in state.items() if not k.startswith("ema/")}
    ema = {k[len("ema/") :]: v for k, v in state.items() if k.startswith("ema/")}
    return params, ema
