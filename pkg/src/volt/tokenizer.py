"""Patch tokenization of sparse voxel sets.

Voxels are grouped into non-overlapping P x P x P cubes; each non-empty
cube is flattened (empty slots = zeros) and linearly embedded into a
D-dimensional token. The same map can be computed as a strided sparse
convolution (`embed_as_sparse_conv`), and the two formulations agree to
numerical precision when the kernel is the reshaped embedding matrix.

Slot order inside a patch is row-major with x slowest and z fastest:
slot = (local_x * P + local_y) * P + local_z.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .scene import _unique_rows_first_occurrence


@dataclass(frozen=True)
class PatchSet:
    """Non-empty P^3 patches of a voxel set, with dense per-patch vectors."""

    patch_coords: np.ndarray  # (T, 3) int64 patch-grid indices
    dense_vectors: np.ndarray  # (T, P^3 * C), zeros at empty slots
    voxel_to_patch: np.ndarray  # (M,) int64
    voxel_local_offset: np.ndarray  # (M,) int64 in [0, P^3)
    patch_size: int
    n_channels: int

    @property
    def n_tokens(self):
        return self.patch_coords.shape[0]


@dataclass
class TokenBatch:
    """Concatenated per-scene token sequences.

    `tokens` is either an ndarray or an autograd Tensor of shape
    (T_total, D); `segment_offsets` marks scene boundaries and attention
    never crosses them.
    """

    tokens: object  # (T_total, D)
    positions: np.ndarray  # (T_total, 3)
    segment_offsets: np.ndarray  # (n_scenes + 1,), [0, ..., T_total]

    def __post_init__(self):
        off = np.asarray(self.segment_offsets, dtype=np.int64)
        n = self.tokens.shape[0]
        if off[0] != 0 or off[-1] != n or np.any(np.diff(off) <= 0):
            raise ValueError(f"invalid segment offsets {off} for {n} tokens")
        object.__setattr__(self, "segment_offsets", off)

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def n_scenes(self):
        return len(self.segment_offsets) - 1

    @property
    def token_data(self):
        return self.tokens.data if isinstance(self.tokens, ag.Tensor) else self.tokens


def patchify(vset, patch_size, grid_shift=None):
    """Partition occupied voxels into non-empty patches.

    `grid_shift` (integer 3-vector) moves the patch-grid origin; it is a
    training-time augmentation and defaults to the anchored grid.
    """
    p = int(patch_size)
    if p < 1:
        raise ValueError("patch_size must be >= 1")
    coords = vset.coords
    if grid_shift is not None:
        coords = coords - np.asarray(grid_shift, dtype=np.int64)

    patch_idx = np.floor_divide(coords, p)
    local = coords - patch_idx * p
    offsets = (local[:, 0] * p + local[:, 1]) * p + local[:, 2]

    patch_coords, _, voxel_to_patch = _unique_rows_first_occurrence(patch_idx)
    n_tokens = patch_coords.shape[0]
    c = vset.features.shape[1]
    dense = np.zeros((n_tokens, p**3, c), dtype=vset.features.dtype)
    dense[voxel_to_patch, offsets] = vset.features
    return PatchSet(
        patch_coords=patch_coords,
        dense_vectors=dense.reshape(n_tokens, p**3 * c),
        voxel_to_patch=voxel_to_patch,
        voxel_local_offset=offsets,
        patch_size=p,
        n_channels=c,
    )


def patch_vectors_tensor(features, patches):
    """Differentiable dense patch vectors from per-voxel features.

    `features` is an (M, C) autograd Tensor (or array); output is a
    (T, P^3*C) Tensor matching `patchify`'s dense_vectors layout.
    """
    features = ag.as_tensor(features)
    m, c = features.shape
    t, p3 = patches.n_tokens, patches.patch_size**3
    vtp, off = patches.voxel_to_patch, patches.voxel_local_offset

    dense = np.zeros((t, p3, c), dtype=features.dtype)
    dense[vtp, off] = features.data

    def vjp(g):
        return (g.reshape(t, p3, c)[vtp, off],)

    return ag.from_op(dense.reshape(t, p3 * c), (features,), vjp)


def embed(patches, weight, bias, segment_offsets=None):
    """tokens[t] = dense_vectors[t] @ weight + bias.

    `weight` / `bias` may be ndarrays or autograd Tensors; the result
    TokenBatch carries whichever kind propagates gradients.
    """
    weight, bias = ag.as_tensor(weight), ag.as_tensor(bias)
    t = patches.n_tokens
    if weight.shape[0] != patches.dense_vectors.shape[1]:
        raise ValueError(
            f"weight rows {weight.shape[0]} != patch vector length {patches.dense_vectors.shape[1]}"
        )
    dense = ag.Tensor(patches.dense_vectors.astype(weight.dtype, copy=False))
    tokens = dense @ weight + bias
    if not (weight.requires_grad or bias.requires_grad):
        tokens = tokens.data
    if segment_offsets is None:
        segment_offsets = np.array([0, t], dtype=np.int64)
    return TokenBatch(tokens=tokens, positions=patches.patch_coords, segment_offsets=segment_offsets)


def embed_as_sparse_conv(vset, patches, kernel, bias):
    """Strided sparse-convolution formulation of the patch embedding.

    `kernel` has shape (P, P, P, C, D) or (P^3, C, D); the token at patch
    g sums kernel[offset_j] applied to each occupied voxel j inside g,
    plus bias. Equals `embed` when kernel = weight.reshape(P^3, C, D).
    """
    kernel = np.asarray(kernel)
    p, c = patches.patch_size, patches.n_channels
    if kernel.shape[:1] != (p**3,):
        if kernel.shape[:3] == (p, p, p):
            kernel = kernel.reshape(p**3, *kernel.shape[3:])
        else:
            raise ValueError(f"kernel shape {kernel.shape} incompatible with P={p}")
    if kernel.shape[1] != c:
        raise ValueError(f"kernel expects {kernel.shape[1]} channels, voxels have {c}")

    d = kernel.shape[2]
    tokens = np.tile(np.asarray(bias, dtype=kernel.dtype), (patches.n_tokens, 1))
    feats = vset.features.astype(kernel.dtype, copy=False)
    vtp, off = patches.voxel_to_patch, patches.voxel_local_offset
    for o in np.unique(off):
        sel = off == o
        np.add.at(tokens, vtp[sel], feats[sel] @ kernel[o])
    return TokenBatch(
        tokens=tokens,
        positions=patches.patch_coords,
        segment_offsets=np.array([0, patches.n_tokens], dtype=np.int64),
    )


def occupied_slot_counts(patches):
    """Number of occupied voxel slots per token."""
    return np.bincount(patches.voxel_to_patch, minlength=patches.n_tokens)
