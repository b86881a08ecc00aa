"""Token-to-voxel decoding and classification heads.

The light decoder is a single transposed convolution with kernel size
equal to the patch size: because stride equals kernel size, every voxel
receives exactly one kernel slot's contribution and there is no
overlap-add. Per-dataset segmentation heads and the distillation head
are plain affine maps on the per-voxel features.

Two ablation arms are provided: `none` predicts from tokens directly and
broadcasts to the patch's voxels; `big` appends two residual blocks of
3x3x3 sparse-neighborhood convolutions after the upsampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .params import truncated_normal
from .scene import project_to_points
from .tokenizer import TokenBatch

_NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass
class HeadBank:
    """Per-dataset segmentation heads plus the optional distillation head."""

    seg: dict  # dataset id -> (weight Tensor (D', K_d), bias Tensor (K_d,))
    distill: tuple | None = None  # (weight, bias) or None


def offset_matmul(x, kernel, offsets):
    """Row-wise matmul with a per-row matrix selected by slot offset.

    x: (M, D); kernel: (O, D, K); offsets: (M,) ints in [0, O).
    out[j] = x[j] @ kernel[offsets[j]].
    """
    x, kernel = ag.as_tensor(x), ag.as_tensor(kernel)
    offsets = np.asarray(offsets, dtype=np.int64)
    groups = [(o, offsets == o) for o in np.unique(offsets)]

    out = np.empty((x.shape[0], kernel.shape[2]), dtype=x.dtype)
    for o, sel in groups:
        out[sel] = x.data[sel] @ kernel.data[o]

    def vjp(g):
        gx = gk = None
        if x.requires_grad:
            gx = np.empty_like(x.data)
            for o, sel in groups:
                gx[sel] = g[sel] @ kernel.data[o].T
        if kernel.requires_grad:
            gk = np.zeros_like(kernel.data)
            for o, sel in groups:
                gk[o] = x.data[sel].T @ g[sel]
        return gx, gk

    return ag.from_op(out, (x, kernel), vjp)


def upsample(tokens, patches, kernel, bias):
    """Transposed convolution from tokens back to occupied voxels.

    kernel: (P^3, D, D') slot-indexed matrices; voxel j with patch t and
    local offset o gets F_j = token_t @ kernel[o] + bias.
    """
    tok = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
    tok = ag.as_tensor(tok)
    if patches.voxel_to_patch.max() >= tok.shape[0]:
        raise ValueError("voxel references a patch beyond the token count")
    kernel = ag.as_tensor(kernel)
    if kernel.shape[0] != patches.patch_size**3 or kernel.shape[1] != tok.shape[1]:
        raise ValueError(f"kernel shape {kernel.shape} incompatible with tokens/patches")
    gathered = ag.gather_rows(tok, patches.voxel_to_patch)
    return offset_matmul(gathered, kernel, patches.voxel_local_offset) + ag.as_tensor(bias)


def seg_logits(voxel_features, dataset_id, heads):
    if dataset_id not in heads.seg:
        raise KeyError(f"unknown dataset id {dataset_id!r}")
    w, b = heads.seg[dataset_id]
    return ag.as_tensor(voxel_features) @ w + b


def distill_logits(voxel_features, heads):
    if heads.distill is None:
        raise ValueError("head bank has no distillation head")
    w, b = heads.distill
    return ag.as_tensor(voxel_features) @ w + b


def predict_points(logits_vox, vset):
    """Per-voxel argmax (ties -> lowest class id) projected to points."""
    logits = logits_vox.data if isinstance(logits_vox, ag.Tensor) else np.asarray(logits_vox)
    voxel_pred = np.argmax(logits, axis=1)
    return project_to_points(voxel_pred[:, None], vset)[:, 0]


# -- sparse-neighborhood convolution (big decoder and the CNN teacher) ----------


def build_neighbor_table(coords):
    """(M, 27) row indices of each voxel's 3x3x3 neighbors; -1 = missing."""
    coords = np.asarray(coords, dtype=np.int64)
    lo = coords.min(axis=0) - 1
    span = coords.max(axis=0) - lo + 2

    def keys(c):
        shifted = c - lo
        return (shifted[:, 0] * span[1] + shifted[:, 1]) * span[2] + shifted[:, 2]

    base = keys(coords)
    order = np.argsort(base, kind="stable")
    sorted_keys = base[order]

    table = np.empty((coords.shape[0], 27), dtype=np.int64)
    for i, off in enumerate(_NEIGHBOR_OFFSETS):
        nk = keys(coords + off)
        pos = np.searchsorted(sorted_keys, nk)
        pos_clip = np.minimum(pos, len(sorted_keys) - 1)
        found = sorted_keys[pos_clip] == nk
        table[:, i] = np.where(found, order[pos_clip], -1)
    return table


def neighborhood_conv(x, weight, bias, neighbor_table):
    """3x3x3 convolution over occupied voxels, zeros at missing neighbors.

    x: (M, C_in); weight: (27, C_in, C_out); bias: (C_out,).
    """
    x, weight, bias = ag.as_tensor(x), ag.as_tensor(weight), ag.as_tensor(bias)
    m = x.shape[0]
    cols = [(i, neighbor_table[:, i]) for i in range(27)]

    out = np.tile(bias.data, (m, 1)).astype(x.dtype)
    for i, nbr in cols:
        sel = nbr >= 0
        out[sel] += x.data[nbr[sel]] @ weight.data[i]

    def vjp(g):
        gx = gw = gb = None
        if bias.requires_grad:
            gb = g.sum(axis=0)
        if x.requires_grad:
            gx = np.zeros_like(x.data)
        if weight.requires_grad:
            gw = np.zeros_like(weight.data)
        for i, nbr in cols:
            sel = nbr >= 0
            if x.requires_grad:
                np.add.at(gx, nbr[sel], g[sel] @ weight.data[i].T)
            if weight.requires_grad:
                gw[i] = x.data[nbr[sel]].T @ g[sel]
        return gx, gw, gb

    return ag.from_op(out, (x, weight, bias), vjp)


def init_decoder_params(store, width, decoder_width, patch_size, mode, rng, dtype):
    """Register decoder parameters for the requested mode."""
    if mode == "none":
        return
    store.add(
        "decoder.kernel",
        truncated_normal(rng, (patch_size**3, width, decoder_width), std=0.02, dtype=dtype),
    )
    store.add("decoder.bias", np.zeros(decoder_width, dtype=dtype))
    if mode == "big":
        for b in range(2):
            for c in range(2):
                store.add(
                    f"decoder.res{b}.conv{c}.w",
                    truncated_normal(rng, (27, decoder_width, decoder_width), std=0.02, dtype=dtype),
                )
                store.add(f"decoder.res{b}.conv{c}.b", np.zeros(decoder_width, dtype=dtype))
    elif mode != "light":
        raise ValueError(f"unknown decoder mode {mode!r}")


def decode(tokens, patches, vset, store, mode):
    """Tokens -> per-voxel features under the configured decoder mode."""
    if mode == "none":
        tok = tokens.tokens if isinstance(tokens, TokenBatch) else tokens
        return ag.gather_rows(ag.as_tensor(tok), patches.voxel_to_patch)
    feats = upsample(tokens, patches, store["decoder.kernel"], store["decoder.bias"])
    if mode == "light":
        return feats
    if mode == "big":
        table = build_neighbor_table(vset.coords)
        for b in range(2):
            h = neighborhood_conv(
                feats, store[f"decoder.res{b}.conv0.w"], store[f"decoder.res{b}.conv0.b"], table
            )
            h = neighborhood_conv(
                ag.gelu(h), store[f"decoder.res{b}.conv1.w"], store[f"decoder.res{b}.conv1.b"], table
            )
            feats = feats + h
        return feats
    raise ValueError(f"unknown decoder mode {mode!r}")


def init_head_params(store, decoder_width, dataset_classes, distill_classes, rng, dtype):
    """Register per-dataset segmentation heads and the distill head."""
    for name, k in dataset_classes.items():
        if k < 2:
            raise ValueError(f"dataset {name!r} needs >= 2 classes")
        store.add(f"heads.seg.{name}.w", truncated_normal(rng, (decoder_width, k), std=0.02, dtype=dtype))
        store.add(f"heads.seg.{name}.b", np.zeros(k, dtype=dtype))
    if distill_classes is not None:
        store.add(
            "heads.distill.w",
            truncated_normal(rng, (decoder_width, distill_classes), std=0.02, dtype=dtype),
        )
        store.add("heads.distill.b", np.zeros(distill_classes, dtype=dtype))


def head_bank(store, dataset_classes, with_distill):
    seg = {
        name: (store[f"heads.seg.{name}.w"], store[f"heads.seg.{name}.b"])
        for name in dataset_classes
    }
    distill = None
    if with_distill:
        distill = (store["heads.distill.w"], store["heads.distill.b"])
    return HeadBank(seg=seg, distill=distill)
