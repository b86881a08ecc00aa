"""Pre-LN Transformer encoder over variable-length batched token sequences.

Attention is full global self-attention within each scene segment and
never crosses segment boundaries (block-diagonal over the batch, realized
by looping over segments rather than masking a dense matrix). Queries and
keys are L2-normalized per head with a learnable gain (QKNorm) and then
rotated by the 3D rotary map before the dot product. Residual branches
use DropPath with a rate that grows linearly with depth, applied per
scene segment so a whole scene keeps or drops a branch coherently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .params import truncated_normal
from .rope3d import RopeConfig, normalize_positions, rotate_tensor
from .tokenizer import TokenBatch

_QK_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    depth: int
    width: int
    heads: int
    rope: RopeConfig
    mlp_ratio: int = 4
    droppath_max: float = 0.0
    qk_norm: bool = True

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.head_dim % 2 != 0:
            raise ValueError(f"head_dim {self.head_dim} must be even")
        if self.rope.head_dim != self.head_dim:
            raise ValueError(
                f"rope head_dim {self.rope.head_dim} != encoder head_dim {self.head_dim}"
            )
        if not 0.0 <= self.droppath_max < 1.0:
            raise ValueError("droppath_max must be in [0, 1)")

    @property
    def head_dim(self):
        return self.width // self.heads

    def droppath_rate(self, block_index):
        """Rate for 0-based block index: linear from 0 up to droppath_max."""
        if self.depth <= 1:
            return 0.0
        return self.droppath_max * block_index / (self.depth - 1)


@dataclass
class BlockState:
    """Parameter views plus the static settings one block needs."""

    ln1_gamma: ag.Tensor
    ln1_beta: ag.Tensor
    wq: ag.Tensor
    bq: ag.Tensor
    wk: ag.Tensor
    bk: ag.Tensor
    wv: ag.Tensor
    bv: ag.Tensor
    wo: ag.Tensor
    bo: ag.Tensor
    qk_gain: ag.Tensor  # (heads,)
    ln2_gamma: ag.Tensor
    ln2_beta: ag.Tensor
    mlp_w1: ag.Tensor
    mlp_b1: ag.Tensor
    mlp_w2: ag.Tensor
    mlp_b2: ag.Tensor
    heads: int
    droppath_rate: float
    qk_norm: bool
    rope: RopeConfig


def init_encoder_params(store, cfg, rng, dtype):
    """Register all encoder parameters; weights truncated-normal, biases 0."""
    d, ratio = cfg.width, cfg.mlp_ratio

    def w(name, shape):
        store.add(name, truncated_normal(rng, shape, std=0.02, dtype=dtype))

    def zeros(name, shape):
        store.add(name, np.zeros(shape, dtype=dtype))

    def ones(name, shape):
        store.add(name, np.ones(shape, dtype=dtype))

    for i in range(cfg.depth):
        p = f"blocks.{i}"
        ones(f"{p}.ln1.gamma", d)
        zeros(f"{p}.ln1.beta", d)
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{p}.attn.{proj}", (d, d))
        for bias in ("bq", "bk", "bv", "bo"):
            zeros(f"{p}.attn.{bias}", d)
        # Gain init sqrt(head_dim): normalized-logit scale starts near the
        # classic 1/sqrt(d) dot-product regime.
        store.add(f"{p}.attn.qk_gain", np.full(cfg.heads, np.sqrt(cfg.head_dim), dtype=dtype))
        ones(f"{p}.ln2.gamma", d)
        zeros(f"{p}.ln2.beta", d)
        w(f"{p}.mlp.w1", (d, ratio * d))
        zeros(f"{p}.mlp.b1", ratio * d)
        w(f"{p}.mlp.w2", (ratio * d, d))
        zeros(f"{p}.mlp.b2", d)
    if cfg.depth > 0:
        ones("final_ln.gamma", d)
        zeros("final_ln.beta", d)


def block_states(store, cfg):
    out = []
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        out.append(
            BlockState(
                ln1_gamma=store[f"{p}.ln1.gamma"],
                ln1_beta=store[f"{p}.ln1.beta"],
                wq=store[f"{p}.attn.wq"],
                bq=store[f"{p}.attn.bq"],
                wk=store[f"{p}.attn.wk"],
                bk=store[f"{p}.attn.bk"],
                wv=store[f"{p}.attn.wv"],
                bv=store[f"{p}.attn.bv"],
                wo=store[f"{p}.attn.wo"],
                bo=store[f"{p}.attn.bo"],
                qk_gain=store[f"{p}.attn.qk_gain"],
                ln2_gamma=store[f"{p}.ln2.gamma"],
                ln2_beta=store[f"{p}.ln2.beta"],
                mlp_w1=store[f"{p}.mlp.w1"],
                mlp_b1=store[f"{p}.mlp.b1"],
                mlp_w2=store[f"{p}.mlp.w2"],
                mlp_b2=store[f"{p}.mlp.b2"],
                heads=cfg.heads,
                droppath_rate=cfg.droppath_rate(i),
                qk_norm=cfg.qk_norm,
                rope=cfg.rope,
            )
        )
    return out


def rope_positions(batch, rope_cfg):
    """Positions fed to the rotary map, honoring the coordinate mode."""
    if rope_cfg.coordinate_mode == "metric_index":
        return batch.positions
    out = np.zeros((batch.n_tokens, 3), dtype=np.float64)
    pos = np.asarray(batch.positions, dtype=np.float64)
    for lo, hi in zip(batch.segment_offsets[:-1], batch.segment_offsets[1:]):
        seg = pos[lo:hi]
        out[lo:hi] = normalize_positions(seg, (seg.min(axis=0), seg.max(axis=0)))
    return out


def _l2_normalize(x):
    sq = (x * x).sum(axis=-1, keepdims=True)
    return x * (sq + _QK_EPS) ** -0.5


def attention(batch, block):
    """Segment-restricted multi-head self-attention; returns (T_total, D)."""
    tokens = ag.as_tensor(batch.tokens)
    t_total, d = tokens.shape
    h = block.heads
    hd = d // h

    q = (tokens @ block.wq + block.bq).reshape(t_total, h, hd)
    k = (tokens @ block.wk + block.bk).reshape(t_total, h, hd)
    v = (tokens @ block.wv + block.bv).reshape(t_total, h, hd)

    if block.qk_norm:
        gain = block.qk_gain.reshape(1, h, 1)
        q = _l2_normalize(q) * gain
        k = _l2_normalize(k) * gain
        scale = 1.0  # the gain owns the temperature
    else:
        scale = 1.0 / np.sqrt(hd)

    pos = rope_positions(batch, block.rope)
    q = rotate_tensor(q, pos, block.rope)
    k = rotate_tensor(k, pos, block.rope)

    outs = []
    offsets = batch.segment_offsets
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        qs = q[lo:hi].transpose((1, 0, 2))  # (H, t, hd)
        ks = k[lo:hi].transpose((1, 2, 0))  # (H, hd, t)
        vs = v[lo:hi].transpose((1, 0, 2))
        weights = ag.softmax((qs @ ks) * scale, axis=-1)
        seg = (weights @ vs).transpose((1, 0, 2)).reshape(int(hi - lo), d)
        outs.append(seg)
    merged = outs[0] if len(outs) == 1 else ag.concat(outs, axis=0)
    return merged @ block.wo + block.bo


def mlp(x, block):
    """Two linear layers with exact-erf GELU between; shape preserved."""
    x = ag.as_tensor(x)
    return ag.gelu(x @ block.mlp_w1 + block.mlp_b1) @ block.mlp_w2 + block.mlp_b2


def droppath(branch, segment_offsets, rate, training, rng):
    """Zero the branch per scene with prob `rate`; rescale survivors."""
    if not training or rate <= 0.0:
        return branch
    if rng is None:
        raise ValueError("droppath in training mode needs an rng")
    keep = (rng.random(len(segment_offsets) - 1) >= rate).astype(np.float64)
    per_row = np.repeat(keep / (1.0 - rate), np.diff(segment_offsets))
    return branch * per_row[:, None].astype(branch.dtype)


def block_forward(batch, block, training=False, rng=None):
    """x1 = x + DropPath(attn(LN(x))); out = x1 + DropPath(mlp(LN(x1)))."""
    x = ag.as_tensor(batch.tokens)
    seg = batch.segment_offsets

    normed = ag.layer_norm(x, block.ln1_gamma, block.ln1_beta)
    a = attention(TokenBatch(normed, batch.positions, seg), block)
    x1 = x + droppath(a, seg, block.droppath_rate, training, rng)

    m = mlp(ag.layer_norm(x1, block.ln2_gamma, block.ln2_beta), block)
    out = x1 + droppath(m, seg, block.droppath_rate, training, rng)
    return TokenBatch(out, batch.positions, seg)


def encoder_forward(batch, cfg, store, training=False, rng=None):
    """Apply all blocks then the final LayerNorm (identity when depth=0)."""
    if cfg.depth == 0:
        return batch
    for block in block_states(store, cfg):
        batch = block_forward(batch, block, training=training, rng=rng)
    tokens = ag.layer_norm(
        ag.as_tensor(batch.tokens), store["final_ln.gamma"], store["final_ln.beta"]
    )
    return TokenBatch(tokens, batch.positions, batch.segment_offsets)
