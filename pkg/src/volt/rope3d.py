"""Axis-factorized rotary position encoding for 3D token grids.

Each attention head's dimensions are split into an x block, a y block and
a z block; consecutive pairs inside an axis block are rotated by
angle = coordinate * frequency, with a standard geometric frequency
schedule per axis. The default allocation is asymmetric: the horizontal
axes get more pairs than the gravity-aligned z axis.

Works on integer patch-grid indices by default (metric-consistent across
scenes); per-scene [0,1] normalization is retained as an ablation arm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag

COORDINATE_MODES = ("metric_index", "per_scene_normalized")


class RopeConfigError(ValueError):
    pass


def default_pairs(head_dim):
    """Asymmetric pair allocation: z gets a quarter, x/y split the rest.

    head_dim 64 -> (12, 12, 8).
    """
    if head_dim % 2 != 0:
        raise RopeConfigError(f"head_dim must be even, got {head_dim}")
    total = head_dim // 2
    n_z = total // 4
    n_x = (total - n_z + 1) // 2
    n_y = total - n_z - n_x
    return (n_x, n_y, n_z)


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    pairs_per_axis: tuple  # (n_x, n_y, n_z)
    theta_base: float = 10000.0
    coordinate_mode: str = "metric_index"

    def __post_init__(self):
        n_x, n_y, n_z = self.pairs_per_axis
        if min(n_x, n_y, n_z) < 0:
            raise RopeConfigError("pair counts must be non-negative")
        if 2 * (n_x + n_y + n_z) != self.head_dim:
            raise RopeConfigError(
                f"pairs {self.pairs_per_axis} consume {2 * (n_x + n_y + n_z)} dims, "
                f"head_dim is {self.head_dim}"
            )
        if self.theta_base <= 1.0:
            raise RopeConfigError("theta_base must be > 1")
        if self.coordinate_mode not in COORDINATE_MODES:
            raise RopeConfigError(f"unknown coordinate_mode {self.coordinate_mode!r}")

    @classmethod
    def for_head_dim(cls, head_dim, theta_base=10000.0, coordinate_mode="metric_index"):
        return cls(head_dim, default_pairs(head_dim), theta_base, coordinate_mode)


def build_frequencies(cfg):
    """Per-axis frequency arrays: theta_i = base^(-i/n_a), i = 0..n_a-1."""
    out = []
    for n_a in cfg.pairs_per_axis:
        i = np.arange(n_a, dtype=np.float64)
        out.append(cfg.theta_base ** (-i / max(n_a, 1)))
    return out


def normalize_positions(positions, scene_bounds):
    """Affine per-axis rescale to [0,1]; a degenerate axis collapses to 0."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in scene_bounds)
    span = hi - lo
    out = np.zeros(np.asarray(positions).shape, dtype=np.float64)
    ok = span > 0
    out[:, ok] = (positions[:, ok] - lo[ok]) / span[ok]
    return out


def _angle_tables(positions, cfg, dtype):
    """cos/sin per axis, each (T, 1, n_a) for broadcasting over heads."""
    positions = np.asarray(positions, dtype=np.float64)
    freqs = build_frequencies(cfg)
    tables = []
    for axis, f in enumerate(freqs):
        if len(f) == 0:
            tables.append((None, None))
            continue
        ang = positions[:, axis : axis + 1] * f[None, :]
        tables.append(
            (np.cos(ang)[:, None, :].astype(dtype), np.sin(ang)[:, None, :].astype(dtype))
        )
    return tables


def rotate_tensor(x, positions, cfg):
    """Apply the rotary map to an autograd tensor of shape (T, heads, head_dim).

    Frequencies are shared across heads. Dimensions are laid out
    [x block | y block | z block] with interleaved (even, odd) pairs
    inside each block.
    """
    t, heads, head_dim = x.shape
    if head_dim != cfg.head_dim:
        raise RopeConfigError(f"input head_dim {head_dim} != config head_dim {cfg.head_dim}")
    if np.asarray(positions).shape != (t, 3):
        raise ValueError("positions must be (T, 3)")

    tables = _angle_tables(positions, cfg, x.dtype)
    blocks, start = [], 0
    for (cos, sin), n_a in zip(tables, cfg.pairs_per_axis):
        width = 2 * n_a
        if width == 0:
            continue
        even = x[:, :, start : start + width : 2]
        odd = x[:, :, start + 1 : start + width : 2]
        rot_even = even * cos - odd * sin
        rot_odd = even * sin + odd * cos
        # interleave back: (T, H, n, 2) -> (T, H, 2n)
        pair = ag.concat(
            [rot_even.reshape(t, heads, n_a, 1), rot_odd.reshape(t, heads, n_a, 1)], axis=3
        )
        blocks.append(pair.reshape(t, heads, width))
        start += width
    return blocks[0] if len(blocks) == 1 else ag.concat(blocks, axis=2)


def apply_rope(q_or_k, positions, cfg):
    """ndarray front-end of `rotate_tensor`; shape (T, heads, head_dim)."""
    with ag.no_grad():
        return rotate_tensor(ag.Tensor(np.asarray(q_or_k)), positions, cfg).data
