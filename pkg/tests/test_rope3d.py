"""Rotary position map: frequencies, rotations, and the relative-offset law."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from volt.rope3d import (
    RopeConfig,
    RopeConfigError,
    apply_rope,
    build_frequencies,
    default_pairs,
    normalize_positions,
)


class TestConfig:
    def test_default_allocation_head_dim_64(self):
        assert default_pairs(64) == (12, 12, 8)
        cfg = RopeConfig.for_head_dim(64)
        freqs = build_frequencies(cfg)
        assert sum(len(f) for f in freqs) == 32  # pairs
        assert 2 * sum(len(f) for f in freqs) == 64  # dims consumed

    def test_mismatched_allocation_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(head_dim=64, pairs_per_axis=(12, 12, 9))
        with pytest.raises(RopeConfigError):
            RopeConfig(head_dim=8, pairs_per_axis=(2, 2, 2))

    def test_negative_pairs_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(head_dim=4, pairs_per_axis=(3, 0, -1))

    def test_bad_mode_rejected(self):
        with pytest.raises(RopeConfigError):
            RopeConfig(head_dim=4, pairs_per_axis=(1, 1, 0), coordinate_mode="absolute")


class TestFrequencies:
    def test_single_pair_frequency_one(self):
        freqs = build_frequencies(RopeConfig(head_dim=2, pairs_per_axis=(1, 0, 0)))
        np.testing.assert_array_equal(freqs[0], [1.0])

    def test_two_pair_closed_form(self):
        freqs = build_frequencies(RopeConfig(head_dim=4, pairs_per_axis=(2, 0, 0)))
        np.testing.assert_allclose(freqs[0], [1.0, 0.01], rtol=1e-12)

    def test_geometric_schedule(self):
        cfg = RopeConfig(head_dim=12, pairs_per_axis=(6, 0, 0), theta_base=100.0)
        f = build_frequencies(cfg)[0]
        np.testing.assert_allclose(f, 100.0 ** (-np.arange(6) / 6), rtol=1e-12)


class TestApplyRope:
    def test_zero_position_is_identity(self):
        rng = np.random.default_rng(0)
        cfg = RopeConfig.for_head_dim(64)
        q = rng.normal(size=(6, 2, 64))
        out = apply_rope(q, np.zeros((6, 3), dtype=np.int64), cfg)
        np.testing.assert_allclose(out, q, atol=1e-12)

    def test_half_turn_planar_rotation(self):
        """head_dim 2, one x pair (frequency 1): angle pi maps (1,0)->(-1,0)."""
        cfg = RopeConfig(head_dim=2, pairs_per_axis=(1, 0, 0))
        q = np.array([[[1.0, 0.0]]])
        out = apply_rope(q, np.array([[np.pi, 0.0, 0.0]]), cfg)
        np.testing.assert_allclose(out[0, 0], [-1.0, 0.0], atol=1e-12)

    def test_relative_offset_invariance(self):
        """q.k after rotation depends only on p1 - p2: 100 random shifts."""
        rng = np.random.default_rng(1)
        cfg = RopeConfig.for_head_dim(32)
        q = rng.normal(size=(4, 2, 32))
        k = rng.normal(size=(4, 2, 32))
        p1 = rng.integers(-20, 20, size=(4, 3))
        p2 = rng.integers(-20, 20, size=(4, 3))
        base = np.einsum("thd,thd->th", apply_rope(q, p1, cfg), apply_rope(k, p2, cfg))
        for _ in range(100):
            s = rng.integers(-50, 50, size=(1, 3))
            shifted = np.einsum(
                "thd,thd->th", apply_rope(q, p1 + s, cfg), apply_rope(k, p2 + s, cfg)
            )
            np.testing.assert_allclose(shifted, base, rtol=1e-5, atol=1e-8)

    def test_axis_independence_z_only(self):
        """Changing only p_z leaves x- and y-block dims bitwise unchanged."""
        rng = np.random.default_rng(2)
        cfg = RopeConfig(head_dim=16, pairs_per_axis=(3, 3, 2))
        q = rng.normal(size=(5, 1, 16))
        p = rng.integers(0, 10, size=(5, 3))
        p2 = p.copy()
        p2[:, 2] += rng.integers(1, 5, size=5)
        a = apply_rope(q, p, cfg)
        b = apply_rope(q, p2, cfg)
        xy = slice(0, 12)  # 2*(3+3) dims
        assert np.array_equal(a[:, :, xy], b[:, :, xy])
        assert not np.array_equal(a[:, :, 12:], b[:, :, 12:])

    def test_composition_is_additive(self):
        rng = np.random.default_rng(3)
        cfg = RopeConfig.for_head_dim(24)
        v = rng.normal(size=(4, 2, 24))
        p1 = rng.integers(-5, 5, size=(4, 3))
        p2 = rng.integers(-5, 5, size=(4, 3))
        twice = apply_rope(apply_rope(v, p1, cfg), p2, cfg)
        once = apply_rope(v, p1 + p2, cfg)
        np.testing.assert_allclose(twice, once, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        cfg = RopeConfig.for_head_dim(8)
        with pytest.raises(RopeConfigError):
            apply_rope(np.zeros((2, 1, 16)), np.zeros((2, 3)), cfg)
        with pytest.raises(ValueError):
            apply_rope(np.zeros((2, 1, 8)), np.zeros((3, 3)), cfg)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 50.0))
def test_property_norm_preserved(seed, scale):
    rng = np.random.default_rng(seed)
    cfg = RopeConfig.for_head_dim(16)
    v = rng.normal(size=(3, 2, 16)) * scale
    p = rng.integers(-100, 100, size=(3, 3))
    out = apply_rope(v, p, cfg)
    np.testing.assert_allclose(
        np.linalg.norm(out, axis=-1), np.linalg.norm(v, axis=-1), rtol=1e-6
    )


class TestNormalizePositions:
    def test_midpoint(self):
        out = normalize_positions(np.array([[5.0, 5.0, 5.0]]), ([0, 0, 0], [10, 10, 10]))
        np.testing.assert_allclose(out, [[0.5, 0.5, 0.5]])

    def test_degenerate_axis_collapses_to_zero(self):
        out = normalize_positions(np.array([[3.0, 1.0, 7.0]]), ([3, 0, 0], [3, 2, 10]))
        assert out[0, 0] == 0.0

    def test_endpoints_exact(self):
        rng = np.random.default_rng(4)
        pos = rng.uniform(-5, 5, size=(40, 3))
        out = normalize_positions(pos, (pos.min(axis=0), pos.max(axis=0)))
        np.testing.assert_allclose(out.min(axis=0), 0.0, atol=0)
        np.testing.assert_allclose(out.max(axis=0), 1.0, atol=0)
