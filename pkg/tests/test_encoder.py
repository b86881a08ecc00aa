"""Encoder blocks: attention masking, QKNorm, DropPath, and a straight-line
reference reimplementation used as the forward oracle."""

import numpy as np
import pytest

from volt import autograd as ag
from volt.encoder import (
    BlockState,
    EncoderConfig,
    attention,
    block_forward,
    block_states,
    droppath,
    encoder_forward,
    init_encoder_params,
    mlp,
)
from volt.params import ParamStore
from volt.rope3d import RopeConfig
from volt.tokenizer import TokenBatch


def make_store(cfg, seed=0, dtype=np.float64):
    store = ParamStore()
    init_encoder_params(store, EncoderConfig(**cfg_kwargs(cfg)), np.random.default_rng(seed), dtype)
    return store


def cfg_kwargs(cfg):
    return dict(
        depth=cfg.depth,
        width=cfg.width,
        heads=cfg.heads,
        rope=cfg.rope,
        mlp_ratio=cfg.mlp_ratio,
        droppath_max=cfg.droppath_max,
        qk_norm=cfg.qk_norm,
    )


def tiny_config(**over):
    base = dict(
        depth=2, width=16, heads=2, rope=RopeConfig.for_head_dim(8), mlp_ratio=4,
        droppath_max=0.0, qk_norm=True,
    )
    base.update(over)
    return EncoderConfig(**base)


def batch_of(rng, t, d, n_scenes=1):
    cuts = sorted(rng.choice(np.arange(1, t), size=n_scenes - 1, replace=False)) if n_scenes > 1 else []
    offsets = np.array([0, *cuts, t], dtype=np.int64)
    return TokenBatch(
        tokens=rng.normal(size=(t, d)),
        positions=rng.integers(0, 12, size=(t, 3)),
        segment_offsets=offsets,
    )


# -- straight-line reference (no batching abstractions, explicit loops) --------


def ref_rope(vec, position, rope_cfg):
    out = vec.copy()
    start = 0
    for axis, n_a in enumerate(rope_cfg.pairs_per_axis):
        for i in range(n_a):
            theta = rope_cfg.theta_base ** (-i / max(n_a, 1))
            ang = position[axis] * theta
            c, s = np.cos(ang), np.sin(ang)
            a, b = out[start + 2 * i], out[start + 2 * i + 1]
            out[start + 2 * i] = a * c - b * s
            out[start + 2 * i + 1] = a * s + b * c
        start += 2 * n_a
    return out


def ref_layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean()
    var = ((x - mu) ** 2).mean()
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def ref_gelu(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def ref_block(x, positions, block, collect_logits=None):
    """One pre-LN block, one token at a time, one head at a time."""
    t, d = x.shape
    h, hd = block.heads, d // block.heads
    ln1 = np.array([ref_layer_norm(x[i], block.ln1_gamma.data, block.ln1_beta.data) for i in range(t)])

    q = ln1 @ block.wq.data + block.bq.data
    k = ln1 @ block.wk.data + block.bk.data
    v = ln1 @ block.wv.data + block.bv.data

    attn_out = np.zeros((t, d))
    for head in range(h):
        sl = slice(head * hd, (head + 1) * hd)
        gain = block.qk_gain.data[head]
        for i in range(t):
            qi = q[i, sl]
            if block.qk_norm:
                qi = qi / np.sqrt((qi**2).sum() + 1e-12) * gain
            qi = ref_rope(qi, positions[i], block.rope)
            logits = np.zeros(t)
            for j in range(t):
                kj = k[j, sl]
                if block.qk_norm:
                    kj = kj / np.sqrt((kj**2).sum() + 1e-12) * gain
                kj = ref_rope(kj, positions[j], block.rope)
                logits[j] = qi @ kj if block.qk_norm else qi @ kj / np.sqrt(hd)
            if collect_logits is not None:
                collect_logits.append((head, gain, logits.copy()))
            w = np.exp(logits - logits.max())
            w /= w.sum()
            attn_out[i, sl] = sum(w[j] * v[j, sl] for j in range(t))
    x1 = x + attn_out @ block.wo.data + block.bo.data

    ln2 = np.array([ref_layer_norm(x1[i], block.ln2_gamma.data, block.ln2_beta.data) for i in range(t)])
    hidden = ref_gelu(ln2 @ block.mlp_w1.data + block.mlp_b1.data)
    return x1 + hidden @ block.mlp_w2.data + block.mlp_b2.data


class TestAttention:
    def test_single_token_scene_attends_to_itself(self):
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        rng = np.random.default_rng(0)
        batch = batch_of(rng, 1, cfg.width)
        block = block_states(store, cfg)[0]
        out = attention(batch, block)
        # softmax over one token is 1.0: output = (v) @ wo + bo
        v = batch.tokens @ block.wv.data + block.bv.data
        np.testing.assert_allclose(out.data, v @ block.wo.data + block.bo.data, rtol=1e-10)

    def test_batched_equals_per_scene(self):
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        rng = np.random.default_rng(1)
        batch = batch_of(rng, 9, cfg.width, n_scenes=2)
        block = block_states(store, cfg)[0]
        full = attention(batch, block).data
        cut = batch.segment_offsets[1]
        parts = []
        for lo, hi in [(0, cut), (cut, 9)]:
            sub = TokenBatch(batch.tokens[lo:hi], batch.positions[lo:hi], [0, hi - lo])
            parts.append(attention(sub, block).data)
        assert np.abs(full - np.concatenate(parts)).max() <= 1e-6

    def test_uniform_values_make_logits_irrelevant(self):
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        rng = np.random.default_rng(2)
        batch = batch_of(rng, 6, cfg.width)
        block = block_states(store, cfg)[0]
        block.wv.data = np.zeros_like(block.wv.data)
        block.bv.data = rng.normal(size=cfg.width)
        out = attention(batch, block)
        expect = np.tile(block.bv.data @ block.wo.data + block.bo.data, (6, 1))
        np.testing.assert_allclose(out.data, expect, atol=1e-10)

    def test_qknorm_logit_bound(self):
        """With QKNorm, every attention logit lies in [-g^2, g^2]."""
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        rng = np.random.default_rng(3)
        x = rng.normal(size=(7, cfg.width)) * 10.0  # large activations
        block = block_states(store, cfg)[0]
        block.qk_gain.data = rng.uniform(0.5, 4.0, size=cfg.heads)
        logged = []
        ref_block(x, rng.integers(0, 9, size=(7, 3)), block, collect_logits=logged)
        for head, gain, logits in logged:
            assert np.all(np.abs(logits) <= gain**2 + 1e-9)


class TestMlp:
    def test_zero_weights_broadcast_second_bias(self):
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        block = block_states(store, cfg)[0]
        block.mlp_w1.data = np.zeros_like(block.mlp_w1.data)
        block.mlp_w2.data = np.zeros_like(block.mlp_w2.data)
        block.mlp_b2.data = np.arange(cfg.width, dtype=float)
        out = mlp(ag.Tensor(np.random.default_rng(0).normal(size=(5, cfg.width))), block)
        np.testing.assert_array_equal(out.data, np.tile(np.arange(cfg.width), (5, 1)))

    def test_hand_computed_two_by_two(self):
        """ratio-1 MLP with W2 = W1^-1 and zero bias on hand-picked values."""
        cfg = tiny_config(depth=1, width=2, heads=1, rope=RopeConfig(2, (1, 0, 0)), mlp_ratio=1)
        store = make_store(cfg)
        block = block_states(store, cfg)[0]
        w1 = np.array([[2.0, 0.0], [0.0, 4.0]])
        block.mlp_w1.data = w1
        block.mlp_w2.data = np.linalg.inv(w1)
        block.mlp_b1.data = np.zeros(2)
        block.mlp_b2.data = np.zeros(2)
        x = np.array([[3.0, 1.5]])
        got = mlp(ag.Tensor(x), block).data
        expect = ref_gelu(x @ w1) @ np.linalg.inv(w1)
        np.testing.assert_allclose(got, expect, rtol=1e-12)

    def test_matches_naive_loop_oracle(self):
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        block = block_states(store, cfg)[0]
        rng = np.random.default_rng(4)
        x = rng.normal(size=(6, cfg.width))
        got = mlp(ag.Tensor(x), block).data
        expect = np.empty_like(x)
        for i in range(6):
            hidden = ref_gelu(x[i] @ block.mlp_w1.data + block.mlp_b1.data)
            expect[i] = hidden @ block.mlp_w2.data + block.mlp_b2.data
        assert np.abs(got - expect).max() <= 1e-6


class TestDropPath:
    def test_rate_zero_is_identity(self):
        x = ag.Tensor(np.ones((4, 3)))
        out = droppath(x, np.array([0, 4]), 0.0, True, np.random.default_rng(0))
        assert out is x

    def test_eval_mode_is_identity(self):
        x = ag.Tensor(np.ones((4, 3)))
        assert droppath(x, np.array([0, 4]), 0.9, False, None) is x

    def test_near_one_rate_drops_almost_always(self):
        rng = np.random.default_rng(1)
        x = ag.Tensor(np.ones((2, 3)))
        dropped = sum(
            float(np.abs(droppath(x, np.array([0, 2]), 1 - 1e-6, True, rng).data).sum()) == 0.0
            for _ in range(200)
        )
        assert dropped == 200

    def test_monte_carlo_expectation(self):
        """20k draws at rate 0.5: mean branch output within 2% of the branch."""
        rng = np.random.default_rng(2)
        branch = np.full((3, 4), 2.0)
        acc = np.zeros_like(branch)
        n = 20000
        for _ in range(n):
            acc += droppath(ag.Tensor(branch), np.array([0, 3]), 0.5, True, rng).data
        np.testing.assert_allclose(acc / n, branch, rtol=0.02)

    def test_whole_scene_dropped_coherently(self):
        rng = np.random.default_rng(3)
        x = ag.Tensor(np.ones((6, 2)))
        seg = np.array([0, 3, 6])
        for _ in range(50):
            out = droppath(x, seg, 0.5, True, rng).data
            for lo, hi in [(0, 3), (3, 6)]:
                vals = np.unique(out[lo:hi])
                assert len(vals) == 1  # all rows of a scene share the mask

    def test_schedule_monotone(self):
        cfg = tiny_config(depth=5, droppath_max=0.3)
        rates = [cfg.droppath_rate(i) for i in range(5)]
        assert rates[0] == 0.0 and rates[-1] == pytest.approx(0.3)
        assert all(b >= a for a, b in zip(rates, rates[1:]))
        assert tiny_config(depth=1).droppath_rate(0) == 0.0


class TestEncoderForward:
    def test_depth_zero_identity(self):
        cfg = tiny_config(depth=0)
        store = ParamStore()
        init_encoder_params(store, cfg, np.random.default_rng(0), np.float64)
        rng = np.random.default_rng(5)
        batch = batch_of(rng, 5, cfg.width)
        out = encoder_forward(batch, cfg, store)
        assert out.tokens is batch.tokens

    def test_matches_straight_line_reference(self):
        """Volt-tiny-ish encoder vs the loop-by-loop reimplementation."""
        cfg = tiny_config(depth=2)
        store = make_store(cfg, seed=7)
        rng = np.random.default_rng(6)
        batch = batch_of(rng, 3, cfg.width)
        got = encoder_forward(batch, cfg, store).tokens.data

        x = np.asarray(batch.tokens, dtype=np.float64)
        for block in block_states(store, cfg):
            x = ref_block(x, batch.positions, block)
        x = np.array(
            [ref_layer_norm(row, store["final_ln.gamma"].data, store["final_ln.beta"].data) for row in x]
        )
        assert np.abs(got - x).max() <= 1e-6

    def test_permutation_equivariance_within_scene(self):
        cfg = tiny_config(depth=2)
        store = make_store(cfg, seed=8)
        rng = np.random.default_rng(7)
        batch = batch_of(rng, 8, cfg.width)
        out = encoder_forward(batch, cfg, store).tokens.data
        perm = rng.permutation(8)
        permuted = TokenBatch(
            np.asarray(batch.tokens)[perm], batch.positions[perm], batch.segment_offsets
        )
        out_perm = encoder_forward(permuted, cfg, store).tokens.data
        assert np.abs(out_perm - out[perm]).max() <= 1e-5

    def test_eval_mode_bitwise_deterministic(self):
        cfg = tiny_config(depth=2, droppath_max=0.2)
        store = make_store(cfg, seed=9)
        rng = np.random.default_rng(8)
        batch = batch_of(rng, 6, cfg.width, n_scenes=2)
        a = encoder_forward(batch, cfg, store, training=False).tokens.data
        b = encoder_forward(batch, cfg, store, training=False).tokens.data
        assert np.array_equal(a, b)

    def test_block_forward_droppath_limit(self):
        """rate -> 1: output collapses to the input (branches dropped)."""
        cfg = tiny_config(depth=1)
        store = make_store(cfg)
        block = block_states(store, cfg)[0]
        block.droppath_rate = 1 - 1e-9
        rng = np.random.default_rng(9)
        batch = batch_of(rng, 4, cfg.width)
        out = block_forward(batch, block, training=True, rng=rng)
        np.testing.assert_allclose(out.tokens.data, np.asarray(batch.tokens), atol=1e-6)


class TestEncoderBackward:
    def test_zero_upstream_gives_zero_grads(self):
        cfg = tiny_config()
        store = make_store(cfg)
        rng = np.random.default_rng(10)
        batch = batch_of(rng, 5, cfg.width)
        out = encoder_forward(batch, cfg, store)
        out.tokens.backward(np.zeros_like(out.tokens.data))
        for name, t in store.items():
            assert t.grad is None or np.all(t.grad == 0), name

    def test_layernorm_param_grads_hand_derived(self):
        """2-token case: dgamma = sum g*xhat, dbeta = sum g."""
        gamma = ag.Tensor(np.array([2.0, 0.5, 1.0]), requires_grad=True)
        beta = ag.Tensor(np.zeros(3), requires_grad=True)
        x = np.array([[1.0, 2.0, 3.0], [4.0, 0.0, -1.0]])
        out = ag.layer_norm(ag.Tensor(x), gamma, beta)
        upstream = np.array([[1.0, -1.0, 0.5], [0.0, 2.0, 1.0]])
        out.backward(upstream)

        eps = 1e-5
        xhat = np.empty_like(x)
        for i in range(2):
            mu = x[i].mean()
            var = ((x[i] - mu) ** 2).mean()
            xhat[i] = (x[i] - mu) / np.sqrt(var + eps)
        np.testing.assert_allclose(gamma.grad, (upstream * xhat).sum(axis=0), rtol=1e-12)
        np.testing.assert_allclose(beta.grad, upstream.sum(axis=0), rtol=1e-12)

    def test_finite_difference_through_two_blocks(self):
        cfg = tiny_config()
        store = make_store(cfg, seed=11)
        rng = np.random.default_rng(11)
        batch_tokens = rng.normal(size=(5, cfg.width))
        positions = rng.integers(0, 6, size=(5, 3))

        def forward():
            b = TokenBatch(ag.Tensor(batch_tokens), positions, [0, 5])
            out = encoder_forward(b, cfg, store)
            return (out.tokens * out.tokens).sum()

        store.zero_grad()
        forward().backward()
        eps = 1e-6
        check = [("blocks.0.attn.wq", (0, 3)), ("blocks.1.mlp.w1", (2, 5)),
                 ("blocks.0.ln1.gamma", (4,)), ("blocks.1.attn.qk_gain", (1,)),
                 ("final_ln.beta", (0,))]
        for name, idx in check:
            p = store[name]
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = float(forward().data)
            p.data[idx] = orig - eps
            down = float(forward().data)
            p.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(p.grad[idx] - numeric) / max(1.0, abs(numeric)) <= 1e-4, name
