"""Upsampling decoder, classification heads, and the sparse-neighborhood
convolution, checked against dense oracles and the embedding adjoint."""

import numpy as np
import pytest

from volt import autograd as ag
from volt.decoder_heads import (
    HeadBank,
    build_neighbor_table,
    decode,
    distill_logits,
    head_bank,
    init_decoder_params,
    neighborhood_conv,
    offset_matmul,
    predict_points,
    seg_logits,
    upsample,
)
from volt.model import init_params, preset
from volt.scene import PointCloud, voxelize
from volt.tokenizer import embed, patchify


def vset_from_coords(coords, features, delta=1.0):
    coords = np.asarray(coords, dtype=np.int64)
    cloud = PointCloud(positions=(coords + 0.5) * delta, features=np.asarray(features, float))
    return voxelize(cloud, delta)


def random_case(rng, n=80, p=3, d=6, d_out=5):
    coords = np.unique(rng.integers(-6, 6, size=(n, 3)), axis=0)
    vset = vset_from_coords(coords, rng.normal(size=(len(coords), 2)))
    patches = patchify(vset, p)
    tokens = rng.normal(size=(patches.n_tokens, d))
    kernel = rng.normal(size=(p**3, d, d_out))
    bias = rng.normal(size=d_out)
    return vset, patches, tokens, kernel, bias


class TestUpsample:
    def test_zero_kernel_gives_bias(self):
        rng = np.random.default_rng(0)
        vset, patches, tokens, kernel, bias = random_case(rng)
        out = upsample(tokens, patches, np.zeros_like(kernel), bias)
        np.testing.assert_array_equal(out.data, np.tile(bias, (vset.n_voxels, 1)))

    def test_identity_slot_selects_token(self):
        vset = vset_from_coords([[1, 1, 0]], [[1.0, 2.0]])
        patches = patchify(vset, 2)
        d = 4
        tokens = np.random.default_rng(1).normal(size=(1, d))
        kernel = np.zeros((8, d, d))
        kernel[patches.voxel_local_offset[0]] = np.eye(d)
        out = upsample(tokens, patches, kernel, np.zeros(d))
        np.testing.assert_allclose(out.data, tokens, rtol=1e-12)

    def test_matches_dense_transposed_conv_oracle(self):
        """Run a literal dense transposed conv on the full grid and restrict
        to occupied voxels; stride == kernel size means no overlap-add."""
        rng = np.random.default_rng(2)
        for trial in range(50):
            t_rng = np.random.default_rng(300 + trial)
            p = int(t_rng.integers(2, 5))
            vset, patches, tokens, kernel, bias = random_case(
                t_rng, n=int(t_rng.integers(4, 60)), p=p
            )
            got = upsample(tokens, patches, kernel, bias).data

            # dense oracle over the patch bounding box
            lo = patches.patch_coords.min(axis=0)
            hi = patches.patch_coords.max(axis=0) + 1
            dims = (hi - lo) * p
            d_out = kernel.shape[2]
            dense = np.zeros((*dims, d_out))
            for t in range(patches.n_tokens):
                corner = (patches.patch_coords[t] - lo) * p
                for o in range(p**3):
                    local = np.array([o // (p * p), (o // p) % p, o % p])
                    dense[tuple(corner + local)] = tokens[t] @ kernel[o] + bias
            for j in range(vset.n_voxels):
                cell = vset.coords[j] - lo * p
                assert np.abs(got[j] - dense[tuple(cell)]).max() <= 1e-6

    def test_dangling_patch_reference(self):
        rng = np.random.default_rng(3)
        vset, patches, tokens, kernel, bias = random_case(rng)
        with pytest.raises(ValueError):
            upsample(tokens[:-1], patches, kernel, bias)

    def test_adjoint_of_embedding(self):
        """With kernel[o] = (embed rows for slot o)^T, upsample is the exact
        transpose of the embedding: <embed(x), y> == <x, upsample(y)>."""
        rng = np.random.default_rng(4)
        vset, patches, _, _, _ = random_case(rng, n=60, p=3)
        c = vset.features.shape[1]
        d = 6
        w = rng.normal(size=(27 * c, d))
        kernel = w.reshape(27, c, d).transpose(0, 2, 1)  # (P^3, D, C)

        x = vset.features
        y = rng.normal(size=(patches.n_tokens, d))
        lhs = float((embed(patches, w, np.zeros(d)).tokens * y).sum())
        rhs = float((x * upsample(y, patches, kernel, np.zeros(c)).data).sum())
        assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))

    def test_offset_matmul_grads(self):
        rng = np.random.default_rng(5)
        x = ag.Tensor(rng.normal(size=(7, 3)), requires_grad=True)
        kernel = ag.Tensor(rng.normal(size=(4, 3, 2)), requires_grad=True)
        offsets = rng.integers(0, 4, size=7)
        out = offset_matmul(x, kernel, offsets)
        (out * out).sum().backward()
        eps = 1e-6
        for tensor in (x, kernel):
            flat = int(rng.integers(tensor.data.size))
            orig = tensor.data.flat[flat]
            tensor.data.flat[flat] = orig + eps
            up = float((offset_matmul(x.detach(), kernel.detach(), offsets) ** 2.0).sum().data)
            tensor.data.flat[flat] = orig - eps
            down = float((offset_matmul(x.detach(), kernel.detach(), offsets) ** 2.0).sum().data)
            tensor.data.flat[flat] = orig
            numeric = (up - down) / (2 * eps)
            assert abs(tensor.grad.flat[flat] - numeric) <= 1e-6 * max(1, abs(numeric))


class TestHeads:
    def make_bank(self, rng, d=6):
        return HeadBank(
            seg={
                "a": (ag.Tensor(rng.normal(size=(d, 4))), ag.Tensor(rng.normal(size=4))),
                "b": (ag.Tensor(rng.normal(size=(d, 7))), ag.Tensor(rng.normal(size=7))),
            },
            distill=(ag.Tensor(rng.normal(size=(d, 4))), ag.Tensor(rng.normal(size=4))),
        )

    def test_zero_weights_give_bias(self):
        bank = HeadBank(seg={"a": (ag.Tensor(np.zeros((3, 2))), ag.Tensor(np.array([1.0, -1.0])))})
        out = seg_logits(np.ones((5, 3)), "a", bank)
        np.testing.assert_array_equal(out.data, np.tile([1.0, -1.0], (5, 1)))

    def test_per_dataset_widths(self):
        rng = np.random.default_rng(6)
        bank = self.make_bank(rng)
        f = rng.normal(size=(9, 6))
        assert seg_logits(f, "a", bank).shape == (9, 4)
        assert seg_logits(f, "b", bank).shape == (9, 7)

    def test_unknown_dataset(self):
        bank = self.make_bank(np.random.default_rng(7))
        with pytest.raises(KeyError):
            seg_logits(np.zeros((2, 6)), "missing", bank)

    def test_matches_naive_matmul(self):
        rng = np.random.default_rng(8)
        bank = self.make_bank(rng)
        f = rng.normal(size=(11, 6))
        w, b = bank.seg["a"]
        expect = np.array([fi @ w.data + b.data for fi in f])
        assert np.abs(seg_logits(f, "a", bank).data - expect).max() <= 1e-6
        wd, bd = bank.distill
        expect_d = np.array([fi @ wd.data + bd.data for fi in f])
        assert np.abs(distill_logits(f, bank).data - expect_d).max() <= 1e-6

    def test_missing_distill_head(self):
        bank = HeadBank(seg={})
        with pytest.raises(ValueError):
            distill_logits(np.zeros((1, 3)), bank)


class TestPredictPoints:
    def test_one_hot_recovery(self):
        rng = np.random.default_rng(9)
        vset, patches, _, _, _ = random_case(rng, n=40)
        labels = rng.integers(0, 4, size=vset.n_voxels)
        logits = np.eye(4)[labels]
        pred = predict_points(logits, vset)
        np.testing.assert_array_equal(pred, labels[vset.point_to_voxel])

    def test_tie_breaks_to_lowest_class(self):
        vset = vset_from_coords([[0, 0, 0]], [[1.0]])
        pred = predict_points(np.array([[0.5, 0.5]]), vset)
        assert pred[0] == 0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(10)
        vset, patches, _, _, _ = random_case(rng, n=50)
        logits = rng.normal(size=(vset.n_voxels, 5))
        pred = predict_points(logits, vset)
        for i in range(len(pred)):
            assert pred[i] == int(np.argmax(logits[vset.point_to_voxel[i]]))


class TestNeighborhoodConv:
    def test_neighbor_table_correct(self):
        coords = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5]])
        table = build_neighbor_table(coords)
        lookup = {tuple(c): i for i, c in enumerate(coords)}
        offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
        for j, c in enumerate(coords):
            for o, off in enumerate(offsets):
                key = tuple(np.array(c) + off)
                assert table[j, o] == lookup.get(key, -1)

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(11)
        coords = np.unique(rng.integers(0, 4, size=(30, 3)), axis=0)
        m = len(coords)
        x = rng.normal(size=(m, 3))
        w = rng.normal(size=(27, 3, 5))
        b = rng.normal(size=5)
        table = build_neighbor_table(coords)
        got = neighborhood_conv(ag.Tensor(x), ag.Tensor(w), ag.Tensor(b), table).data
        lookup = {tuple(c): i for i, c in enumerate(coords)}
        offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
        for j in range(m):
            acc = b.copy()
            for o, off in enumerate(offsets):
                nb = lookup.get(tuple(coords[j] + off))
                if nb is not None:
                    acc = acc + x[nb] @ w[o]
            np.testing.assert_allclose(got[j], acc, rtol=1e-10)

    def test_gradients_finite_difference(self):
        rng = np.random.default_rng(12)
        coords = np.unique(rng.integers(0, 3, size=(15, 3)), axis=0)
        table = build_neighbor_table(coords)
        x = ag.Tensor(rng.normal(size=(len(coords), 2)), requires_grad=True)
        w = ag.Tensor(rng.normal(size=(27, 2, 3)), requires_grad=True)
        b = ag.Tensor(rng.normal(size=3), requires_grad=True)
        (neighborhood_conv(x, w, b, table) ** 2.0).sum().backward()
        eps = 1e-6
        for tensor in (x, w, b):
            for _ in range(4):
                flat = int(rng.integers(tensor.data.size))
                orig = tensor.data.flat[flat]

                def value():
                    return float(
                        (neighborhood_conv(x.detach(), w.detach(), b.detach(), table) ** 2.0)
                        .sum()
                        .data
                    )

                tensor.data.flat[flat] = orig + eps
                up = value()
                tensor.data.flat[flat] = orig - eps
                down = value()
                tensor.data.flat[flat] = orig
                numeric = (up - down) / (2 * eps)
                assert abs(tensor.grad.flat[flat] - numeric) <= 1e-6 * max(1, abs(numeric))


class TestDecoderModes:
    def test_none_mode_broadcasts_token_prediction(self):
        rng = np.random.default_rng(13)
        vset, patches, tokens, _, _ = random_case(rng, n=50, p=3, d=6)
        out = decode(ag.Tensor(tokens), patches, vset, store=None, mode="none")
        np.testing.assert_array_equal(out.data, tokens[patches.voxel_to_patch])

    def test_none_mode_reduces_parameter_count(self):
        base = dict(patch_size=3, in_channels=3, dataset_classes={"main": 4})
        light = init_params(preset("volt-tiny", decoder_mode="light", **base), seed=0)
        none = init_params(preset("volt-tiny", decoder_mode="none", **base), seed=0)
        big = init_params(preset("volt-tiny", decoder_mode="big", **base), seed=0)
        assert none.n_parameters() < light.n_parameters() < big.n_parameters()

    def test_big_mode_runs_and_differs(self):
        rng = np.random.default_rng(14)
        cfg = preset("volt-tiny", patch_size=3, in_channels=2, dataset_classes={"main": 4},
                     decoder_mode="big")
        store = init_params(cfg, seed=1, dtype=np.float64)
        vset, patches, _, _, _ = random_case(rng, n=40, p=3)
        tokens = ag.Tensor(rng.normal(size=(patches.n_tokens, cfg.width)))
        big = decode(tokens, patches, vset, store, "big")
        light = decode(tokens, patches, vset, store, "light")
        assert big.shape == light.shape
        assert not np.allclose(big.data, light.data)

    def test_head_bank_from_store(self):
        cfg = preset("volt-tiny", in_channels=3, dataset_classes={"x": 3, "y": 5},
                     distill_classes=3)
        store = init_params(cfg, seed=0)
        bank = head_bank(store, cfg.dataset_classes, with_distill=True)
        assert set(bank.seg) == {"x", "y"}
        assert bank.distill is not None
        assert bank.seg["y"][0].shape == (cfg.width, 5)
