import numpy as np
import pytest

from vigil.embedding import (
    CnnParams,
    cnn_frame_features,
    merged_grid_shape,
    patch_merging,
    sequence_embed,
    tubelet_embed,
    tubelet_grid_shape,
)
from vigil.errors import ShapeError
from vigil.tensor import Tensor, grad_check, mul, tsum


def make_cnn_params(rng, scale=0.2):
    return CnnParams(
        conv1_w=Tensor(rng.standard_normal((3, 3, 3, 16)) * scale, requires_grad=True),
        conv1_b=Tensor(np.zeros(16), requires_grad=True),
        conv2_w=Tensor(rng.standard_normal((3, 3, 16, 32)) * scale, requires_grad=True),
        conv2_b=Tensor(np.zeros(32), requires_grad=True),
        fc_w=Tensor(rng.standard_normal((32, 1024)) * scale, requires_grad=True),
        fc_b=Tensor(np.zeros(1024), requires_grad=True),
    )


class TestTubeletEmbed:
    def test_grid_shape_for_default_patching(self):
        rng = np.random.default_rng(0)
        clip = rng.random((30, 64, 64, 3))
        proj = Tensor(rng.standard_normal((96, 96)) * 0.1)
        grid = tubelet_embed(clip, proj, Tensor(np.zeros(96)))
        assert grid.shape == (15, 16, 16, 96)
        assert tubelet_grid_shape((30, 64, 64), (2, 4, 4)) == (15, 16, 16)

    def test_constant_clip_gives_equal_tokens(self):
        clip = np.full((4, 8, 8, 3), 0.5)
        rng = np.random.default_rng(1)
        proj = Tensor(rng.standard_normal((96, 16)))
        grid = tubelet_embed(clip, proj, Tensor(np.zeros(16))).tokens.data
        first = grid.reshape(-1, 16)[0]
        assert np.allclose(grid.reshape(-1, 16), first, atol=1e-12)

    def test_single_tubelet_matches_manual_flatten(self):
        rng = np.random.default_rng(2)
        clip = rng.random((2, 4, 4, 3))
        proj = Tensor(rng.standard_normal((96, 8)))
        bias = Tensor(rng.standard_normal(8))
        grid = tubelet_embed(clip, proj, bias).tokens.data
        manual = clip.reshape(-1) @ proj.data + bias.data
        assert np.max(np.abs(grid.reshape(8) - manual)) <= 1e-12

    def test_indivisible_without_padding_rejected(self):
        proj = Tensor(np.zeros((96, 8)))
        with pytest.raises(ShapeError):
            tubelet_embed(np.zeros((3, 4, 4, 3)), proj, Tensor(np.zeros(8)))

    def test_padding_policy_accepts_odd_extents(self):
        rng = np.random.default_rng(3)
        clip = rng.random((3, 5, 6, 3))
        proj = Tensor(rng.standard_normal((96, 8)))
        grid = tubelet_embed(clip, proj, Tensor(np.zeros(8)), pad=True)
        assert grid.shape == (2, 2, 2, 8)

    def test_token_count_conservation(self):
        rng = np.random.default_rng(4)
        for t, h, w in [(4, 8, 8), (30, 64, 64), (2, 4, 12)]:
            clip = rng.random((t, h, w, 3))
            proj = Tensor(rng.standard_normal((96, 4)))
            grid = tubelet_embed(clip, proj, Tensor(np.zeros(4)))
            nt, nh, nw = tubelet_grid_shape((t, h, w), (2, 4, 4))
            assert grid.tokens.size // 4 == nt * nh * nw

    def test_locality_one_pixel_touches_one_token(self):
        rng = np.random.default_rng(5)
        clip = rng.random((4, 8, 8, 3))
        proj = Tensor(rng.standard_normal((96, 8)))
        bias = Tensor(np.zeros(8))
        base = tubelet_embed(clip, proj, bias).tokens.data
        poked = clip.copy()
        poked[1, 2, 3, 0] += 0.25
        out = tubelet_embed(poked, proj, bias).tokens.data
        changed = np.any(out != base, axis=-1)
        assert changed.sum() == 1
        assert changed[0, 0, 0]  # pixel (1,2,3) lives in tubelet (0,0,0)


class TestPatchMerging:
    def test_shape_halves_spatial_doubles_width(self):
        rng = np.random.default_rng(10)
        grid = rng.standard_normal((15, 16, 16, 96))
        proj = Tensor(rng.standard_normal((384, 192)) * 0.05)
        merged = patch_merging(grid, Tensor(np.ones(384)), Tensor(np.zeros(384)), proj)
        assert merged.shape == (15, 8, 8, 192)
        assert merged_grid_shape((15, 16, 16)) == (15, 8, 8)

    def test_constant_grid_stays_constant(self):
        rng = np.random.default_rng(11)
        grid = np.full((2, 4, 4, 8), 1.3)
        proj = Tensor(rng.standard_normal((32, 16)))
        merged = patch_merging(grid, Tensor(np.ones(32)), Tensor(np.zeros(32)), proj).tokens.data
        first = merged.reshape(-1, 16)[0]
        assert np.allclose(merged.reshape(-1, 16), first, atol=1e-12)

    def test_single_neighborhood_matches_manual_composition(self):
        rng = np.random.default_rng(12)
        grid = rng.standard_normal((1, 2, 2, 4))
        gamma = rng.standard_normal(16)
        beta = rng.standard_normal(16)
        proj = rng.standard_normal((16, 8))
        merged = patch_merging(
            grid, Tensor(gamma), Tensor(beta), Tensor(proj)
        ).tokens.data.reshape(8)

        concat = np.concatenate(
            [grid[0, 0, 0], grid[0, 0, 1], grid[0, 1, 0], grid[0, 1, 1]]
        )
        mu, var = concat.mean(), concat.var()
        normed = (concat - mu) / np.sqrt(var + 1e-5) * gamma + beta
        manual = normed @ proj
        assert np.max(np.abs(merged - manual)) <= 1e-12

    def test_odd_spatial_extent_rejected(self):
        with pytest.raises(ShapeError):
            patch_merging(
                np.zeros((2, 3, 4, 4)),
                Tensor(np.ones(16)),
                Tensor(np.zeros(16)),
                Tensor(np.zeros((16, 8))),
            )

    def test_temporal_extent_never_reduced(self):
        rng = np.random.default_rng(13)
        shape = (15, 8, 8, 4)
        grid = rng.standard_normal(shape)
        merged = patch_merging(
            grid, Tensor(np.ones(16)), Tensor(np.zeros(16)), Tensor(rng.standard_normal((16, 8)))
        )
        assert merged.shape[0] == shape[0]


class TestCnnFrameFeatures:
    def test_identical_frames_identical_rows(self):
        rng = np.random.default_rng(20)
        frame = rng.random((16, 16, 3))
        clip = np.stack([frame] * 5)
        feats = cnn_frame_features(clip, make_cnn_params(rng)).data
        assert feats.shape == (5, 1024)
        assert np.allclose(feats, feats[0], atol=1e-12)

    def test_zero_clip_zero_biases_zero_features(self):
        rng = np.random.default_rng(21)
        feats = cnn_frame_features(np.zeros((3, 16, 16, 3)), make_cnn_params(rng)).data
        assert np.array_equal(feats, np.zeros((3, 1024)))

    def test_matches_direct_convolution_loop(self):
        rng = np.random.default_rng(22)
        clip = rng.random((1, 8, 8, 3))
        params = make_cnn_params(rng)
        feats = cnn_frame_features(clip, params).data[0]

        def conv_loop(x, w, b, stride):
            kh, kw, cin, cout = w.shape
            ho = (x.shape[0] - kh) // stride + 1
            wo = (x.shape[1] - kw) // stride + 1
            out = np.zeros((ho, wo, cout))
            for i in range(ho):
                for j in range(wo):
                    for co in range(cout):
                        acc = 0.0
                        for di in range(kh):
                            for dj in range(kw):
                                for ci in range(cin):
                                    acc += x[i * stride + di, j * stride + dj, ci] * w[di, dj, ci, co]
                        out[i, j, co] = acc + b[co]
            return out

        h1 = np.maximum(conv_loop(clip[0], params.conv1_w.data, params.conv1_b.data, 2), 0.0)
        h2 = np.maximum(conv_loop(h1, params.conv2_w.data, params.conv2_b.data, 2), 0.0)
        manual = h2.mean(axis=(0, 1)) @ params.fc_w.data + params.fc_b.data
        assert np.max(np.abs(feats - manual)) <= 1e-10

    def test_frame_permutation_permutes_rows(self):
        rng = np.random.default_rng(23)
        clip = rng.random((6, 16, 16, 3))
        params = make_cnn_params(rng)
        feats = cnn_frame_features(clip, params).data
        perm = rng.permutation(6)
        feats_perm = cnn_frame_features(clip[perm], params).data
        assert np.allclose(feats[perm], feats_perm, atol=1e-12)

    def test_too_small_frame_rejected(self):
        with pytest.raises(ShapeError):
            cnn_frame_features(np.zeros((2, 7, 7, 3)), make_cnn_params(np.random.default_rng(24)))

    def test_gradcheck_through_cnn(self):
        rng = np.random.default_rng(25)
        clip = Tensor(rng.random((2, 9, 9, 3)))
        params = make_cnn_params(rng)
        w = rng.standard_normal((2, 1024))
        tensors = dict(params.named("cnn"))
        err = grad_check(
            lambda: tsum(mul(cnn_frame_features(clip, params), w)),
            list(tensors.values()),
            samples=60,
            rng=np.random.default_rng(2),
        )
        assert err <= 1e-4


class TestSequenceEmbed:
    def test_scaled_identity_projection(self):
        feats = np.eye(4) * 2.0
        out = sequence_embed(Tensor(feats), Tensor(np.eye(4) * 3.0), Tensor(np.zeros((4, 4))))
        assert np.allclose(out.data, feats * 3.0, atol=1e-15)

    def test_zero_features_give_pos(self):
        rng = np.random.default_rng(30)
        pos = rng.standard_normal((5, 8))
        out = sequence_embed(Tensor(np.zeros((5, 16))), Tensor(np.zeros((16, 8))), Tensor(pos))
        assert np.array_equal(out.data, pos)

    def test_matches_matmul_plus_add_oracle(self):
        rng = np.random.default_rng(31)
        feats = rng.standard_normal((6, 12))
        proj = rng.standard_normal((12, 8))
        pos = rng.standard_normal((6, 8))
        out = sequence_embed(Tensor(feats), Tensor(proj), Tensor(pos))
        assert np.max(np.abs(out.data - (feats @ proj + pos))) <= 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            sequence_embed(Tensor(np.zeros((5, 16))), Tensor(np.zeros((12, 8))), Tensor(np.zeros((5, 8))))
        with pytest.raises(ShapeError):
            sequence_embed(Tensor(np.zeros((5, 16))), Tensor(np.zeros((16, 8))), Tensor(np.zeros((4, 8))))
