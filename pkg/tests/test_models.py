import numpy as np
import pytest

from vigil.checkpoint import load_checkpoint, save_checkpoint
from vigil.data import VideoClip
from vigil.errors import ConfigError, DataFormatError
from vigil.flops import flops_estimate, matmul_flops
from vigil.models import (
    HeadParams,
    check_probs,
    classification_head,
    distracted_config,
    distracted_forward,
    drowsy_config,
    drowsy_forward,
    forward,
    init_params,
    named_parameters,
    parameter_count,
    predict,
)
from vigil.tensor import Tape, Tensor, tsum


def tiny_drowsy(**over):
    base = dict(seq_len=4, height=16, width=16, d_model=16, heads=2, depth=1)
    base.update(over)
    return drowsy_config(**base)


def tiny_distracted(**over):
    base = dict(seq_len=4, height=16, width=16, d_model=8, heads=2, depth=2,
                stages=2, window=(2, 2, 2))
    base.update(over)
    return distracted_config(**base)


def random_clip(config, seed=0, label=0):
    rng = np.random.default_rng(seed)
    return VideoClip(
        frames=rng.random((config.seq_len, config.height, config.width, 3)),
        label=label,
    )


class TestConfig:
    def test_defaults(self):
        assert drowsy_config().num_classes == 2
        assert distracted_config().num_classes == 9
        assert drowsy_config().d_model == 128
        assert distracted_config().d_model == 96

    def test_invalid_configs_rejected(self):
        with pytest.raises(ConfigError):
            drowsy_config(d_model=10, heads=4)
        with pytest.raises(ConfigError):
            drowsy_config(num_classes=1)
        with pytest.raises(ConfigError):
            distracted_config(dropout_p=1.0)


class TestClassificationHead:
    def test_zero_weights_give_uniform(self):
        head = HeadParams(w=Tensor(np.zeros((6, 4))), b=Tensor(np.zeros(4)))
        probs = classification_head(Tensor(np.random.default_rng(0).standard_normal(6)), head, 0.5)
        assert np.allclose(probs.data, 0.25, atol=1e-15)

    def test_equal_logits_split_evenly(self):
        head = HeadParams(w=Tensor(np.zeros((3, 2))), b=Tensor(np.full(2, 1.7)))
        probs = classification_head(Tensor(np.ones(3)), head, 0.0)
        assert np.allclose(probs.data, [0.5, 0.5], atol=1e-15)

    def test_matches_matmul_softmax_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal(5)
        w = rng.standard_normal((5, 3))
        b = rng.standard_normal(3)
        probs = classification_head(Tensor(x), HeadParams(Tensor(w), Tensor(b)), 0.5).data
        logits = x @ w + b
        ref = np.exp(logits - logits.max())
        ref /= ref.sum()
        assert np.max(np.abs(probs - ref)) <= 1e-12


class TestDrowsyForward:
    def test_probs_contract(self):
        config = tiny_drowsy()
        params = init_params(config)
        probs = drowsy_forward(params, config, random_clip(config))
        check_probs(probs, config.num_classes)

    def test_deterministic_in_eval_mode(self):
        config = tiny_drowsy()
        params = init_params(config)
        clip = random_clip(config, seed=3)
        a = drowsy_forward(params, config, clip).data
        b = drowsy_forward(params, config, clip).data
        assert np.array_equal(a, b)

    def test_zeroed_encoder_reduces_to_head_over_pooled_embedding(self):
        config = tiny_drowsy()
        params = init_params(config)
        for blk in params.blocks:
            blk.attn.w_o = Tensor(np.zeros_like(blk.attn.w_o.data), requires_grad=True)
            blk.mlp.w2 = Tensor(np.zeros_like(blk.mlp.w2.data), requires_grad=True)
            blk.mlp.b2 = Tensor(np.zeros_like(blk.mlp.b2.data), requires_grad=True)
        clip = random_clip(config, seed=4)
        probs = drowsy_forward(params, config, clip).data

        from vigil.embedding import cnn_frame_features, sequence_embed
        from vigil.tensor import max_pool_1d

        feats = cnn_frame_features(Tensor(clip.frames), params.cnn)
        x = sequence_embed(feats, params.embed_proj, params.embed_pos)
        pooled = max_pool_1d(x)
        ref = classification_head(pooled, params.head, config.dropout_p).data
        assert np.max(np.abs(probs - ref)) <= 1e-12

    def test_wrong_pipeline_rejected(self):
        config = tiny_distracted()
        with pytest.raises(ConfigError):
            drowsy_forward(init_params(config), config, random_clip(config))


class TestDistractedForward:
    def test_probs_contract_and_argmax_range(self):
        config = tiny_distracted()
        params = init_params(config)
        clip = random_clip(config, seed=5)
        probs = distracted_forward(params, config, clip)
        check_probs(probs, 9)
        assert 0 <= predict(params, config, clip) < 9

    def test_single_window_config_matches_plain_attention_path(self):
        # window covers the whole token grid and depth=1: the swin path is
        # one unshifted block == plain transformer block on flattened tokens
        config = tiny_distracted(depth=1, stages=1, window=(2, 4, 4))
        params = init_params(config)
        clip = random_clip(config, seed=6)
        probs = distracted_forward(params, config, clip).data

        from vigil.attention import transformer_block
        from vigil.embedding import tubelet_embed
        from vigil.models import TUBELET_PATCH
        from vigil.tensor import reshape, tmean

        grid = tubelet_embed(Tensor(clip.frames), params.tubelet_proj, params.tubelet_b,
                             patch=TUBELET_PATCH)
        t, h, w, d = grid.tokens.shape
        flat = reshape(grid.tokens, (t * h * w, d))
        out = transformer_block(flat, params.stages[0].blocks[0])
        pooled = tmean(out, axis=0)
        ref = classification_head(pooled, params.head, config.dropout_p).data
        assert np.max(np.abs(probs - ref)) <= 1e-12

    def test_window_aligned_pixel_roll_preserves_logits(self):
        # rolling input pixels by a full window at every stage re-tiles the
        # same token sets, so pooled logits move by < 1e-6
        config = tiny_distracted()  # windows (2,2,2), one merge
        params = init_params(config)
        clip = random_clip(config, seed=7)
        base = distracted_forward(params, config, clip).data
        # stage-0 tokens: 4px wide; stage-1 tokens: 8px. window w=2 tokens.
        # 16px roll = 4 stage-0 tokens = 2 stage-1 tokens = full windows.
        rolled = VideoClip(frames=np.roll(clip.frames, (16, 16), axis=(1, 2)), label=clip.label)
        out = distracted_forward(params, config, rolled).data
        assert np.max(np.abs(out - base)) < 1e-6


class TestGradientFlow:
    @pytest.mark.parametrize("make", [tiny_drowsy, tiny_distracted])
    def test_every_parameter_receives_gradient(self, make):
        config = make()
        params = init_params(config)
        clip = random_clip(config, seed=8, label=1)
        tensors = named_parameters(params)
        rng = np.random.default_rng(0)
        with Tape() as tape:
            probs = forward(params, config, clip, train=True, rng=rng)
            from vigil.training import cross_entropy

            loss = cross_entropy(probs, clip.label)
        tape.backward(loss)
        dead = [name for name, t in tensors.items() if t.grad is None or not np.any(t.grad)]
        assert dead == []


class TestParameterCount:
    @pytest.mark.parametrize(
        "config",
        [
            drowsy_config(),
            distracted_config(),
            tiny_drowsy(),
            tiny_distracted(),
            tiny_distracted(rel_pos_bias=True),
        ],
        ids=["drowsy", "distracted", "tiny-drowsy", "tiny-distracted", "rel-pos"],
    )
    def test_closed_form_matches_actual(self, config):
        params = init_params(config)
        actual = sum(t.size for t in named_parameters(params).values())
        assert actual == parameter_count(config)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        config = tiny_distracted()
        params = init_params(config)
        path = tmp_path / "model.swsh"
        save_checkpoint(path, config, params)
        loaded_config, loaded = load_checkpoint(path)
        assert loaded_config == config
        for (na, ta), (nb, tb) in zip(named_parameters(params).items(),
                                      named_parameters(loaded).items()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)
        # re-serialization must be byte-identical
        path2 = tmp_path / "model2.swsh"
        save_checkpoint(path2, loaded_config, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.swsh"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(DataFormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        config = tiny_drowsy()
        path = tmp_path / "model.swsh"
        save_checkpoint(path, config, init_params(config))
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(DataFormatError, match="truncated"):
            load_checkpoint(path)

    def test_loaded_model_runs(self, tmp_path):
        config = tiny_drowsy()
        params = init_params(config)
        clip = random_clip(config, seed=9)
        expected = drowsy_forward(params, config, clip).data
        path = tmp_path / "model.swsh"
        save_checkpoint(path, config, params)
        _, loaded = load_checkpoint(path)
        assert np.array_equal(drowsy_forward(loaded, config, clip).data, expected)


class TestFlops:
    def test_single_matmul_formula(self):
        assert matmul_flops(10, 10, 10) == 2000

    def test_doubling_depth_doubles_block_flops(self):
        base = flops_estimate(distracted_config())
        deep = flops_estimate(distracted_config(depth=4))
        assert deep.block_total() == 2 * base.block_total()
        base_d = flops_estimate(drowsy_config())
        deep_d = flops_estimate(drowsy_config(depth=4))
        assert deep_d.block_total() == 2 * base_d.block_total()

    def test_distracted_costs_more_than_drowsy_at_matched_seq_len(self):
        drowsy = flops_estimate(drowsy_config())
        distracted = flops_estimate(distracted_config())
        assert distracted.total > drowsy.total

    def test_table_renders(self):
        report = flops_estimate(drowsy_config())
        text = report.table()
        assert "total" in text and "cnn" in text
