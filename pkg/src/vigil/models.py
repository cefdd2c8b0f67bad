"""End-to-end pipeline assembly: configs, weight init, forward passes.

Two pipelines share the classification head and the transformer block
machinery. "drowsy" runs per-frame CNN features through a plain encoder
over the frame sequence; "distracted" runs tubelet tokens through paired
(windowed, shifted-windowed) attention stages with one spatial merge
between stages.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (
    AttentionParams,
    LayerNormParams,
    MlpParams,
    TransformerBlockParams,
    rel_pos_table_size,
    resolve_window_spec,
    swin_block,
    transformer_block,
)
from .data import VideoClip
from .embedding import (
    FRAME_FEATURE_DIM,
    CnnParams,
    cnn_frame_features,
    patch_merging,
    sequence_embed,
    tubelet_embed,
)
from .errors import ConfigError
from .tensor import Tensor, dropout, matmul, max_pool_1d, reshape, softmax, tmean
from .util import derive_rng

_TAG_INIT = 1

PIPELINE_DROWSY = "drowsy"
PIPELINE_DISTRACTED = "distracted"

TUBELET_PATCH = (2, 4, 4)
PROB_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ModelConfig:
    """Full architectural hyperparameter record for either pipeline.

    ``depth`` counts encoder blocks for the drowsy pipeline and blocks per
    stage for the distracted one; ``stages`` only applies to the latter
    (stages - 1 spatial merges are performed).
    """

    pipeline: str
    num_classes: int
    seq_len: int = 30
    height: int = 64
    width: int = 64
    d_model: int = 96
    heads: int = 4
    depth: int = 2
    stages: int = 2
    window: tuple[int, int, int] = (3, 4, 4)
    mlp_ratio: float = 2.0
    dropout_p: float = 0.5
    rel_pos_bias: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        if self.pipeline not in (PIPELINE_DROWSY, PIPELINE_DISTRACTED):
            raise ConfigError(f"unknown pipeline {self.pipeline!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.depth < 1 or self.stages < 1:
            raise ConfigError("depth and stages must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0,1), got {self.dropout_p}")
        if self.seq_len < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("clip extents must be positive")

    @property
    def mlp_hidden(self):
        return max(1, int(round(self.d_model * self.mlp_ratio)))

    def stage_width(self, stage):
        return self.d_model * (2**stage)

    @property
    def final_width(self):
        if self.pipeline == PIPELINE_DROWSY:
            return self.d_model
        return self.stage_width(self.stages - 1)


def drowsy_config(**overrides):
    base = dict(
        pipeline=PIPELINE_DROWSY, num_classes=2, d_model=128, heads=4, depth=2, stages=1
    )
    base.update(overrides)
    return ModelConfig(**base)


def distracted_config(**overrides):
    base = dict(
        pipeline=PIPELINE_DISTRACTED, num_classes=9, d_model=96, heads=4, depth=2, stages=2
    )
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# parameter construction


def _xavier(rng, fan_in, fan_out, shape=None):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape or (fan_in, fan_out)), requires_grad=True)


def _zeros(*shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(*shape):
    return Tensor(np.ones(shape), requires_grad=True)


def _make_block(rng, d_model, heads, hidden, rel_pos_window=None):
    blk = TransformerBlockParams(
        norm1=LayerNormParams(_ones(d_model), _zeros(d_model)),
        attn=AttentionParams(
            heads=heads,
            d_model=d_model,
            w_q=_xavier(rng, d_model, d_model),
            w_k=_xavier(rng, d_model, d_model),
            w_v=_xavier(rng, d_model, d_model),
            w_o=_xavier(rng, d_model, d_model),
        ),
        norm2=LayerNormParams(_ones(d_model), _zeros(d_model)),
        mlp=MlpParams(
            w1=_xavier(rng, d_model, hidden),
            b1=_zeros(hidden),
            w2=_xavier(rng, hidden, d_model),
            b2=_zeros(d_model),
        ),
    )
    if rel_pos_window is not None:
        blk.rel_pos = Tensor(np.zeros((heads, rel_pos_table_size(rel_pos_window))), requires_grad=True)
    return blk


@dataclass
class HeadParams:
    w: Tensor
    b: Tensor

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class DrowsyParams:
    cnn: CnnParams
    embed_proj: Tensor
    embed_pos: Tensor
    blocks: list[TransformerBlockParams]
    head: HeadParams

    def named(self):
        yield from self.cnn.named("cnn")
        yield "embed.proj", self.embed_proj
        yield "embed.pos", self.embed_pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"block{i}")
        yield from self.head.named("head")


@dataclass
class StageParams:
    blocks: list[TransformerBlockParams]
    merge_norm: LayerNormParams | None = None
    merge_proj: Tensor | None = None

    def named(self, prefix):
        for i, blk in enumerate(self.blocks):
            yield from blk.named(f"{prefix}.block{i}")
        if self.merge_norm is not None:
            yield from self.merge_norm.named(f"{prefix}.merge.norm")
            yield f"{prefix}.merge.proj", self.merge_proj


@dataclass
class DistractedParams:
    tubelet_proj: Tensor
    tubelet_b: Tensor
    stages: list[StageParams]
    head: HeadParams

    def named(self):
        yield "tubelet.proj", self.tubelet_proj
        yield "tubelet.b", self.tubelet_b
        for s, stage in enumerate(self.stages):
            yield from stage.named(f"stage{s}")
        yield from self.head.named("head")


def init_params(config):
    """Deterministic weight init for a config: Xavier-uniform projections,
    zero biases/beta, unit gamma, small-normal position table."""
    rng = derive_rng(config.seed, _TAG_INIT)
    if config.pipeline == PIPELINE_DROWSY:
        d = config.d_model
        cnn = CnnParams(
            conv1_w=_xavier(rng, 3 * 3 * 3, 16, shape=(3, 3, 3, 16)),
            conv1_b=_zeros(16),
            conv2_w=_xavier(rng, 3 * 3 * 16, 32, shape=(3, 3, 16, 32)),
            conv2_b=_zeros(32),
            fc_w=_xavier(rng, 32, FRAME_FEATURE_DIM),
            fc_b=_zeros(FRAME_FEATURE_DIM),
        )
        embed_proj = _xavier(rng, FRAME_FEATURE_DIM, d)
        embed_pos = Tensor(rng.normal(0.0, 0.02, size=(config.seq_len, d)), requires_grad=True)
        blocks = [
            _make_block(rng, d, config.heads, config.mlp_hidden) for _ in range(config.depth)
        ]
        head = HeadParams(w=_xavier(rng, d, config.num_classes), b=_zeros(config.num_classes))
        return DrowsyParams(cnn, embed_proj, embed_pos, blocks, head)

    pt, ph, pw = TUBELET_PATCH
    flat = pt * ph * pw * 3
    tubelet_proj = _xavier(rng, flat, config.d_model)
    tubelet_b = _zeros(config.d_model)
    stages = []
    for s in range(config.stages):
        d_s = config.stage_width(s)
        hidden = max(1, int(round(d_s * config.mlp_ratio)))
        rel_window = config.window if config.rel_pos_bias else None
        blocks = [
            _make_block(rng, d_s, config.heads, hidden, rel_pos_window=rel_window)
            for _ in range(config.depth)
        ]
        stage = StageParams(blocks=blocks)
        if s < config.stages - 1:
            stage.merge_norm = LayerNormParams(_ones(4 * d_s), _zeros(4 * d_s))
            stage.merge_proj = _xavier(rng, 4 * d_s, 2 * d_s)
        stages.append(stage)
    d_final = config.final_width
    head = HeadParams(w=_xavier(rng, d_final, config.num_classes), b=_zeros(config.num_classes))
    return DistractedParams(tubelet_proj, tubelet_b, stages, head)


def named_parameters(params):
    """Flat insertion-ordered name -> Tensor view of a params object."""
    return dict(params.named())


def parameter_count(config):
    """Closed-form trainable parameter count for a config."""
    d = config.d_model
    hidden = config.mlp_hidden
    c = config.num_classes

    def block_count(width, h_width, rel=False):
        n = 2 * (2 * width)  # two layer norms
        n += 4 * width * width  # q,k,v,o
        n += width * h_width + h_width + h_width * width + width  # mlp
        if rel:
            n += config.heads * rel_pos_table_size(config.window)
        return n

    if config.pipeline == PIPELINE_DROWSY:
        total = 3 * 3 * 3 * 16 + 16 + 3 * 3 * 16 * 32 + 32
        total += 32 * FRAME_FEATURE_DIM + FRAME_FEATURE_DIM
        total += FRAME_FEATURE_DIM * d + config.seq_len * d
        total += config.depth * block_count(d, hidden)
        total += d * c + c
        return total

    pt, ph, pw = TUBELET_PATCH
    total = pt * ph * pw * 3 * d + d
    for s in range(config.stages):
        d_s = config.stage_width(s)
        h_s = max(1, int(round(d_s * config.mlp_ratio)))
        total += config.depth * block_count(d_s, h_s, rel=config.rel_pos_bias)
        if s < config.stages - 1:
            total += 2 * (4 * d_s) + 4 * d_s * 2 * d_s
    total += config.final_width * c + c
    return total


# ---------------------------------------------------------------------------
# forward passes


def classification_head(x, head, p, train=False, rng=None):
    """softmax(dropout(x) w + b) over a [D] feature vector."""
    dropped = dropout(x, p, train=train, rng=rng)
    logits = matmul(reshape(dropped, (1, x.shape[-1])), head.w) + head.b
    return reshape(softmax(logits, axis=-1), (head.b.shape[0],))


def _check_clip(config, clip):
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    expected = (config.seq_len, config.height, config.width, 3)
    if frames.shape != expected:
        raise ConfigError(f"clip shape {frames.shape} does not match config {expected}")
    return frames


def drowsy_forward(params, config, clip, train=False, rng=None):
    """CNN features -> embedding -> encoder blocks -> max-pool -> head."""
    if config.pipeline != PIPELINE_DROWSY:
        raise ConfigError(f"drowsy_forward called with pipeline {config.pipeline!r}")
    frames = _check_clip(config, clip)
    feats = cnn_frame_features(Tensor(frames), params.cnn)
    x = sequence_embed(feats, params.embed_proj, params.embed_pos)
    for blk in params.blocks:
        x = transformer_block(x, blk)
    pooled = max_pool_1d(x)
    return classification_head(pooled, params.head, config.dropout_p, train=train, rng=rng)


def distracted_forward(params, config, clip, train=False, rng=None):
    """Tubelet tokens -> (W-MSA, SW-MSA) stage pairs with merges -> head.

    Blocks alternate strictly between unshifted and shifted window specs;
    the temporal extent is never reduced.
    """
    if config.pipeline != PIPELINE_DISTRACTED:
        raise ConfigError(f"distracted_forward called with pipeline {config.pipeline!r}")
    frames = _check_clip(config, clip)
    grid = tubelet_embed(Tensor(frames), params.tubelet_proj, params.tubelet_b, patch=TUBELET_PATCH)
    tokens = grid.tokens
    for s, stage in enumerate(params.stages):
        for i, blk in enumerate(stage.blocks):
            spec = resolve_window_spec(tokens.shape, config.window, shifted=bool(i % 2))
            tokens = swin_block(tokens, blk, spec)
        if stage.merge_proj is not None:
            tokens = patch_merging(
                tokens, stage.merge_norm.gamma, stage.merge_norm.beta, stage.merge_proj
            ).tokens
    pooled = tmean(tokens, axis=(0, 1, 2))
    return classification_head(pooled, params.head, config.dropout_p, train=train, rng=rng)


def forward(params, config, clip, train=False, rng=None):
    if config.pipeline == PIPELINE_DROWSY:
        return drowsy_forward(params, config, clip, train=train, rng=rng)
    return distracted_forward(params, config, clip, train=train, rng=rng)


def predict(params, config, clip):
    """Class index with maximal probability (eval mode)."""
    probs = forward(params, config, clip, train=False)
    return int(np.argmax(probs.data))


def check_probs(probs, num_classes):
    """Assert the probability contract: shape, range, unit sum."""
    data = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if data.shape != (num_classes,):
        raise ConfigError(f"probs shape {data.shape} != ({num_classes},)")
    if abs(float(data.sum()) - 1.0) > PROB_TOLERANCE or data.min() < 0 or data.max() > 1:
        raise ConfigError("probability contract violated")
    return True
