"""Clip-to-token conversion: tubelet embedding, patch merging, frame CNN.

The tubelet path feeds the windowed pipeline (pixel blocks flattened and
projected to tokens, spatial extents reduced by merging while the temporal
extent is never touched). The frame-CNN path feeds the sequence pipeline
(one feature vector per frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    extract_patches,
    layer_norm,
    matmul,
    relu,
    reshape,
    tmean,
    transpose,
    zero_pad,
)

FRAME_FEATURE_DIM = 1024
_MIN_FRAME_EXTENT = 8


@dataclass
class TokenGrid:
    """A [T',H',W',D] token lattice plus how it was produced."""

    tokens: Tensor
    patch: tuple[int, int, int]
    merges: int = 0

    @property
    def shape(self):
        return self.tokens.shape


def tubelet_grid_shape(clip_shape, patch):
    """Token-grid extents for a clip shape under non-overlapping tubelets."""
    t, h, w = clip_shape[:3]
    pt, ph, pw = patch
    return (t // pt, h // ph, w // pw)


def merged_grid_shape(grid_shape):
    """Extents after one patch merge: spatial halved, temporal preserved."""
    t, h, w = grid_shape[:3]
    return (t, h // 2, w // 2)


def tubelet_embed(frames, proj, bias, patch=(2, 4, 4), pad=False):
    """Flatten each non-overlapping pt x ph x pw x C pixel block and project.

    frames: [T,H,W,C]; proj: [pt*ph*pw*C, D]; bias: [D]. Patch vectors are
    flattened in (pt, ph, pw, C) row-major order. Extents must divide by
    the patch sizes unless ``pad`` zero-pads them up.
    """
    if not isinstance(frames, Tensor):
        frames = Tensor(frames)
    if frames.ndim != 4:
        raise ShapeError(f"tubelet_embed expects [T,H,W,C] frames, got {frames.shape}")
    t, h, w, c = frames.shape
    pt, ph, pw = patch
    if (t % pt or h % ph or w % pw) and not pad:
        raise ShapeError(
            f"clip {frames.shape} not divisible by patch {tuple(patch)} and padding is disabled"
        )
    if pad:
        pads = ((0, (-t) % pt), (0, (-h) % ph), (0, (-w) % pw), (0, 0))
        if any(hi for _, hi in pads):
            frames = zero_pad(frames, pads)
            t, h, w, c = frames.shape
    flat_dim = pt * ph * pw * c
    if proj.shape[0] != flat_dim:
        raise ShapeError(f"projection rows {proj.shape[0]} != flattened patch size {flat_dim}")
    d = proj.shape[1]

    x = reshape(frames, (t // pt, pt, h // ph, ph, w // pw, pw, c))
    x = transpose(x, (0, 2, 4, 1, 3, 5, 6))
    x = reshape(x, (t // pt, h // ph, w // pw, flat_dim))
    tokens = matmul(x, proj) + bias
    return TokenGrid(tokens=tokens, patch=tuple(patch))


def patch_merging(grid, norm_gamma, norm_beta, proj):
    """Concatenate each 1x2x2 spatial token neighborhood, normalize, project.

    [T',H',W',D] -> [T',H'/2,W'/2,2D]; the temporal extent is preserved
    exactly. Neighborhood tokens are concatenated in (dh, dw) row-major
    order; proj is [4D, 2D].
    """
    tokens = grid.tokens if isinstance(grid, TokenGrid) else grid
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    t, h, w, d = tokens.shape
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merging requires even spatial extents, got {tokens.shape}")
    if proj.shape != (4 * d, 2 * d):
        raise ShapeError(f"merge projection must be ({4 * d}, {2 * d}), got {proj.shape}")

    x = reshape(tokens, (t, h // 2, 2, w // 2, 2, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (t, h // 2, w // 2, 4 * d))
    x = layer_norm(x, norm_gamma, norm_beta)
    merged = matmul(x, proj)
    if isinstance(grid, TokenGrid):
        return TokenGrid(tokens=merged, patch=grid.patch, merges=grid.merges + 1)
    return TokenGrid(tokens=merged, patch=(1, 1, 1), merges=1)


@dataclass
class CnnParams:
    """Two stride-2 conv layers, global average pool, dense to 1024."""

    conv1_w: Tensor  # [3,3,C,16]
    conv1_b: Tensor
    conv2_w: Tensor  # [3,3,16,32]
    conv2_b: Tensor
    fc_w: Tensor  # [32,1024]
    fc_b: Tensor

    def named(self, prefix):
        yield f"{prefix}.conv1.w", self.conv1_w
        yield f"{prefix}.conv1.b", self.conv1_b
        yield f"{prefix}.conv2.w", self.conv2_w
        yield f"{prefix}.conv2.b", self.conv2_b
        yield f"{prefix}.fc.w", self.fc_w
        yield f"{prefix}.fc.b", self.fc_b


def conv2d(x, w, b, stride):
    """Valid-mode strided convolution over [B,H,W,Cin] with [kh,kw,Cin,Cout]."""
    kh, kw, cin, cout = w.shape
    patches = extract_patches(x, (kh, kw), stride)
    return matmul(patches, reshape(w, (kh * kw * cin, cout))) + b


def cnn_frame_features(frames, params):
    """Per-frame feature extraction: [T,H,W,C] -> [T, 1024].

    Each frame runs the same conv(3->16, s2) / ReLU / conv(16->32, s2) /
    ReLU / global-average-pool / dense stack independently, so permuting
    frames permutes feature rows.
    """
    if not isinstance(frames, Tensor):
        frames = Tensor(frames)
    if frames.ndim != 4:
        raise ShapeError(f"cnn_frame_features expects [T,H,W,C], got {frames.shape}")
    t, h, w, _ = frames.shape
    if h < _MIN_FRAME_EXTENT or w < _MIN_FRAME_EXTENT:
        raise ShapeError(f"frames must be at least {_MIN_FRAME_EXTENT}x{_MIN_FRAME_EXTENT}, got {h}x{w}")
    x = relu(conv2d(frames, params.conv1_w, params.conv1_b, stride=2))
    x = relu(conv2d(x, params.conv2_w, params.conv2_b, stride=2))
    pooled = tmean(x, axis=(1, 2))  # [T, 32]
    return matmul(pooled, params.fc_w) + params.fc_b


def sequence_embed(features, proj, pos):
    """Linear projection plus learned absolute position embedding.

    features: [T,F]; proj: [F,d]; pos: [T,d].
    """
    if features.shape[-1] != proj.shape[0]:
        raise ShapeError(f"features width {features.shape[-1]} != projection rows {proj.shape[0]}")
    if pos.shape != (features.shape[0], proj.shape[1]):
        raise ShapeError(
            f"position table {pos.shape} must be ({features.shape[0]}, {proj.shape[1]})"
        )
    return matmul(features, proj) + pos
