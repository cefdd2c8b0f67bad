"""Scaled dot-product, multi-head, and 3D shifted-window attention.

Window machinery follows the shifted-window convention: partition a token
grid into non-overlapping 3D windows, and for the shifted variant roll the
grid by -shift first and mask out pairs of tokens that were not neighbors
before the roll. Everything is built from the differentiable tensor ops,
so gradients flow through partitioning, shifting, and masking for free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ShapeError
from .tensor import (
    Tensor,
    crop,
    gelu,
    index_select,
    layer_norm,
    matmul,
    reshape,
    roll,
    softmax,
    swap_last2,
    transpose,
    zero_pad,
)

# Additive bias for forbidden attention pairs. Large but finite, so softmax
# under max-subtraction stays NaN-free and forbidden weights underflow to 0.
MASK_FORBIDDEN = -1e9


@dataclass
class AttentionParams:
    """Projection weights for multi-head self-attention over width d_model."""

    heads: int
    d_model: int
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor

    def __post_init__(self):
        if self.heads <= 0 or self.d_model % self.heads != 0:
            raise ShapeError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.shape != (self.d_model, self.d_model):
                raise ShapeError(f"{name} must be ({self.d_model}, {self.d_model}), got {w.shape}")

    @property
    def d_k(self):
        return self.d_model // self.heads

    def named(self, prefix):
        yield f"{prefix}.w_q", self.w_q
        yield f"{prefix}.w_k", self.w_k
        yield f"{prefix}.w_v", self.w_v
        yield f"{prefix}.w_o", self.w_o


@dataclass
class MlpParams:
    """Two-layer feed-forward params (GELU between)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    def named(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta


@dataclass
class TransformerBlockParams:
    """Pre-norm attention + MLP block, shared by both pipelines.

    ``rel_pos`` is an optional [heads, table] learned relative-position bias
    used only by windowed attention when the experiment knob is on.
    """

    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    mlp: MlpParams
    rel_pos: Tensor | None = None

    def named(self, prefix):
        yield from self.norm1.named(f"{prefix}.norm1")
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.norm2.named(f"{prefix}.norm2")
        yield from self.mlp.named(f"{prefix}.mlp")
        if self.rel_pos is not None:
            yield f"{prefix}.rel_pos", self.rel_pos


@dataclass(frozen=True)
class WindowSpec:
    """3D window extents plus per-axis cyclic shift offsets."""

    window: tuple[int, int, int]
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        object.__setattr__(self, "shift", tuple(int(s) for s in self.shift))
        if len(self.window) != 3 or len(self.shift) != 3:
            raise ShapeError("window and shift must each have 3 extents")
        for w, s in zip(self.window, self.shift):
            if w < 1:
                raise ShapeError(f"window extents must be positive, got {self.window}")
            if not 0 <= s < w:
                raise ShapeError(f"shift {self.shift} must satisfy 0 <= shift < window {self.window}")

    @classmethod
    def shifted(cls, window):
        """The standard companion spec: shift of half the window per axis."""
        window = tuple(window)
        return cls(window, tuple(w // 2 for w in window))

    @property
    def is_shifted(self):
        return any(s > 0 for s in self.shift)

    @property
    def tokens_per_window(self):
        wt, wh, ww = self.window
        return wt * wh * ww


def resolve_window_spec(grid_shape, window, shifted):
    """Clamp a requested window to the grid and drop unusable shifts.

    Along any axis where the window covers the whole (or more of the) grid
    there is a single window and shifting is meaningless, so the window is
    clamped to the extent and the shift zeroed; elsewhere a shifted spec
    gets the standard half-window offset.
    """
    eff_window = tuple(min(w, e) for w, e in zip(window, grid_shape[:3]))
    if not shifted:
        return WindowSpec(eff_window)
    shift = tuple(0 if w >= e else w // 2 for w, e in zip(eff_window, grid_shape[:3]))
    return WindowSpec(eff_window, shift)


def scaled_dot_product_attention(q, k, v, mask=None, return_weights=False):
    """softmax(q kᵀ / sqrt(d_k) + mask) v over the trailing two axes.

    q, k share trailing extent d_k; k, v share row count. ``mask`` is an
    additive bias broadcastable against the [.., N, N] weight logits
    (0 = permitted, MASK_FORBIDDEN = forbidden).
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    k = k if isinstance(k, Tensor) else Tensor(k)
    v = v if isinstance(v, Tensor) else Tensor(v)
    d_k = q.shape[-1] if q.ndim else 0
    if d_k == 0:
        raise ValueError("attention requires d_k >= 1")
    if k.shape[-1] != d_k:
        raise ShapeError(f"q trailing extent {d_k} != k trailing extent {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k rows {k.shape[-2]} != v rows {v.shape[-2]}")
    logits = matmul(q, swap_last2(k)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        mask = mask if isinstance(mask, Tensor) else Tensor(mask)
        try:
            np.broadcast_shapes(mask.shape, logits.shape)
        except ValueError:
            raise ShapeError(
                f"mask shape {mask.shape} does not broadcast to logits {logits.shape}"
            ) from None
        logits = logits + mask
    weights = softmax(logits, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def multi_head_attention(x, params, mask=None, return_weights=False):
    """Project x to Q/K/V, attend per head, concatenate, re-project.

    x is [.., N, d_model]; any leading axes are treated as batch. ``mask``
    may be [N, N], [B, N, N], or already head-broadcast [.., 1|H, N, N].
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 2 or x.shape[-1] != params.d_model:
        raise ShapeError(f"input {x.shape} does not end in d_model={params.d_model}")
    lead = x.shape[:-2]
    n = x.shape[-2]
    h, d_k = params.heads, params.d_k
    batch = int(np.prod(lead)) if lead else 1

    xb = reshape(x, (batch, n, params.d_model))

    def split_heads(t):
        return transpose(reshape(t, (batch, n, h, d_k)), (0, 2, 1, 3))  # (B,H,N,dk)

    q = split_heads(matmul(xb, params.w_q))
    k = split_heads(matmul(xb, params.w_k))
    v = split_heads(matmul(xb, params.w_v))

    if mask is not None:
        mask = mask if isinstance(mask, Tensor) else Tensor(mask)
        if mask.ndim == 2:
            mask = reshape(mask, (1, 1) + mask.shape)
        elif mask.ndim == 3:
            mask = reshape(mask, (mask.shape[0], 1) + mask.shape[1:])

    attended = scaled_dot_product_attention(q, k, v, mask=mask, return_weights=return_weights)
    if return_weights:
        attended, weights = attended
    merged = reshape(transpose(attended, (0, 2, 1, 3)), (batch, n, params.d_model))
    out = reshape(matmul(merged, params.w_o), x.shape)
    return (out, weights) if return_weights else out


def mlp_forward(x, params):
    """gelu(x w1 + b1) w2 + b2 applied along the last axis."""
    return matmul(gelu(matmul(x, params.w1) + params.b1), params.w2) + params.b2


# ---------------------------------------------------------------------------
# 3D windows


def _check_divisible(grid_shape, window):
    for extent, w in zip(grid_shape, window):
        if extent % w != 0:
            raise ShapeError(
                f"grid {tuple(grid_shape)} not divisible by window {tuple(window)}; pad first"
            )


def window_counts(grid_shape, window):
    _check_divisible(grid_shape[:3], window)
    return tuple(grid_shape[i] // window[i] for i in range(3))


def window_partition_3d(tokens, spec):
    """Tile a [T',H',W',D] grid into [numWindows, wt*wh*ww, D] windows.

    Windows are ordered row-major over (t, h, w) window indices; tokens
    within a window are row-major over (t, h, w) offsets.
    """
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    if tokens.ndim != 4:
        raise ShapeError(f"window_partition_3d expects [T,H,W,D], got {tokens.shape}")
    t, h, w, d = tokens.shape
    wt, wh, ww = spec.window
    _check_divisible((t, h, w), spec.window)
    x = reshape(tokens, (t // wt, wt, h // wh, wh, w // ww, ww, d))
    x = transpose(x, (0, 2, 4, 1, 3, 5, 6))
    n_windows = (t // wt) * (h // wh) * (w // ww)
    return reshape(x, (n_windows, wt * wh * ww, d))


def window_reverse_3d(windows, spec, grid_shape):
    """Exact inverse of window_partition_3d for the given grid shape."""
    if not isinstance(windows, Tensor):
        windows = Tensor(windows)
    t, h, w = grid_shape[:3]
    wt, wh, ww = spec.window
    _check_divisible((t, h, w), spec.window)
    n_windows = (t // wt) * (h // wh) * (w // ww)
    if windows.ndim != 3 or windows.shape[0] != n_windows or windows.shape[1] != wt * wh * ww:
        raise ShapeError(
            f"windows {windows.shape} inconsistent with grid {tuple(grid_shape)} and window {spec.window}"
        )
    d = windows.shape[-1]
    x = reshape(windows, (t // wt, h // wh, w // ww, wt, wh, ww, d))
    x = transpose(x, (0, 3, 1, 4, 2, 5, 6))
    return reshape(x, (t, h, w, d))


def cyclic_shift_3d(tokens, shift, reverse=False):
    """Toroidal roll of a [T',H',W',D] grid; reverse undoes forward exactly.

    Forward rolls content by -shift (the windowing convention); shifts are
    taken mod the grid extents.
    """
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    st, sh, sw = shift
    if st == sh == sw == 0:
        return tokens
    sign = 1 if reverse else -1
    return roll(tokens, (sign * st, sign * sh, sign * sw), (0, 1, 2))


def _axis_labels(extent, window, shift):
    """Region index per rolled-canvas position along one axis."""
    labels = np.zeros(extent, dtype=np.int64)
    if shift == 0:
        return labels
    # Slices in rolled coordinates: the final window along the axis mixes
    # wrapped content and splits into two regions; everything before it is
    # contiguous.
    labels[: extent - window] = 0
    labels[extent - window : extent - shift] = 1
    labels[extent - shift :] = 2
    return labels


def _region_labels(grid_shape, spec):
    t, h, w = grid_shape[:3]
    lt = _axis_labels(t, spec.window[0], spec.shift[0])
    lh = _axis_labels(h, spec.window[1], spec.shift[1])
    lw = _axis_labels(w, spec.window[2], spec.shift[2])
    return (lt[:, None, None] * 9 + lh[None, :, None] * 3 + lw[None, None, :]).astype(np.float64)


def _partition_labels(labels, window):
    t, h, w = labels.shape
    wt, wh, ww = window
    x = labels.reshape(t // wt, wt, h // wh, wh, w // ww, ww)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(-1, wt * wh * ww)


@lru_cache(maxsize=64)
def _window_mask_cached(grid_shape, padded_shape, window, shift):
    spec = WindowSpec(window, shift)
    labels = _region_labels(padded_shape, spec)
    if padded_shape != grid_shape:
        # Padded tokens each get a unique label: forbidden against everything
        # but themselves (the diagonal stays permitted by construction).
        pad = np.zeros(padded_shape, dtype=bool)
        pad[grid_shape[0] :, :, :] = True
        pad[:, grid_shape[1] :, :] = True
        pad[:, :, grid_shape[2] :] = True
        if spec.is_shifted:
            pad = np.roll(pad, tuple(-s for s in spec.shift), (0, 1, 2))
        n_pad = int(pad.sum())
        labels[pad] = -np.arange(1, n_pad + 1, dtype=np.float64)
    win_labels = _partition_labels(labels, window)
    diff = win_labels[:, :, None] - win_labels[:, None, :]
    mask = np.where(diff != 0.0, MASK_FORBIDDEN, 0.0)
    mask.setflags(write=False)
    return mask


def build_shift_mask(grid_shape, spec):
    """Per-window additive mask for shifted-window attention.

    Tokens are labeled by their region id (three slices per shifted axis);
    window pairs with differing ids get MASK_FORBIDDEN, equal ids get 0.
    Returns a read-only [numWindows, N, N] array; requires a nonzero shift.
    """
    if not spec.is_shifted:
        raise ValueError("build_shift_mask requires a nonzero shift (no mask is needed otherwise)")
    grid_shape = tuple(int(e) for e in grid_shape[:3])
    _check_divisible(grid_shape, spec.window)
    return _window_mask_cached(grid_shape, grid_shape, spec.window, spec.shift)


def _padding_for(grid_shape, window):
    return tuple((-extent) % w for extent, w in zip(grid_shape, window))


def swin_block(tokens, params, spec):
    """One windowed transformer block on a [T',H',W',D] grid.

    x <- x + WindowedMSA(LayerNorm(x)); x <- x + MLP(LayerNorm(x)).
    Grids not divisible by the window are zero-padded up with the padded
    tokens masked out of attention and cropped away afterwards.
    """
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    if tokens.ndim != 4 or tokens.shape[-1] != params.attn.d_model:
        raise ShapeError(
            f"swin_block: grid {tokens.shape} does not end in d_model={params.attn.d_model}"
        )
    t, h, w, d = tokens.shape
    pad_thw = _padding_for((t, h, w), spec.window)

    x = layer_norm(tokens, params.norm1.gamma, params.norm1.beta)
    if any(pad_thw):
        x = zero_pad(x, ((0, pad_thw[0]), (0, pad_thw[1]), (0, pad_thw[2]), (0, 0)))
    padded_shape = (t + pad_thw[0], h + pad_thw[1], w + pad_thw[2])

    if spec.is_shifted:
        x = cyclic_shift_3d(x, spec.shift)
    windows = window_partition_3d(x, spec)

    mask = None
    if spec.is_shifted or any(pad_thw):
        mask = _window_mask_cached((t, h, w), padded_shape, spec.window, spec.shift)
    bias = _window_bias(mask, params, spec)

    attended = multi_head_attention(windows, params.attn, mask=bias)
    x = window_reverse_3d(attended, spec, padded_shape)
    if spec.is_shifted:
        x = cyclic_shift_3d(x, spec.shift, reverse=True)
    if any(pad_thw):
        x = crop(x, ((0, pad_thw[0]), (0, pad_thw[1]), (0, pad_thw[2]), (0, 0)))

    x = tokens + x
    return x + mlp_forward(layer_norm(x, params.norm2.gamma, params.norm2.beta), params.mlp)


def _window_bias(mask, params, spec):
    """Combine the window mask with the optional learned relative-position bias."""
    if params.rel_pos is None:
        if mask is None:
            return None
        n_windows = mask.shape[0]
        return Tensor(mask.reshape(n_windows, 1, *mask.shape[1:]))
    idx = relative_position_index(spec.window)
    n = spec.tokens_per_window
    table = index_select(params.rel_pos, idx.reshape(-1), axis=1)  # (H, N*N)
    bias = reshape(table, (1, params.attn.heads, n, n))
    if mask is not None:
        n_windows = mask.shape[0]
        bias = bias + Tensor(mask.reshape(n_windows, 1, *mask.shape[1:]))
    return bias


def rel_pos_table_size(window):
    wt, wh, ww = window
    return (2 * wt - 1) * (2 * wh - 1) * (2 * ww - 1)


@lru_cache(maxsize=32)
def relative_position_index(window):
    """[N, N] lookup of pairwise (dt, dh, dw) offsets into a flat bias table."""
    wt, wh, ww = window
    coords = np.stack(
        np.meshgrid(np.arange(wt), np.arange(wh), np.arange(ww), indexing="ij"), axis=-1
    ).reshape(-1, 3)
    delta = coords[:, None, :] - coords[None, :, :]  # (N, N, 3)
    delta = delta + np.array([wt - 1, wh - 1, ww - 1])
    idx = (delta[..., 0] * (2 * wh - 1) + delta[..., 1]) * (2 * ww - 1) + delta[..., 2]
    idx.setflags(write=False)
    return idx


def transformer_block(x, params, mask=None):
    """Plain (unwindowed) pre-norm block over [.., N, d_model] tokens."""
    h = layer_norm(x, params.norm1.gamma, params.norm1.beta)
    x = x + multi_head_attention(h, params.attn, mask=mask)
    h = layer_norm(x, params.norm2.gamma, params.norm2.beta)
    return x + mlp_forward(h, params.mlp)
