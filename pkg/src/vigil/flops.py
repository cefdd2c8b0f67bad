"""Analytic FLOP counts for one forward pass of either pipeline.

Counting conventions: a matmul [M,K]x[K,N] costs 2MKN; per-element costs
for normalization, softmax, and activations use the usual small constants.
Numbers are estimates for ordering and budgeting, not cycle counts.
"""

from __future__ import annotations

from dataclasses import dataclass

from .embedding import FRAME_FEATURE_DIM
from .models import PIPELINE_DROWSY, TUBELET_PATCH

LAYERNORM_PER_ELEM = 5
SOFTMAX_PER_ELEM = 5
GELU_PER_ELEM = 8
RELU_PER_ELEM = 1


def matmul_flops(m, k, n):
    """Multiply-add count for [M,K] x [K,N]."""
    return 2 * m * k * n


def _conv_out(extent, kernel, stride):
    return (extent - kernel) // stride + 1


@dataclass
class FlopsReport:
    rows: list[tuple[str, int]]

    @property
    def total(self):
        return sum(f for _, f in self.rows)

    @property
    def total_gflops(self):
        return self.total / 1e9

    def block_total(self):
        """FLOPs attributable to transformer blocks (scales with depth)."""
        return sum(f for name, f in self.rows if ".block" in name or name.startswith("block"))

    def table(self):
        lines = [f"{'layer':<24} {'GFLOPs':>12}"]
        for name, f in self.rows:
            lines.append(f"{name:<24} {f / 1e9:>12.6f}")
        lines.append(f"{'total':<24} {self.total_gflops:>12.6f}")
        return "\n".join(lines)


def _attention_block_flops(tokens, d, heads, hidden, window_tokens):
    """One pre-norm block: LN, QKVO projections, windowed logits/AV, MLP."""
    n = window_tokens
    f = 2 * LAYERNORM_PER_ELEM * tokens * d  # two layer norms
    f += 4 * matmul_flops(tokens, d, d)  # q, k, v, o projections
    # per-window attention, summed over windows and heads: QK^T and AV each
    # touch every (token, window-token) pair at head width d/heads
    f += 2 * 2 * tokens * n * d
    f += tokens * n * heads  # logit scaling
    f += SOFTMAX_PER_ELEM * tokens * n * heads
    f += matmul_flops(tokens, d, hidden) + GELU_PER_ELEM * tokens * hidden
    f += tokens * hidden  # b1
    f += matmul_flops(tokens, hidden, d) + tokens * d  # w2, b2
    f += 2 * tokens * d  # residual adds
    return f


def _head_flops(d, num_classes):
    return matmul_flops(1, d, num_classes) + num_classes + SOFTMAX_PER_ELEM * num_classes


def _padded(extent, window):
    return extent + ((-extent) % window)


def flops_estimate(config):
    """Per-layer and total FLOPs for one clip through the configured model."""
    rows = []
    t = config.seq_len
    if config.pipeline == PIPELINE_DROWSY:
        h1 = _conv_out(config.height, 3, 2)
        w1 = _conv_out(config.width, 3, 2)
        h2 = _conv_out(h1, 3, 2)
        w2 = _conv_out(w1, 3, 2)
        conv = matmul_flops(h1 * w1, 3 * 3 * 3, 16) + h1 * w1 * 16 * (1 + RELU_PER_ELEM)
        conv += matmul_flops(h2 * w2, 3 * 3 * 16, 32) + h2 * w2 * 32 * (1 + RELU_PER_ELEM)
        conv += h2 * w2 * 32 + 32  # global average pool
        conv += matmul_flops(1, 32, FRAME_FEATURE_DIM) + FRAME_FEATURE_DIM
        rows.append(("cnn", t * conv))
        rows.append(("embed", matmul_flops(t, FRAME_FEATURE_DIM, config.d_model) + t * config.d_model))
        blk = _attention_block_flops(t, config.d_model, config.heads, config.mlp_hidden, t)
        for i in range(config.depth):
            rows.append((f"block{i}", blk))
        rows.append(("pool", t * config.d_model))
        rows.append(("head", _head_flops(config.d_model, config.num_classes)))
        return FlopsReport(rows)

    pt, ph, pw = TUBELET_PATCH
    gt, gh, gw = t // pt, config.height // ph, config.width // pw
    flat = pt * ph * pw * 3
    tokens = gt * gh * gw
    rows.append(("tubelet", matmul_flops(tokens, flat, config.d_model) + tokens * config.d_model))
    for s in range(config.stages):
        d_s = config.stage_width(s)
        hidden = max(1, int(round(d_s * config.mlp_ratio)))
        wt, wh, ww = (min(w, e) for w, e in zip(config.window, (gt, gh, gw)))
        pt_tokens = _padded(gt, wt) * _padded(gh, wh) * _padded(gw, ww)
        n_window = wt * wh * ww
        blk = _attention_block_flops(pt_tokens, d_s, config.heads, hidden, n_window)
        for i in range(config.depth):
            rows.append((f"stage{s}.block{i}", blk))
        if s < config.stages - 1:
            merged = gt * (gh // 2) * (gw // 2)
            merge = LAYERNORM_PER_ELEM * merged * 4 * d_s + matmul_flops(merged, 4 * d_s, 2 * d_s)
            rows.append((f"stage{s}.merge", merge))
            gh, gw = gh // 2, gw // 2
    d_final = config.final_width
    rows.append(("pool", gt * gh * gw * d_final))
    rows.append(("head", _head_flops(d_final, config.num_classes)))
    return FlopsReport(rows)
