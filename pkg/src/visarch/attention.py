"""Multi-head self-attention on NCHW maps, with selectable score scaling.

Token sequences reuse the same code path as spatial maps by shaping them as
(N, C, T, 1). Score modes exist to control the dynamic range of the logits:

- standard: (q . k) / sqrt(d)
- prenorm:  (q / d^0.25) . (k / d^0.25), same logits with bounded partials
- fullnorm: (q / sqrt(d)) . (k / sqrt(d)), equals standard scaled by 1/sqrt(d)
- pb_relax: q pre-scaled by 1/(alpha*sqrt(d)), row max subtracted after the
  dot product, then multiplied back by alpha; shift-invariant under softmax
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .tensor import ShapeError, Tensor

SCORE_MODES = ("standard", "prenorm", "fullnorm", "pb_relax")
DEFAULT_PB_RELAX_ALPHA = 32.0


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    w_qkv stacks the query/key/value projections row-wise: (3*inner, C) where
    inner = heads * head_dim. inner == C in the main presets; the halved
    attention stages use inner == C // 2.
    """

    w_qkv: Tensor
    b_qkv: Tensor
    w_proj: Tensor
    b_proj: Tensor
    heads: int
    head_dim: int

    def __post_init__(self):
        inner = self.heads * self.head_dim
        c = self.w_qkv.dims[1]
        if self.heads < 1 or self.head_dim < 1:
            raise ShapeError("heads and head_dim must be positive")
        if self.w_qkv.dims != (3 * inner, c):
            raise ShapeError(f"w_qkv must be (3*{inner}, {c}), got {self.w_qkv.dims}")
        if self.b_qkv.dims != (3 * inner,):
            raise ShapeError(f"b_qkv must be ({3 * inner},), got {self.b_qkv.dims}")
        if self.w_proj.dims != (c, inner):
            raise ShapeError(f"w_proj must be ({c}, {inner}), got {self.w_proj.dims}")
        if self.b_proj.dims != (c,):
            raise ShapeError(f"b_proj must be ({c},), got {self.b_proj.dims}")

    @property
    def channels(self) -> int:
        return self.w_qkv.dims[1]

    @property
    def inner(self) -> int:
        return self.heads * self.head_dim


def attention_logits(q: Tensor, k: Tensor, mode: str = "standard",
                     alpha: float = DEFAULT_PB_RELAX_ALPHA) -> Tensor:
    """Scaled scores for (N, heads, T, d) queries/keys; returns (N, heads, T, T)."""
    if q.dims != k.dims or len(q.dims) != 4:
        raise ShapeError(f"queries/keys must share a (N, heads, T, d) shape, got {q.dims} vs {k.dims}")
    d = q.dims[-1]
    kt = tz.transpose(k, (0, 1, 3, 2))
    if mode == "standard":
        return tz.scale(tz.matmul(q, kt), 1.0 / np.sqrt(d))
    if mode == "prenorm":
        s = d ** -0.25
        return tz.matmul(tz.scale(q, s), tz.scale(kt, s))
    if mode == "fullnorm":
        s = d ** -0.5
        return tz.matmul(tz.scale(q, s), tz.scale(kt, s))
    if mode == "pb_relax":
        p = tz.matmul(tz.scale(q, 1.0 / (alpha * np.sqrt(d))), kt)
        return tz.scale(tz.sub(p, tz.reduce_max(p, axis=-1)), alpha)
    raise ValueError(f"unknown score mode '{mode}'")


def rel_pos_index(height: int, width: int) -> np.ndarray:
    """(T, T) map from token pairs to rows of a (2H-1)(2W-1) offset table."""
    ys, xs = np.divmod(np.arange(height * width), width)
    dy = ys[:, None] - ys[None, :] + height - 1
    dx = xs[:, None] - xs[None, :] + width - 1
    return dy * (2 * width - 1) + dx


@dataclass
class RelPosBiasTable:
    """Learned bias per relative (dy, dx) offset and head, for one window size."""

    table: Tensor
    height: int
    width: int

    def __post_init__(self):
        rows = (2 * self.height - 1) * (2 * self.width - 1)
        if len(self.table.dims) != 2 or self.table.dims[0] != rows:
            raise ShapeError(f"bias table must have {rows} rows, got {self.table.dims}")

    @property
    def heads(self) -> int:
        return self.table.dims[1]

    def bias(self) -> Tensor:
        """(heads, T, T) additive logit bias."""
        rows = tz.gather_rows(self.table, rel_pos_index(self.height, self.width))
        return tz.transpose(rows, (2, 0, 1))


def add_position_map(x: Tensor, e: Tensor) -> Tensor:
    """Add a learned (C, H, W) map to every sample of an (N, C, H, W) batch."""
    if e.dims != x.dims[1:]:
        raise ShapeError(f"position map {e.dims} does not match feature shape {x.dims[1:]}")
    return tz.add(x, e)


def mhsa_forward(x: Tensor, p: AttentionParams, *, mode: str = "standard",
                 bias: Tensor | None = None,
                 alpha: float = DEFAULT_PB_RELAX_ALPHA) -> Tensor:
    """Self-attention over the spatial positions of an (N, C, H, W) map."""
    n, c, h, w = x.dims
    if c != p.channels:
        raise ShapeError(f"input has {c} channels, attention expects {p.channels}")
    t = h * w
    inner = p.inner
    tokens = tz.transpose(tz.reshape(x, (n, c, t)), (0, 2, 1))

    def project(part):
        wp = tz.narrow(p.w_qkv, 0, part * inner, inner)
        bp = tz.narrow(p.b_qkv, 0, part * inner, inner)
        out = tz.linear(tokens, wp, bp)
        return tz.transpose(tz.reshape(out, (n, t, p.heads, p.head_dim)), (0, 2, 1, 3))

    q, k, v = project(0), project(1), project(2)
    logits = attention_logits(q, k, mode, alpha)
    if bias is not None:
        logits = tz.add(logits, bias)
    attn = tz.softmax(logits, axis=-1)
    out = tz.matmul(attn, v)
    out = tz.reshape(tz.transpose(out, (0, 2, 1, 3)), (n, t, inner))
    out = tz.linear(out, p.w_proj, p.b_proj)
    return tz.reshape(tz.transpose(out, (0, 2, 1)), (n, c, h, w))
