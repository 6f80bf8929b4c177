"""Building blocks: stems, patch embeddings, conv bottlenecks, MLPs, attention blocks, heads.

Each block kind has three colocated pieces sharing one parameter naming scheme:
init_* (allocate parameters/buffers), *_forward (run it), and *_rows (emit
(path, macs, params) complexity rows). MACs are multiply-accumulates at batch 1;
norms, activations, softmax, pooling, and bias adds count zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .attention import AttentionParams, RelPosBiasTable, mhsa_forward
from .tensor import ParamStore, ShapeError, Tensor


@dataclass(frozen=True)
class EmbedSpec:
    """A convolutional downsampling/embedding layer (kernel == stride for patches)."""

    kernel: int
    stride: int
    out_channels: int
    padding: int = 0
    norm_after: bool = False


@dataclass(frozen=True)
class BlockSpec:
    """One residual block. kind is 'bottleneck', 'mlp', or 'attention'.

    hidden is the reference expansion width (for use_3x3 MLPs the actual conv
    width is recomputed so MACs never exceed the plain two-layer MLP).
    attention blocks set heads/head_dim/attn_inner; stride/in_channels exist
    for post-norm bottlenecks whose residual changes shape.
    """

    kind: str
    channels: int
    hidden: int = 0
    groups: int = 1
    use_3x3: bool = False
    heads: int = 0
    head_dim: int = 0
    attn_inner: int = 0
    stride: int = 1
    in_channels: int = 0


def conv_mlp_hidden(channels: int, hidden: int, groups: int = 1) -> int:
    """Widest 1x1 -> 3x3(grouped) -> 1x1 stack not exceeding the plain MLP's MACs.

    Largest multiple m of groups with 2*C*m + 9*m^2/groups <= 2*C*hidden.
    """
    budget = 2 * channels * hidden
    a = 9.0 / groups
    b = 2.0 * channels
    m = int((-b + math.sqrt(b * b + 4 * a * budget)) / (2 * a))
    m -= m % groups
    while m > 0 and 2 * channels * m + 9 * m * m // groups > budget:
        m -= groups
    while 2 * channels * (m + groups) + 9 * (m + groups) ** 2 // groups <= budget:
        m += groups
    return m


# ---------------------------------------------------------------------------
# parameter initialization primitives


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every entry lies within 2 std."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def _he_fan_out(rng, cout, cin_per_group, k, groups):
    fan_out = (cout // groups) * k * k
    return rng.normal(0.0, math.sqrt(2.0 / fan_out), size=(cout, cin_per_group, k, k))


def init_conv(store: ParamStore, rng, prefix: str, cin: int, cout: int, k: int,
              *, groups: int = 1, bias: bool = True, dtype=np.float32):
    """1x1 kernels draw truncated normals (they act as linears); larger kernels He fan-out."""
    if k == 1:
        w = trunc_normal(rng, (cout, cin // groups, 1, 1))
    else:
        w = _he_fan_out(rng, cout, cin // groups, k, groups)
    store.add(prefix + ".w", Tensor(w.astype(dtype)))
    if bias:
        store.add(prefix + ".b", Tensor(np.zeros(cout, dtype=dtype)))


def init_linear(store: ParamStore, rng, prefix: str, din: int, dout: int,
                *, bias: bool = True, dtype=np.float32):
    store.add(prefix + ".w", Tensor(trunc_normal(rng, (dout, din)).astype(dtype)))
    if bias:
        store.add(prefix + ".b", Tensor(np.zeros(dout, dtype=dtype)))


def init_norm(store: ParamStore, buffers: dict, prefix: str, c: int, kind: str,
              dtype=np.float32):
    store.add(prefix + ".gamma", Tensor(np.ones(c, dtype=dtype)))
    store.add(prefix + ".beta", Tensor(np.zeros(c, dtype=dtype)))
    if kind == "batch":
        buffers[prefix + ".mean"] = np.zeros(c, dtype=dtype)
        buffers[prefix + ".var"] = np.ones(c, dtype=dtype)


def norm_forward(x: Tensor, params: ParamStore, buffers: dict, prefix: str,
                 kind: str, training: bool) -> Tensor:
    gamma, beta = params[prefix + ".gamma"], params[prefix + ".beta"]
    if kind == "layer":
        return tz.layer_norm(x, gamma, beta)
    if kind == "batch":
        return tz.batch_norm(x, gamma, beta, buffers[prefix + ".mean"],
                             buffers[prefix + ".var"], training=training)
    raise ValueError(f"unknown norm kind '{kind}'")


def _conv(x, params, prefix, *, stride=1, padding=0, groups=1):
    b = params[prefix + ".b"] if (prefix + ".b") in params else None
    return tz.conv2d(x, params[prefix + ".w"], b, stride=stride, padding=padding, groups=groups)


def _conv_rows(prefix, cin, cout, k, out_hw, *, groups=1, bias=True):
    macs = cout * (cin // groups) * k * k * out_hw
    params = cout * (cin // groups) * k * k + (cout if bias else 0)
    return [(prefix, macs, params)]


def _norm_rows(prefix, c):
    return [(prefix, 0, 2 * c)]


# ---------------------------------------------------------------------------
# stem / patch embedding


def init_stem(store, buffers, rng, spec: EmbedSpec, cin: int, prefix: str, dtype):
    init_conv(store, rng, prefix + ".conv", cin, spec.out_channels, spec.kernel,
              bias=not spec.norm_after, dtype=dtype)
    if spec.norm_after:
        init_norm(store, buffers, prefix + ".norm", spec.out_channels, "batch", dtype)


def stem_forward(x: Tensor, spec: EmbedSpec, params, buffers, prefix: str,
                 training: bool) -> Tensor:
    with tz.layer_scope(prefix):
        out = _conv(x, params, prefix + ".conv", stride=spec.stride, padding=spec.padding)
        if spec.norm_after:
            out = norm_forward(out, params, buffers, prefix + ".norm", "batch", training)
        return tz.relu(out)


def stem_rows(spec: EmbedSpec, cin: int, hw_out: int, prefix: str):
    rows = _conv_rows(prefix + ".conv", cin, spec.out_channels, spec.kernel, hw_out,
                      bias=not spec.norm_after)
    if spec.norm_after:
        rows += _norm_rows(prefix + ".norm", spec.out_channels)
    return rows


def init_patch_embed(store, buffers, rng, spec: EmbedSpec, cin: int, prefix: str, dtype):
    init_conv(store, rng, prefix + ".conv", cin, spec.out_channels, spec.kernel,
              bias=not spec.norm_after, dtype=dtype)
    if spec.norm_after:
        init_norm(store, buffers, prefix + ".norm", spec.out_channels, "batch", dtype)


def patch_embed_forward(x: Tensor, spec: EmbedSpec, params, buffers, prefix: str,
                        training: bool) -> Tensor:
    if spec.kernel != spec.stride or spec.padding:
        raise ShapeError(f"patch embedding at '{prefix}' must have kernel == stride and no padding")
    h, w = x.dims[2], x.dims[3]
    if h % spec.stride or w % spec.stride:
        raise ShapeError(f"resolution {h}x{w} not divisible by patch stride {spec.stride} at '{prefix}'")
    with tz.layer_scope(prefix):
        out = _conv(x, params, prefix + ".conv", stride=spec.stride)
        if spec.norm_after:
            out = norm_forward(out, params, buffers, prefix + ".norm", "batch", training)
        return out


def patch_embed_rows(spec: EmbedSpec, cin: int, hw_out: int, prefix: str):
    rows = _conv_rows(prefix + ".conv", cin, spec.out_channels, spec.kernel, hw_out,
                      bias=not spec.norm_after)
    if spec.norm_after:
        rows += _norm_rows(prefix + ".norm", spec.out_channels)
    return rows


# ---------------------------------------------------------------------------
# conv bottleneck (pre-norm residual form and post-norm downsampling form)


def init_bottleneck(store, buffers, rng, spec: BlockSpec, norm: str, prefix: str,
                    style: str, dtype):
    c, h, g = spec.channels, spec.hidden, spec.groups
    if h % g:
        raise ShapeError(f"bottleneck hidden width {h} not divisible by groups {g}")
    if style == "pre_norm":
        init_norm(store, buffers, prefix + ".norm", c, norm, dtype)
        init_conv(store, rng, prefix + ".conv1", c, h, 1, dtype=dtype)
        init_conv(store, rng, prefix + ".conv2", h, h, 3, groups=g, dtype=dtype)
        init_conv(store, rng, prefix + ".conv3", h, c, 1, dtype=dtype)
        return
    cin = spec.in_channels or c
    init_conv(store, rng, prefix + ".conv1", cin, h, 1, bias=False, dtype=dtype)
    init_norm(store, buffers, prefix + ".norm1", h, norm, dtype)
    init_conv(store, rng, prefix + ".conv2", h, h, 3, groups=g, bias=False, dtype=dtype)
    init_norm(store, buffers, prefix + ".norm2", h, norm, dtype)
    init_conv(store, rng, prefix + ".conv3", h, c, 1, bias=False, dtype=dtype)
    init_norm(store, buffers, prefix + ".norm3", c, norm, dtype)
    if cin != c or spec.stride != 1:
        init_conv(store, rng, prefix + ".proj", cin, c, 1, bias=False, dtype=dtype)
        init_norm(store, buffers, prefix + ".proj_norm", c, norm, dtype)


def bottleneck_forward(x: Tensor, spec: BlockSpec, params, buffers, prefix: str,
                       norm: str, style: str, training: bool) -> Tensor:
    with tz.layer_scope(prefix):
        if style == "pre_norm":
            h = norm_forward(x, params, buffers, prefix + ".norm", norm, training)
            h = tz.relu(_conv(h, params, prefix + ".conv1"))
            h = tz.relu(_conv(h, params, prefix + ".conv2", padding=1, groups=spec.groups))
            h = _conv(h, params, prefix + ".conv3")
            return tz.add_residual(x, h)
        s = spec.stride
        h = _conv(x, params, prefix + ".conv1")
        h = tz.relu(norm_forward(h, params, buffers, prefix + ".norm1", norm, training))
        h = _conv(h, params, prefix + ".conv2", stride=s, padding=1, groups=spec.groups)
        h = tz.relu(norm_forward(h, params, buffers, prefix + ".norm2", norm, training))
        h = _conv(h, params, prefix + ".conv3")
        h = norm_forward(h, params, buffers, prefix + ".norm3", norm, training)
        if (prefix + ".proj.w") in params:
            sc = _conv(x, params, prefix + ".proj", stride=s)
            sc = norm_forward(sc, params, buffers, prefix + ".proj_norm", norm, training)
        else:
            sc = x
        return tz.relu(tz.add_residual(sc, h))


def bottleneck_rows(spec: BlockSpec, hw: int, prefix: str, style: str):
    c, h, g = spec.channels, spec.hidden, spec.groups
    if style == "pre_norm":
        return (_norm_rows(prefix + ".norm", c)
                + _conv_rows(prefix + ".conv1", c, h, 1, hw)
                + _conv_rows(prefix + ".conv2", h, h, 3, hw, groups=g)
                + _conv_rows(prefix + ".conv3", h, c, 1, hw))
    cin = spec.in_channels or c
    hw_out = hw // (spec.stride * spec.stride)
    rows = (_conv_rows(prefix + ".conv1", cin, h, 1, hw, bias=False)
            + _norm_rows(prefix + ".norm1", h)
            + _conv_rows(prefix + ".conv2", h, h, 3, hw_out, groups=g, bias=False)
            + _norm_rows(prefix + ".norm2", h)
            + _conv_rows(prefix + ".conv3", h, c, 1, hw_out, bias=False)
            + _norm_rows(prefix + ".norm3", c))
    if cin != c or spec.stride != 1:
        rows += _conv_rows(prefix + ".proj", cin, c, 1, hw_out, bias=False)
        rows += _norm_rows(prefix + ".proj_norm", c)
    return rows


# ---------------------------------------------------------------------------
# MLP branch (shared by standalone mlp blocks and attention blocks)


def _init_mlp_branch(store, buffers, rng, spec: BlockSpec, prefix: str, dtype):
    c = spec.channels
    if spec.use_3x3:
        m = conv_mlp_hidden(c, spec.hidden, spec.groups)
        init_conv(store, rng, prefix + ".fc1", c, m, 1, dtype=dtype)
        init_conv(store, rng, prefix + ".conv", m, m, 3, groups=spec.groups, dtype=dtype)
        init_conv(store, rng, prefix + ".fc2", m, c, 1, dtype=dtype)
    else:
        init_conv(store, rng, prefix + ".fc1", c, spec.hidden, 1, dtype=dtype)
        init_conv(store, rng, prefix + ".fc2", spec.hidden, c, 1, dtype=dtype)


def _mlp_branch_forward(x, spec: BlockSpec, params, prefix):
    h = tz.gelu(_conv(x, params, prefix + ".fc1"))
    if spec.use_3x3:
        h = tz.gelu(_conv(h, params, prefix + ".conv", padding=1, groups=spec.groups))
    return _conv(h, params, prefix + ".fc2")


def _mlp_branch_rows(spec: BlockSpec, hw: int, prefix: str):
    c = spec.channels
    if spec.use_3x3:
        m = conv_mlp_hidden(c, spec.hidden, spec.groups)
        return (_conv_rows(prefix + ".fc1", c, m, 1, hw)
                + _conv_rows(prefix + ".conv", m, m, 3, hw, groups=spec.groups)
                + _conv_rows(prefix + ".fc2", m, c, 1, hw))
    return (_conv_rows(prefix + ".fc1", c, spec.hidden, 1, hw)
            + _conv_rows(prefix + ".fc2", spec.hidden, c, 1, hw))


def init_mlp(store, buffers, rng, spec: BlockSpec, norm: str, prefix: str, dtype):
    init_norm(store, buffers, prefix + ".norm", spec.channels, norm, dtype)
    _init_mlp_branch(store, buffers, rng, spec, prefix, dtype)


def mlp_forward(x: Tensor, spec: BlockSpec, params, buffers, prefix: str,
                norm: str, training: bool) -> Tensor:
    with tz.layer_scope(prefix):
        h = norm_forward(x, params, buffers, prefix + ".norm", norm, training)
        return tz.add_residual(x, _mlp_branch_forward(h, spec, params, prefix))


def mlp_rows(spec: BlockSpec, hw: int, prefix: str):
    return _norm_rows(prefix + ".norm", spec.channels) + _mlp_branch_rows(spec, hw, prefix)


# ---------------------------------------------------------------------------
# attention block (pre-norm attention + pre-norm MLP, both residual)


def init_attention_block(store, buffers, rng, spec: BlockSpec, norm: str, prefix: str,
                         rel_pos: bool, window: tuple[int, int] | None, dtype):
    c, inner = spec.channels, spec.attn_inner
    if inner != spec.heads * spec.head_dim:
        raise ShapeError(f"attn_inner {inner} != heads*head_dim {spec.heads * spec.head_dim}")
    init_norm(store, buffers, prefix + ".norm1", c, norm, dtype)
    init_linear(store, rng, prefix + ".attn.qkv", c, 3 * inner, dtype=dtype)
    init_linear(store, rng, prefix + ".attn.proj", inner, c, dtype=dtype)
    if rel_pos:
        h, w = window
        rows = (2 * h - 1) * (2 * w - 1)
        store.add(prefix + ".attn.relpos",
                  Tensor(trunc_normal(rng, (rows, spec.heads)).astype(dtype)))
    init_norm(store, buffers, prefix + ".norm2", c, norm, dtype)
    _init_mlp_branch(store, buffers, rng, spec, prefix + ".mlp", dtype)


def attention_block_forward(x: Tensor, spec: BlockSpec, params, buffers, prefix: str,
                            norm: str, training: bool, score_mode: str = "standard") -> Tensor:
    with tz.layer_scope(prefix):
        ap = AttentionParams(
            w_qkv=params[prefix + ".attn.qkv.w"], b_qkv=params[prefix + ".attn.qkv.b"],
            w_proj=params[prefix + ".attn.proj.w"], b_proj=params[prefix + ".attn.proj.b"],
            heads=spec.heads, head_dim=spec.head_dim)
        bias = None
        if (prefix + ".attn.relpos") in params:
            table = RelPosBiasTable(params[prefix + ".attn.relpos"], x.dims[2], x.dims[3])
            bias = table.bias()
        h = norm_forward(x, params, buffers, prefix + ".norm1", norm, training)
        x = tz.add_residual(x, mhsa_forward(h, ap, mode=score_mode, bias=bias))
        h = norm_forward(x, params, buffers, prefix + ".norm2", norm, training)
        return tz.add_residual(x, _mlp_branch_forward(h, spec, params, prefix + ".mlp"))


def attention_block_rows(spec: BlockSpec, tokens: int, prefix: str,
                         rel_pos: bool = False, window: tuple[int, int] | None = None):
    """Complexity rows; scores/apply each cost tokens^2 * attn_inner MACs."""
    c, inner = spec.channels, spec.attn_inner
    rows = _norm_rows(prefix + ".norm1", c)
    rows.append((prefix + ".attn.qkv", tokens * c * 3 * inner, 3 * inner * c + 3 * inner))
    rows.append((prefix + ".attn.scores", tokens * tokens * inner, 0))
    rows.append((prefix + ".attn.apply", tokens * tokens * inner, 0))
    rows.append((prefix + ".attn.proj", tokens * inner * c, c * inner + c))
    if rel_pos:
        h, w = window
        rows.append((prefix + ".attn.relpos", 0, (2 * h - 1) * (2 * w - 1) * spec.heads))
    rows += _norm_rows(prefix + ".norm2", c)
    rows += _mlp_branch_rows(spec, tokens, prefix + ".mlp")
    return rows


# ---------------------------------------------------------------------------
# classification head


def init_head(store, rng, cin: int, classes: int, prefix: str, dtype):
    init_linear(store, rng, prefix + ".fc", cin, classes, dtype=dtype)


def head_forward(x: Tensor, mode: str, params, prefix: str) -> Tensor:
    with tz.layer_scope(prefix):
        if mode == "gap":
            feat = tz.global_avg_pool(x)
        elif mode == "cls_token":
            tok = tz.narrow(x, 2, 0, 1)
            feat = tz.reshape(tok, (x.dims[0], x.dims[1]))
        else:
            raise ValueError(f"unknown head mode '{mode}'")
        return tz.linear(feat, params[prefix + ".fc.w"], params[prefix + ".fc.b"])


def head_rows(cin: int, classes: int, prefix: str):
    return [(prefix + ".fc", cin * classes, cin * classes + classes)]
