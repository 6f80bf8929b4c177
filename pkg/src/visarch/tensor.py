"""NCHW tensor core: float32/float64 storage, reverse-mode autodiff, layer ops.

Every op checks its forward output for NaN/Inf and raises NonFiniteError naming
the innermost layer_scope, so a blow-up points at a layer instead of a loss=nan.
Gradients accumulate into leaf .grad across backward() calls until cleared.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NonFiniteError(ArithmeticError):
    pass


_SCOPE: list[str] = []
_GRAD_ENABLED = [True]


@contextmanager
def layer_scope(name: str):
    """Push a name onto the diagnostic scope stack for NonFiniteError messages."""
    _SCOPE.append(name)
    try:
        yield
    finally:
        _SCOPE.pop()


def current_scope() -> str:
    return ".".join(_SCOPE) or "<top>"


@contextmanager
def no_grad():
    """Disable graph recording (pure inference paths)."""
    old = _GRAD_ENABLED[0]
    _GRAD_ENABLED[0] = False
    try:
        yield
    finally:
        _GRAD_ENABLED[0] = old


class Tensor:
    """A rank<=4 float array plus an optional grad and autodiff bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the rank-4 limit")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


def _check_finite(arr, op: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced a non-finite value at '{current_scope()}'")


def _result(op, data, parents, backward_fn):
    _check_finite(data, op)
    out = Tensor(data)
    if _GRAD_ENABLED[0] and any(p.requires_grad or p._backward is not None for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(x: Tensor, y: Tensor) -> Tensor:
    data = x.data + y.data
    if data.ndim > 4:
        raise ShapeError("add result exceeds rank 4")

    def bwd(dout):
        return _unbroadcast(dout, x.data.shape), _unbroadcast(dout, y.data.shape)

    return _result("add", data, (x, y), bwd)


def add_residual(x: Tensor, y: Tensor) -> Tensor:
    if x.data.shape != y.data.shape:
        raise ShapeError(f"residual add needs equal shapes, got {x.data.shape} vs {y.data.shape}")
    return add(x, y)


def sub(x: Tensor, y: Tensor) -> Tensor:
    data = x.data - y.data

    def bwd(dout):
        return _unbroadcast(dout, x.data.shape), _unbroadcast(-dout, y.data.shape)

    return _result("sub", data, (x, y), bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    data = x.data * y.data

    def bwd(dout):
        return (_unbroadcast(dout * y.data, x.data.shape),
                _unbroadcast(dout * x.data, y.data.shape))

    return _result("mul", data, (x, y), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(dout):
        return (dout * c,)

    return _result("scale", x.data * c, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(dout):
        return (dout * mask,)

    return _result("relu", np.where(mask, x.data, 0), (x,), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation gelu: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    t = np.tanh(u)

    def bwd(dout):
        du = _GELU_C * (1.0 + 3 * 0.044715 * xd ** 2)
        return (dout * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * du),)

    return _result("gelu", 0.5 * xd * (1.0 + t), (x,), bwd)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation '{kind}'")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ShapeError("reshape target exceeds rank 4")
    old = x.data.shape

    def bwd(dout):
        return (dout.reshape(old),)

    return _result("reshape", x.data.reshape(shape), (x,), bwd)


def transpose(x: Tensor, perm) -> Tensor:
    perm = tuple(perm)
    inv = tuple(np.argsort(perm))

    def bwd(dout):
        return (dout.transpose(inv),)

    return _result("transpose", x.data.transpose(perm), (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(dout):
        return tuple(np.split(dout, splits, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or length < 0 or start + length > x.data.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range on axis {axis}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def bwd(dout):
        dx = np.zeros_like(x.data)
        dx[idx] = dout
        return (dx,)

    return _result("narrow", x.data[idx].copy(), (x,), bwd)


def batch_tile(x: Tensor, n: int) -> Tensor:
    """Tile a parameter over a new leading batch axis of size n."""
    if x.data.ndim >= 4:
        raise ShapeError("batch_tile input must have rank <= 3")

    def bwd(dout):
        return (dout.sum(axis=0),)

    return _result("batch_tile", np.broadcast_to(x.data, (n,) + x.data.shape).copy(), (x,), bwd)


def gather_rows(table: Tensor, index) -> Tensor:
    """out[i, j] = table[index[i, j]] for a 2-d integer index map."""
    index = np.asarray(index)
    if table.data.ndim != 2 or index.ndim != 2:
        raise ShapeError("gather_rows expects a 2-d table and a 2-d index map")

    def bwd(dout):
        dt = np.zeros_like(table.data)
        np.add.at(dt, index, dout)
        return (dt,)

    return _result("gather_rows", table.data[index], (table,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim != bd.ndim or ad.ndim < 2:
        raise ShapeError(f"matmul rank mismatch: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or ad.shape[:-2] != bd.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")

    def bwd(dout):
        return (dout @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ dout)

    return _result("matmul", ad @ bd, (a, b), bwd)


def reduce_max(x: Tensor, axis: int = -1) -> Tensor:
    """Max over one axis, keepdims. Gradient splits equally among ties."""
    m = x.data.max(axis=axis, keepdims=True)
    mask = (x.data == m)

    def bwd(dout):
        counts = mask.sum(axis=axis, keepdims=True)
        return (dout * mask / counts,)

    return _result("reduce_max", m, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    def bwd(dout):
        return (np.broadcast_to(dout, x.data.shape).copy(),)

    return _result("sum_all", np.asarray(x.data.sum()), (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# layer ops


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b); x has rank 2 or 3 with features on the last axis."""
    xd, wd = x.data, w.data
    if xd.ndim not in (2, 3) or wd.ndim != 2:
        raise ShapeError(f"linear expects rank-2/3 input and rank-2 weight, got {xd.shape}, {wd.shape}")
    if xd.shape[-1] != wd.shape[1]:
        raise ShapeError(f"linear feature mismatch: input {xd.shape[-1]} vs weight {wd.shape}")
    data = xd @ wd.T
    if b is not None:
        data = data + b.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(dout):
        dflat = dout.reshape(-1, wd.shape[0])
        dx = (dout @ wd) if (x.requires_grad or x._backward) else None
        dw = dflat.T @ xd.reshape(-1, wd.shape[1])
        if b is None:
            return dx, dw
        return dx, dw, dflat.sum(axis=0)

    return _result("linear", data, parents, bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-d convolution on NCHW via im2col."""
    xd, wd = x.data, w.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and weight, got {xd.shape}, {wd.shape}")
    N, Cin, H, W = xd.shape
    Cout, Cpg, kh, kw = wd.shape
    if Cin % groups or Cout % groups:
        raise ShapeError(f"channels ({Cin} in, {Cout} out) not divisible by groups={groups}")
    if Cpg != Cin // groups:
        raise ShapeError(f"weight expects {Cpg * groups} input channels, got {Cin} (groups={groups})")
    s, p = int(stride), int(padding)
    if H + 2 * p < kh or W + 2 * p < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * p}x{W + 2 * p}")
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    opg = Cout // groups
    out = np.empty((N, Cout, Ho, Wo), dtype=xd.dtype)
    cols = []
    for g in range(groups):
        colg = np.ascontiguousarray(
            win[:, g * Cpg:(g + 1) * Cpg].transpose(0, 2, 3, 1, 4, 5)).reshape(N * Ho * Wo, -1)
        cols.append(colg)
        wg = wd[g * opg:(g + 1) * opg].reshape(opg, -1)
        out[:, g * opg:(g + 1) * opg] = (colg @ wg.T).reshape(N, Ho, Wo, opg).transpose(0, 3, 1, 2)
    if b is not None:
        out += b.data.reshape(1, Cout, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def bwd(dout):
        dflat = dout.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, Cout)
        dw = np.empty_like(wd)
        for g in range(groups):
            dg = dflat[:, g * opg:(g + 1) * opg]
            dw[g * opg:(g + 1) * opg] = (dg.T @ cols[g]).reshape(opg, Cpg, kh, kw)
        dx = None
        if x.requires_grad or x._backward is not None:
            dxp = np.zeros((N, Cin, H + 2 * p, W + 2 * p), dtype=xd.dtype)
            for g in range(groups):
                wg = wd[g * opg:(g + 1) * opg].reshape(opg, -1)
                dcol = (dflat[:, g * opg:(g + 1) * opg] @ wg).reshape(N, Ho, Wo, Cpg, kh, kw)
                tgt = dxp[:, g * Cpg:(g + 1) * Cpg]
                for i in range(kh):
                    for j in range(kw):
                        tgt[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + H, p:p + W] if p else dxp
        if b is None:
            return dx, dw
        return dx, dw, dout.sum(axis=(0, 2, 3))

    return _result("conv2d", out, parents, bwd)


def max_pool2d(x: Tensor, *, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"max_pool2d expects rank-4 input, got {xd.shape}")
    N, C, H, W = xd.shape
    k, s, p = int(kernel), int(stride), int(padding)
    if p >= k:
        raise ShapeError("max_pool2d padding must be smaller than the kernel")
    Ho = (H + 2 * p - k) // s + 1
    Wo = (W + 2 * p - k) // s + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = win.reshape(N, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bwd(dout):
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p), dtype=xd.dtype)
        n, c, oy, ox = np.indices(arg.shape)
        np.add.at(dxp, (n, c, oy * s + arg // k, ox * s + arg % k), dout)
        return (dxp[:, :, p:p + H, p:p + W] if p else dxp,)

    return _result("max_pool2d", np.ascontiguousarray(out), (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank-4 input, got {xd.shape}")
    N, C, H, W = xd.shape

    def bwd(dout):
        return (np.broadcast_to(dout[:, :, None, None] / (H * W), xd.shape).copy(),)

    return _result("global_avg_pool", xd.mean(axis=(2, 3)), (x,), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(dout):
        return (y * (dout - (dout * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (x,), bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis (axis 1) of an NCHW map."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"layer_norm expects rank-4 input, got {xd.shape}")
    C = xd.shape[1]
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"layer_norm affine shape must be ({C},)")
    mean = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * istd
    g = gamma.data.reshape(1, C, 1, 1)

    def bwd(dout):
        dxh = dout * g
        dx = istd * (dxh - dxh.mean(axis=1, keepdims=True)
                     - xhat * (dxh * xhat).mean(axis=1, keepdims=True))
        return dx, (dout * xhat).sum(axis=(0, 2, 3)), dout.sum(axis=(0, 2, 3))

    return _result("layer_norm", xhat * g + beta.data.reshape(1, C, 1, 1), (x, gamma, beta), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var, *,
               training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """BatchNorm over (N, H, W) per channel; running buffers are plain arrays
    updated in place during training (unbiased variance in the running estimate)."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm expects rank-4 input, got {xd.shape}")
    N, C, H, W = xd.shape
    if gamma.data.shape != (C,) or beta.data.shape != (C,):
        raise ShapeError(f"batch_norm affine shape must be ({C},)")
    g = gamma.data.reshape(1, C, 1, 1)
    bt = beta.data.reshape(1, C, 1, 1)
    if training:
        n = N * H * W
        if n < 2:
            raise ShapeError("batch_norm in training mode needs more than one value per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean[:] = (1 - momentum) * running_mean + momentum * mean
        running_var[:] = (1 - momentum) * running_var + momentum * var * (n / (n - 1))
        istd = 1.0 / np.sqrt(var + eps).reshape(1, C, 1, 1)
        xhat = (xd - mean.reshape(1, C, 1, 1)) * istd

        def bwd(dout):
            dxh = dout * g
            dx = istd * (dxh - dxh.mean(axis=(0, 2, 3), keepdims=True)
                         - xhat * (dxh * xhat).mean(axis=(0, 2, 3), keepdims=True))
            return dx, (dout * xhat).sum(axis=(0, 2, 3)), dout.sum(axis=(0, 2, 3))
    else:
        istd = 1.0 / np.sqrt(running_var + eps).reshape(1, C, 1, 1)
        xhat = (xd - running_mean.reshape(1, C, 1, 1)) * istd

        def bwd(dout):
            dxh = dout * g
            return dxh * istd, (dout * xhat).sum(axis=(0, 2, 3)), dout.sum(axis=(0, 2, 3))

    return _result("batch_norm", xhat * g + bt, (x, gamma, beta), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels is an integer array of shape (N,)."""
    ld = logits.data
    labels = np.asarray(labels)
    if ld.ndim != 2 or labels.shape != (ld.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, K) logits and (N,) labels, got {ld.shape}, {labels.shape}")
    N = ld.shape[0]
    m = ld.max(axis=1, keepdims=True)
    z = ld - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True)) + m
    loss = (lse[:, 0] - ld[np.arange(N), labels]).mean()

    def bwd(dout):
        probs = np.exp(ld - lse)
        probs[np.arange(N), labels] -= 1.0
        return (probs * (dout / N),)

    return _result("cross_entropy", np.asarray(loss), (logits,), bwd)


# ---------------------------------------------------------------------------
# autodiff driver


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss; accumulates into leaf .grad."""
    if loss.data.shape not in ((), (1,)):
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named trainable tensors with deterministic lexicographic iteration."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, path: str, tensor: Tensor) -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path '{path}'")
        tensor.requires_grad = True
        self._params[path] = tensor
        return tensor

    def __getitem__(self, path: str) -> Tensor:
        try:
            return self._params[path]
        except KeyError:
            raise KeyError(f"no parameter at path '{path}'") from None

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __len__(self) -> int:
        return len(self._params)

    def paths(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for path in sorted(self._params):
            yield path, self._params[path]

    def total_elements(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None


def finite_diff_grad(f, store: ParamStore, path: str, index: int, h: float = 1e-3) -> float:
    """Central-difference d f / d store[path].flat[index]; restores the value."""
    def evaluate():
        out = f()
        return float(out.data) if isinstance(out, Tensor) else float(out)

    flat = store[path].data.reshape(-1)
    old = flat[index].item()
    try:
        flat[index] = old + h
        fp = evaluate()
        flat[index] = old - h
        fm = evaluate()
    finally:
        flat[index] = old
    return (fp - fm) / (2.0 * h)
