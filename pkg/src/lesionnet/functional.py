"""Primitive layer kernels with hand-written backward passes.

Layout is ``[batch, channel, spatial...]``.  Convolution is cross-correlation
(no kernel flip) for rank 2 and rank 3.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor

SAME = "SAME"
VALID = "VALID"


def _tuple(v, rank: int, what: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * rank
    v = tuple(int(i) for i in v)
    if len(v) != rank:
        raise ValueError(f"{what} has {len(v)} entries, expected {rank}")
    return v


@dataclass(frozen=True)
class ConvSpec:
    rank: int
    kernel: tuple[int, ...]
    stride: tuple[int, ...]
    padding: str = SAME
    groups: int = 1
    out_channels: int | None = None

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError(f"conv rank must be 2 or 3, got {self.rank}")
        object.__setattr__(self, "kernel", _tuple(self.kernel, self.rank, "kernel"))
        object.__setattr__(self, "stride", _tuple(self.stride, self.rank, "stride"))
        pad = self.padding.upper()
        if pad not in (SAME, VALID):
            raise ValueError(f"padding must be SAME or VALID, got {self.padding!r}")
        object.__setattr__(self, "padding", pad)
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError("kernel and stride extents must be >= 1")
        if self.groups < 1:
            raise ValueError("groups must be positive")

    def output_extent(self, extent: int, dim: int) -> int:
        return conv_output_extent(extent, self.kernel[dim], self.stride[dim], self.padding)


def conv_output_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    if padding == SAME:
        return -(-extent // stride)
    if extent < kernel:
        raise ValueError(f"VALID window {kernel} exceeds input extent {extent}")
    return (extent - kernel) // stride + 1


def same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """(low, high) padding; the odd cell goes on the high side."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def _window(offset: int, stride: int, out: int) -> slice:
    return slice(offset, offset + stride * (out - 1) + 1, stride)


def conv_forward(x: Tensor, w: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """Grouped N-d cross-correlation.

    ``x`` is ``[N, C_in, *spatial]`` and ``w`` is ``[C_out, C_in/groups, *kernel]``.
    """
    x, w = as_tensor(x), as_tensor(w)
    r = spec.rank
    if x.ndim != r + 2:
        raise ValueError(f"conv rank {r} expects a {r + 2}-d input, got shape {x.shape}")
    if w.ndim != r + 2:
        raise ValueError(f"conv rank {r} expects a {r + 2}-d kernel, got shape {w.shape}")
    n, cin = x.shape[:2]
    cout, cg = w.shape[:2]
    g = spec.groups
    if cin % g:
        raise ValueError(f"groups={g} does not divide input channels (dim 1) = {cin}")
    if cg * g != cin:
        raise ValueError(f"kernel dim 1 is {cg}, expected input channels/groups = {cin // g}")
    if cout % g:
        raise ValueError(f"groups={g} does not divide output channels (kernel dim 0) = {cout}")
    if spec.out_channels is not None and spec.out_channels != cout:
        raise ValueError(f"kernel dim 0 is {cout}, spec says out_channels={spec.out_channels}")
    if tuple(w.shape[2:]) != spec.kernel:
        raise ValueError(f"kernel spatial extents {w.shape[2:]} differ from spec {spec.kernel}")
    spatial = x.shape[2:]
    for d, e in enumerate(spatial):
        if e == 0:
            raise ValueError(f"zero-size spatial dim {d + 2} in conv input")

    if spec.padding == SAME:
        pads = [same_padding(e, k, s) for e, k, s in zip(spatial, spec.kernel, spec.stride)]
    else:
        pads = [(0, 0)] * r
    out_sp = tuple(spec.output_extent(e, d) for d, e in enumerate(spatial))

    # Taps whose every window position lands in the zero padding contribute
    # nothing, so the kernel is cropped to the taps that can reach the input.
    ksl, xsl, epads = [], [], []
    for e, k, s, m, (pl, _) in zip(spatial, spec.kernel, spec.stride, out_sp, pads):
        first = max(0, pl - s * (m - 1))
        last = min(k - 1, pl + e - 1)
        start, end = first - pl, s * (m - 1) + last + 1 - pl
        ksl.append(slice(first, last + 1))
        xsl.append(slice(max(0, start), min(e, end)))
        epads.append((max(0, -start), max(0, end - e)))
    xd = x.data[(slice(None), slice(None)) + tuple(xsl)]
    if any(q != (0, 0) for q in epads):
        xd = np.pad(xd, [(0, 0), (0, 0)] + epads)
    padded_shape = xd.shape
    wfull = w.data
    wd = np.ascontiguousarray(wfull[(slice(None), slice(None)) + tuple(ksl)])
    cog = cout // g
    kernel = wd.shape[2:]
    ksize = int(np.prod(kernel))
    offsets = list(itertools.product(*(range(k) for k in kernel)))
    sp_axes = tuple(range(2, r + 2))
    bshape = (1, cout) + (1,) * r
    p = int(np.prod(out_sp))

    def window(arr, off):
        return arr[(slice(None), slice(None)) + tuple(
            _window(o, s, m) for o, s, m in zip(off, spec.stride, out_sp))]

    if ksize == 1 and g == 1:
        # pointwise: a single matmul, no im2col
        xs = window(xd, offsets[0])
        wm = wd.reshape(cout, cin)
        out = np.einsum("oc,nc...->no...", wm, xs, optimize=True)
        cols = None
    else:
        # cols: [N, C, P, K] with P output positions and K kernel taps
        view = np.lib.stride_tricks.sliding_window_view(xd, kernel, axis=sp_axes)
        view = view[(slice(None), slice(None)) + tuple(
            slice(0, s * (m - 1) + 1, s) for s, m in zip(spec.stride, out_sp))]
        cols = np.ascontiguousarray(view).reshape(n, cin, p, ksize)
        if g == 1:
            wm = wd.reshape(cout, cin * ksize)
            flat = cols.transpose(0, 2, 1, 3).reshape(n * p, cin * ksize)
            out = (flat @ wm.T).reshape((n,) + out_sp + (cout,))
            out = np.moveaxis(out, -1, 1)
        elif cg == 1 and cog == 1:
            out = np.matmul(cols, wd.reshape(cin, ksize, 1)).reshape((n, cout) + out_sp)
        else:
            colg = cols.reshape(n, g, cg, p, ksize)
            wg = wd.reshape(g, cog, cg, ksize)
            out = np.einsum("ngcpk,gdck->ngdp", colg, wg, optimize=True).reshape((n, cout) + out_sp)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(bshape)

    def scatter(taps):
        # taps: [K, N, C_in, *out] -> gradient of the padded input
        gx = np.zeros(padded_shape, dtype=taps.dtype)
        for ki, off in enumerate(offsets):
            window(gx, off)[...] += taps[ki]
        return gx

    def back(grad):
        gx = gw = gb = None
        if cols is None:
            if w.requires_grad:
                gw = np.einsum("no...,nc...->oc", grad, xs, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                gx = np.zeros(padded_shape, dtype=grad.dtype)
                window(gx, offsets[0])[...] = np.einsum("oc,no...->nc...", wm, grad, optimize=True)
        elif g == 1:
            g2 = np.moveaxis(grad, 1, -1).reshape(n * p, cout)
            if w.requires_grad:
                gw = (g2.T @ flat).reshape(wd.shape)
            if x.requires_grad:
                taps = (g2 @ wm).reshape((n,) + out_sp + (cin, ksize))
                taps = np.ascontiguousarray(np.moveaxis(taps, (-1, -2), (0, 2)))
                gx = scatter(taps)
        elif cg == 1 and cog == 1:
            gr = grad.reshape(n, cout, 1, p)
            if w.requires_grad:
                gw = np.matmul(gr, cols).sum(axis=0).reshape(wd.shape)
            if x.requires_grad:
                gx = np.zeros(padded_shape, dtype=grad.dtype)
                wk = wd.reshape(cin, ksize)
                for ki, off in enumerate(offsets):
                    window(gx, off)[...] += grad * wk[:, ki].reshape(bshape)
        else:
            gg = grad.reshape(n, g, cog, p)
            if w.requires_grad:
                gw = np.einsum("ngdp,ngcpk->gdck", gg, colg, optimize=True).reshape(wd.shape)
            if x.requires_grad:
                taps = np.einsum("ngdp,gdck->kngcp", gg, wg, optimize=True)
                gx = scatter(np.ascontiguousarray(taps).reshape((ksize, n, cin) + out_sp))
        if gx is not None:
            inner = gx[(slice(None), slice(None)) + tuple(
                slice(lo, lo + sl.stop - sl.start) for (lo, _), sl in zip(epads, xsl))]
            if inner.shape == x.shape:
                gx = inner
            else:
                gx = np.zeros(x.shape, dtype=grad.dtype)
                gx[(slice(None), slice(None)) + tuple(xsl)] = inner
        if gw is not None and wd.shape != wfull.shape:
            full = np.zeros_like(wfull)
            full[(slice(None), slice(None)) + tuple(ksl)] = gw
            gw = full
        if bias is not None and bias.requires_grad:
            gb = grad.sum(axis=(0,) + sp_axes)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, w) if bias is None else (x, w, bias)
    return Tensor.from_op(out, "conv", inputs, back)


def maxpool_forward(x: Tensor, window, stride=None) -> Tensor:
    """VALID max pooling over the trailing spatial dims."""
    x = as_tensor(x)
    r = x.ndim - 2
    if r < 1:
        raise ValueError(f"maxpool needs [N, C, spatial...], got shape {x.shape}")
    win = _tuple(window, r, "window")
    stride = win if stride is None else _tuple(stride, r, "stride")
    if min(win) < 1 or min(stride) < 1:
        raise ValueError("pool window and stride must be >= 1")
    spatial = x.shape[2:]
    for d, (e, k) in enumerate(zip(spatial, win)):
        if k > e:
            raise ValueError(f"pool window {k} larger than input extent {e} in dim {d + 2}")
    out_sp = tuple((e - k) // s + 1 for e, k, s in zip(spatial, win, stride))
    xd = x.data
    offsets = list(itertools.product(*(range(k) for k in win)))
    slices = [(slice(None), slice(None)) + tuple(_window(o, s, m) for o, s, m in zip(off, stride, out_sp))
              for off in offsets]
    stacked = np.stack([xd[sl] for sl in slices])
    arg = np.argmax(stacked, axis=0)
    out = np.take_along_axis(stacked, arg[None], axis=0)[0]

    def back(grad):
        gx = np.zeros_like(xd)
        for i, sl in enumerate(slices):
            gx[sl] += np.where(arg == i, grad, 0)
        return (gx,)

    return Tensor.from_op(out, "maxpool", (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool needs [N, C, spatial...], got shape {x.shape}")
    sp_axes = tuple(range(2, x.ndim))
    count = int(np.prod(x.shape[2:]))
    if count == 0:
        raise ValueError("global_avg_pool needs at least one spatial element")
    shape = x.shape

    def back(grad):
        g = grad.reshape(grad.shape + (1,) * len(sp_axes)) / count
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor.from_op(x.data.mean(axis=sp_axes), "gap", (x,), back)


def dense_forward(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped ``[F_out, F_in]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2:
        raise ValueError(f"dense expects 2-d x and w, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"dense input features {x.shape[1]} != weight dim 1 ({w.shape[1]})")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"dense bias shape {b.shape} != ({w.shape[0]},)")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def back(grad):
        gs = (grad @ wd, grad.T @ xd)
        return gs if b is None else gs + (grad.sum(axis=0),)

    return Tensor.from_op(out, "dense", (x, w) if b is None else (x, w, b), back)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0, e) / (1.0 + e)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return Tensor.from_op(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def swish(x: Tensor) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    s = _sigmoid(xd)
    return Tensor.from_op(xd * s, "swish", (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0), "relu", (x,), lambda g: (g * mask,))


ACTIVATIONS = {"swish": swish, "relu": relu, "sigmoid": sigmoid}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; choose from {sorted(ACTIVATIONS)}") from None
    return fn(x)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray, var: np.ndarray,
               eps: float) -> Tensor:
    """Affine normalisation with fixed statistics (inference path)."""
    x = as_tensor(x)
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * inv.reshape(bshape)
    gd = gamma.data.reshape(bshape)
    axes = (0,) + tuple(range(2, x.ndim))

    def back(grad):
        return (grad * gd * inv.reshape(bshape),
                (grad * xhat).sum(axis=axes),
                grad.sum(axis=axes))

    return Tensor.from_op(xhat * gd + beta.data.reshape(bshape), "batchnorm", (x, gamma, beta), back)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float):
    """Normalise with batch statistics.  Returns ``(out, batch_mean, batch_var)``."""
    x = as_tensor(x)
    axes = (0,) + tuple(range(2, x.ndim))
    m = int(np.prod([x.shape[a] for a in axes]))
    if m < 2:
        raise ValueError("batch norm in train mode needs more than one value per channel")
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    mu = x.data.mean(axis=axes)
    xc = x.data - mu.reshape(bshape)
    var = (xc * xc).mean(axis=axes)
    inv = (1.0 / np.sqrt(var + eps)).reshape(bshape)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)

    def back(grad):
        gxhat = grad * gd
        gx = inv / m * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, (grad * xhat).sum(axis=axes), grad.sum(axis=axes)

    out = Tensor.from_op(xhat * gd + beta.data.reshape(bshape), "batchnorm", (x, gamma, beta), back)
    return out, mu, var


PROB_CLAMP = 1e-7


def bce(p: Tensor, y, clamp: float = PROB_CLAMP) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against labels ``y``."""
    p = as_tensor(p)
    yd = np.asarray(y, dtype=p.dtype).reshape(p.shape)
    if p.size == 0:
        raise ValueError("bce needs at least one prediction")
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("labels must be 0 or 1")
    pd = p.data
    pc = np.clip(pd, clamp, 1.0 - clamp)
    n = pd.size
    loss = -np.mean(yd * np.log(pc) + (1.0 - yd) * np.log(1.0 - pc))
    inside = (pd >= clamp) & (pd <= 1.0 - clamp)

    def back(grad):
        return (grad * inside * (-(yd / pc) + (1.0 - yd) / (1.0 - pc)) / n,)

    return Tensor.from_op(np.asarray(loss, dtype=pd.dtype), "bce", (p,), back)


_LOGIT_CLAMP = math.log((1.0 - PROB_CLAMP) / PROB_CLAMP)


def bce_with_logits(z: Tensor, y) -> Tensor:
    """``bce(sigmoid(z), y)`` evaluated in log-space.

    Clamping the probability to ``[1e-7, 1-1e-7]`` is the same as clamping the
    logit to ``±log((1-1e-7)/1e-7)``, so the two agree including gradients.
    """
    z = as_tensor(z)
    yd = np.asarray(y, dtype=z.dtype).reshape(z.shape)
    if not np.all((yd == 0) | (yd == 1)):
        raise ValueError("labels must be 0 or 1")
    zd = z.data
    zc = np.clip(zd, -_LOGIT_CLAMP, _LOGIT_CLAMP)
    # -log sigmoid(z) = softplus(-z); -log(1 - sigmoid(z)) = softplus(z)
    loss = np.mean(yd * np.logaddexp(0, -zc) + (1.0 - yd) * np.logaddexp(0, zc))
    inside = np.abs(zd) <= _LOGIT_CLAMP
    n = zd.size

    def back(grad):
        return (grad * inside * (_sigmoid(zc) - yd) / n,)

    return Tensor.from_op(np.asarray(loss, dtype=zd.dtype), "bce_logits", (z,), back)
