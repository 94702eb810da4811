"""Layers and composite blocks: batch norm, squeeze-excitation, MBConv, and
the multiscale pooling branch."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .tensor import DEFAULT_DTYPE, Tensor


def he_truncated_normal(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Normal truncated at two std devs, rescaled so the variance is 2/fan_in."""
    # std of a unit normal truncated to [-2, 2]
    std = np.sqrt(2.0 / fan_in) / 0.8796256610342398
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2
    return (z * std).astype(dtype)


class Module:
    """Container with named parameters, buffers and a train/eval flag."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own(self, kind):
        for name, value in vars(self).items():
            if kind == "param" and isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif kind == "buffer" and isinstance(value, np.ndarray):
                yield name, value

    def named_parameters(self, prefix: str = ""):
        for name, p in self._own("param"):
            yield prefix + name, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._own("buffer"):
            yield prefix + name, b
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        mod = self
        for part in path:
            mod = mod[int(part)] if isinstance(mod, (list, tuple)) else getattr(mod, part)
        setattr(mod, leaf, value)

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by dotted name (copies)."""
        state = {n: p.data.copy() for n, p in self.named_parameters()}
        state.update({n: b.copy() for n, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = list(params) + list(buffers)
        for name in expected:
            if name not in state:
                raise KeyError(f"missing entry {name!r}")
            cur = params[name].data if name in params else buffers[name]
            if tuple(state[name].shape) != cur.shape:
                raise ValueError(f"shape mismatch for {name!r}: {tuple(state[name].shape)} vs {cur.shape}")
        extra = set(state) - set(expected)
        if extra:
            raise KeyError(f"unexpected entry {sorted(extra)[0]!r}")
        for name, p in params.items():
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in buffers.items():
            self._set_buffer(name, np.array(state[name], dtype=b.dtype))

    def train(self, mode: bool = True):
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


class Conv(Module):
    def __init__(self, rank, in_channels, out_channels, kernel, stride=1, groups=1,
                 padding=F.SAME, bias=False, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng()
        self.spec = F.ConvSpec(rank, kernel, stride, padding, groups, out_channels)
        if in_channels % groups:
            raise ValueError(f"groups={groups} does not divide in_channels={in_channels}")
        cg = in_channels // groups
        shape = (out_channels, cg) + self.spec.kernel
        self.weight = _param(he_truncated_normal(rng, shape, cg * int(np.prod(self.spec.kernel)), dtype))
        self.bias = _param(np.zeros(out_channels, dtype)) if bias else None

    def forward(self, x):
        return F.conv_forward(x, self.weight, self.spec, self.bias)


class Dense(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng()
        self.weight = _param(he_truncated_normal(rng, (out_features, in_features), in_features, dtype))
        self.bias = _param(np.zeros(out_features, dtype)) if bias else None

    def forward(self, x):
        return F.dense_forward(x, self.weight, self.bias)


class BatchNorm(Module):
    """Per-channel batch normalisation.

    Running statistics follow ``r <- momentum * r + (1 - momentum) * batch``.
    """

    def __init__(self, channels, momentum=0.99, eps=1e-3, dtype=DEFAULT_DTYPE):
        if not 0 < momentum < 1:
            raise ValueError("momentum must be in (0, 1)")
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.gamma = _param(np.ones(channels, dtype))
        self.beta = _param(np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        if not self.training:
            return F.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.eps)
        out, mu, var = F.batch_norm_train(x, self.gamma, self.beta, self.eps)
        m = self.momentum
        self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(self.running_mean.dtype)
        self.running_var = (m * self.running_var + (1 - m) * var).astype(self.running_var.dtype)
        return out


def batchnorm_forward(x, state: BatchNorm, mode: str = "train"):
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    state.train(mode == "train")
    return state(x)


class SqueezeExcite(Module):
    """GAP -> dense(C->r) -> swish -> dense(r->C) -> sigmoid -> channel gate."""

    def __init__(self, channels, se_ratio=0.25, rng=None, dtype=DEFAULT_DTYPE):
        reduced = max(1, round(channels * se_ratio))
        self.reduce = Dense(channels, reduced, rng=rng, dtype=dtype)
        self.expand = Dense(reduced, channels, rng=rng, dtype=dtype)

    def gate(self, x):
        s = F.global_avg_pool(x)
        s = F.swish(self.reduce(s))
        return F.sigmoid(self.expand(s))

    def forward(self, x):
        g = self.gate(x)
        return x * g.reshape(g.shape + (1,) * (x.ndim - 2))


def se_forward(x, se: SqueezeExcite):
    return se(x)


@dataclass(frozen=True)
class MBConvSpec:
    rank: int
    in_channels: int
    out_channels: int
    expand_ratio: int = 6
    kernel: int = 3
    stride: int | tuple[int, ...] = 1
    se_ratio: float = 0.25
    skip: bool | None = None

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {self.rank}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.expand_ratio < 1:
            raise ValueError("expand_ratio must be >= 1")
        if not 0 < self.se_ratio <= 1:
            raise ValueError("se_ratio must lie in (0, 1]")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        stride = F._tuple(self.stride, self.rank, "stride")
        if any(s not in (1, 2) for s in stride):
            raise ValueError(f"stride entries must be 1 or 2, got {stride}")
        object.__setattr__(self, "stride", stride)
        eligible = all(s == 1 for s in stride) and self.in_channels == self.out_channels
        if self.skip and not eligible:
            raise ValueError("skip connection needs stride 1 and in_channels == out_channels")
        object.__setattr__(self, "skip", eligible if self.skip is None else self.skip)

    @property
    def expanded(self) -> int:
        return self.in_channels * self.expand_ratio


class MBConv(Module):
    """Mobile inverted residual bottleneck block (rank 2 or 3)."""

    def __init__(self, spec: MBConvSpec, rng=None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng()
        self.spec = spec
        r, mid = spec.rank, spec.expanded
        if spec.expand_ratio != 1:
            self.expand_conv = Conv(r, spec.in_channels, mid, 1, rng=rng, dtype=dtype)
            self.expand_bn = BatchNorm(mid, dtype=dtype)
        else:
            self.expand_conv = self.expand_bn = None
        self.dw_conv = Conv(r, mid, mid, spec.kernel, spec.stride, groups=mid, rng=rng, dtype=dtype)
        self.dw_bn = BatchNorm(mid, dtype=dtype)
        self.se = SqueezeExcite(mid, spec.se_ratio, rng=rng, dtype=dtype)
        self.project_conv = Conv(r, mid, spec.out_channels, 1, rng=rng, dtype=dtype)
        self.project_bn = BatchNorm(spec.out_channels, dtype=dtype)

    def forward(self, x):
        h = x
        if self.expand_conv is not None:
            h = F.swish(self.expand_bn(self.expand_conv(h)))
        h = F.swish(self.dw_bn(self.dw_conv(h)))
        h = self.se(h)
        h = self.project_bn(self.project_conv(h))
        if self.spec.skip:
            h = h + x
        return h


def mbconv_forward(x, block: MBConv):
    return block(x)


@dataclass(frozen=True)
class MultiscaleSpec:
    pool_window: int = 2
    conv_channels: tuple[int, int] = field(default=(32, 64))
    kernel: int = 3

    def __post_init__(self):
        if self.pool_window < 1:
            raise ValueError("pool_window must be >= 1")
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ValueError("conv_channels must be two positive integers")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")


class MultiscaleBlock(Module):
    """pool -> conv+swish -> pool -> conv+swish -> GAP, giving a fixed-length
    vector regardless of the input's spatial size."""

    def __init__(self, in_channels, spec: MultiscaleSpec = MultiscaleSpec(), rng=None, dtype=DEFAULT_DTYPE):
        rng = rng or np.random.default_rng()
        self.spec = spec
        c1, c2 = spec.conv_channels
        self.conv1 = Conv(2, in_channels, c1, spec.kernel, bias=True, rng=rng, dtype=dtype)
        self.conv2 = Conv(2, c1, c2, spec.kernel, bias=True, rng=rng, dtype=dtype)

    @property
    def out_features(self) -> int:
        return self.spec.conv_channels[1]

    def forward(self, x):
        w = self.spec.pool_window
        if x.ndim != 4:
            raise ValueError(f"multiscale block expects [N, C, H, W], got shape {x.shape}")
        h_, w_ = x.shape[2:]
        if min(h_, w_) < w * w:
            raise ValueError(f"input {h_}x{w_} too small for two {w}x{w} pooling stages")
        h = F.maxpool_forward(x, w, w)
        h = F.swish(self.conv1(h))
        h = F.maxpool_forward(h, w, w)
        h = F.swish(self.conv2(h))
        return F.global_avg_pool(h)


def multiscale_forward(x, block: MultiscaleBlock):
    return block(x)
