"""EfficientNet (rank 2 / rank 3) and Multiscale-EfficientNet builders,
parameter counting, and the LNWT weight-file format."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .nn import BatchNorm, Conv, Dense, MBConv, MBConvSpec, Module, MultiscaleBlock, MultiscaleSpec
from .tensor import DEFAULT_DTYPE, Tensor, as_tensor, concat


@dataclass(frozen=True)
class StageConfig:
    expand_ratio: int
    kernel: int
    stride: int
    base_channels: int
    base_repeats: int


B0_STAGES = (
    StageConfig(1, 3, 1, 16, 1),
    StageConfig(6, 3, 2, 24, 2),
    StageConfig(6, 5, 2, 40, 2),
    StageConfig(6, 3, 2, 80, 3),
    StageConfig(6, 5, 1, 112, 3),
    StageConfig(6, 5, 2, 192, 4),
    StageConfig(6, 3, 1, 320, 1),
)
STEM_CHANNELS = 32
HEAD_CHANNELS = 1280


@dataclass(frozen=True)
class ScaledVariant:
    width_mult: float = 1.0
    depth_mult: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        if self.width_mult <= 0 or self.depth_mult <= 0:
            raise ValueError("width and depth multipliers must be positive")

    def channels(self, base: int) -> int:
        return round_filters(base, self.width_mult)

    def repeats(self, base: int) -> int:
        return math.ceil(base * self.depth_mult)


B0 = ScaledVariant(1.0, 1.0, "B0")
B7 = ScaledVariant(2.0, 3.1, "B7")
VARIANTS = {"b0": B0, "b7": B7}


def round_filters(channels: float, width_mult: float, divisor: int = 8) -> int:
    """Scale and round to the nearest multiple of ``divisor`` (never below it,
    never more than 10% under the exact scaled value)."""
    c = channels * width_mult
    new = max(divisor, int(c + divisor / 2) // divisor * divisor)
    if new < 0.9 * c:
        new += divisor
    return int(new)


def variant_from_name(name: str, width: float | None = None, depth: float | None = None) -> ScaledVariant:
    key = name.lower()
    if key in VARIANTS:
        return VARIANTS[key]
    if key == "custom":
        if width is None or depth is None:
            raise ValueError("custom variant needs width and depth multipliers")
        return ScaledVariant(float(width), float(depth), "custom")
    raise ValueError(f"unknown variant {name!r}; use b0, b7 or custom")


def _stride(rank: int, s: int) -> tuple[int, ...]:
    # rank-3 models never stride along depth
    return (s, s) if rank == 2 else (1, s, s)


class EfficientNet(Module):
    """stem conv -> 7 MBConv stages -> 1x1 head conv -> GAP -> dense logit."""

    def __init__(self, rank: int = 3, variant: ScaledVariant = B0, in_channels: int = 1,
                 in_spatial=(4, 256, 256), include_top: bool = True, seed: int = 0,
                 dtype=DEFAULT_DTYPE, stages=B0_STAGES):
        if rank not in (2, 3):
            raise ValueError(f"rank must be 2 or 3, got {rank}")
        in_spatial = tuple(int(e) for e in in_spatial)
        if len(in_spatial) != rank:
            raise ValueError(f"rank {rank} model needs {rank} spatial extents, got {in_spatial}")
        self.rank = rank
        self.variant = variant
        self.in_channels = in_channels
        self.in_spatial = in_spatial
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)

        stem_ch = variant.channels(STEM_CHANNELS)
        self.stem_conv = Conv(rank, in_channels, stem_ch, 3, _stride(rank, 2), rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(stem_ch, dtype=dtype)
        self.block_specs: list[tuple[int, MBConvSpec]] = []
        blocks = []
        cin = stem_ch
        for si, st in enumerate(stages):
            cout = variant.channels(st.base_channels)
            for i in range(variant.repeats(st.base_repeats)):
                spec = MBConvSpec(rank, cin, cout, st.expand_ratio, st.kernel,
                                  _stride(rank, st.stride if i == 0 else 1))
                blocks.append(MBConv(spec, rng=rng, dtype=dtype))
                self.block_specs.append((si + 1, spec))
                cin = cout
        self.blocks = blocks
        self.feature_dim = variant.channels(HEAD_CHANNELS)
        self.head_conv = Conv(rank, cin, self.feature_dim, 1, rng=rng, dtype=dtype)
        self.head_bn = BatchNorm(self.feature_dim, dtype=dtype)
        self.classifier = Dense(self.feature_dim, 1, rng=rng, dtype=dtype) if include_top else None
        self.trace = self.shape_trace()

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        """Symbolic per-layer output shapes (batch dim omitted).

        Raises if a strided layer sees an extent smaller than its stride.
        """
        def reduce(extents, stride, where):
            out = []
            for d, (e, s) in enumerate(zip(extents, stride)):
                if e < s:
                    raise ValueError(f"input too small: {where} needs spatial dim {d} >= {s}, got {e}")
                out.append(-(-e // s))
            return tuple(out)

        sp = reduce(self.in_spatial, _stride(self.rank, 2), "stem")
        trace = [("stem", (self.stem_conv.spec.out_channels,) + sp)]
        for i, (stage, spec) in enumerate(self.block_specs):
            sp = reduce(sp, spec.stride, f"stage {stage} (block {i})")
            trace.append((f"blocks.{i}", (spec.out_channels,) + sp))
        trace.append(("head", (self.feature_dim,) + sp))
        trace.append(("gap", (self.feature_dim,)))
        if self.classifier is not None:
            trace.append(("classifier", (1,)))
        return trace

    def _check_input(self, x: Tensor):
        want = (self.in_channels,) + self.in_spatial
        if tuple(x.shape[1:]) != want:
            raise ValueError(f"model expects input [N, {', '.join(map(str, want))}], got {list(x.shape)}")

    def feature_map(self, x, collect: list | None = None):
        x = as_tensor(x, self.dtype)
        self._check_input(x)
        h = F.swish(self.stem_bn(self.stem_conv(x)))
        if collect is not None:
            collect.append(("stem", h.shape[1:]))
        for i, block in enumerate(self.blocks):
            h = block(h)
            if collect is not None:
                collect.append((f"blocks.{i}", h.shape[1:]))
        h = F.swish(self.head_bn(self.head_conv(h)))
        if collect is not None:
            collect.append(("head", h.shape[1:]))
        return h

    def features(self, x, collect: list | None = None):
        f = F.global_avg_pool(self.feature_map(x, collect))
        if collect is not None:
            collect.append(("gap", f.shape[1:]))
        return f

    def forward(self, x, collect: list | None = None):
        if self.classifier is None:
            raise RuntimeError("model was built without a classifier head")
        out = self.classifier(self.features(x, collect))
        if collect is not None:
            collect.append(("classifier", out.shape[1:]))
        return out

    def describe(self) -> dict:
        return {"model": "eff3d" if self.rank == 3 else "eff2d", "rank": self.rank,
                "width": self.variant.width_mult, "depth": self.variant.depth_mult,
                "variant": self.variant.name, "in_channels": self.in_channels,
                "in_spatial": list(self.in_spatial)}


def build_efficientnet(rank: int, variant: ScaledVariant, in_channels: int, in_spatial,
                       seed: int = 0, dtype=DEFAULT_DTYPE) -> EfficientNet:
    return EfficientNet(rank, variant, in_channels, in_spatial, seed=seed, dtype=dtype)


class MultiscaleEfficientNet(Module):
    """Rank-2 EfficientNet features and a multiscale pooling branch computed
    from the same input, concatenated, then a dense logit."""

    def __init__(self, variant: ScaledVariant = B0, in_spatial=(256, 256), in_channels: int = 3,
                 ms_spec: MultiscaleSpec = MultiscaleSpec(), seed: int = 0, dtype=DEFAULT_DTYPE):
        if in_channels != 3:
            raise ValueError(f"multiscale model takes 3-channel input, got {in_channels}")
        in_spatial = tuple(int(e) for e in in_spatial)
        if len(in_spatial) != 2:
            raise ValueError(f"multiscale model takes rank-2 input, got spatial {in_spatial}")
        w = ms_spec.pool_window
        if min(in_spatial) < w * w:
            raise ValueError(f"input {in_spatial} too small for two {w}x{w} pooling stages")
        self.variant = variant
        self.in_channels = in_channels
        self.in_spatial = in_spatial
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.backbone = EfficientNet(2, variant, in_channels, in_spatial, include_top=False,
                                     seed=int(rng.integers(2**31)), dtype=dtype)
        self.multiscale = MultiscaleBlock(in_channels, ms_spec, rng=rng, dtype=dtype)
        self.feature_dim = self.backbone.feature_dim + self.multiscale.out_features
        self.classifier = Dense(self.feature_dim, 1, rng=rng, dtype=dtype)

    def features(self, x):
        x = as_tensor(x, self.dtype)
        return concat([self.backbone.features(x), self.multiscale(x)], axis=1)

    def forward(self, x):
        return self.classifier(self.features(x))

    def describe(self) -> dict:
        return {"model": "multiscale", "rank": 2, "width": self.variant.width_mult,
                "depth": self.variant.depth_mult, "variant": self.variant.name,
                "in_channels": self.in_channels, "in_spatial": list(self.in_spatial)}


def build_multiscale_efficientnet(backbone_variant: ScaledVariant, in_spatial=(256, 256),
                                  seed: int = 0, dtype=DEFAULT_DTYPE,
                                  ms_spec: MultiscaleSpec = MultiscaleSpec()) -> MultiscaleEfficientNet:
    return MultiscaleEfficientNet(backbone_variant, in_spatial, 3, ms_spec, seed=seed, dtype=dtype)


def param_count(m: Module) -> int:
    """Number of trainable scalars (batch-norm running statistics excluded)."""
    return sum(int(np.prod(p.shape)) for p in m.parameters())


# -- weight files ------------------------------------------------------------

MAGIC = b"LNWT"
FORMAT_VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(m: Module, path) -> None:
    """Write parameters and batch-norm statistics as little-endian float32."""
    state = m.state_dict()
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_weights(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if len(buf) < 10:
        raise WeightFileError(f"{path}: truncated header")
    magic = buf[:4]
    if magic == MAGIC[::-1]:
        raise WeightFileError(f"{path}: byte-swapped (big-endian) weight file is unsupported")
    if magic != MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}")
    version, count = struct.unpack_from("<HI", buf, 4)
    if version == FORMAT_VERSION << 8:
        raise WeightFileError(f"{path}: byte-swapped (big-endian) weight file is unsupported")
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}

    def need(n):
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated at byte {pos}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(nbytes)
        if name in out:
            raise WeightFileError(f"{path}: duplicate parameter {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def load_weights(m: Module, path) -> None:
    loaded = read_weights(path)
    current = m.state_dict()
    for (want, arr), got in zip(current.items(), list(loaded.items()) + [None] * len(current)):
        if got is None:
            raise WeightFileError(f"{path}: missing parameter {want!r}")
        name, data = got
        if name != want:
            raise WeightFileError(f"{path}: parameter {want!r} expected, file has {name!r}")
        if data.shape != arr.shape:
            raise WeightFileError(f"{path}: parameter {name!r} has shape {data.shape}, model expects {arr.shape}")
    if len(loaded) > len(current):
        extra = list(loaded)[len(current)]
        raise WeightFileError(f"{path}: unexpected parameter {extra!r}")
    m.load_state_dict(loaded)
