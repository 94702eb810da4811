"""Volume I/O, label ingestion, preprocessing, augmentation, splitting,
synthetic data and the four-modality ensemble."""
from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MODALITIES = ("FLAIR", "T1w", "T1Gd", "T2")
LABEL_COLUMN = "MGMT_value"
ID_COLUMNS = ("case_id", "id", "BraTS21ID")


class DataFormatError(ValueError):
    """A data file is malformed or inconsistent."""


@dataclass
class VolumeRecord:
    case_id: str
    modality: str
    voxels: np.ndarray
    label: int | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3:
            raise ValueError(f"voxels must be (depth, H, W), got shape {self.voxels.shape}")


# -- MVOL container ------------------------------------------------------------

MVOL_MAGIC = b"MVOL"
_MVOL_HEADER = struct.Struct("<4sHH3IB3x")
_DTYPE_F32 = 1


def save_volume(rec: VolumeRecord, path) -> None:
    v = rec.voxels
    if min(v.shape) == 0:
        raise ValueError(f"refusing to save empty volume with shape {v.shape}")
    header = _MVOL_HEADER.pack(MVOL_MAGIC, 1, 3, *v.shape, _DTYPE_F32)
    Path(path).write_bytes(header + np.ascontiguousarray(v, dtype="<f4").tobytes())


def read_mvol(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < _MVOL_HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, version, rank, d, h, w, dtype = _MVOL_HEADER.unpack_from(buf)
    if magic != MVOL_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MVOL_MAGIC!r}")
    if version != 1:
        raise DataFormatError(f"{path}: unsupported MVOL version {version}")
    if rank != 3:
        raise DataFormatError(f"{path}: unsupported rank {rank}")
    if dtype != _DTYPE_F32:
        raise DataFormatError(f"{path}: unsupported dtype code {dtype}")
    payload = len(buf) - _MVOL_HEADER.size
    if payload != 4 * d * h * w:
        raise DataFormatError(
            f"{path}: payload has {payload} bytes, header extents {d}x{h}x{w} need {4 * d * h * w}")
    if d * h * w == 0:
        raise DataFormatError(f"{path}: zero-size volume {d}x{h}x{w}")
    return np.frombuffer(buf, dtype="<f4", offset=_MVOL_HEADER.size).reshape(d, h, w).astype(np.float32)


def load_volume(path, case_id: str | None = None, modality: str | None = None,
                label: int | None = None) -> VolumeRecord:
    """Read an MVOL file; case id and modality default to ``<case_id>/<modality>.mvol``."""
    path = Path(path)
    return VolumeRecord(case_id or path.parent.name, modality or path.stem, read_mvol(path), label)


# -- labels ------------------------------------------------------------------

def load_labels(path) -> dict[str, int]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: empty label file")
    header = [c.strip() for c in rows[0]]
    if LABEL_COLUMN not in header:
        raise DataFormatError(f"{path}: row 1: header lacks {LABEL_COLUMN!r} column")
    id_col = next((header.index(c) for c in ID_COLUMNS if c in header), 0)
    val_col = header.index(LABEL_COLUMN)
    labels: dict[str, int] = {}
    for rowno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) <= max(id_col, val_col):
            raise DataFormatError(f"{path}: row {rowno}: missing column")
        cid, val = row[id_col].strip(), row[val_col].strip()
        if val not in ("0", "1"):
            raise DataFormatError(f"{path}: row {rowno}: label {val!r} is not 0 or 1")
        if cid in labels:
            raise DataFormatError(f"{path}: row {rowno}: duplicate case id {cid!r}")
        labels[cid] = int(val)
    return labels


def save_labels(labels: dict[str, int], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", LABEL_COLUMN])
        for cid, y in labels.items():
            w.writerow([cid, y])


# -- preprocessing -------------------------------------------------------------

def resize_bilinear(img: np.ndarray, target=(256, 256)) -> np.ndarray:
    """Separable bilinear resize of the last two axes, corners aligned."""
    img = np.asarray(img)
    h, w = img.shape[-2:]
    th, tw = target
    if h < 2 or w < 2:
        raise ValueError(f"cannot interpolate a degenerate {h}x{w} image")
    if (h, w) == (th, tw):
        return img.copy()

    def axis_weights(n, m):
        pos = np.linspace(0.0, n - 1, m) if m > 1 else np.zeros(1)
        lo = np.minimum(np.floor(pos).astype(int), n - 2)
        return lo, pos - lo

    lo, fr = axis_weights(h, th)
    rows = img[..., lo, :] * (1 - fr)[:, None] + img[..., lo + 1, :] * fr[:, None]
    lo, fr = axis_weights(w, tw)
    return (rows[..., lo] * (1 - fr) + rows[..., lo + 1] * fr).astype(img.dtype, copy=False)


def rescale(x: np.ndarray) -> np.ndarray:
    """Map raw intensities in [0, 255] to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise ValueError(f"intensities outside [0, 255] (min {x.min()}, max {x.max()}); unconverted source?")
    return x / np.float32(255.0)


def normalize(x: np.ndarray, mean=0.0, scale=1.0) -> np.ndarray:
    return (x - np.float32(mean)) / np.float32(scale)


def preprocess_volume(voxels: np.ndarray, size: int, mean=0.0, scale=1.0) -> np.ndarray:
    """Resize each slice to ``size`` x ``size``, rescale to [0, 1], normalise."""
    return normalize(rescale(resize_bilinear(voxels, (size, size))), mean, scale)


# -- splitting -----------------------------------------------------------------

TRAIN_FRACTION = 0.75


@dataclass
class SplitIndex:
    train_ids: list[str]
    val_ids: list[str]
    seed: int


def split(ids, seed: int, train_fraction: float = TRAIN_FRACTION) -> SplitIndex:
    """Deterministic case-level split; the first round(0.75 n) of a seeded
    shuffle go to training."""
    ids = sorted(set(ids))
    if len(ids) < 4:
        raise ValueError(f"need >= 4 cases to split, got {len(ids)}")
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = math.floor(train_fraction * len(ids) + 0.5)
    shuffled = [ids[i] for i in order]
    return SplitIndex(shuffled[:n_train], shuffled[n_train:], seed)


# -- augmentation --------------------------------------------------------------

def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate the last two axes about the image centre, bilinear, zero fill."""
    if degrees == 0:
        return img.copy()
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    sy = c * yy - s * xx + cy
    sx = s * yy + c * xx + cx
    y0, x0 = np.floor(sy).astype(int), np.floor(sx).astype(int)
    fy, fx = sy - y0, sx - x0
    out = np.zeros_like(img)
    for dy, dx, wt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                       (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = img[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        out += (vals * np.where(ok, wt, 0.0)).astype(img.dtype)
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1].copy()


def vflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1, :].copy()


def augment(sample: np.ndarray, rng: np.random.Generator, flip_prob: float = 0.5,
            rotation_factor: float = 0.2) -> np.ndarray:
    """Random horizontal/vertical flips and a rotation of up to
    ``rotation_factor * 180`` degrees, applied identically to every slice."""
    out = sample
    if rng.random() < flip_prob:
        out = hflip(out)
    if rng.random() < flip_prob:
        out = vflip(out)
    angle = rng.uniform(-rotation_factor * 180.0, rotation_factor * 180.0)
    if angle != 0:
        out = rotate(out, angle)
    return out if out is not sample else sample.copy()


def sample_rng(seed: int, case_id: str, epoch: int, index: int = 0) -> np.random.Generator:
    """Independent per-sample stream so results do not depend on worker layout."""
    return np.random.default_rng([seed, zlib.crc32(case_id.encode()), epoch, index])


# -- slices and ensembles ------------------------------------------------------

def extract_slices(rec, window: int = 3) -> np.ndarray:
    """Stack ``window`` adjacent depth slices as channels: (depth-window+1, window, H, W)."""
    vox = rec.voxels if isinstance(rec, VolumeRecord) else np.asarray(rec)
    d = vox.shape[0]
    if d < window:
        raise ValueError(f"volume depth {d} is less than slice window {window}")
    return np.stack([vox[i:i + window] for i in range(d - window + 1)])


@dataclass(frozen=True)
class EnsembleWeights:
    weights: tuple[float, float, float, float]
    label: str = "custom"

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (4,):
            raise ValueError(f"need one weight per modality {MODALITIES}")
        if np.any(w < 0):
            raise ValueError("ensemble weights must be nonnegative")
        if w.sum() == 0:
            raise ValueError("ensemble weights sum to zero")
        object.__setattr__(self, "weights", tuple(float(v) for v in w / w.sum()))

    @classmethod
    def from_ratio(cls, ratio: str) -> "EnsembleWeights":
        """Parse ``"3:3:3:2"`` over (FLAIR, T1w, T1Gd, T2)."""
        parts = ratio.split(":")
        if len(parts) != 4:
            raise ValueError(f"ratio {ratio!r} must have four ':'-separated entries")
        return cls(tuple(float(p) for p in parts), label=ratio)


PRESET_RATIOS = ("3:3:3:2", "2:4:2:2")


def ensemble_predict(probs, w: EnsembleWeights) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (4,):
        raise ValueError(f"need four per-modality probabilities, got shape {p.shape}")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    return float(np.dot(w.weights, p))


# -- synthetic data ------------------------------------------------------------

# (baseline intensity, noise std, blob gain) per modality
MODALITY_PROFILES = {
    "FLAIR": (90.0, 14.0, 1.0),
    "T1w": (70.0, 12.0, 0.7),
    "T1Gd": (80.0, 16.0, 0.9),
    "T2": (100.0, 15.0, 0.8),
}


@dataclass
class SyntheticConfig:
    depth: int = 4
    size: int = 32
    amplitude: float = 100.0
    blob_sigma: float = 0.1  # fraction of the image size


def synth_case(rng: np.random.Generator, label: int, cfg: SyntheticConfig) -> dict[str, np.ndarray]:
    d, s = cfg.depth, cfg.size
    sig = cfg.blob_sigma * s
    cy, cx = rng.uniform(0.25 * s, 0.75 * s, size=2)
    cz = rng.uniform(0, d - 1)
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(s), np.arange(s), indexing="ij")
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2) - (zz - cz) ** 2 / (2 * max(d, 1) ** 2))
    out = {}
    for mod in MODALITIES:
        base, sd, gain = MODALITY_PROFILES[mod]
        noise = gaussian_filter(rng.standard_normal((d, s, s)), sigma=(0.5, 1.5, 1.5))
        noise /= noise.std() + 1e-12
        vol = base + sd * noise + (label * cfg.amplitude * gain) * blob
        out[mod] = np.clip(vol, 0, 255).astype(np.float32)
    return out


def gen_synthetic(n_cases: int, seed: int, out_dir, cfg: SyntheticConfig | None = None) -> dict[str, int]:
    """Write ``n_cases`` synthetic four-modality cases plus ``labels.csv``.

    Label-1 cases carry a bright Gaussian blob on top of smooth noise.
    """
    if n_cases < 4:
        raise ValueError(f"need >= 4 cases, got {n_cases}")
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(seed)
    labels_arr = rng.permutation([1] * (n_cases // 2) + [0] * (n_cases - n_cases // 2))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = {}
    for i, y in enumerate(labels_arr):
        cid = f"{i:05d}"
        labels[cid] = int(y)
        case_dir = out / cid
        case_dir.mkdir(exist_ok=True)
        for mod, vol in synth_case(rng, int(y), cfg).items():
            save_volume(VolumeRecord(cid, mod, vol, int(y)), case_dir / f"{mod}.mvol")
    save_labels(labels, out / "labels.csv")
    return labels


# -- dataset assembly ----------------------------------------------------------

@dataclass
class SampleSet:
    """Model-ready samples; several samples may share one case."""

    x: np.ndarray
    y: np.ndarray
    case_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.y)

    def cases(self) -> list[str]:
        return list(dict.fromkeys(self.case_ids))

    def subset(self, ids) -> "SampleSet":
        keep = set(ids)
        idx = [i for i, c in enumerate(self.case_ids) if c in keep]
        return SampleSet(self.x[idx], self.y[idx], [self.case_ids[i] for i in idx])


def load_case(data_dir, case_id: str, modalities=MODALITIES) -> dict[str, VolumeRecord]:
    case_dir = Path(data_dir) / case_id
    recs = {}
    for mod in modalities:
        path = case_dir / f"{mod}.mvol"
        if not path.exists():
            raise DataFormatError(f"missing volume {path}")
        recs[mod] = load_volume(path, case_id, mod)
    return recs


def case_inputs(recs: dict[str, VolumeRecord], layout: str, size: int, window: int = 3) -> np.ndarray:
    """Model inputs for one case.

    ``stack``: the middle slice of each modality along depth, ``[1, 1, 4, S, S]``;
    a modality name: that whole volume, ``[1, 1, D, S, S]``;
    ``slices:<modality>``: sliding ``window``-slice stacks, ``[D-2, 3, S, S]``.
    """
    if layout == "stack":
        mids = [preprocess_volume(recs[m].voxels[recs[m].voxels.shape[0] // 2][None], size)[0]
                for m in MODALITIES]
        return np.stack(mids)[None, None]
    if layout in MODALITIES:
        return preprocess_volume(recs[layout].voxels, size)[None, None]
    if layout.startswith("slices:"):
        mod = layout.split(":", 1)[1]
        return extract_slices(preprocess_volume(recs[mod].voxels, size), window)
    raise ValueError(f"unknown input layout {layout!r}")


def layout_modalities(layout: str) -> tuple[str, ...]:
    if layout == "stack":
        return MODALITIES
    if layout in MODALITIES:
        return (layout,)
    if layout.startswith("slices:"):
        return (layout.split(":", 1)[1],)
    raise ValueError(f"unknown input layout {layout!r}")


def build_samples(data_dir, case_ids, labels: dict[str, int] | None, layout: str, size: int) -> SampleSet:
    xs, ys, owners = [], [], []
    mods = layout_modalities(layout)
    for cid in case_ids:
        arr = case_inputs(load_case(data_dir, cid, mods), layout, size)
        for sample in arr:
            xs.append(sample)
            ys.append(-1 if labels is None else labels[cid])
            owners.append(cid)
    return SampleSet(np.stack(xs).astype(np.float32), np.asarray(ys), owners)
