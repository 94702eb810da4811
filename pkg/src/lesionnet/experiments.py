"""Run configuration, end-to-end training runs, and the optimizer-sweep and
two-method benchmark harnesses."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .data import MODALITIES, build_samples, load_case, load_labels, split
from .models import EfficientNet, MultiscaleEfficientNet, variant_from_name
from .training import OPTIMIZERS, History, TrainConfig, case_scores, train
from .metrics import auc


@dataclass
class RunConfig:
    model: str = "eff3d"
    variant: str = "b0"
    width: float | None = None
    depth: float | None = None
    optimizer: str = "adam"
    lr: float = 1e-4
    epochs: int = 100
    patience: int = 10
    batch_size: int = 4
    seed: int = 0
    size: int = 256
    modality: str = "stack"
    augment: bool = True
    bias_correction: bool = False
    data_dir: str = "data"
    out_dir: str = "runs"
    ensemble_ratio: str = "3:3:3:2"

    def __post_init__(self):
        if self.model not in ("eff3d", "multiscale"):
            raise ValueError(f"model must be eff3d or multiscale, got {self.model!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.modality != "stack" and self.modality not in MODALITIES:
            raise ValueError(f"modality must be 'stack' or one of {MODALITIES}, got {self.modality!r}")
        if self.model == "multiscale" and self.modality == "stack":
            self.modality = "T1w"
        variant_from_name(self.variant, self.width, self.depth)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def layout(self) -> str:
        return f"slices:{self.modality}" if self.model == "multiscale" else self.modality

    def train_config(self) -> TrainConfig:
        return TrainConfig(optimizer=self.optimizer, lr=self.lr, epochs=self.epochs,
                           batch_size=self.batch_size, patience=self.patience, seed=self.seed,
                           augment=self.augment, bias_correction=self.bias_correction)


def build_model(cfg: RunConfig, depth: int | None = None):
    """Model matching ``cfg``; ``depth`` is the volume depth for single-modality runs."""
    variant = variant_from_name(cfg.variant, cfg.width, cfg.depth)
    if cfg.model == "multiscale":
        return MultiscaleEfficientNet(variant, (cfg.size, cfg.size), seed=cfg.seed)
    d = len(MODALITIES) if cfg.modality == "stack" else depth
    if d is None:
        raise ValueError("single-modality model needs the volume depth")
    return EfficientNet(3, variant, 1, (d, cfg.size, cfg.size), seed=cfg.seed)


def volume_depth(data_dir, case_id: str, modality: str) -> int:
    return load_case(data_dir, case_id, (modality,))[modality].voxels.shape[0]


def prepare(cfg: RunConfig, labels: dict[str, int] | None = None):
    """Load labels, split them, and build train/validation samples."""
    labels = labels if labels is not None else load_labels(Path(cfg.data_dir) / "labels.csv")
    sp = split(list(labels), cfg.seed)
    tr = build_samples(cfg.data_dir, sp.train_ids, labels, cfg.layout, cfg.size)
    va = build_samples(cfg.data_dir, sp.val_ids, labels, cfg.layout, cfg.size)
    return sp, tr, va


def run(cfg: RunConfig, on_epoch=None, data=None):
    """Train one model end to end; returns ``(model, history, split)``."""
    sp, tr, va = data if data is not None else prepare(cfg)
    depth = None
    if cfg.model == "eff3d" and cfg.modality != "stack":
        depth = tr.x.shape[2]
    model = build_model(cfg, depth)
    history = train(model, tr, va, cfg.train_config(), on_epoch=on_epoch)
    return model, history, sp


def save_run_config(cfg: RunConfig, model, path) -> None:
    meta = {"config": cfg.to_dict(), "model": model.describe()}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_run_config(path) -> tuple[RunConfig, dict]:
    meta = json.loads(Path(path).read_text())
    return RunConfig.from_dict(meta["config"]), meta["model"]


@dataclass
class SweepRow:
    label: str
    epochs_run: int
    best_epoch: int
    val_auc: float


def format_table(rows: list[SweepRow], first: str) -> str:
    lines = [f"{first:<24} {'epochs':>6} {'best':>5} {'val_auc':>8}"]
    for r in rows:
        lines.append(f"{r.label:<24} {r.epochs_run:>6} {r.best_epoch:>5} {r.val_auc:>8.5f}")
    return "\n".join(lines)


def _best_val_auc(model, va) -> float:
    _, scores, labels = case_scores(model, va)
    return auc(scores, labels)


def optimizer_sweep(cfg: RunConfig, optimizers=OPTIMIZERS, lrs: dict | None = None,
                    on_epoch=None) -> list[SweepRow]:
    """Same data, split and initial weights; one run per optimizer, each
    reporting the validation AUC of its restored best checkpoint."""
    data = prepare(cfg)
    rows = []
    for opt in optimizers:
        run_cfg = replace(cfg, optimizer=opt, lr=(lrs or {}).get(opt, cfg.lr))
        model, hist, _ = run(run_cfg, on_epoch=on_epoch, data=data)
        rows.append(SweepRow(opt, len(hist.records), hist.best_epoch, _best_val_auc(model, data[2])))
    return rows


def benchmark(cfg: RunConfig, on_epoch=None) -> list[SweepRow]:
    """EfficientNet-3D against Multiscale-EfficientNet on one case split."""
    rows = []
    for model_name, label in (("eff3d", "EfficientNet 3D"), ("multiscale", "Multiscale EfficientNet")):
        run_cfg = replace(cfg, model=model_name, modality="T1w" if model_name == "multiscale" else "stack")
        data = prepare(run_cfg)
        model, hist, _ = run(run_cfg, on_epoch=on_epoch, data=data)
        rows.append(SweepRow(label, len(hist.records), hist.best_epoch, _best_val_auc(model, data[2])))
    return rows
