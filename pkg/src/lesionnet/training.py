"""Binary cross-entropy, optimizers, early stopping and the epoch loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import SampleSet, augment, sample_rng
from .metrics import auc
from .nn import Module
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


class NumericalError(FloatingPointError):
    """Training produced a non-finite gradient or loss."""


def bce_loss(y, p) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(y, dtype=np.float64).ravel()
    p = np.asarray(p, dtype=np.float64).ravel()
    if y.size == 0 or y.size != p.size:
        raise ValueError(f"need matching non-empty y and p, got {y.size} and {p.size}")
    return float(F.bce(Tensor(p), y).data)


# -- optimizers ---------------------------------------------------------------

OPTIMIZERS = ("adam", "sgd", "rmsprop", "adadelta")


@dataclass
class OptimizerState:
    kind: str = "adam"
    eta: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    eps: float = 1e-7
    bias_correction: bool = False
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")


def make_optimizer(kind: str, lr: float, **kw) -> OptimizerState:
    if kind == "adadelta":
        kw.setdefault("rho", 0.95)
    return OptimizerState(kind=kind, eta=lr, **kw)


def optimizer_step(params, grads, s: OptimizerState, names=None) -> None:
    """Update ``params`` (Tensors, in place) from ``grads``.

    Adam follows ``w <- w - eta * m / sqrt(v + eps)`` with the epsilon inside
    the root and no bias correction unless ``s.bias_correction`` is set.
    For Adadelta, ``m`` holds the running mean of squared updates.
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    names = names or [f"param[{i}]" for i in range(len(params))]
    for p, g, name in zip(params, grads, names):
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name}")
    if not s.m:
        s.m = [np.zeros_like(p.data) for p in params]
        s.v = [np.zeros_like(p.data) for p in params]
    s.t += 1
    for i, (p, g) in enumerate(zip(params, grads)):
        w = p.data
        g = g.astype(w.dtype, copy=False)
        m, v = s.m[i], s.v[i]
        if s.kind == "sgd":
            w -= s.eta * g
        elif s.kind == "adam":
            m *= s.beta1
            m += (1 - s.beta1) * g
            v *= s.beta2
            v += (1 - s.beta2) * g * g
            if s.bias_correction:
                mh = m / (1 - s.beta1 ** s.t)
                vh = v / (1 - s.beta2 ** s.t)
                w -= s.eta * mh / (np.sqrt(vh) + s.eps)
            else:
                w -= s.eta * m / np.sqrt(v + s.eps)
        elif s.kind == "rmsprop":
            v *= s.rho
            v += (1 - s.rho) * g * g
            w -= s.eta * g / (np.sqrt(v) + s.eps)
        else:  # adadelta
            v *= s.rho
            v += (1 - s.rho) * g * g
            step = np.sqrt(m + s.eps) / np.sqrt(v + s.eps) * g
            m *= s.rho
            m += (1 - s.rho) * step * step
            w -= s.eta * step


# -- early stopping -----------------------------------------------------------

@dataclass
class EarlyStopState:
    patience: int = 10
    min_delta: float = 1e-6
    best_value: float = -math.inf
    best_epoch: int = -1
    best_weights: dict | None = None
    epochs_since_improve: int = 0
    epoch: int = 0


def early_stop_update(s: EarlyStopState, epoch_val_auc: float, model: Module | None = None) -> str:
    """Record one epoch's validation AUC; return ``"continue"`` or ``"stop"``.

    An improvement must beat the best value by at least ``min_delta``.  On
    stop, the best snapshot is loaded back into ``model``.
    """
    s.epoch += 1
    if epoch_val_auc - s.best_value >= s.min_delta:
        s.best_value = epoch_val_auc
        s.best_epoch = s.epoch
        s.epochs_since_improve = 0
        if model is not None:
            s.best_weights = model.state_dict()
    else:
        s.epochs_since_improve += 1
    if s.epochs_since_improve >= s.patience:
        if model is not None and s.best_weights is not None:
            model.load_state_dict(s.best_weights)
        return "stop"
    return "continue"


# -- epoch loop ---------------------------------------------------------------

@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    epochs: int = 100
    batch_size: int = 4
    patience: int = 10
    seed: int = 0
    augment: bool = True
    bias_correction: bool = False
    min_delta: float = 1e-6
    track_train_auc: bool = False


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float
    train_auc: float | None = None


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_auc: float = float("nan")
    stopped_early: bool = False

    def csv_lines(self) -> list[str]:
        return ["epoch,train_loss,val_auc"] + [
            f"{r.epoch},{r.train_loss:.6f},{r.val_auc:.6f}" for r in self.records]


def predict_logits(model: Module, samples: SampleSet, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch_size):
            out.append(model(samples.x[i:i + batch_size]).data.reshape(-1))
    return np.concatenate(out).astype(np.float64)


def case_scores(model: Module, samples: SampleSet, batch_size: int = 16):
    """Per-case probability (mean over a case's samples) and label."""
    probs = F._sigmoid(predict_logits(model, samples, batch_size))
    ids = samples.cases()
    index = {c: i for i, c in enumerate(ids)}
    total = np.zeros(len(ids))
    count = np.zeros(len(ids))
    label = np.zeros(len(ids), dtype=int)
    for p, c, y in zip(probs, samples.case_ids, samples.y):
        total[index[c]] += p
        count[index[c]] += 1
        label[index[c]] = y
    return ids, total / count, label


def evaluate_auc(model: Module, samples: SampleSet) -> float:
    _, scores, labels = case_scores(model, samples)
    return auc(scores, labels)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # batch norm needs more than one sample in the last batch
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def train(model: Module, train_set: SampleSet, val_set: SampleSet, config: TrainConfig,
          on_epoch=None) -> History:
    """Minibatch training with validation-AUC early stopping.

    The model ends holding the weights of its best validation epoch.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("train and validation splits must be non-empty")
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    opt = make_optimizer(config.optimizer, config.lr, bias_correction=config.bias_correction)
    stopper = EarlyStopState(patience=config.patience, min_delta=config.min_delta)
    history = History()
    dtype = getattr(model, "dtype", np.float32)
    for epoch in range(1, config.epochs + 1):
        model.train()
        rng = np.random.default_rng([config.seed, epoch])
        losses, sizes = [], []
        for idx in _batches(len(train_set), config.batch_size, rng):
            xb = train_set.x[idx]
            if config.augment:
                xb = np.stack([augment(train_set.x[i], sample_rng(config.seed, train_set.case_ids[i], epoch, int(i)))
                               for i in idx])
            yb = train_set.y[idx].astype(np.float64)
            model.zero_grad()
            loss = F.bce_with_logits(model(xb.astype(dtype, copy=False)), yb)
            if not np.isfinite(loss.data):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            optimizer_step(params, grads, opt, names)
            losses.append(float(loss.data))
            sizes.append(len(idx))
        train_loss = float(np.average(losses, weights=sizes))
        val_auc = evaluate_auc(model, val_set)
        rec = EpochRecord(epoch, train_loss, val_auc,
                          evaluate_auc(model, train_set) if config.track_train_auc else None)
        history.records.append(rec)
        log.info("epoch %d loss %.5f val_auc %.5f", epoch, train_loss, val_auc)
        if on_epoch is not None:
            on_epoch(rec)
        if early_stop_update(stopper, val_auc, model) == "stop":
            history.stopped_early = True
            break
    if stopper.best_weights is not None:
        model.load_state_dict(stopper.best_weights)
    history.best_epoch = stopper.best_epoch
    history.best_val_auc = stopper.best_value
    return history
