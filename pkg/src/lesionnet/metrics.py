"""ROC-AUC: the pairwise Wilcoxon-Mann-Whitney statistic and trapezoidal
integration of the empirical ROC curve."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DegenerateLabelsError(ValueError):
    """AUC is undefined because one class is empty."""


@dataclass
class ScoredDataset:
    neg: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        self.neg = np.asarray(self.neg, dtype=np.float64).ravel()
        self.pos = np.asarray(self.pos, dtype=np.float64).ravel()
        if len(self.neg) == 0 or len(self.pos) == 0:
            raise DegenerateLabelsError(
                f"degenerate labels: {len(self.neg)} negatives, {len(self.pos)} positives")
        if not (np.all(np.isfinite(self.neg)) and np.all(np.isfinite(self.pos))):
            raise ValueError("scores must be finite")

    @classmethod
    def from_labels(cls, scores, labels) -> "ScoredDataset":
        scores = np.asarray(scores, dtype=np.float64).ravel()
        labels = np.asarray(labels).ravel()
        if scores.shape != labels.shape:
            raise ValueError(f"{scores.size} scores vs {labels.size} labels")
        if not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0 or 1")
        return cls(scores[labels == 0], scores[labels == 1])


def auc_wmw(d: ScoredDataset, ties: str = "half") -> float:
    """Fraction of (negative, positive) pairs ranked correctly.

    ``strict`` counts only ``neg < pos``; ``half`` gives ties half credit.
    Computed from sorted ranks, so it is O(n log n).
    """
    if ties not in ("strict", "half"):
        raise ValueError(f"ties must be 'strict' or 'half', got {ties!r}")
    neg = np.sort(d.neg)
    below = np.searchsorted(neg, d.pos, side="left").astype(np.float64)
    if ties == "half":
        equal = np.searchsorted(neg, d.pos, side="right") - below
        below = below + 0.5 * equal
    return float(below.sum() / (len(d.neg) * len(d.pos)))


def roc_points(d: ScoredDataset) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) from threshold +inf down through every distinct score."""
    scores = np.concatenate([d.neg, d.pos])
    is_pos = np.concatenate([np.zeros(len(d.neg)), np.ones(len(d.pos))])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    tp = np.cumsum(is_pos)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / len(d.pos)]
    fpr = np.r_[0.0, fp / len(d.neg)]
    return fpr, tpr


def auc_trapezoid(d: ScoredDataset) -> float:
    fpr, tpr = roc_points(d)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def auc(scores, labels, ties: str = "half") -> float:
    return auc_wmw(ScoredDataset.from_labels(scores, labels), ties)


def read_scores(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read ``id,score,label`` lines (a header row is optional)."""
    ids, scores, labels = [], [], []
    with open(path, newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if rowno == 1 and row[0].strip().lower() in ("id", "case_id"):
                continue
            if len(row) < 3:
                raise ValueError(f"{path}: row {rowno}: expected id,score,label")
            try:
                score, label = float(row[1]), int(row[2])
            except ValueError:
                raise ValueError(f"{path}: row {rowno}: unparsable score or label") from None
            ids.append(row[0].strip())
            scores.append(score)
            labels.append(label)
    return ids, np.asarray(scores), np.asarray(labels)


def write_scores(path, ids, scores, labels) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", "score", "label"])
        for cid, s, y in zip(ids, scores, labels):
            w.writerow([cid, repr(float(s)), int(y)])
