"""Temperature-scaled contrastive probabilities, loss and evaluation metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, l2_normalize, log_softmax_nll, mul, reshape, scale, softmax_lastdim, total
from .errors import ConfigError

DEFAULT_TAU = 0.07


@dataclass
class SimilarityMatrix:
    scores: Tensor  # [B, K] cosine similarities
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")

    @property
    def logits(self) -> Tensor:
        return scale(self.scores, 1.0 / self.tau)


def similarity(image_feats: Tensor, text_feats: Tensor, tau: float = DEFAULT_TAU) -> SimilarityMatrix:
    """Cosine scores between images ``[B, d]`` and texts ``[K, d]`` or ``[B, K, d]``.

    Per-image text features (``[B, K, d]``) arise from image-conditioned prompts.
    """
    img = l2_normalize(image_feats, axis=-1)
    txt = l2_normalize(text_feats, axis=-1)
    if txt.data.ndim == 2:
        txt = reshape(txt, (1,) + txt.shape)
    b, d = img.shape
    scores = total(mul(reshape(img, (b, 1, d)), txt), axis=-1)
    return SimilarityMatrix(scores, tau)


def class_probabilities(sim: SimilarityMatrix, row: int) -> Tensor:
    b = sim.scores.shape[0]
    if not 0 <= row < b:
        raise IndexError(f"row {row} out of range [0, {b})")
    return softmax_lastdim(Tensor(sim.scores.data[row] / sim.tau))


def contrastive_loss(sim: SimilarityMatrix, targets: Sequence[int]) -> Tensor:
    """Mean negative log-probability of each row's target column."""
    return log_softmax_nll(sim.logits, targets)


def _check_targets(sim: SimilarityMatrix, targets) -> np.ndarray:
    t = np.asarray(targets, dtype=np.int64)
    b, k = sim.scores.shape
    if t.shape != (b,):
        raise IndexError(f"{b} rows but {t.shape[0] if t.ndim else 0} targets")
    if np.any(t < 0) or np.any(t >= k):
        raise IndexError(f"target out of range [0, {k})")
    return t


def top1(sim: SimilarityMatrix) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest column
    return np.argmax(sim.scores.data, axis=-1)


def recall_at_1(sim: SimilarityMatrix, targets: Sequence[int]) -> float:
    t = _check_targets(sim, targets)
    if t.size == 0:
        return 0.0
    return float(np.mean(top1(sim) == t))


def harmonic_mean(base: float, new: float) -> float:
    if base <= 0 or new <= 0:
        raise ValueError(f"harmonic mean needs positive inputs, got ({base}, {new})")
    return 2.0 * base * new / (base + new)


@dataclass
class MetricReport:
    recall_at_1: float
    accuracy: float
    loss: float
    per_class: dict[int, float] = field(default_factory=dict)
    # metadata for the CSV row
    run_id: str = ""
    head: str = ""
    Z: int = 0
    R: int = 0
    alpha_mode: str = "dynamic"
    epoch: int = 0
    base_acc: float = float("nan")
    new_acc: float = float("nan")
    H: float = float("nan")

    CSV_FIELDS = ("run_id", "head", "Z", "R", "alpha_mode", "epoch", "loss",
                  "recall_at_1", "accuracy", "base_acc", "new_acc", "H")

    def row(self) -> dict[str, object]:
        return {k: getattr(self, k) for k in self.CSV_FIELDS}

    def to_dict(self) -> dict[str, object]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        d["per_class"] = {int(k): v for k, v in d.get("per_class", {}).items()}
        return cls(**d)


def metric_report(sim: SimilarityMatrix, targets: Sequence[int], labels: Sequence[int] | None = None,
                  **meta) -> MetricReport:
    """Loss, R@1 and accuracy for one scored set.

    ``labels`` are the class ids of the rows, used only for the per-class table.
    """
    t = _check_targets(sim, targets)
    hits = top1(sim) == t
    labels = t if labels is None else np.asarray(labels)
    per_class = {int(c): float(hits[labels == c].mean()) for c in np.unique(labels)}
    loss = float(contrastive_loss(sim, t).item()) if t.size else float("nan")
    r1 = float(hits.mean()) if t.size else 0.0
    return MetricReport(recall_at_1=r1, accuracy=r1, loss=loss, per_class=per_class, **meta)


def append_csv(path: str | Path, reports: Sequence[MetricReport]) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricReport.CSV_FIELDS)
        if new:
            w.writeheader()
        for r in reports:
            w.writerow({k: (_fmt(v)) for k, v in r.row().items()})


def _fmt(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v
