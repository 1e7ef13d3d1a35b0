"""Class-description embedding classifier and zero-shot prediction."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .data import DatasetManifest, DescriptionSet, ImageRecord, iterate_records
from .encoders import EmbeddingBatch, EncoderBundle, encode_image, encode_text, l2_normalize
from .errors import DegenerateClass, DimMismatch, EmptySplit
from .labels import label_guard

DEFAULT_LOGIT_SCALE = 100.0
DEGENERATE_NORM = 1e-8


@dataclass
class CDEClassifier:
    weights: torch.Tensor  # [C, d]
    class_names: tuple[str, ...]
    row_normalized: bool = True

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.class_names):
            raise DimMismatch(f"weights {tuple(self.weights.shape)} vs {len(self.class_names)} classes")
        if not torch.isfinite(self.weights).all():
            raise ValueError("classifier weights contain NaN/Inf")

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "CDEClassifier":
        return CDEClassifier(self.weights.detach().clone(), self.class_names, self.row_normalized)


@dataclass
class ProbabilityBatch:
    probs: torch.Tensor  # [B, C]
    logits: torch.Tensor  # [B, C]
    logit_scale: float

    def argmax(self) -> torch.Tensor:
        return self.logits.argmax(dim=1)


@dataclass
class Metrics:
    top1: float
    per_class: list[float]
    confusion: np.ndarray  # [C, C], rows = true class, cols = predicted
    n: int
    class_names: tuple[str, ...] = field(default=())

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int],
                         class_names: Sequence[str]) -> "Metrics":
        C = len(class_names)
        conf = np.zeros((C, C), dtype=np.int64)
        np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
        support = conf.sum(axis=1)
        per_class = [float(conf[c, c] / support[c]) if support[c] else float("nan") for c in range(C)]
        n = int(conf.sum())
        return cls(float(np.trace(conf) / n), per_class, conf, n, tuple(class_names))

    def to_json(self) -> dict:
        return {"top1": self.top1, "n": self.n,
                "per_class": dict(zip(self.class_names, self.per_class)),
                "confusion": self.confusion.tolist()}


def build_cde(descriptions: DescriptionSet, bundle: EncoderBundle,
              class_names: Sequence[str] | None = None) -> CDEClassifier:
    """Row c is the renormalized mean of class c's normalized description embeddings."""
    names = tuple(class_names) if class_names is not None else tuple(descriptions.per_class)
    rows = []
    for name, descs in zip(names, descriptions.for_classes(names)):
        emb = encode_text(bundle, list(descs)).vectors.double()
        # sorted summation makes the row independent of description order
        emb = emb[np.lexsort(emb.numpy().T[::-1])]
        mean = emb.sum(dim=0) / emb.shape[0]
        norm = float(mean.norm())
        if norm < DEGENERATE_NORM:
            raise DegenerateClass(name, norm)
        rows.append(mean / norm)
    return CDEClassifier(torch.stack(rows).float(), names, row_normalized=True)


def cosine_logits(weights: torch.Tensor, features: torch.Tensor, logit_scale: float) -> torch.Tensor:
    return logit_scale * features @ l2_normalize(weights).T


def predict(classifier: CDEClassifier, features: EmbeddingBatch | torch.Tensor,
            logit_scale: float = DEFAULT_LOGIT_SCALE) -> ProbabilityBatch:
    f = features.vectors if isinstance(features, EmbeddingBatch) else features
    if f.shape[-1] != classifier.d:
        raise DimMismatch(f"feature dim {f.shape[-1]} != classifier dim {classifier.d}")
    if logit_scale <= 0:
        raise ValueError("logit_scale must be positive")
    f = l2_normalize(f)
    logits = cosine_logits(classifier.weights.to(f.dtype), f, logit_scale)
    return ProbabilityBatch(torch.softmax(logits, dim=1), logits, float(logit_scale))


def predict_records(classifier: CDEClassifier, bundle: EncoderBundle, records: Sequence[ImageRecord],
                    logit_scale: float = DEFAULT_LOGIT_SCALE, batch_size: int = 256) -> tuple[list[str], ProbabilityBatch]:
    """Zero-shot probabilities for ``records`` in their given order."""
    ids, probs, logits = [], [], []
    for batch in iterate_records(records, batch_size, seed=None, image_size=bundle.image_size):
        out = predict(classifier, encode_image(bundle, batch), logit_scale)
        ids.extend(batch.ids)
        probs.append(out.probs)
        logits.append(out.logits)
    return ids, ProbabilityBatch(torch.cat(probs), torch.cat(logits), float(logit_scale))


def true_labels(records: Sequence[ImageRecord]) -> list[int]:
    with label_guard.evaluation():
        labels = [r.true_label for r in records]
    if any(l is None for l in labels):
        raise ValueError("evaluation needs every record to carry a label")
    return labels


def zero_shot_eval(classifier: CDEClassifier, bundle: EncoderBundle, manifest: DatasetManifest,
                   split: str = "test", logit_scale: float = DEFAULT_LOGIT_SCALE) -> Metrics:
    records = manifest.split(split)
    if not records:
        raise EmptySplit(f"split {split!r} is empty")
    _, out = predict_records(classifier, bundle, records, logit_scale)
    return Metrics.from_predictions(true_labels(records), out.argmax().tolist(), manifest.class_names)
