"""Smoothed cross-entropy and the SSL-feature labelling network."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .cde import Metrics, ProbabilityBatch, true_labels
from .data import DatasetManifest, ImageBatch, iterate_records
from .encoders import EncoderBundle, encode_ssl
from .errors import EmptyPseudoSet, EmptySplit, InvalidEpsilon, LabelOutOfRange, UntrainedHead
from .labels import label_guard
from .pseudo import PseudoLabelSet

log = logging.getLogger(__name__)


def smoothed_cross_entropy(inputs: torch.Tensor, targets: torch.Tensor, epsilon: float = 0.1,
                           *, from_probs: bool = False) -> torch.Tensor:
    """Mean over the batch of ``-sum_c q_c log p_c`` with ``q = (1 - eps) * y + eps / C``.

    ``inputs`` are logits unless ``from_probs``. ``targets`` are integer labels
    of shape [B] or a target distribution of shape [B, C].
    """
    if not 0.0 <= epsilon < 1.0:
        raise InvalidEpsilon(f"epsilon must lie in [0, 1), got {epsilon}")
    C = inputs.shape[-1]
    if from_probs:
        log_p = torch.log(inputs.clamp_min(torch.finfo(inputs.dtype).tiny))
    else:
        log_p = torch.log_softmax(inputs, dim=-1)
    if targets.ndim == 1:
        if targets.numel() and (targets.min() < 0 or targets.max() >= C):
            raise LabelOutOfRange(f"targets must lie in [0, {C})")
        y = torch.zeros_like(log_p).scatter_(1, targets.long()[:, None], 1.0)
    else:
        y = targets.to(log_p.dtype)
    q = (1.0 - epsilon) * y + epsilon / C
    return -(q * log_p).sum(dim=-1).mean()


class AlignmentHead(nn.Module):
    """Linear map (or one-hidden-layer MLP) from SSL features to class logits."""

    def __init__(self, d_in: int, num_classes: int, hidden: int = 0, seed: int = 0):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        if hidden:
            self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.GELU(), nn.Linear(hidden, num_classes))
        else:
            self.net = nn.Linear(d_in, num_classes)
        with torch.no_grad():
            for m in self.net.modules():
                if isinstance(m, nn.Linear):
                    bound = 1.0 / math.sqrt(m.in_features)
                    m.weight.copy_((torch.rand(m.weight.shape, generator=g) * 2 - 1) * bound)
                    m.bias.copy_((torch.rand(m.bias.shape, generator=g) * 2 - 1) * bound)
        self.d_in = d_in
        self.num_classes = num_classes
        self.hidden = hidden
        self.trained = False

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features.to(next(self.parameters()).dtype))


@dataclass
class AlignTrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 32
    label_smoothing: float = 0.1
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    hidden: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0, lr and batch_size positive")
        if not 0 <= self.label_smoothing < 1:
            raise InvalidEpsilon("label_smoothing must lie in [0, 1)")


@dataclass
class DLNetwork:
    ssl_encoder: nn.Module
    head: AlignmentHead
    loss_log: list[float] = field(default_factory=list)


def make_optimizer(name: str, params, lr: float, weight_decay: float = 0.01) -> torch.optim.Optimizer:
    name = name.lower()
    if name == "adamw":
        return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9)
    raise ValueError(f"unknown optimizer {name!r}")


def ssl_features(bundle: EncoderBundle, manifest: DatasetManifest, ids, batch_size: int = 256) -> torch.Tensor:
    records = [manifest.record(i) for i in ids]
    feats = [encode_ssl(bundle, b).vectors
             for b in iterate_records(records, batch_size, seed=None, image_size=bundle.image_size)]
    return torch.cat(feats)


def train_alignment(bundle: EncoderBundle, pseudo: PseudoLabelSet, manifest: DatasetManifest,
                    config: AlignTrainConfig = AlignTrainConfig()) -> DLNetwork:
    """Fit the alignment head on frozen SSL features of the pseudo-labelled samples."""
    if not len(pseudo):
        raise EmptyPseudoSet("no pseudo-labelled samples to train on")
    C = manifest.num_classes
    labels = torch.tensor(pseudo.labels, dtype=torch.long)
    if labels.min() < 0 or labels.max() >= C:
        raise LabelOutOfRange(f"pseudo labels must lie in [0, {C})")

    with label_guard.training("train_alignment"):
        feats = ssl_features(bundle, manifest, pseudo.ids)
        head = AlignmentHead(bundle.d_ssl, C, config.hidden, seed=config.seed).to(feats.dtype)
        opt = make_optimizer(config.optimizer, head.parameters(), config.lr, config.weight_decay)
        rng = np.random.default_rng(config.seed)
        losses = []
        for epoch in range(config.epochs):
            order = torch.from_numpy(rng.permutation(len(labels)))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                idx = order[start:start + config.batch_size]
                loss = smoothed_cross_entropy(head(feats[idx]), labels[idx], config.label_smoothing)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            losses.append(total / len(order))
            log.debug("align epoch %d loss %.4f", epoch + 1, losses[-1])
    head.trained = True
    for p in head.parameters():
        p.requires_grad_(False)
    return DLNetwork(bundle.ssl_encoder, head, losses)


def dl_predict(dl: DLNetwork, batch: ImageBatch | torch.Tensor) -> ProbabilityBatch:
    if not dl.head.trained:
        raise UntrainedHead("alignment head has not been trained")
    px = batch.pixels if isinstance(batch, ImageBatch) else batch
    with torch.no_grad():
        feats = dl.ssl_encoder(px.to(next(dl.ssl_encoder.parameters()).dtype))
        logits = dl.head(feats)
    return ProbabilityBatch(torch.softmax(logits, dim=1), logits, 1.0)


def head_accuracy(dl: DLNetwork, features: torch.Tensor, labels) -> float:
    with torch.no_grad():
        pred = dl.head(features).argmax(dim=1)
    return float((pred == torch.as_tensor(labels)).double().mean())


def evaluate_dl(dl: DLNetwork, bundle: EncoderBundle, manifest: DatasetManifest, split: str = "test",
                batch_size: int = 256) -> Metrics:
    """Top-1 of the labelling network's argmax on ``split``."""
    records = manifest.split(split)
    if not records:
        raise EmptySplit(f"split {split!r} is empty")
    preds = []
    for batch in iterate_records(records, batch_size, seed=None, image_size=bundle.image_size):
        preds.extend(dl_predict(dl, batch).argmax().tolist())
    return Metrics.from_predictions(true_labels(records), preds, manifest.class_names)
