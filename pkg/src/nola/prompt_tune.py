"""Visual prompt tuning supervised by the labelling network.

Each training batch is seen twice: the weak (identity) view is labelled by
the frozen DL network, and the strong view goes through the prompted vision
encoder and the trainable class-embedding classifier. Only the prompt tokens
and the classifier rows are optimized.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import torch
import torch.nn as nn

from .augment import STRONG_OPS, AugmentationPipeline, StrongParams, strong_augment, weak_augment
from .cde import DEFAULT_LOGIT_SCALE, CDEClassifier, Metrics, cosine_logits, predict, true_labels
from .data import DatasetManifest, ImageBatch, iterate_batches, iterate_records
from .dl import DLNetwork, dl_predict, make_optimizer, smoothed_cross_entropy
from .encoders import EncoderBundle, PromptSet, encode_image, encode_image_prompted
from .errors import DimMismatch, EmptySplit, UntrainedDL
from .labels import label_guard

log = logging.getLogger(__name__)

PRESETS = {
    "preset_main": {"lr": 2e-3, "optimizer": "adamw"},
    "preset_suppl": {"lr": 4e-3, "optimizer": "adam"},
}


@dataclass
class PromptTuneConfig:
    num_prompts: int = 16
    lr: float = 2e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    batch_size: int = 512
    epochs: int = 30
    label_smoothing: float = 0.1
    logit_scale: float = DEFAULT_LOGIT_SCALE
    train_prompts: bool = True
    train_classifier: bool = True
    soft_targets: bool = False
    pseudo_labeller: str = "dl"  # "dl" or "cde"
    patience: int | None = None
    augment: StrongParams = field(default_factory=StrongParams)
    seed: int = 0

    def __post_init__(self):
        if self.num_prompts < 0 or self.batch_size < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("num_prompts, epochs and lr must be >= 0 and batch_size >= 1")
        if self.pseudo_labeller not in ("dl", "cde"):
            raise ValueError("pseudo_labeller must be 'dl' or 'cde'")
        if isinstance(self.augment, dict):
            self.augment = StrongParams(**{k: tuple(v) if isinstance(v, list) else v
                                           for k, v in self.augment.items()})

    @classmethod
    def preset(cls, name: str = "preset_main", **overrides) -> "PromptTuneConfig":
        return cls(**{**PRESETS[name], **overrides})

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TunedModel:
    prompts: PromptSet
    classifier: CDEClassifier
    bundle: EncoderBundle | None = field(default=None, repr=False)
    log: list[dict] = field(default_factory=list)
    config: PromptTuneConfig | None = None


def tuning_loss(bundle: EncoderBundle, prompt_tokens: torch.Tensor | None, weights: torch.Tensor,
                pixels: torch.Tensor, targets: torch.Tensor, epsilon: float,
                logit_scale: float = DEFAULT_LOGIT_SCALE) -> torch.Tensor:
    """Smoothed CE of the prompted cosine classifier against fixed targets."""
    feats = encode_image_prompted(bundle, pixels, prompt_tokens).vectors
    return smoothed_cross_entropy(cosine_logits(weights, feats, logit_scale), targets, epsilon)


def make_labeller(config: PromptTuneConfig, bundle: EncoderBundle, dl: DLNetwork | None,
                  init_classifier: CDEClassifier) -> Callable[[ImageBatch], torch.Tensor]:
    """Map a weak-view batch to targets: class indices, or distributions when soft."""
    if config.pseudo_labeller == "cde":
        frozen = init_classifier.copy()

        def probs(batch):
            return predict(frozen, encode_image(bundle, batch), config.logit_scale).probs
    else:
        if dl is None or not dl.head.trained:
            raise UntrainedDL("prompt tuning needs a trained DL network")

        def probs(batch):
            return dl_predict(dl, batch).probs

    def label(batch: ImageBatch) -> torch.Tensor:
        with torch.no_grad():
            p = probs(batch)
        return p.detach() if config.soft_targets else p.argmax(dim=1)

    return label


def tune_prompts(bundle: EncoderBundle, init_classifier: CDEClassifier, dl: DLNetwork | None,
                 manifest: DatasetManifest, config: PromptTuneConfig = PromptTuneConfig(),
                 *, eval_each_epoch: bool = False) -> TunedModel:
    if init_classifier.d != bundle.d_vlm:
        raise DimMismatch(f"classifier dim {init_classifier.d} != encoder dim {bundle.d_vlm}")
    train = manifest.train_items
    if not train:
        raise EmptySplit("train split is empty")
    labeller = make_labeller(config, bundle, dl, init_classifier)
    dtype = next(bundle.vision_encoder.parameters()).dtype

    prompts = nn.Parameter(PromptSet.init(config.num_prompts, bundle.width, config.seed, dtype).tokens,
                           requires_grad=config.train_prompts)
    weights = nn.Parameter(init_classifier.weights.detach().clone().to(dtype),
                           requires_grad=config.train_classifier)
    trainable = [p for p in (prompts, weights) if p.requires_grad]
    opt = make_optimizer(config.optimizer, trainable, config.lr, config.weight_decay) if trainable else None
    batch_size = min(config.batch_size, len(train))
    pipeline = AugmentationPipeline(STRONG_OPS, config.augment, config.seed)
    targets_cache: dict[str, torch.Tensor] = {}

    history: list[dict] = []
    best, stale = float("inf"), 0
    start = time.perf_counter()
    with label_guard.training("tune_prompts"):
        for epoch in range(config.epochs):
            total, n = 0.0, 0
            batches = iterate_batches(manifest, "train", batch_size, seed=config.seed * 7919 + epoch,
                                      image_size=bundle.image_size)
            for b, batch in enumerate(batches):
                weak = weak_augment(batch)
                missing = [i for i, sid in enumerate(weak.ids) if sid not in targets_cache]
                if missing:
                    sub = ImageBatch(tuple(weak.ids[i] for i in missing), weak.pixels[missing])
                    for sid, t in zip(sub.ids, labeller(sub)):
                        targets_cache[sid] = t
                targets = torch.stack([targets_cache[sid] for sid in weak.ids])
                strong = strong_augment(batch, pipeline, seed=(config.seed * 1_000_003 + epoch) * 65_537 + b)
                loss = tuning_loss(bundle, prompts, weights, strong.pixels, targets,
                                   config.label_smoothing, config.logit_scale)
                if opt is not None:
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                total += loss.item() * batch.size
                n += batch.size
            row = {"epoch": epoch + 1, "loss": total / n, "test_top1": None,
                   "wall_seconds": time.perf_counter() - start}
            if eval_each_epoch and manifest.test_items and all(r.has_label for r in manifest.test_items):
                snapshot = _model(prompts, weights, init_classifier, bundle, history, config)
                row["test_top1"] = evaluate(snapshot, bundle, manifest).top1
            history.append(row)
            log.info("tune epoch %d loss %.4f", epoch + 1, row["loss"])
            if config.patience is not None:
                if row["loss"] < best - 1e-6:
                    best, stale = row["loss"], 0
                else:
                    stale += 1
                    if stale >= config.patience:
                        log.info("early stop after epoch %d", epoch + 1)
                        break
    return _model(prompts, weights, init_classifier, bundle, history, config)


def _model(prompts, weights, init_classifier, bundle, history, config) -> TunedModel:
    w = weights.detach().clone()
    w = w / w.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return TunedModel(PromptSet(prompts.detach().clone()),
                      CDEClassifier(w.float(), init_classifier.class_names, row_normalized=True),
                      bundle, list(history), config)


def evaluate(model: TunedModel, bundle: EncoderBundle, manifest: DatasetManifest,
             batch_size: int = 256) -> Metrics:
    """Top-1 on the test split through the prompted encoder; no augmentation."""
    records = manifest.test_items
    if not records:
        raise EmptySplit("test split is empty")
    preds = []
    scale = model.config.logit_scale if model.config else DEFAULT_LOGIT_SCALE
    with torch.no_grad():
        for batch in iterate_records(records, batch_size, seed=None, image_size=bundle.image_size):
            feats = encode_image_prompted(bundle, batch, model.prompts)
            preds.extend(predict(model.classifier, feats, scale).argmax().tolist())
    return Metrics.from_predictions(true_labels(records), preds, manifest.class_names)
