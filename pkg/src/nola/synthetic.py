"""Seeded coloured-cluster benchmark for desk-scale end-to-end runs.

Every patch of an image carries the same pixel vector

    0.5 + class_colour[c] + ssl_signal[c] + ssl_noise + vlm_nuisance (+ ssl_decoy) + pixel_noise

Class colours sit at evenly spaced hues around grey, so they survive the
strong augmentations. The other pieces are placed relative to the two toy
patch embeddings:

* ``ssl_noise`` lies in the null space of the vision-language patch
  embedding, so the VLM never sees it.
* ``vlm_nuisance`` lies in the null space of the SSL patch embedding. It is
  low-rank and confuses the zero-shot classifier, but a trained classifier
  can learn to ignore it.
* ``ssl_signal`` is a class pattern in the same null space: extra class
  information only the SSL encoder sees.
* ``ssl_decoy`` is added to a small fraction of images. It is invisible to
  the VLM and moves the SSL patch embedding most of the way to another
  class's, so the SSL labeller errs on samples that look ordinary to the VLM.

Class descriptions are bags of vocabulary words picked by their alignment
with the class offsets of clean VLM features, diluted with random words.
Draws are repeated until zero-shot accuracy on a probe set falls in a
moderate band with every class represented.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import DatasetManifest, DescriptionSet, ImageRecord, save_descriptions, save_manifest
from .encoders import EncoderBundle, ToyEncoderConfig, encode_image, encode_text, make_toy_encoders

CLASS_NAMES = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel",
               "india", "juliet", "kilo", "lima")


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    n_train_per_class: int = 150
    n_test_per_class: int = 100
    signal: float = 0.2
    ssl_signal: float = 0.1
    ssl_noise: float = 0.01
    nuisance: float = 0.15
    nuisance_rank: int = 2
    ssl_decoy_fraction: float = 0.05
    ssl_decoy_strength: float = 0.55
    pixel_noise: float = 0.01
    vocab_size: int = 2000
    descriptions_per_class: int = 8
    words_per_description: int = 6
    aligned_fraction: float = 0.5
    top_words: int = 40
    zero_shot_band: tuple[float, float] = (0.5, 0.75)
    min_class_recall: float = 0.2
    max_draws: int = 200
    encoder: ToyEncoderConfig = field(default_factory=ToyEncoderConfig)
    encoder_seed: int = 0

    def __post_init__(self):
        if not 2 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must lie in [2, {len(CLASS_NAMES)}]")


@dataclass
class SyntheticBenchmark:
    root: Path
    manifest: DatasetManifest
    descriptions: DescriptionSet
    bundle: EncoderBundle
    spec: SyntheticSpec
    seed: int

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def descriptions_path(self) -> Path:
        return self.root / "descriptions.json"


def _null_basis(matrix: np.ndarray) -> np.ndarray:
    """Orthonormal basis (columns) of the null space of ``matrix``."""
    _, s, vt = np.linalg.svd(matrix)
    rank = int((s > s.max() * 1e-10).sum())
    return vt[rank:].T


def _tile(per_patch: np.ndarray, cfg: ToyEncoderConfig) -> np.ndarray:
    """[N, p*p*C] patch vectors -> [N, H, W, C] images with every patch identical."""
    p, C = cfg.patch_size, cfg.channels
    g = cfg.image_size // p
    patch = per_patch.reshape(-1, p, p, C)
    return np.tile(patch, (1, g, g, 1))


def sample_images(spec: SyntheticSpec, bundle: EncoderBundle, labels: np.ndarray,
                  rng: np.random.Generator, directions: dict) -> np.ndarray:
    cfg = spec.encoder
    n = len(labels)
    per_patch = 0.5 + directions["signal"][labels] + directions["ssl_signal"][labels]
    z_s = rng.standard_normal((n, directions["ssl_basis"].shape[1])) * spec.ssl_noise
    per_patch = per_patch + z_s @ directions["ssl_basis"].T
    z_v = rng.standard_normal((n, directions["nuisance"].shape[1])) * spec.nuisance
    per_patch = per_patch + z_v @ directions["nuisance"].T
    if spec.ssl_decoy_fraction > 0:
        C = spec.n_classes
        hit = np.flatnonzero(rng.random(n) < spec.ssl_decoy_fraction)
        other = (labels[hit] + rng.integers(1, C, size=len(hit))) % C
        per_patch[hit] += directions["decoys"][labels[hit], other]
    images = _tile(per_patch, cfg)
    images = images + rng.standard_normal(images.shape) * spec.pixel_noise
    return np.clip(images, 0.0, 1.0).astype(np.float32)


def _directions(spec: SyntheticSpec, bundle: EncoderBundle, rng: np.random.Generator) -> dict:
    E_v = bundle.vision_encoder.patch_embed.weight.detach().double().numpy()
    E_s = bundle.ssl_encoder.patch_embed.weight.detach().double().numpy()
    null_v = _null_basis(E_v)
    null_s = _null_basis(E_s)
    # class colours sit at evenly spaced hues around grey: chroma survives crops,
    # flips, blur, rescaling and hue jitter below half the hue spacing
    grey = np.ones(3) / np.sqrt(3)
    u1 = np.array([1.0, -1.0, 0.0]) / np.sqrt(2)
    u2 = np.cross(grey, u1)
    angles = 2 * np.pi * np.arange(spec.n_classes) / spec.n_classes + rng.uniform(0, 2 * np.pi)
    colours = spec.signal * (np.cos(angles)[:, None] * u1 + np.sin(angles)[:, None] * u2)
    p = spec.encoder.patch_size
    signal = np.tile(colours, (1, p * p))
    nuisance = null_s @ np.linalg.qr(rng.standard_normal((null_s.shape[1], spec.nuisance_rank)))[0]
    # class pattern only the SSL encoder sees, with the same per-pixel scale as the colours
    ssl_signal = rng.standard_normal((spec.n_classes, null_v.shape[1])) @ null_v.T
    ssl_signal *= spec.ssl_signal * np.sqrt(p * p) / np.linalg.norm(ssl_signal, axis=1, keepdims=True)
    # decoys[c, o]: pixels invisible to the VLM that move class c's SSL patch embedding the
    # given fraction of the way to class o's
    seen = signal + ssl_signal
    diffs = (seen[None] - seen[:, None]).reshape(-1, seen.shape[1])
    coef = np.linalg.lstsq(E_s @ null_v, E_s @ diffs.T, rcond=None)[0]
    decoys = spec.ssl_decoy_strength * (null_v @ coef).T.reshape(spec.n_classes, spec.n_classes, -1)
    return {"signal": signal, "ssl_signal": ssl_signal, "ssl_basis": null_v, "nuisance": nuisance,
            "decoys": decoys}


def _draw_descriptions(spec: SyntheticSpec, vocab, U: np.ndarray, names, centroids: np.ndarray,
                       rng: np.random.Generator) -> DescriptionSet:
    mean = centroids.mean(axis=0)
    mean_dir = mean / np.linalg.norm(mean)
    targets = centroids - mean
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    per_class = {}
    for c, name in enumerate(names):
        # favour words along this class's offset and away from the shared direction,
        # which would otherwise bias the argmax toward arbitrary classes
        score = U @ targets[c] - np.abs(U @ mean_dir)
        ranked = np.argsort(-score)[: spec.top_words]
        descs = []
        for _ in range(spec.descriptions_per_class):
            words = []
            for _ in range(spec.words_per_description):
                if rng.random() < spec.aligned_fraction:
                    words.append(vocab[int(rng.choice(ranked))])
                else:
                    words.append(vocab[int(rng.integers(spec.vocab_size))])
            descs.append(f"a photo of a {name} with " + " ".join(words))
        per_class[name] = tuple(descs)
    return DescriptionSet("synthetic", ("synthetic description of a(n) {}",), per_class, source="cache_file")


def _descriptions(spec: SyntheticSpec, bundle: EncoderBundle, names, centroids: np.ndarray,
                  probe: tuple[torch.Tensor, np.ndarray], rng: np.random.Generator) -> DescriptionSet:
    """Redraw descriptions until zero-shot accuracy on a probe set lands in the target band.

    Every class must also reach ``min_class_recall`` so the confident-sample
    selection has something to pick for each class.
    """
    from .cde import build_cde, predict  # local: cde imports data, which this module also uses

    vocab = [f"w{i:04d}" for i in range(spec.vocab_size)]
    U = encode_text(bundle, vocab).vectors.double().numpy()
    feats = encode_image(bundle, probe[0])
    lo, hi = spec.zero_shot_band
    best, best_gap = None, np.inf
    for _ in range(spec.max_draws):
        desc = _draw_descriptions(spec, vocab, U, names, centroids, rng)
        pred = predict(build_cde(desc, bundle, names), feats).argmax().numpy()
        acc = float((pred == probe[1]).mean())
        recall = min(float((pred[probe[1] == c] == c).mean()) for c in range(len(names)))
        gap = max(lo - acc, acc - hi, 0.0) + max(spec.min_class_recall - recall, 0.0)
        if gap == 0.0:
            return desc
        if gap < best_gap:
            best, best_gap = desc, gap
    return best


def make_benchmark(root: str | Path, spec: SyntheticSpec = SyntheticSpec(), seed: int = 0) -> SyntheticBenchmark:
    """Write images, manifest and description cache under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    bundle = make_toy_encoders(spec.encoder, spec.encoder_seed)
    rng = np.random.default_rng(seed)
    names = CLASS_NAMES[: spec.n_classes]
    dirs = _directions(spec, bundle, rng)

    clean = torch.from_numpy(np.clip(_tile(0.5 + dirs["signal"] + dirs["ssl_signal"], spec.encoder), 0, 1)
                             .astype(np.float32))
    centroids = encode_image(bundle, clean).vectors.double().numpy()
    probe_labels = np.repeat(np.arange(spec.n_classes), 50)
    probe = torch.from_numpy(sample_images(spec, bundle, probe_labels, rng, dirs))
    descriptions = _descriptions(spec, bundle, names, centroids, (probe, probe_labels), rng)

    splits = {}
    for split, per_class in (("train", spec.n_train_per_class), ("test", spec.n_test_per_class)):
        labels = np.repeat(np.arange(spec.n_classes), per_class)
        labels = labels[rng.permutation(len(labels))]
        images = sample_images(spec, bundle, labels, rng, dirs)
        records = []
        for i, (img, y) in enumerate(zip(images, labels)):
            sid = f"{split}_{i:05d}"
            path = root / "images" / f"{sid}.npy"
            np.save(path, img)
            records.append(ImageRecord(sid, path, int(y)))
        splits[split] = tuple(records)

    manifest = DatasetManifest("synthetic", tuple(names), splits["train"], splits["test"])
    save_manifest(manifest, root / "manifest.json")
    save_descriptions(descriptions, root / "descriptions.json")
    meta = {"seed": seed, "spec": asdict(spec)}
    (root / "synthetic.json").write_text(json.dumps(meta, indent=1), encoding="utf-8")
    return SyntheticBenchmark(root, manifest, descriptions, bundle, spec, seed)


def fisher_ratio(features: torch.Tensor | np.ndarray, labels) -> float:
    """trace(between-class scatter) / trace(within-class scatter)."""
    X = features.detach().double().numpy() if isinstance(features, torch.Tensor) else np.asarray(features, float)
    y = np.asarray(labels)
    mu = X.mean(axis=0)
    sb = sw = 0.0
    for c in np.unique(y):
        Xc = X[y == c]
        mc = Xc.mean(axis=0)
        sb += len(Xc) * float(((mc - mu) ** 2).sum())
        sw += float(((Xc - mc) ** 2).sum())
    return sb / sw
