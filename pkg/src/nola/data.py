"""Dataset manifests, description caches and deterministic image batching."""

from __future__ import annotations

import functools
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
from PIL import Image

from .errors import (
    EmptyClassList,
    EmptySplit,
    MissingClass,
    MissingFile,
    ParseError,
    SchemaViolation,
)
from .labels import label_guard

log = logging.getLogger(__name__)

DEFAULT_IMAGE_SIZE = 224
SPLITS = ("train", "test")


@dataclass(frozen=True)
class ImageRecord:
    id: str
    path: Path
    _label: int | None = field(default=None, repr=False)

    @property
    def true_label(self) -> int | None:
        label_guard.check()
        return self._label

    @property
    def has_label(self) -> bool:
        return self._label is not None


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    class_names: tuple[str, ...]
    train_items: tuple[ImageRecord, ...]
    test_items: tuple[ImageRecord, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str) -> tuple[ImageRecord, ...]:
        if name == "train":
            return self.train_items
        if name == "test":
            return self.test_items
        raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")

    @functools.cached_property
    def _by_id(self) -> dict[str, ImageRecord]:
        return {r.id: r for r in self.train_items + self.test_items}

    def record(self, sample_id: str) -> ImageRecord:
        return self._by_id[sample_id]


def _records(raw, split: str, n_classes: int, root: Path) -> tuple[ImageRecord, ...]:
    if not isinstance(raw, list):
        raise SchemaViolation(split, "must be a list of records")
    out = []
    for i, item in enumerate(raw):
        where = f"{split}[{i}]"
        if not isinstance(item, dict):
            raise SchemaViolation(where, "record must be an object")
        for key in ("id", "path"):
            if not isinstance(item.get(key), str) or not item[key]:
                raise SchemaViolation(f"{where}.{key}", "missing or not a string")
        label = item.get("label")
        if label is not None:
            if isinstance(label, bool) or not isinstance(label, int) or not 0 <= label < n_classes:
                raise SchemaViolation(f"{where}.label", f"must be an integer in [0, {n_classes})")
        path = Path(item["path"])
        if not path.is_absolute():
            path = root / path
        if not path.exists():
            raise MissingFile(f"{where}.path: {path}")
        out.append(ImageRecord(item["id"], path, label))
    return tuple(out)


def parse_manifest(data: Mapping, root: Path) -> DatasetManifest:
    if not isinstance(data, Mapping):
        raise SchemaViolation("<root>", "manifest must be a JSON object")
    name = data.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaViolation("name", "missing or not a string")
    classes = data.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) and c for c in classes):
        raise SchemaViolation("classes", "must be a list of non-empty strings")
    if not classes:
        raise EmptyClassList(f"manifest {name!r} lists no classes")
    if len(set(classes)) != len(classes):
        dup = sorted({c for c in classes if classes.count(c) > 1})
        raise SchemaViolation("classes", f"duplicate class names {dup}")
    if len(classes) < 2:
        raise SchemaViolation("classes", "at least two classes are required")
    train = _records(data.get("train", []), "train", len(classes), root)
    test = _records(data.get("test", []), "test", len(classes), root)
    ids = [r.id for r in train + test]
    if len(set(ids)) != len(ids):
        raise SchemaViolation("id", "record ids must be unique across train and test")
    return DatasetManifest(name, tuple(classes), train, test)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation("<root>", f"invalid JSON: {exc}") from exc
    return parse_manifest(data, path.parent)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``manifest`` as JSON, with image paths relative to ``path`` where possible."""
    path = Path(path)
    root = path.parent.resolve()

    def rec(r: ImageRecord) -> dict:
        p = r.path.resolve()
        try:
            p = p.relative_to(root)
        except ValueError:
            pass
        d = {"id": r.id, "path": str(p)}
        if r._label is not None:
            d["label"] = r._label
        return d

    payload = {
        "name": manifest.name,
        "classes": list(manifest.class_names),
        "train": [rec(r) for r in manifest.train_items],
        "test": [rec(r) for r in manifest.test_items],
    }
    path.write_text(json.dumps(payload, indent=1), encoding="utf-8")
    return path


# -- descriptions -----------------------------------------------------------


@dataclass(frozen=True)
class DescriptionSet:
    dataset: str
    templates: tuple[str, ...]
    per_class: Mapping[str, tuple[str, ...]]
    source: str = "cache_file"  # or "llm_client"

    def __post_init__(self):
        for name, descs in self.per_class.items():
            if not descs:
                raise SchemaViolation(f"classes.{name}", "needs at least one description")
            if any(not isinstance(d, str) or not d.strip() for d in descs):
                raise SchemaViolation(f"classes.{name}", "empty description string")

    @property
    def counts(self) -> dict[str, int]:
        return {c: len(d) for c, d in self.per_class.items()}

    @property
    def k(self) -> int | None:
        """Descriptions per class when uniform, else ``None``."""
        sizes = set(self.counts.values())
        return sizes.pop() if len(sizes) == 1 else None

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def for_classes(self, class_names: Sequence[str]) -> list[tuple[str, ...]]:
        missing = [c for c in class_names if c not in self.per_class]
        if missing:
            raise MissingClass(missing)
        return [self.per_class[c] for c in class_names]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "templates": list(self.templates),
            "classes": {c: list(d) for c, d in self.per_class.items()},
        }

    def __eq__(self, other):
        if not isinstance(other, DescriptionSet):
            return NotImplemented
        return (self.dataset, self.templates, dict(self.per_class)) == (
            other.dataset, other.templates, dict(other.per_class))

    __hash__ = None


def save_descriptions(descriptions: DescriptionSet, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(descriptions.to_json(), indent=1, ensure_ascii=False), encoding="utf-8")
    return path


def load_descriptions(path: str | Path, manifest: DatasetManifest) -> DescriptionSet:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("classes"), dict):
        raise ParseError(f"{path}: expected an object with a 'classes' mapping")
    classes = data["classes"]
    missing = [c for c in manifest.class_names if not classes.get(c)]
    if missing:
        raise MissingClass(missing)
    for name, descs in classes.items():
        if not isinstance(descs, list):
            raise ParseError(f"{path}: classes.{name} must be a list")
    per_class = {c: tuple(classes[c]) for c in manifest.class_names}
    return DescriptionSet(
        dataset=str(data.get("dataset", manifest.name)),
        templates=tuple(data.get("templates", ())),
        per_class=per_class,
        source="cache_file",
    )


def fill_template(template: str, class_name: str) -> str:
    return template.replace("{}", class_name)


def add_prompt_templates(descriptions: DescriptionSet, templates: Sequence[str]) -> DescriptionSet:
    """Append hand-written prompt templates (e.g. ``"a photo of a {}."``) as extra descriptions."""
    per_class = {
        c: tuple(d) + tuple(fill_template(t, c) for t in templates)
        for c, d in descriptions.per_class.items()
    }
    return DescriptionSet(descriptions.dataset, descriptions.templates + tuple(templates),
                          per_class, descriptions.source)


# -- images -----------------------------------------------------------------


@dataclass(frozen=True)
class ImageBatch:
    ids: tuple[str, ...]
    pixels: torch.Tensor  # [B, H, W, C] float32 in [0, 1]

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be [B, H, W, C], got {tuple(self.pixels.shape)}")
        if len(self.ids) != self.pixels.shape[0] or not self.ids:
            raise ValueError("ids must be non-empty and match the batch dimension")

    @property
    def size(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)


@functools.lru_cache(maxsize=8192)
def _read_image(path: str, size: int) -> np.ndarray:
    if path.endswith(".npy"):
        arr = np.load(path)
        if arr.dtype == np.uint8:
            arr = arr.astype(np.float32) / 255.0
        arr = np.asarray(arr, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[..., None]
        if arr.shape[0] != size or arr.shape[1] != size:
            t = torch.from_numpy(np.ascontiguousarray(arr)).permute(2, 0, 1)[None]
            t = torch.nn.functional.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
            arr = t[0].permute(1, 2, 0).numpy()
    else:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BICUBIC)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = np.clip(arr, 0.0, 1.0)
    arr.setflags(write=False)
    return arr


def load_pixels(records: Sequence[ImageRecord], image_size: int = DEFAULT_IMAGE_SIZE,
                workers: int = 0) -> torch.Tensor:
    paths = [str(r.path) for r in records]
    if workers > 0:
        with ThreadPoolExecutor(workers) as pool:
            arrays = list(pool.map(lambda p: _read_image(p, image_size), paths))
    else:
        arrays = [_read_image(p, image_size) for p in paths]
    return torch.from_numpy(np.stack(arrays))


def make_batch(records: Sequence[ImageRecord], image_size: int = DEFAULT_IMAGE_SIZE) -> ImageBatch:
    return ImageBatch(tuple(r.id for r in records), load_pixels(records, image_size))


def iterate_records(records: Sequence[ImageRecord], batch_size: int, seed: int | None = None,
                    image_size: int = DEFAULT_IMAGE_SIZE, workers: int = 0) -> Iterator[ImageBatch]:
    """Yield batches over ``records``; shuffled by ``seed`` unless it is ``None``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not records:
        raise EmptySplit("no records to iterate")
    order = np.arange(len(records))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(records))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if workers > 0:
        # prefetch in parallel; map preserves order
        with ThreadPoolExecutor(workers) as pool:
            yield from pool.map(lambda idx: make_batch([records[j] for j in idx], image_size), chunks)
    else:
        for idx in chunks:
            yield make_batch([records[j] for j in idx], image_size)


def iterate_batches(manifest: DatasetManifest, split: str, batch_size: int, seed: int | None,
                    image_size: int = DEFAULT_IMAGE_SIZE, workers: int = 0) -> Iterator[ImageBatch]:
    records = manifest.split(split)
    if not records:
        raise EmptySplit(f"{manifest.name}: split {split!r} is empty")
    return iterate_records(records, batch_size, seed, image_size, workers)
