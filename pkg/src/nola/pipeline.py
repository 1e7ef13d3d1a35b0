"""Experiment configuration and the three-stage driver.

Stages run in order and each artifact is checkpointed under ``output_dir``:

    build_cde -> zero_shot_eval -> select_topk -> train_alignment -> dl_eval
    -> tune_prompts -> evaluate

With ``resume`` a stage whose checkpoint is present is loaded instead of
recomputed; evaluations are cheap and always rerun.
"""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import shutil
import subprocess
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import torch
import yaml

from . import __version__
from .cde import Metrics, build_cde, predict_records, zero_shot_eval
from .checkpoint import load_checkpoint, read_container, save_checkpoint, write_container
from .data import (DatasetManifest, DescriptionSet, add_prompt_templates, iterate_records, load_descriptions,
                   load_manifest)
from .dl import AlignTrainConfig, DLNetwork, evaluate_dl, train_alignment
from .encoders import EncoderBundle, ToyEncoderConfig, encode_image, encode_image_prompted, make_toy_encoders
from .errors import ConfigError, MissingCheckpoint, StageError
from .labels import label_guard
from .llm import HTTPLLMClient, generate_descriptions, templates_for
from .prompt_tune import PromptTuneConfig, TunedModel, evaluate, tune_prompts
from .pseudo import SelectionPolicy, compute_k, select_topk
from .synthetic import SyntheticSpec, make_benchmark

log = logging.getLogger(__name__)

STAGE_KEYS = ("zero_shot_cde", "dl_network", "nola_final")
VARIANTS = {
    "no_dl": {"pseudo_labeller": "cde"},
    "clip_dl": {"ssl_encoder": "vlm_vision"},
    "frozen_cde": {"frozen_cde": True},
    "frozen_prompts": {"frozen_prompts": True},
}
HUB_PREFIX = "hf:"
LOCK_NAME = ".nola.lock"


# -- configuration -----------------------------------------------------------


@dataclass
class EncoderSettings:
    vlm_checkpoint: str | None = None
    ssl_checkpoint: str | None = None
    toy: ToyEncoderConfig = field(default_factory=ToyEncoderConfig)
    toy_seed: int = 0


@dataclass
class VariantSettings:
    pseudo_labeller: str = "dl"  # "dl" or "cde"
    ssl_encoder: str = "ssl"  # "ssl" or "vlm_vision"
    frozen_cde: bool = False
    frozen_prompts: bool = False

    def __post_init__(self):
        if self.pseudo_labeller not in ("dl", "cde"):
            raise ConfigError("variant.pseudo_labeller must be 'dl' or 'cde'")
        if self.ssl_encoder not in ("ssl", "vlm_vision"):
            raise ConfigError("variant.ssl_encoder must be 'ssl' or 'vlm_vision'")


@dataclass
class Seeds:
    data: int
    align: int
    tune: int


@dataclass
class LLMSettings:
    endpoint: str | None = None
    model: str = "gpt-3.5-turbo"
    n_per_prompt: int = 1
    max_retries: int = 2


@dataclass
class ExperimentConfig:
    output_dir: Path
    seeds: Seeds
    dataset: Path | None = None
    descriptions: Path | None = None
    synthetic: SyntheticSpec | None = None
    llm: LLMSettings | None = None
    prompt_templates: tuple[str, ...] = ()
    encoders: EncoderSettings = field(default_factory=EncoderSettings)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    align: AlignTrainConfig = field(default_factory=AlignTrainConfig)
    tune: PromptTuneConfig = field(default_factory=PromptTuneConfig)
    variant: VariantSettings = field(default_factory=VariantSettings)
    eval_batch_size: int = 256
    log_test_accuracy: bool = False

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        raw = dict(raw)
        base = Path(base_dir)
        unknown = set(raw) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "output_dir" not in raw:
            raise ConfigError("output_dir is required")
        seeds = raw.get("seeds")
        if not isinstance(seeds, dict) or set(seeds) != {"data", "align", "tune"}:
            raise ConfigError("seeds must be given explicitly as {data, align, tune}")
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in seeds.values()):
            raise ConfigError("seeds must be integers")

        def path(v):
            return None if v is None else (base / v if not Path(v).is_absolute() else Path(v))

        def checkpoint(v):
            if v is None or str(v).startswith(HUB_PREFIX):
                return v
            return str(path(v))

        try:
            enc = dict(raw.get("encoders") or {})
            enc["toy"] = ToyEncoderConfig(**(enc.get("toy") or {}))
            enc["vlm_checkpoint"] = checkpoint(enc.get("vlm_checkpoint"))
            enc["ssl_checkpoint"] = checkpoint(enc.get("ssl_checkpoint"))
            tune = dict(raw.get("tune") or {})
            preset = tune.pop("preset", "preset_main")
            tune["seed"] = seeds["tune"]
            synthetic = raw.get("synthetic")
            if synthetic is not None:
                synthetic = dict(synthetic)
                if "encoder" in synthetic:
                    synthetic["encoder"] = ToyEncoderConfig(**synthetic["encoder"])
                if "zero_shot_band" in synthetic:
                    synthetic["zero_shot_band"] = tuple(synthetic["zero_shot_band"])
                synthetic = SyntheticSpec(**synthetic)
            return cls(
                output_dir=path(raw["output_dir"]),
                seeds=Seeds(**seeds),
                dataset=path(raw.get("dataset")),
                descriptions=path(raw.get("descriptions")),
                synthetic=synthetic,
                llm=LLMSettings(**raw["llm"]) if raw.get("llm") else None,
                prompt_templates=tuple(raw.get("prompt_templates") or ()),
                encoders=EncoderSettings(**enc),
                selection=SelectionPolicy(**(raw.get("selection") or {})),
                align=AlignTrainConfig(**{**(raw.get("align") or {}), "seed": seeds["align"]}),
                tune=PromptTuneConfig.preset(preset, **tune),
                variant=VariantSettings(**(raw.get("variant") or {})),
                eval_batch_size=int(raw.get("eval_batch_size", 256)),
                log_test_accuracy=bool(raw.get("log_test_accuracy", False)),
            )
        except (TypeError, ValueError, KeyError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        d = _plain(asdict(self))
        d["tune"].pop("seed")
        d["align"].pop("seed")
        return d

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path

    def validate(self) -> "ExperimentConfig":
        if self.synthetic is None:
            if self.dataset is None or not self.dataset.is_file():
                raise ConfigError(f"dataset manifest not found: {self.dataset}")
            if self.llm is None and (self.descriptions is None or not self.descriptions.is_file()):
                raise ConfigError(f"description cache not found: {self.descriptions}")
        for key in ("vlm_checkpoint", "ssl_checkpoint"):
            value = getattr(self.encoders, key)
            if value is not None and not value.startswith(HUB_PREFIX) and not Path(value).exists():
                raise ConfigError(f"encoders.{key} not found: {value}")
        if self.encoders.ssl_checkpoint and not self.encoders.vlm_checkpoint:
            raise ConfigError("encoders.ssl_checkpoint needs encoders.vlm_checkpoint")
        return self

    def with_variant(self, name: str) -> "ExperimentConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        return replace(self, variant=replace(self.variant, **VARIANTS[name]),
                       output_dir=self.output_dir / f"ablate_{name}")

    def with_seeds(self, data: int | None = None, align: int | None = None, tune: int | None = None):
        seeds = Seeds(self.seeds.data if data is None else data, self.seeds.align if align is None else align,
                      self.seeds.tune if tune is None else tune)
        return replace(self, seeds=seeds, align=replace(self.align, seed=seeds.align),
                       tune=replace(self.tune, seed=seeds.tune))

    @property
    def effective_tune(self) -> PromptTuneConfig:
        v = self.variant
        return replace(self.tune, pseudo_labeller=v.pseudo_labeller,
                       train_classifier=self.tune.train_classifier and not v.frozen_cde,
                       train_prompts=self.tune.train_prompts and not v.frozen_prompts)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj.resolve())
    return obj


def toy_config(output_dir: str | Path, seed: int = 0, **overrides) -> ExperimentConfig:
    """Synthetic benchmark with toy encoders, sized to finish in seconds."""
    raw = {
        "output_dir": str(output_dir),
        "seeds": {"data": seed, "align": seed, "tune": seed},
        "synthetic": {},
        "tune": {"epochs": 10, "batch_size": 32},
    }
    for key, value in overrides.items():
        raw[key] = {**raw[key], **value} if isinstance(raw.get(key), dict) and isinstance(value, dict) else value
    return ExperimentConfig.from_dict(raw)


# -- report ------------------------------------------------------------------


@dataclass
class MetricsReport:
    stage_accuracies: dict[str, float | None]
    per_class: dict[str, dict[str, float] | None]
    timings: dict[str, float]
    config: dict
    version: dict
    variant: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, default=_nan_safe), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        rows = [("stage", "top-1", "seconds")]
        timing_key = {"zero_shot_cde": "build_cde", "dl_network": "train_alignment", "nola_final": "tune_prompts"}
        for key in STAGE_KEYS:
            acc = self.stage_accuracies.get(key)
            secs = self.timings.get(timing_key[key])
            rows.append((key, "skipped" if acc is None else f"{100 * acc:.2f}",
                         "" if secs is None else f"{secs:.1f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)


def _nan_safe(x):
    return None if isinstance(x, float) and np.isnan(x) else str(x)


def _version_stamp() -> dict:
    stamp = {"nola": __version__, "torch": torch.__version__, "git": None}
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0:
            stamp["git"] = out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


# -- plumbing ----------------------------------------------------------------


@contextlib.contextmanager
def stage(name: str, timings: dict[str, float] | None = None) -> Iterator[None]:
    """Tag any error escaping the block with the stage name."""
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc
    finally:
        if timings is not None:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - start


@contextlib.contextmanager
def run_lock(output_dir: Path) -> Iterator[Path]:
    output_dir.mkdir(parents=True, exist_ok=True)
    lock = output_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"{output_dir} is locked by another run (remove {lock} if stale)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def build_encoders(config: ExperimentConfig) -> EncoderBundle:
    enc = config.encoders
    if enc.vlm_checkpoint:
        from .hf_adapters import load_pretrained_bundle

        def strip(v):
            return v[len(HUB_PREFIX):] if v and v.startswith(HUB_PREFIX) else v

        return load_pretrained_bundle(strip(enc.vlm_checkpoint), strip(enc.ssl_checkpoint))
    if config.synthetic is not None:
        return make_toy_encoders(config.synthetic.encoder, config.synthetic.encoder_seed)
    return make_toy_encoders(enc.toy, enc.toy_seed)


@dataclass
class PreparedData:
    manifest: DatasetManifest
    descriptions: DescriptionSet
    bundle: EncoderBundle


def prepare(config: ExperimentConfig) -> PreparedData:
    """Resolve the dataset, its descriptions and the encoders."""
    config.validate()
    bundle = build_encoders(config)
    if config.synthetic is not None:
        root = config.output_dir / "data"
        meta_path = root / "synthetic.json"
        wanted = {"seed": config.seeds.data, "spec": _plain(asdict(config.synthetic))}
        current = json.loads(meta_path.read_text(encoding="utf-8")) if meta_path.is_file() else None
        if current is None or _plain(current) != wanted:
            if root.exists():
                shutil.rmtree(root)
            make_benchmark(root, config.synthetic, config.seeds.data)
        manifest = load_manifest(root / "manifest.json")
        descriptions = load_descriptions(root / "descriptions.json", manifest)
    else:
        manifest = load_manifest(config.dataset)
        if config.descriptions is not None and config.descriptions.is_file():
            descriptions = load_descriptions(config.descriptions, manifest)
        else:
            llm = config.llm
            client = HTTPLLMClient(endpoint=llm.endpoint, model=llm.model)
            cache = config.descriptions or config.output_dir / "descriptions.json"
            descriptions = generate_descriptions(client, manifest, templates_for(manifest.name),
                                                 n_per_prompt=llm.n_per_prompt, max_retries=llm.max_retries,
                                                 cache_path=cache)
    if config.prompt_templates:
        descriptions = add_prompt_templates(descriptions, config.prompt_templates)
    return PreparedData(manifest, descriptions, bundle)


def write_training_log(rows: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "test_top1", "wall_seconds"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if row.get(k) is None else row[k]) for k in writer.fieldnames})
    return path


def _per_class(m: Metrics) -> dict[str, float]:
    return {n: (None if np.isnan(v) else v) for n, v in zip(m.class_names, m.per_class)}


# -- driver ------------------------------------------------------------------


CKPT = {"cde": "cde.ckpt", "pseudo": "pseudo.ckpt", "head": "head.ckpt", "tuned": "tuned.ckpt"}


def run_pipeline(config: ExperimentConfig, *, resume: bool = False, allow_training: bool = True,
                 stop_after: str | None = None) -> MetricsReport:
    """Run every stage and return the stage accuracies.

    ``allow_training=False`` turns missing checkpoints into
    :class:`MissingCheckpoint` instead of training; ``stop_after`` ("cde" or
    "align") ends the run early, leaving the checkpoints written so far.
    """
    out = config.output_dir
    timings: dict[str, float] = {}
    accs: dict[str, float | None] = dict.fromkeys(STAGE_KEYS)
    per_class: dict[str, Any] = dict.fromkeys(STAGE_KEYS)
    use_existing = resume or not allow_training

    def have(name: str) -> bool:
        if (out / CKPT[name]).is_file() and use_existing:
            return True
        if not allow_training:
            raise MissingCheckpoint(f"no {name} checkpoint in {out}")
        return False

    label_guard.reset()
    with run_lock(out):
        if allow_training:
            config.save(out / "config.yaml")
        with stage("data", timings):
            data = prepare(config)
        manifest, bundle = data.manifest, data.bundle
        dataset = manifest.name

        with stage("build_cde", timings):
            if have("cde"):
                cde = load_checkpoint("cde", out / CKPT["cde"])
            else:
                cde = build_cde(data.descriptions, bundle, manifest.class_names)
                save_checkpoint("cde", cde, out / CKPT["cde"], dataset=dataset)
        with stage("zero_shot_eval", timings):
            zs = zero_shot_eval(cde, bundle, manifest, logit_scale=config.tune.logit_scale)
            accs["zero_shot_cde"], per_class["zero_shot_cde"] = zs.top1, _per_class(zs)
        log.info("zero-shot CDE top-1 %.4f", zs.top1)
        if stop_after == "cde":
            return _report(config, accs, per_class, timings)

        dl = None
        if config.variant.pseudo_labeller == "dl":
            dl_bundle = bundle.with_vision_as_ssl() if config.variant.ssl_encoder == "vlm_vision" else bundle
            with stage("select_topk", timings):
                if have("pseudo"):
                    pseudo = load_checkpoint("pseudo", out / CKPT["pseudo"])
                else:
                    ids, probs = predict_records(cde, bundle, manifest.train_items, config.tune.logit_scale,
                                                 batch_size=config.eval_batch_size)
                    k = compute_k(len(ids), manifest.num_classes, config.selection)
                    pseudo = select_topk(probs, ids, k)
                    pseudo.policy = config.selection
                    save_checkpoint("pseudo", pseudo, out / CKPT["pseudo"], dataset=dataset)
            with stage("train_alignment", timings):
                if have("head"):
                    head = load_checkpoint("head", out / CKPT["head"])
                    dl = DLNetwork(dl_bundle.ssl_encoder, head.to(next(dl_bundle.ssl_encoder.parameters()).dtype))
                else:
                    dl = train_alignment(dl_bundle, pseudo, manifest, config.align)
                    a = config.align
                    save_checkpoint("head", dl.head, out / CKPT["head"], dataset=dataset, epochs=a.epochs,
                                    lr=a.lr, epsilon=a.label_smoothing, seed=a.seed, ssl_encoder=config.variant.ssl_encoder)
            with stage("dl_eval", timings):
                m = evaluate_dl(dl, dl_bundle, manifest, batch_size=config.eval_batch_size)
                accs["dl_network"], per_class["dl_network"] = m.top1, _per_class(m)
            log.info("DL network top-1 %.4f", m.top1)
        if stop_after == "align":
            return _report(config, accs, per_class, timings)

        with stage("tune_prompts", timings):
            if have("tuned"):
                tuned = load_checkpoint("tuned", out / CKPT["tuned"])
                tuned.bundle = bundle
            else:
                tuned = tune_prompts(bundle, cde, dl, manifest, config.effective_tune,
                                     eval_each_epoch=config.log_test_accuracy)
                save_checkpoint("tuned", tuned, out / CKPT["tuned"], dataset=dataset,
                                seeds=asdict(config.seeds))
            write_training_log(tuned.log, out / "tune_log.csv")
        with stage("evaluate", timings):
            final = evaluate(tuned, bundle, manifest, batch_size=config.eval_batch_size)
            accs["nola_final"], per_class["nola_final"] = final.top1, _per_class(final)
        log.info("final top-1 %.4f", final.top1)

        report = _report(config, accs, per_class, timings)
        report.save(out / "metrics.json")
        return report


def _report(config, accs, per_class, timings) -> MetricsReport:
    return MetricsReport(dict(accs), dict(per_class), dict(timings), config.to_dict(), _version_stamp(),
                         asdict(config.variant))


def evaluate_run(output_dir: str | Path) -> MetricsReport:
    """Recompute stage accuracies of a finished run from its checkpoints."""
    output_dir = Path(output_dir)
    cfg_path = output_dir / "config.yaml"
    if not cfg_path.is_file():
        raise MissingCheckpoint(f"no config.yaml in {output_dir}")
    config = ExperimentConfig.from_yaml(cfg_path)
    config = replace(config, output_dir=output_dir)
    return run_pipeline(config, allow_training=False)


def run_ablation(config: ExperimentConfig, variant: str, *, resume: bool = False) -> MetricsReport:
    """Run one variant in ``<output_dir>/ablate_<variant>``, reusing upstream checkpoints."""
    vconfig = config.with_variant(variant)
    vconfig.output_dir.mkdir(parents=True, exist_ok=True)
    # each variant changes one stage; everything upstream of it is reused
    shared = {"no_dl": ["cde"], "clip_dl": ["cde", "pseudo"]}.get(variant, ["cde", "pseudo", "head"])
    for name in shared:
        src, dst = config.output_dir / CKPT[name], vconfig.output_dir / CKPT[name]
        if src.is_file() and not dst.exists():
            shutil.copyfile(src, dst)
    data_src = config.output_dir / "data"
    if data_src.is_dir() and not (vconfig.output_dir / "data").exists():
        shutil.copytree(data_src, vconfig.output_dir / "data")
    return run_pipeline(vconfig, resume=True)


# -- embedding export --------------------------------------------------------


EMBEDDING_SOURCES = {"base": "clip_base", "tuned": "nola_tuned"}


@dataclass
class EmbeddingDump:
    ids: list[str]
    labels: np.ndarray  # -1 where a test label is absent
    vectors: np.ndarray  # [N, d], unit rows
    source: str

    def __len__(self) -> int:
        return len(self.ids)


def export_embeddings(which: str, config: ExperimentConfig, out: str | Path) -> EmbeddingDump:
    """Write normalized test-split embeddings from the base or the tuned image encoder."""
    if which not in EMBEDDING_SOURCES:
        raise ConfigError(f"which must be one of {sorted(EMBEDDING_SOURCES)}")
    tuned: TunedModel | None = None
    if which == "tuned":
        tuned = load_checkpoint("tuned", config.output_dir / CKPT["tuned"])
    data = prepare(config)
    records = data.manifest.test_items
    vectors = []
    with torch.no_grad():
        for batch in iterate_records(records, config.eval_batch_size, seed=None, image_size=data.bundle.image_size):
            emb = encode_image(data.bundle, batch) if tuned is None else \
                encode_image_prompted(data.bundle, batch, tuned.prompts)
            vectors.append(emb.vectors.float())
    with label_guard.evaluation():
        labels = np.asarray([r.true_label if r.has_label else -1 for r in records], dtype=np.int64)
    dump = EmbeddingDump([r.id for r in records], labels, torch.cat(vectors).numpy(), EMBEDDING_SOURCES[which])
    write_container(out, "embeddings", {"source": dump.source, "ids": dump.ids, "dataset": data.manifest.name},
                    {"labels": dump.labels, "vectors": dump.vectors})
    return dump


def load_embeddings(path: str | Path) -> EmbeddingDump:
    header, arrays = read_container(path, "embeddings")
    return EmbeddingDump(list(header["meta"]["ids"]), arrays["labels"], arrays["vectors"], header["meta"]["source"])
