"""Single-file checkpoints for every stage artifact.

Layout: a magic line, one JSON header line, then the raw bytes of each array
back to back. The header records the format version, the artifact kind,
artifact metadata, an index of (name, dtype, shape, offset, nbytes) and the
sha256 of the payload. Files are byte-deterministic for a given artifact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .cde import CDEClassifier
from .dl import AlignmentHead
from .encoders import PromptSet
from .errors import CorruptFile, MissingCheckpoint, VersionMismatch
from .prompt_tune import PromptTuneConfig, TunedModel
from .pseudo import PseudoLabelSet, SelectionPolicy

MAGIC = b"NOLA-CKPT\n"
FORMAT_VERSION = 1
CDE_BUILDER_VERSION = 1

STAGES = ("cde", "pseudo", "head", "tuned", "embeddings")


def write_container(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    index, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == object:
            raise TypeError(f"array {name!r} has object dtype")
        raw = a.tobytes()
        index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"version": FORMAT_VERSION, "kind": kind, "meta": meta, "arrays": index,
              "payload_bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()}
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)
    tmp.replace(path)
    return path


def read_container(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"no checkpoint at {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CorruptFile(f"{path}: bad magic")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {header.get('version')}, expected {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise CorruptFile(f"{path}: holds {header.get('kind')!r}, expected {kind!r}")
    payload = data[end + 1:]
    if len(payload) != header["payload_bytes"] or hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptFile(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    return header, arrays


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def save_checkpoint(stage: str, artifact: Any, path: str | Path, **meta) -> Path:
    """Write ``artifact`` for ``stage``; extra keyword arguments go into the header."""
    if stage == "cde":
        header = {"class_names": list(artifact.class_names), "d": artifact.d,
                  "row_normalized": artifact.row_normalized, "builder_version": CDE_BUILDER_VERSION}
        arrays = {"weights": _np(artifact.weights)}
    elif stage == "pseudo":
        ids = [e[0] for e in artifact.entries]
        header = {"ids": ids, "k_used": artifact.k_used,
                  "policy": vars(artifact.policy) if artifact.policy else None}
        arrays = {"labels": np.asarray(artifact.labels, dtype=np.int64),
                  "confidence": np.asarray([e[2] for e in artifact.entries], dtype=np.float64)}
    elif stage == "head":
        header = {"d_ssl": artifact.d_in, "C": artifact.num_classes, "hidden": artifact.hidden,
                  "trained": artifact.trained}
        arrays = {k: _np(v) for k, v in artifact.state_dict().items()}
    elif stage == "tuned":
        cfg = artifact.config.to_json() if artifact.config else None
        header = {"V": artifact.prompts.V, "d_model": artifact.prompts.width,
                  "C": artifact.classifier.weights.shape[0], "class_names": list(artifact.classifier.class_names),
                  "config": cfg, "seeds": {"tune": cfg["seed"] if cfg else None}, "log": artifact.log}
        arrays = {"prompts": _np(artifact.prompts.tokens), "classifier": _np(artifact.classifier.weights)}
    else:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES[:-1]}")
    return write_container(path, stage, {**meta, **header}, arrays)


def load_checkpoint(stage: str, path: str | Path):
    header, arrays = read_container(path, stage)
    meta = header["meta"]
    if stage == "cde":
        return CDEClassifier(torch.from_numpy(arrays["weights"]), tuple(meta["class_names"]),
                             row_normalized=meta["row_normalized"])
    if stage == "pseudo":
        policy = SelectionPolicy(**meta["policy"]) if meta["policy"] else None
        entries = [(i, int(l), float(c)) for i, l, c in zip(meta["ids"], arrays["labels"], arrays["confidence"])]
        return PseudoLabelSet(entries, meta["k_used"], policy=policy)
    if stage == "head":
        head = AlignmentHead(meta["d_ssl"], meta["C"], meta["hidden"])
        state = {k: torch.from_numpy(v) for k, v in arrays.items()}
        head = head.to(next(iter(state.values())).dtype)
        head.load_state_dict(state)
        head.trained = meta["trained"]
        for p in head.parameters():
            p.requires_grad_(False)
        return head
    if stage == "tuned":
        config = PromptTuneConfig(**meta["config"]) if meta["config"] else None
        classifier = CDEClassifier(torch.from_numpy(arrays["classifier"]), tuple(meta["class_names"]),
                                   row_normalized=True)
        return TunedModel(PromptSet(torch.from_numpy(arrays["prompts"])), classifier, None,
                          list(meta["log"]), config)
    raise ValueError(f"unknown stage {stage!r}")


def checkpoint_meta(path: str | Path) -> dict:
    return read_container(path)[0]["meta"]
