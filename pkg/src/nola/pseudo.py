"""Per-class sample budget and top-k confident pseudo-label selection."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .cde import ProbabilityBatch
from .errors import AlignmentMismatch, CorruptFile, InvalidCounts


@dataclass(frozen=True)
class SelectionPolicy:
    fraction: float = 0.2
    floor: int = 16
    cap: int = 512
    rounding: str = "floor_int"

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must lie in (0, 1]")
        if self.floor > self.cap:
            raise ValueError("floor must not exceed cap")
        if self.rounding != "floor_int":
            raise ValueError(f"unsupported rounding {self.rounding!r}")


@dataclass
class PseudoLabelSet:
    entries: list[tuple[str, int, float]]
    k_used: int
    per_class_counts: dict[int, int] = field(default_factory=dict)
    policy: SelectionPolicy | None = None

    def __post_init__(self):
        if not self.per_class_counts:
            counts: dict[int, int] = {}
            for _, label, _ in self.entries:
                counts[label] = counts.get(label, 0) + 1
            self.per_class_counts = counts

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e[0] for e in self.entries]

    @property
    def labels(self) -> list[int]:
        return [e[1] for e in self.entries]


def compute_k(n_train: int, n_classes: int, policy: SelectionPolicy = SelectionPolicy()) -> int:
    """clamp(floor(fraction * n_train / n_classes), floor, cap)."""
    if n_train < 1 or n_classes < 2:
        raise InvalidCounts(f"need n_train >= 1 and n_classes >= 2, got {n_train}, {n_classes}")
    # exact rational arithmetic: 0.2 * n / C must not land just under an integer
    k = math.floor(Fraction(repr(policy.fraction)) * n_train / n_classes)
    return int(min(max(k, policy.floor), policy.cap))


def select_topk(probs: ProbabilityBatch | torch.Tensor | np.ndarray, sample_ids: Sequence[str],
                k: int) -> PseudoLabelSet:
    """Assign each sample to its argmax class, then keep the k most confident per class.

    Ties in confidence go to the lexicographically smaller sample id; ties in
    the argmax go to the lower class index.
    """
    p = probs.probs if isinstance(probs, ProbabilityBatch) else probs
    p = p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p)
    if p.ndim != 2 or p.shape[0] != len(sample_ids):
        raise AlignmentMismatch(f"{p.shape[0] if p.ndim else 0} probability rows for {len(sample_ids)} ids")
    if k < 1:
        raise ValueError("k must be >= 1")
    assigned = p.argmax(axis=1)
    conf = p[np.arange(len(p)), assigned]
    ids = np.asarray(sample_ids, dtype=object)
    entries = []
    counts = {}
    for c in range(p.shape[1]):
        members = np.flatnonzero(assigned == c)
        if not len(members):
            continue
        # primary key -confidence, secondary key id
        order = sorted(members, key=lambda i: (-conf[i], ids[i]))[:k]
        counts[c] = len(order)
        entries.extend((str(ids[i]), c, float(conf[i])) for i in order)
    return PseudoLabelSet(entries, k, counts)


_HEADER_KIND = "nola.pseudo_labels"
_VERSION = 1


def save_pseudo_labels(pseudo: PseudoLabelSet, path: str | Path) -> Path:
    path = Path(path)
    header = {"kind": _HEADER_KIND, "version": _VERSION, "k_used": pseudo.k_used,
              "policy": asdict(pseudo.policy) if pseudo.policy else None,
              "n": len(pseudo.entries)}
    lines = [json.dumps(header)]
    lines += [json.dumps({"id": i, "label": l, "confidence": c}) for i, l, c in pseudo.entries]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_pseudo_labels(path: str | Path) -> PseudoLabelSet:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    try:
        header = json.loads(lines[0])
        rows = [json.loads(l) for l in lines[1:] if l.strip()]
    except (IndexError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: {exc}") from exc
    if header.get("kind") != _HEADER_KIND or header.get("n") != len(rows):
        raise CorruptFile(f"{path}: header does not match contents")
    policy = SelectionPolicy(**header["policy"]) if header.get("policy") else None
    entries = [(r["id"], int(r["label"]), float(r["confidence"])) for r in rows]
    return PseudoLabelSet(entries, int(header["k_used"]), policy=policy)
