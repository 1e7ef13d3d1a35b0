import json
from pathlib import Path

import numpy as np
import pytest
import torch

from nola.data import load_manifest
from nola.encoders import make_toy_encoders
from nola.labels import label_guard
from nola.synthetic import SyntheticSpec, make_benchmark


@pytest.fixture(autouse=True)
def _fresh_label_guard():
    label_guard.reset()
    yield


def write_manifest(root: Path, classes, train, test, name="fixture", size=16, seed=0) -> Path:
    """Write random .npy images and a manifest; ``train``/``test`` are lists of labels (or None)."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    data = {"name": name, "classes": list(classes), "train": [], "test": []}
    for split, labels in (("train", train), ("test", test)):
        for i, y in enumerate(labels):
            rel = f"img/{split}_{i}.npy"
            np.save(root / rel, rng.random((size, size, 3)).astype(np.float32))
            item = {"id": f"{split}_{i}", "path": rel}
            if y is not None:
                item["label"] = y
            data[split].append(item)
    path = root / "manifest.json"
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def cluster_manifest(root: Path, n_classes, per_class, spread, seed=0, train_per_class=0):
    """Classes are noisy copies of one random base image each; the test split holds ``per_class``."""
    rng = np.random.default_rng(seed)
    bases = rng.random((n_classes, 16, 16, 3))
    (root / "img").mkdir(parents=True, exist_ok=True)
    data = {"name": "clusters", "classes": [f"class{c}" for c in range(n_classes)], "train": [], "test": []}
    for split, count in (("train", train_per_class), ("test", per_class)):
        for c in range(n_classes):
            for i in range(count):
                img = np.clip(bases[c] + rng.normal(0, spread, bases[c].shape), 0, 1).astype(np.float32)
                sid = f"{split}_{c}_{i}"
                np.save(root / "img" / f"{sid}.npy", img)
                data[split].append({"id": sid, "path": f"img/{sid}.npy", "label": c})
    (root / "m.json").write_text(json.dumps(data))
    return load_manifest(root / "m.json")



@pytest.fixture
def tiny_manifest_path(tmp_path):
    return write_manifest(tmp_path, ["cat", "dog"], [0, 1, 0, 1], [0, 1])


@pytest.fixture
def tiny_manifest(tiny_manifest_path):
    return load_manifest(tiny_manifest_path)


@pytest.fixture(scope="session")
def toy_bundle():
    return make_toy_encoders()


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    spec = SyntheticSpec(n_train_per_class=40, n_test_per_class=20)
    return make_benchmark(tmp_path_factory.mktemp("bench"), spec, seed=0)


@pytest.fixture
def double_bundle():
    return make_toy_encoders().to(torch.float64)


# -- acceptance report -----------------------------------------------------------

_CRITERIA: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "SKIP" if rep.skipped else ("PASS" if rep.passed else "FAIL")
        _CRITERIA.append((name, f"{status} ({rep.duration:.1f}s)"))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _CRITERIA:
        terminalreporter.write_line(f"{status:<16} {name}")
