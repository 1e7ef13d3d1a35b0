import json

import numpy as np
import pytest
import torch

from nola.cde import build_cde, zero_shot_eval
from nola.encoders import encode_image, encode_ssl
from nola.labels import label_guard
from nola.synthetic import SyntheticSpec, _directions, fisher_ratio, make_benchmark, sample_images


def test_benchmark_layout(small_bench):
    bm = small_bench
    assert bm.manifest.num_classes == 4
    assert len(bm.manifest.train_items) == 160 and len(bm.manifest.test_items) == 80
    assert bm.manifest_path.is_file() and bm.descriptions_path.is_file()
    meta = json.loads((bm.root / "synthetic.json").read_text())
    assert meta["seed"] == 0
    assert set(bm.descriptions.per_class) == set(bm.manifest.class_names)
    with label_guard.evaluation():
        labels = [r.true_label for r in bm.manifest.test_items]
    assert np.bincount(labels).tolist() == [20] * 4


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(n_classes=2, n_train_per_class=5, n_test_per_class=5)
    a = make_benchmark(tmp_path / "a", spec, seed=3)
    b = make_benchmark(tmp_path / "b", spec, seed=3)
    assert a.descriptions == b.descriptions
    for ra, rb in zip(a.manifest.train_items, b.manifest.train_items):
        assert np.array_equal(np.load(ra.path), np.load(rb.path))


def test_pixels_stay_in_range(small_bench):
    px = np.stack([np.load(r.path) for r in small_bench.manifest.train_items])
    assert px.min() >= 0 and px.max() <= 1
    assert px.shape[1:] == (16, 16, 3)


def test_ssl_view_more_separable(small_bench):
    bm = small_bench
    px = torch.from_numpy(np.stack([np.load(r.path) for r in bm.manifest.test_items]))
    with label_guard.evaluation():
        y = [r.true_label for r in bm.manifest.test_items]
    assert fisher_ratio(encode_ssl(bm.bundle, px).vectors, y) > fisher_ratio(encode_image(bm.bundle, px).vectors, y)


def test_zero_shot_lands_in_band(small_bench):
    bm = small_bench
    acc = zero_shot_eval(build_cde(bm.descriptions, bm.bundle, bm.manifest.class_names), bm.bundle, bm.manifest)
    # the band is enforced on a separate probe set; the test split should be close to it
    assert 0.4 <= acc.top1 <= 0.85
    assert min(acc.per_class) > 0


def test_decoys_are_invisible_to_the_vlm(toy_bundle):
    spec = SyntheticSpec()
    dirs = _directions(spec, toy_bundle, np.random.default_rng(0))
    E_v = toy_bundle.vision_encoder.patch_embed.weight.detach().double().numpy()
    E_s = toy_bundle.ssl_encoder.patch_embed.weight.detach().double().numpy()
    for key in ("ssl_signal",):
        assert np.abs(dirs[key] @ E_v.T).max() < 1e-8
    decoy = dirs["decoys"][0, 1]
    assert np.abs(E_v @ decoy).max() < 1e-8
    assert np.linalg.norm(E_s @ decoy) > 1e-3
    assert np.abs(dirs["nuisance"].T @ E_s.T).max() < 1e-8


def test_fisher_ratio_oracle():
    X = np.array([[0.0], [2.0], [10.0], [12.0]])
    y = [0, 0, 1, 1]
    # between: 2 * (1 - 6)^2 + 2 * (11 - 6)^2 = 100; within: 4 * 1 = 4
    assert fisher_ratio(X, y) == pytest.approx(25.0)


def test_sampling_matches_labels(toy_bundle):
    spec = SyntheticSpec(n_classes=3, ssl_decoy_fraction=0.0, pixel_noise=0.0, nuisance=0.0, ssl_noise=0.0)
    rng = np.random.default_rng(1)
    dirs = _directions(spec, toy_bundle, rng)
    imgs = sample_images(spec, toy_bundle, np.array([0, 0, 2]), rng, dirs)
    assert np.array_equal(imgs[0], imgs[1])
    assert not np.array_equal(imgs[0], imgs[2])
