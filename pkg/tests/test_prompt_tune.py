from dataclasses import replace

import pytest
import torch

import nola.prompt_tune as pt
from nola.augment import StrongParams
from nola.cde import build_cde, predict_records, zero_shot_eval
from nola.data import make_batch
from nola.dl import AlignmentHead, AlignTrainConfig, DLNetwork, dl_predict, train_alignment
from nola.encoders import PromptSet
from nola.errors import DimMismatch, UntrainedDL
from nola.cde import CDEClassifier
from nola.labels import label_guard
from nola.prompt_tune import PRESETS, PromptTuneConfig, evaluate, tune_prompts, tuning_loss
from nola.pseudo import compute_k, select_topk


@pytest.fixture(scope="module")
def stage_ab(small_bench):
    """CDE classifier and trained labelling network on the small benchmark."""
    bm = small_bench
    clf = build_cde(bm.descriptions, bm.bundle, bm.manifest.class_names)
    ids, probs = predict_records(clf, bm.bundle, bm.manifest.train_items)
    pseudo = select_topk(probs, ids, compute_k(len(ids), bm.manifest.num_classes))
    dl = train_alignment(bm.bundle, pseudo, bm.manifest, AlignTrainConfig(seed=0))
    return bm, clf, dl


def _cfg(**kw):
    return PromptTuneConfig(**{"epochs": 1, "batch_size": 32, "num_prompts": 4, **kw})


def test_presets():
    assert PRESETS["preset_main"] == {"lr": 2e-3, "optimizer": "adamw"}
    assert PromptTuneConfig.preset("preset_suppl").lr == 4e-3
    c = PromptTuneConfig()
    assert (c.num_prompts, c.batch_size, c.epochs, c.label_smoothing) == (16, 512, 30, 0.1)


def test_zero_learning_rate_changes_nothing(stage_ab):
    bm, clf, dl = stage_ab
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(lr=0.0))
    assert torch.equal(m.prompts.tokens, PromptSet.init(4, bm.bundle.width, 0).tokens)
    assert torch.allclose(m.classifier.weights, clf.weights, atol=1e-7)


def test_step_changes_trainables_but_not_encoders(stage_ab):
    bm, clf, dl = stage_ab
    before = bm.bundle.checksums()
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg())
    assert bm.bundle.checksums() == before
    assert not torch.equal(m.prompts.tokens, PromptSet.init(4, bm.bundle.width, 0).tokens)
    assert (m.classifier.weights - clf.weights).abs().max() > 1e-5
    assert ((m.classifier.weights.norm(dim=1) - 1).abs() < 1e-5).all()
    assert len(m.log) == 1 and m.log[0]["loss"] > 0


def test_freeze_flags_select_trainable_parts(stage_ab):
    bm, clf, dl = stage_ab
    init = PromptSet.init(4, bm.bundle.width, 0).tokens
    only_prompts = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(train_classifier=False))
    assert not torch.equal(only_prompts.prompts.tokens, init)
    assert torch.allclose(only_prompts.classifier.weights, clf.weights, atol=1e-7)
    only_clf = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(train_prompts=False))
    assert torch.equal(only_clf.prompts.tokens, init)
    assert (only_clf.classifier.weights - clf.weights).abs().max() > 1e-5


def test_both_trainables_receive_gradient(stage_ab):
    bm, clf, dl = stage_ab
    batch = make_batch(bm.manifest.train_items[:16], bm.bundle.image_size)
    prompts = PromptSet.init(4, bm.bundle.width, 0).tokens.requires_grad_(True)
    weights = clf.weights.clone().requires_grad_(True)
    targets = dl_predict(dl, batch).argmax()
    tuning_loss(bm.bundle, prompts, weights, batch.pixels, targets, 0.1).backward()
    assert prompts.grad.norm() > 0
    assert weights.grad.norm() > 0


def test_gradients_match_finite_differences(double_bundle):
    g = torch.Generator().manual_seed(1)
    pixels = torch.rand(3, 16, 16, 3, generator=g, dtype=torch.float64)
    targets = torch.tensor([0, 2, 1])
    prompts = PromptSet.init(2, double_bundle.width, 0, torch.float64).tokens.requires_grad_(True)
    weights = torch.randn(3, double_bundle.d_vlm, generator=g, dtype=torch.float64).requires_grad_(True)

    def loss(p, w):
        return tuning_loss(double_bundle, p, w, pixels, targets, 0.1, logit_scale=10.0)

    assert torch.autograd.gradcheck(loss, (prompts, weights), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_tuning_is_deterministic(stage_ab):
    bm, clf, dl = stage_ab
    a = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(seed=3))
    b = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(seed=3))
    assert torch.equal(a.prompts.tokens, b.prompts.tokens)
    assert torch.equal(a.classifier.weights, b.classifier.weights)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]


def test_pseudo_labels_match_standalone_labeller(stage_ab, monkeypatch):
    bm, clf, dl = stage_ab
    seen = []
    real = pt.dl_predict

    def spy(net, batch):
        out = real(net, batch)
        seen.append((batch.ids, batch.pixels.clone(), out.probs.clone()))
        return out

    monkeypatch.setattr(pt, "dl_predict", spy)
    tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg())
    assert seen
    labelled = set()
    for ids, pixels, probs in seen:
        # the weak path sees the stored images untouched
        assert torch.equal(pixels, make_batch([bm.manifest.record(i) for i in ids], bm.bundle.image_size).pixels)
        assert torch.equal(probs, dl_predict(dl, pixels).probs)
        labelled.update(ids)
    assert labelled == {r.id for r in bm.manifest.train_items}


def test_soft_targets_flag(stage_ab):
    bm, clf, dl = stage_ab
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(soft_targets=True))
    assert m.log[0]["loss"] > 0


def test_cde_labeller_variant_needs_no_dl(stage_ab):
    bm, clf, _ = stage_ab
    m = tune_prompts(bm.bundle, clf, None, bm.manifest, _cfg(pseudo_labeller="cde"))
    assert len(m.log) == 1


def test_untrained_labeller_rejected(stage_ab):
    bm, clf, _ = stage_ab
    raw = DLNetwork(bm.bundle.ssl_encoder, AlignmentHead(bm.bundle.d_ssl, bm.manifest.num_classes))
    with pytest.raises(UntrainedDL):
        tune_prompts(bm.bundle, clf, raw, bm.manifest, _cfg())
    with pytest.raises(UntrainedDL):
        tune_prompts(bm.bundle, clf, None, bm.manifest, _cfg())


def test_dimension_mismatch(stage_ab):
    bm, clf, dl = stage_ab
    wrong = CDEClassifier(torch.eye(bm.manifest.num_classes, 7), clf.class_names)
    with pytest.raises(DimMismatch):
        tune_prompts(bm.bundle, wrong, dl, bm.manifest, _cfg())


def test_untuned_model_without_prompts_is_zero_shot(stage_ab):
    bm, clf, dl = stage_ab
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(num_prompts=0, epochs=0))
    tuned, zs = evaluate(m, bm.bundle, bm.manifest), zero_shot_eval(clf, bm.bundle, bm.manifest)
    assert tuned.top1 == zs.top1
    assert (tuned.confusion == zs.confusion).all()


def test_per_class_accuracy_accounting(stage_ab):
    bm, clf, dl = stage_ab
    metrics = evaluate(tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg()), bm.bundle, bm.manifest)
    support = metrics.confusion.sum(1)
    weighted = sum(a * s for a, s in zip(metrics.per_class, support)) / support.sum()
    assert weighted == pytest.approx(metrics.top1, abs=1e-12)


def test_training_never_reads_labels(stage_ab):
    bm, clf, dl = stage_ab
    label_guard.reset()
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, _cfg(), eval_each_epoch=True)
    assert label_guard.training_reads == 0
    assert label_guard.unscoped_reads == 0
    assert m.log[0]["test_top1"] is not None


def test_patience_stops_early(stage_ab):
    bm, clf, dl = stage_ab
    frozen = replace(_cfg(epochs=5, lr=0.0, patience=1), augment=StrongParams.identity())
    m = tune_prompts(bm.bundle, clf, dl, bm.manifest, frozen)
    assert len(m.log) == 2


def test_config_validation():
    with pytest.raises(ValueError):
        PromptTuneConfig(batch_size=0)
    with pytest.raises(ValueError):
        PromptTuneConfig(pseudo_labeller="oracle")
    assert PromptTuneConfig(augment={"crop_scale": [1.0, 1.0]}).augment.crop_scale == (1.0, 1.0)
