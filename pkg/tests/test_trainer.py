# -*- coding: utf-8 -*-
import json
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from pydantic import ValidationError

import trainer
from backbone import IncrementalNet, expand
from cil_errors import NumericError, UsageError
from data_stream import BenchmarkSpec, build_task_stream, make_synthetic_source
from memory import ExemplarMemory
from trainer import (Components, Prototypes, TrainConfig, average_accuracy, compute_prototypes, evaluate_step,
                     predict_cnn, predict_nme, train_task, weight_align)


def _tiny_train(**updates):
    base = dict(epochs=2, batch_size=16, decay_epochs=[1], warmup_epochs=0, feature_dim=8, conv_width=4)
    base.update(updates)
    return TrainConfig(**base)


def _stream(classes=4, steps=2, per_class=10):
    source = make_synthetic_source(classes=classes, height=8, width=8, train_per_class=per_class, test_per_class=5)
    return build_task_stream(source, BenchmarkSpec(total_classes=classes, steps=steps))


def _net(use_vmf=True):
    torch.manual_seed(0)
    return IncrementalNet(3, feature_dim=8, conv_width=4, use_vmf=use_vmf)


def _run_tasks(stream, config, components=None, memory_size=20, log_path=None):
    net, memory, outcomes = _net(), ExemplarMemory(memory_size), []
    for task in stream.tasks:
        expand(net, task.total_classes, len(task.new_classes))
        outcome = train_task(net, task, stream, memory, config, components, log_path)
        memory = outcome.memory
        outcomes.append(outcome)
    return net, memory, outcomes


# --- configuration ---

def test_lr_factor_warmup_then_decay():
    config = TrainConfig(epochs=8, warmup_epochs=1, decay_epochs=[5, 7], decay_factor=0.1)
    assert config.lr_factor(0) == 0.5
    assert config.lr_factor(1) == 1.0
    assert config.lr_factor(5) == pytest.approx(0.1)
    assert config.lr_factor(7) == pytest.approx(0.01)


@pytest.mark.parametrize("updates", [
    {"decay_epochs": [5, 5]},
    {"decay_epochs": [3, 8], "epochs": 8},
    {"decay_epochs": [2], "warmup_epochs": 2},
])
def test_train_config_rejects_bad_lr_schedule(updates):
    with pytest.raises(ValidationError):
        TrainConfig(**{"epochs": 8, **updates})


def test_matching_requires_vmf():
    with pytest.raises(ValidationError):
        Components(vmf=False, matching=True)


# --- weight alignment, prediction ---

def test_weight_align_equalizes_mean_norms():
    net = expand(_net(), 4, 4)
    with torch.no_grad():
        net.head.weight[:2] *= 3.0
        net.head.weight[2:] *= 0.4
    gamma = weight_align(net, [0, 1], [2, 3])
    norms = net.head.weight.detach().norm(dim=1)
    assert gamma == pytest.approx(7.5, rel=1e-5)
    assert abs(norms[2:].mean().item() / norms[:2].mean().item() - 1.0) < 1e-6


def test_weight_align_zero_norm():
    net = expand(_net(), 4, 4)
    with torch.no_grad():
        net.head.weight[2:] = 0.0
    with pytest.raises(NumericError):
        weight_align(net, [0, 1], [2, 3])


def test_predict_cnn_ties_go_to_lowest_id():
    net = expand(_net(), 3, 3)
    with torch.no_grad():
        net.head.weight.copy_(torch.ones(3, 8))
    images = np.random.default_rng(0).uniform(size=(5, 8, 8, 3)).astype(np.float32)
    np.testing.assert_array_equal(predict_cnn(net, images), [0] * 5)


def test_nme_is_exact_on_separable_clusters(monkeypatch):
    rng = np.random.default_rng(0)
    classes = 4
    centres = np.eye(classes * 2)[:classes]
    labels = np.repeat(np.arange(classes), 10)
    images = centres[labels] + 0.01 * rng.standard_normal((len(labels), classes * 2))

    def flat_features(net, imgs):
        flat = imgs.reshape(len(imgs), -1)
        return flat / np.linalg.norm(flat, axis=1, keepdims=True)

    monkeypatch.setattr(trainer, "extract_features", flat_features)
    prototypes = Prototypes(np.arange(classes), centres)
    np.testing.assert_array_equal(predict_nme(prototypes, images, net=None), labels)


def test_predict_nme_needs_prototypes():
    with pytest.raises(UsageError):
        predict_nme(Prototypes(np.zeros(0, dtype=np.int64), np.zeros((0, 8))), np.zeros((1, 8, 8, 3)), _net())


def test_average_accuracy():
    assert average_accuracy([80.0, 60.0, 40.0]) == (60.0, 40.0)
    with pytest.raises(UsageError):
        average_accuracy([])


# --- training ---

def test_train_task_two_steps(tmp_path):
    stream = _stream()
    log_path = tmp_path / "epochs.jsonl"
    net, memory, outcomes = _run_tasks(stream, _tiny_train(), log_path=str(log_path))

    assert net.feature_dim == 16
    assert memory.size <= 20
    assert sorted(memory.per_class) == [0, 1, 2, 3]
    assert outcomes[0].align_gamma is None and outcomes[1].align_gamma is not None
    assert len(outcomes[1].prototypes) == 4

    records = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [(r["task"], r["epoch"]) for r in records] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert records[0]["aux"] == 0.0 and records[2]["aux"] > 0.0
    assert records[2]["matching"] >= 0.0 and records[2]["kappa"] > 0.0
    assert records[1]["lr"] == pytest.approx(0.01)

    metrics = evaluate_step(net, outcomes[1].prototypes, stream, stream.tasks[1])
    assert 0.0 <= metrics.cnn_accuracy <= 100.0
    assert metrics.old_accuracy is not None and metrics.nme_accuracy is not None


def test_linear_head_baseline_runs():
    stream = _stream()
    torch.manual_seed(0)
    net, memory = IncrementalNet(3, 8, 4, use_vmf=False), ExemplarMemory(20)
    off = Components(mcmix=False, vmf=False, matching=False, aux=False, weight_align=False)
    for task in stream.tasks:
        expand(net, task.total_classes, len(task.new_classes))
        outcome = train_task(net, task, stream, memory, _tiny_train(), off)
    assert outcome.epochs[-1]["kappa"] is None
    assert outcome.epochs[-1]["alignment"] is None


def test_head_must_match_task():
    stream = _stream()
    net = expand(_net(), 1, 1)
    with pytest.raises(UsageError):
        train_task(net, stream.tasks[0], stream, ExemplarMemory(20), _tiny_train())


def test_non_finite_loss_reports_position():
    stream = _stream()
    net = expand(_net(), 2, 2)
    with torch.no_grad():
        net.head.log_kappa.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_task(net, stream.tasks[0], stream, ExemplarMemory(20), _tiny_train())
    assert net.in_task is False


def test_zero_weights_constant_schedule_match_cutmix_trajectory():
    # budget 20 keeps every base sample, so task-2 counts are balanced and w == 0
    stream = _stream()
    off = dict(aux=False, matching=False, weight_align=False)
    constant = _tiny_train(eta_ma=0.0, eta_aux=0.0)
    constant.mix.method = "mcmix"
    constant.mix.schedule.kind = "constant"
    cutmix = _tiny_train(eta_ma=0.0, eta_aux=0.0)
    cutmix.mix.method = "cutmix"

    _, _, a = _run_tasks(stream, constant, Components(**off))
    _, _, b = _run_tasks(stream, cutmix, Components(**off))
    assert [r["loss"] for r in a[1].epochs] == [r["loss"] for r in b[1].epochs]


def test_fixed_seed_is_bit_identical():
    stream = _stream()
    _, _, a = _run_tasks(stream, _tiny_train())
    _, _, b = _run_tasks(stream, _tiny_train())
    assert [r["loss"] for o in a for r in o.epochs] == [r["loss"] for o in b for r in o.epochs]
    assert a[-1].memory.per_class == b[-1].memory.per_class


def test_zero_lr_epoch_leaves_parameters_unchanged():
    stream = _stream()
    net = expand(_net(), 2, 2)
    before = {name: p.detach().clone() for name, p in net.named_parameters()}
    outcome = train_task(net, stream.tasks[0], stream, ExemplarMemory(20),
                         _tiny_train(epochs=1, decay_epochs=[], lr=0.0))
    assert np.isfinite(outcome.epochs[0]["loss"])
    for name, p in net.named_parameters():
        assert torch.equal(p.detach(), before[name]), name


def test_matching_improves_alignment_without_collapsing_kappa():
    stream = _stream()
    net = expand(_net(), 2, 2)
    outcome = train_task(net, stream.tasks[0], stream, ExemplarMemory(20),
                         _tiny_train(epochs=5, decay_epochs=[4], eta_ma=2.0))
    first, last = outcome.epochs[0], outcome.epochs[-1]
    assert last["alignment"] >= first["alignment"]
    assert net.head.kappa().item() > 1.0


# --- prototypes ---

def _unit_rows(rng, n, d):
    rows = rng.standard_normal((n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def test_prototypes_are_normalized_exemplar_means(monkeypatch, rng):
    feats = _unit_rows(rng, 12, 5)
    monkeypatch.setattr(trainer, "extract_features", lambda net, imgs: imgs)
    memory = ExemplarMemory(20, per_class={0: [0, 1, 2, 3], 1: [7], 2: []})
    prototypes = compute_prototypes(memory, SimpleNamespace(feature_dim=5), SimpleNamespace(train_images=feats))

    np.testing.assert_array_equal(prototypes.classes, [0, 1])
    mean = feats[[0, 1, 2, 3]].mean(axis=0)
    np.testing.assert_allclose(prototypes.directions[0], mean / np.linalg.norm(mean), atol=1e-12)
    np.testing.assert_allclose(prototypes.directions[1], feats[7], atol=1e-12)


def test_zero_exemplar_mean_is_rejected(monkeypatch, rng):
    v = _unit_rows(rng, 1, 5)[0]
    monkeypatch.setattr(trainer, "extract_features", lambda net, imgs: imgs)
    memory = ExemplarMemory(20, per_class={0: [0, 1]})
    with pytest.raises(NumericError):
        compute_prototypes(memory, SimpleNamespace(feature_dim=5), SimpleNamespace(train_images=np.stack([v, -v])))
