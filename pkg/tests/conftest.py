# -*- coding: utf-8 -*-
import numpy as np
import pytest

from data_stream import BenchmarkSpec, build_task_stream, make_synthetic_source
from experiment_runner import ExperimentConfig


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setenv("CIL_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture
def make_config():
    """Tiny synthetic experiment: 8x8 images, narrow extractors, two epochs per task."""
    def factory(classes=4, steps=2, epochs=2, memory_size=20, protocol="B0", name="tiny", **overrides):
        data = {
            "name": name,
            "seed": 0,
            "dataset": {"classes": classes, "height": 8, "width": 8, "channels": 3,
                        "train_per_class": 10, "test_per_class": 5},
            "benchmark": {"protocol": protocol, "total_classes": classes, "steps": steps,
                          "memory_size": memory_size},
            "train": {"epochs": epochs, "batch_size": 16, "decay_epochs": [1] if epochs > 1 else [],
                      "warmup_epochs": 0, "feature_dim": 8, "conv_width": 4},
        }
        for key, value in overrides.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return ExperimentConfig.model_validate(data)
    return factory


@pytest.fixture
def small_stream():
    source = make_synthetic_source(classes=10, height=8, width=8, train_per_class=6, test_per_class=3, seed=1)
    return build_task_stream(source, BenchmarkSpec(protocol="B0", total_classes=10, steps=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
