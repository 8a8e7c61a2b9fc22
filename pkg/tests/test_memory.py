# -*- coding: utf-8 -*-
import numpy as np
import pytest

from cil_errors import InvariantViolation
from memory import ExemplarMemory, herding_select, memory_from_triples, memory_triples, update_memory


def _brute_force_herding(feats, m):
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    mean = feats.mean(axis=0)
    chosen = []
    for _ in range(min(m, len(feats))):
        best, best_dist = None, np.inf
        for k in range(len(feats)):
            if k in chosen:
                continue
            dist = np.linalg.norm(mean - feats[chosen + [k]].mean(axis=0))
            if dist < best_dist:
                best, best_dist = k, dist
        chosen.append(best)
    return chosen


def test_herding_first_pick_is_closest_to_mean(rng):
    feats = rng.standard_normal((12, 5))
    unit = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    expected = int(np.argmin(np.linalg.norm(unit - unit.mean(axis=0), axis=1)))
    assert herding_select(feats, 1) == [expected]


def test_herding_full_selection_is_permutation(rng):
    feats = rng.standard_normal((7, 4))
    assert sorted(herding_select(feats, 7)) == list(range(7))
    assert sorted(herding_select(feats, 20)) == list(range(7))


@pytest.mark.parametrize("seed", range(10))
def test_herding_matches_objective_scan(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    m = int(rng.integers(1, 4))
    feats = rng.standard_normal((n, 6))
    assert herding_select(feats, m) == _brute_force_herding(feats, m)


def test_herding_edge_cases():
    assert herding_select(np.eye(3), 0) == []
    with pytest.raises(InvariantViolation):
        herding_select(np.array([[1.0, 0.0], [0.0, 0.0]]), 1)


def _flat_features(stream):
    return lambda rows: stream.train_images[rows].reshape(len(rows), -1) + 1e-3


def test_total_policy_quota_and_prefix(small_stream):
    memory = ExemplarMemory(budget=7, policy="total")
    features = _flat_features(small_stream)
    history = []
    for task in small_stream.tasks:
        update_memory(memory, features, task, small_stream)
        quota = 7 // task.total_classes
        assert all(len(v) == min(quota, 6) for v in memory.per_class.values())
        assert memory.size <= 7
        history.append({c: list(v) for c, v in memory.per_class.items()})
    for before, after in zip(history, history[1:]):
        for c, rows in after.items():
            if c in before:
                assert rows == before[c][:len(rows)]


def test_per_class_policy_takes_min_of_m_and_available(small_stream):
    memory = ExemplarMemory(budget=4, policy="per_class")
    for task in small_stream.tasks:
        update_memory(memory, _flat_features(small_stream), task, small_stream)
    assert len(memory.per_class) == 10
    assert all(len(v) == 4 for v in memory.per_class.values())

    generous = ExemplarMemory(budget=50, policy="per_class")
    update_memory(generous, _flat_features(small_stream), small_stream.tasks[0], small_stream)
    assert all(len(v) == 6 for v in generous.per_class.values())


def test_exemplars_belong_to_their_class(small_stream):
    memory = ExemplarMemory(budget=10)
    for task in small_stream.tasks[:2]:
        update_memory(memory, _flat_features(small_stream), task, small_stream)
    for c, rows in memory.per_class.items():
        assert set(small_stream.train_labels[rows]) == {c}


def test_random_selection_is_seeded(small_stream):
    picks = []
    for _ in range(2):
        memory = ExemplarMemory(budget=6, selection="random")
        update_memory(memory, _flat_features(small_stream), small_stream.tasks[0], small_stream,
                      rng=np.random.default_rng(5))
        picks.append(memory.per_class)
    assert picks[0] == picks[1]


def test_check_budget_flags_overflow():
    memory = ExemplarMemory(budget=2, per_class={0: [1, 2], 1: [3]})
    with pytest.raises(InvariantViolation):
        memory.check_budget()


def test_triples_restore_memory(small_stream):
    memory = ExemplarMemory(budget=8)
    update_memory(memory, _flat_features(small_stream), small_stream.tasks[0], small_stream)
    triples = memory_triples(memory)
    assert all(rank < 4 for _, _, rank in triples)
    restored = memory_from_triples(list(reversed(triples)), 8)
    assert restored.per_class == memory.per_class
    np.testing.assert_array_equal(restored.indices(), memory.indices())
