# -*- coding: utf-8 -*-
"""
Fixed-budget exemplar memory with herding selection.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Sequence, Tuple

import numpy as np

from cil_errors import InvariantViolation

logger = logging.getLogger(__name__)


@dataclass
class ExemplarMemory:
    """
    per_class maps a class id to training-set row indices in herding order, so a
    prefix of any list is the best exemplar set of that size.
    """
    budget: int
    policy: Literal["total", "per_class"] = "total"
    selection: Literal["herding", "random"] = "herding"
    per_class: Dict[int, List[int]] = field(default_factory=dict)

    def quota(self, seen_classes: int) -> int:
        if self.policy == "per_class":
            return self.budget
        return self.budget // max(seen_classes, 1)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def indices(self) -> np.ndarray:
        if not self.per_class:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.asarray(self.per_class[c], dtype=np.int64) for c in sorted(self.per_class)])

    def check_budget(self):
        if self.policy == "total" and self.size > self.budget:
            raise InvariantViolation(f"Memory holds {self.size} exemplars, budget is {self.budget}")
        if self.policy == "per_class":
            over = {c: len(v) for c, v in self.per_class.items() if len(v) > self.budget}
            if over:
                raise InvariantViolation(f"Per-class budget {self.budget} exceeded by {over}")


def herding_select(class_features: np.ndarray, m: int) -> List[int]:
    """
    Greedy herding: at each step pick the unpicked row whose addition keeps the
    running mean closest to the class mean. Ties go to the lowest index.
    """
    if m <= 0:
        return []
    feats = np.asarray(class_features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise InvariantViolation("Herding received a zero-norm feature")
    feats = feats / norms
    n = len(feats)
    class_mean = feats.mean(axis=0)

    selected: List[int] = []
    running_sum = np.zeros_like(class_mean)
    available = np.ones(n, dtype=bool)
    for s in range(min(n, m)):
        candidate_means = (running_sum + feats) / (s + 1)
        dist = np.linalg.norm(class_mean - candidate_means, axis=1)
        dist[~available] = np.inf
        pick = int(np.argmin(dist))
        selected.append(pick)
        available[pick] = False
        running_sum += feats[pick]
    return selected


def update_memory(memory: ExemplarMemory, features_of, task, stream, rng: np.random.Generator = None) -> ExemplarMemory:
    """
    Shrink old classes to the new quota by herding prefix, then select exemplars
    for the task's new classes. `features_of(indices)` returns backbone features
    for rows of the stream's training set.
    """
    quota = memory.quota(task.total_classes)
    for c in list(memory.per_class):
        memory.per_class[c] = memory.per_class[c][:quota]

    for c in task.new_classes:
        class_rows = np.flatnonzero(stream.train_labels == c)
        if memory.selection == "random":
            rng = rng if rng is not None else np.random.default_rng(c)
            order = rng.permutation(len(class_rows))[:quota].tolist()
        else:
            order = herding_select(features_of(class_rows), quota) if quota > 0 else []
        memory.per_class[c] = [int(class_rows[k]) for k in order]

    memory.check_budget()
    logger.info(f"Memory after task {task.index}: {memory.size} exemplars, quota {quota}/class "
                f"over {len(memory.per_class)} classes")
    return memory


def memory_triples(memory: ExemplarMemory) -> List[Tuple[int, int, int]]:
    """(class id, sample index, herding rank) for every stored exemplar."""
    return [(c, idx, rank) for c in sorted(memory.per_class) for rank, idx in enumerate(memory.per_class[c])]


def memory_from_triples(triples: Sequence[Sequence[int]], budget: int, policy: str = "total",
                        selection: str = "herding") -> ExemplarMemory:
    memory = ExemplarMemory(budget, policy, selection)
    for c, idx, rank in sorted(triples, key=lambda t: (t[0], t[2])):
        memory.per_class.setdefault(int(c), []).append(int(idx))
    return memory
