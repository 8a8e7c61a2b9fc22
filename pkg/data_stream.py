# -*- coding: utf-8 -*-
"""
Class-incremental task streams under the B0 / B50 protocols.

Labels inside a TaskStream are positions in the class order, so the classes of
task t always occupy the output range [|Y_1:t-1|, |Y_1:t|). The original class
ids stay available through `TaskStream.class_order`.
"""
import os
import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field

from cil_errors import ConfigurationError, InvariantViolation

logger = logging.getLogger(__name__)

MIN_SIDE = 8


# --- Dataset sources ---

@dataclass(frozen=True)
class DatasetSource:
    """One split of a dataset: images (N, H, W, C) in [0, 1] and integer labels."""
    name: str
    classes: int
    images: np.ndarray
    labels: np.ndarray
    split: Literal["train", "test"]

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ConfigurationError(f"{self.name}/{self.split}: images must be (N, H, W, C), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ConfigurationError(f"{self.name}/{self.split}: {len(self.images)} images but {len(self.labels)} labels")
        _, h, w, _ = self.images.shape
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ConfigurationError(f"{self.name}/{self.split}: images must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ConfigurationError(f"{self.name}/{self.split}: labels outside [0, {self.classes})")

    @property
    def class_set(self) -> set:
        return set(np.unique(self.labels).tolist())


def make_synthetic_source(classes: int = 10, height: int = 16, width: int = 16, channels: int = 3,
                          train_per_class: int = 20, test_per_class: int = 10, noise: float = 0.05,
                          seed: int = 0) -> Tuple[DatasetSource, DatasetSource]:
    """Per-class Gaussian-blob images: each class owns a blob centre and a colour."""
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2, 0.8, size=(classes, 2)) * np.array([height, width])
    colours = rng.uniform(0.2, 1.0, size=(classes, channels))
    sigma = max(height, width) / 6.0
    yy, xx = np.mgrid[0:height, 0:width]

    def draw(per_class: int) -> Tuple[np.ndarray, np.ndarray]:
        images = np.empty((classes * per_class, height, width, channels), dtype=np.float32)
        labels = np.repeat(np.arange(classes), per_class)
        for n, c in enumerate(labels):
            cy, cx = centres[c] + rng.normal(0.0, 0.5, size=2)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
            img = blob[..., None] * colours[c] + rng.normal(0.0, noise, size=(height, width, channels))
            images[n] = np.clip(img, 0.0, 1.0)
        return images, labels.astype(np.int64)

    train_images, train_labels = draw(train_per_class)
    test_images, test_labels = draw(test_per_class)
    logger.info(f"Synthetic source: C={classes}, {height}x{width}x{channels}, "
                f"{train_per_class}/{test_per_class} train/test per class, seed={seed}")
    return (DatasetSource("synthetic", classes, train_images, train_labels, "train"),
            DatasetSource("synthetic", classes, test_images, test_labels, "test"))


def load_manifest_source(root: str) -> Tuple[DatasetSource, DatasetSource]:
    """Load `<root>/manifest.csv` (columns path,label,split) and decode the PNG files it lists."""
    manifest_path = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest_path):
        raise ConfigurationError(f"No manifest.csv under {root}")
    manifest = pd.read_csv(manifest_path)
    missing = {"path", "label", "split"} - set(manifest.columns)
    if missing:
        raise ConfigurationError(f"{manifest_path} is missing columns {sorted(missing)}")

    name = os.path.basename(os.path.normpath(root))
    classes = int(manifest["label"].max()) + 1
    splits = {}
    for split in ("train", "test"):
        rows = manifest[manifest["split"] == split]
        images = []
        for rel_path in rows["path"]:
            with Image.open(os.path.join(root, rel_path)) as img:
                arr = np.asarray(img, dtype=np.float32) / 255.0
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr)
        if not images:
            raise ConfigurationError(f"{manifest_path} has no '{split}' rows")
        shapes = {a.shape for a in images}
        if len(shapes) != 1:
            raise ConfigurationError(f"{split} images have mixed shapes: {sorted(shapes)}")
        splits[split] = DatasetSource(name, classes, np.stack(images), rows["label"].to_numpy(dtype=np.int64), split)

    if splits["train"].class_set != splits["test"].class_set:
        raise ConfigurationError(f"{name}: train and test class sets differ")
    logger.info(f"Loaded {name}: {len(splits['train'].labels)} train / {len(splits['test'].labels)} test samples, C={classes}")
    return splits["train"], splits["test"]


# --- Benchmark protocol ---

class BenchmarkSpec(BaseModel):
    """Protocol, class order and memory budget for one benchmark."""
    protocol: Literal["B0", "B50"] = "B0"
    total_classes: int = Field(10, ge=1)
    steps: int = Field(5, ge=1)
    class_order: Optional[List[int]] = None
    memory_policy: Literal["total", "per_class"] = "total"
    memory_size: int = Field(2000, ge=0)

    @property
    def base_classes(self) -> int:
        if self.protocol == "B0":
            return self.total_classes // self.steps
        return self.total_classes // 2

    def task_sizes(self) -> List[int]:
        C, T = self.total_classes, self.steps
        if self.protocol == "B0":
            if C % T:
                raise ConfigurationError(f"B0 needs C divisible by T, got (C, T) = ({C}, {T})")
            return [C // T] * T
        half = C // 2
        if C % 2 or half % T:
            raise ConfigurationError(f"B50 needs C/2 divisible by T, got (C, T) = ({C}, {T})")
        return [half] + [half // T] * T


def seeded_class_order(classes: int, seed: int) -> List[int]:
    return np.random.default_rng(seed).permutation(classes).tolist()


# --- Task stream ---

@dataclass(frozen=True)
class TaskData:
    index: int                 # 1-based
    new_classes: List[int]     # internal ids, in class order
    new_class_ids: List[int]   # original dataset ids
    train_indices: np.ndarray  # rows of TaskStream.train_images
    test_indices: np.ndarray   # rows of TaskStream.test_images

    @property
    def known_classes(self) -> int:
        return self.new_classes[0]

    @property
    def total_classes(self) -> int:
        return self.new_classes[-1] + 1


@dataclass(frozen=True)
class TaskStream:
    tasks: List[TaskData]
    class_order: List[int]
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    cumulative_classes: List[int] = field(default_factory=list)

    def seen_test_indices(self, task: TaskData) -> np.ndarray:
        return np.flatnonzero(self.test_labels < task.total_classes)


def build_task_stream(source: Tuple[DatasetSource, DatasetSource], benchmark: BenchmarkSpec) -> TaskStream:
    train, test = source
    sizes = benchmark.task_sizes()
    C = benchmark.total_classes
    order = benchmark.class_order if benchmark.class_order is not None else list(range(C))
    if sorted(order) != list(range(C)):
        raise ConfigurationError(f"class_order must be a permutation of [0, {C})")
    for src in (train, test):
        if src.class_set != set(range(C)):
            raise ConfigurationError(f"{src.name}/{src.split} covers {len(src.class_set)} classes, benchmark needs {C}")

    position = np.empty(C, dtype=np.int64)
    position[np.asarray(order)] = np.arange(C)
    train_labels = position[train.labels]
    test_labels = position[test.labels]

    tasks, cumulative, start = [], [], 0
    for t, size in enumerate(sizes, start=1):
        new = list(range(start, start + size))
        tasks.append(TaskData(
            index=t,
            new_classes=new,
            new_class_ids=[order[c] for c in new],
            train_indices=np.flatnonzero((train_labels >= start) & (train_labels < start + size)),
            test_indices=np.flatnonzero((test_labels >= start) & (test_labels < start + size)),
        ))
        start += size
        cumulative.append(start)

    logger.info(f"Built {benchmark.protocol} stream: C={C}, task sizes {sizes}")
    return TaskStream(tasks, list(order), train.images, train_labels, test.images, test_labels, cumulative)


def remap_aux_labels(labels: Sequence[int], old_class_set: Sequence[int], new_classes: Sequence[int]) -> np.ndarray:
    """Old classes collapse to 0; the k-th new class (1-based, in class order) maps to k."""
    if len(old_class_set) == 0:
        raise InvariantViolation("Auxiliary labels are undefined for the first task (no old classes)")
    lookup = {c: 0 for c in old_class_set}
    lookup.update({c: k for k, c in enumerate(new_classes, start=1)})
    out = np.empty(len(labels), dtype=np.int64)
    for n, y in enumerate(np.asarray(labels).tolist()):
        if y not in lookup:
            raise InvariantViolation(f"Label {y} is outside the seen classes of this task")
        out[n] = lookup[y]
    return out
