# -*- coding: utf-8 -*-
"""
Per-task training, post-task weight alignment and evaluation (CNN and NME).

Accuracies are percentages over the test samples of all classes seen so far.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, Field, model_validator
from tqdm import tqdm

from backbone import IncrementalNet, extract_features, frozen_checksums, to_tensor
from cil_errors import InvariantViolation, NumericError, UsageError
from data_stream import TaskData, TaskStream, remap_aux_labels
from mc_mix import ClassWeights, MixMethod, MixSchedule, class_weights, mix_batch
from memory import ExemplarMemory, update_memory
from vmf_math import batch_prototypes, matching_loss, nll_soft

logger = logging.getLogger(__name__)


# --- Configuration ---

class MixConfig(BaseModel):
    method: MixMethod = "mcmix"
    schedule: MixSchedule = Field(default_factory=MixSchedule)
    alpha: float = Field(1.0, gt=0)


class Components(BaseModel):
    """Switches for the ablations; matching needs the vMF head."""
    mcmix: bool = True
    vmf: bool = True
    matching: bool = True
    aux: bool = True
    weight_align: bool = True

    @model_validator(mode="after")
    def matching_requires_vmf(self):
        if self.matching and not self.vmf:
            raise ValueError("components.matching requires components.vmf")
        return self


class TrainConfig(BaseModel):
    epochs: int = Field(8, ge=1)
    batch_size: int = Field(32, ge=1)
    lr: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(2e-4, ge=0)
    decay_epochs: List[int] = Field(default_factory=lambda: [5, 7])
    decay_factor: float = Field(0.1, gt=0)
    warmup_epochs: int = Field(1, ge=0)
    eta_aux: float = Field(1.0, ge=0)
    eta_ma: float = Field(2.0, ge=0)
    mix: MixConfig = Field(default_factory=MixConfig)
    aux_label_mode: Literal["dominant", "first"] = "dominant"
    detach_prototypes: bool = False
    # kappa A_d(kappa) in the matching loss is a constant unless set
    matching_kappa_grad: bool = False
    feature_dim: int = Field(32, ge=1)
    conv_width: int = Field(16, ge=1)
    seed: int = 0
    progress: bool = False

    @model_validator(mode="after")
    def check_lr_schedule(self):
        if any(b <= a for a, b in zip(self.decay_epochs, self.decay_epochs[1:])):
            raise ValueError(f"decay_epochs must be strictly increasing, got {self.decay_epochs}")
        if self.decay_epochs and (self.decay_epochs[0] <= 0 or self.decay_epochs[-1] >= self.epochs):
            raise ValueError(f"decay_epochs must lie in (0, {self.epochs}), got {self.decay_epochs}")
        if self.decay_epochs and self.warmup_epochs >= self.decay_epochs[0]:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must end before the first decay ({self.decay_epochs[0]})")
        return self

    def lr_factor(self, epoch: int) -> float:
        """Linear warm-up, then multiply by decay_factor at every decay epoch passed."""
        if epoch < self.warmup_epochs:
            return (epoch + 1) / (self.warmup_epochs + 1)
        return self.decay_factor ** sum(1 for d in self.decay_epochs if epoch >= d)


# --- Results ---

@dataclass
class StepMetrics:
    task: int
    seen_classes: int
    cnn_accuracy: float
    nme_accuracy: Optional[float]
    agreement: Optional[float]
    old_accuracy: Optional[float]
    new_accuracy: float

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class Prototypes:
    classes: np.ndarray     # (K,) internal class ids
    directions: np.ndarray  # (K, d) unit rows

    def __len__(self):
        return len(self.classes)


@dataclass
class TaskOutcome:
    memory: ExemplarMemory
    prototypes: Prototypes
    epochs: List[Dict] = field(default_factory=list)
    align_gamma: Optional[float] = None


# --- Training ---

def _class_counts(labels: np.ndarray) -> Dict[int, int]:
    classes, counts = np.unique(labels, return_counts=True)
    return {int(c): int(n) for c, n in zip(classes, counts)}


def _write_jsonl(path: Optional[str], record: Dict):
    if path is None:
        return
    with open(path, "a") as f:
        f.write(json.dumps(record) + "\n")


def train_task(net: IncrementalNet, task: TaskData, stream: TaskStream, memory: ExemplarMemory,
               config: TrainConfig, components: Components = None,
               epoch_log_path: Optional[str] = None) -> TaskOutcome:
    """
    Train the expanded network on D_t plus the exemplar memory, then align the new
    classifier rows, refresh the memory and recompute NME prototypes.
    """
    components = components or Components()
    if net.num_classes != task.total_classes:
        raise UsageError(f"Head has {net.num_classes} classes, task {task.index} needs {task.total_classes}; call expand() first")

    rows = np.concatenate([task.train_indices, memory.indices()])
    counts = _class_counts(stream.train_labels[rows])
    weights = class_weights(counts) if task.index >= 2 else ClassWeights.zeros(counts)
    method = config.mix.method if components.mcmix else "none"
    schedule = config.mix.schedule.model_copy(update={"total_epochs": config.epochs})
    use_aux = components.aux and task.index >= 2 and net.aux_head is not None
    old_classes = list(range(task.known_classes))
    logger.info(f"Task {task.index}: {len(task.train_indices)} new + {len(rows) - len(task.train_indices)} memory samples, "
                f"mix={method}, aux={use_aux}, matching={components.matching}")

    generator = torch.Generator().manual_seed(config.seed * 1000 + task.index)
    rng = np.random.default_rng([config.seed, task.index])
    optimizer = torch.optim.SGD(net.trainable_parameters(), lr=config.lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, config.lr_factor)
    checksums = frozen_checksums(net)

    records = []
    net.in_task = True
    try:
        epochs = range(config.epochs)
        for epoch in (tqdm(epochs, desc=f"task {task.index}") if config.progress else epochs):
            net.train()
            lr = optimizer.param_groups[0]["lr"]
            sums = {"loss": 0.0, "nll": 0.0, "aux": 0.0, "matching": 0.0, "alignment": 0.0}
            batches = 0
            order = rows[torch.randperm(len(rows), generator=generator).numpy()]
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                batch_rows = order[start:start + config.batch_size]
                batch = mix_batch(method, stream.train_images[batch_rows], stream.train_labels[batch_rows], epoch,
                                  weights, schedule, config.mix.alpha, rng, task.total_classes, task.index)
                out = net(to_tensor(batch.images))
                labels = batch.dominant_labels() if config.aux_label_mode == "dominant" else batch.labels_i
                labels_t = torch.from_numpy(labels.astype(np.int64))

                nll = nll_soft(out["logits"], torch.from_numpy(batch.soft_labels).to(out["logits"].dtype))
                loss = nll
                aux = matching = torch.zeros(())
                if use_aux:
                    aux_targets = torch.from_numpy(remap_aux_labels(labels, old_classes, task.new_classes))
                    aux = F.cross_entropy(out["aux_logits"], aux_targets)
                    loss = loss + config.eta_aux * aux
                if components.vmf:
                    prototypes = batch_prototypes(out["z_bar"], labels_t)
                    with torch.no_grad():
                        cos = (net.head.directions()[prototypes.classes] * prototypes.directions).sum(dim=1)
                        sums["alignment"] += cos.mean().item()
                    if components.matching:
                        matching = matching_loss(net.head, prototypes, config.detach_prototypes,
                                                 config.matching_kappa_grad)
                        loss = loss + config.eta_ma * matching

                if not torch.isfinite(loss):
                    error_msg = f"Non-finite loss at task {task.index}, epoch {epoch}, batch {b}: nll={nll.item()}, aux={aux.item()}, matching={matching.item()}"
                    logger.error(error_msg)
                    raise NumericError(error_msg)

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                sums["loss"] += loss.item()
                sums["nll"] += nll.item()
                sums["aux"] += aux.item()
                sums["matching"] += matching.item()
                batches += 1

            scheduler.step()
            if frozen_checksums(net) != checksums:
                error_msg = f"Frozen extractor changed during task {task.index}, epoch {epoch}"
                logger.error(error_msg)
                raise InvariantViolation(error_msg)

            record = {"task": task.index, "epoch": epoch, "lr": lr, "batches": batches}
            record.update({k: v / max(batches, 1) for k, v in sums.items()})
            record["kappa"] = float(net.head.kappa().item()) if components.vmf else None
            if not components.vmf:
                record["alignment"] = None
            records.append(record)
            _write_jsonl(epoch_log_path, record)
            logger.debug(f"Task {task.index} epoch {epoch}: loss={record['loss']:.4f} lr={lr:.4g}")
    finally:
        net.in_task = False

    gamma = None
    if components.weight_align and task.index >= 2:
        gamma = weight_align(net, old_classes, task.new_classes)

    update_memory(memory, lambda idx: extract_features(net, stream.train_images[idx]), task, stream,
                  rng=np.random.default_rng([config.seed, task.index, 1]))
    prototypes = compute_prototypes(memory, net, stream)
    return TaskOutcome(memory, prototypes, records, gamma)


def weight_align(net: IncrementalNet, old_class_ids: Sequence[int], new_class_ids: Sequence[int]) -> float:
    """Scale new-class raw rows by mean old norm / mean new norm. Returns the factor."""
    with torch.no_grad():
        norms = net.head.weight.norm(dim=1)
        mean_old = norms[list(old_class_ids)].mean().item()
        mean_new = norms[list(new_class_ids)].mean().item()
        if mean_old == 0 or mean_new == 0:
            raise NumericError(f"Weight alignment with zero mean norm: old={mean_old}, new={mean_new}")
        gamma = mean_old / mean_new
        net.head.weight[list(new_class_ids)] *= gamma
    logger.info(f"Weight align: gamma={gamma:.4f}")
    return gamma


# --- Prediction ---

@torch.no_grad()
def predict_cnn(net: IncrementalNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Argmax of the classifier posterior; numpy argmax resolves ties to the lowest id."""
    was_training = net.training
    net.eval()
    logits = [net(to_tensor(images[s:s + batch_size]))["logits"].double().numpy()
              for s in range(0, len(images), batch_size)]
    net.train(was_training)
    if not logits:
        return np.zeros(0, dtype=np.int64)
    return np.argmax(np.concatenate(logits), axis=1)


def compute_prototypes(memory: ExemplarMemory, net: IncrementalNet, stream: TaskStream) -> Prototypes:
    classes, directions = [], []
    for c in sorted(memory.per_class):
        rows = memory.per_class[c]
        if not rows:
            logger.warning(f"Class {c} has no exemplars; excluded from NME")
            continue
        mean = extract_features(net, stream.train_images[np.asarray(rows)]).mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0:
            raise NumericError(f"Exemplar mean of class {c} is zero")
        classes.append(c)
        directions.append(mean / norm)
    dim = net.feature_dim
    return Prototypes(np.asarray(classes, dtype=np.int64),
                      np.stack(directions) if directions else np.zeros((0, dim)))


def predict_nme(prototypes: Prototypes, images: np.ndarray, net: IncrementalNet) -> np.ndarray:
    if len(prototypes) == 0:
        raise UsageError("NME prediction needs at least one class prototype")
    feats = extract_features(net, images)
    return prototypes.classes[np.argmax(feats @ prototypes.directions.T, axis=1)]


# --- Evaluation ---

def _accuracy(pred: np.ndarray, y: np.ndarray) -> Optional[float]:
    if len(y) == 0:
        return None
    return float(100.0 * np.mean(pred == y))


def average_accuracy(per_step: Sequence[float]) -> Tuple[float, float]:
    """(average over steps, last step)."""
    if len(per_step) == 0:
        raise UsageError("No per-step accuracies to average")
    return float(np.mean(per_step)), float(per_step[-1])


def evaluate_step(net: IncrementalNet, prototypes: Prototypes, stream: TaskStream, task: TaskData) -> StepMetrics:
    idx = stream.seen_test_indices(task)
    images, y = stream.test_images[idx], stream.test_labels[idx]
    cnn = predict_cnn(net, images)
    nme = predict_nme(prototypes, images, net) if len(prototypes) else None
    old = y < task.known_classes
    metrics = StepMetrics(
        task=task.index,
        seen_classes=task.total_classes,
        cnn_accuracy=_accuracy(cnn, y),
        nme_accuracy=_accuracy(nme, y) if nme is not None else None,
        agreement=float(100.0 * np.mean(cnn == nme)) if nme is not None and len(y) else None,
        old_accuracy=_accuracy(cnn[old], y[old]),
        new_accuracy=_accuracy(cnn[~old], y[~old]),
    )
    logger.info(f"Task {task.index}: CNN {metrics.cnn_accuracy:.2f}% | NME "
                f"{'n/a' if metrics.nme_accuracy is None else f'{metrics.nme_accuracy:.2f}%'}")
    return metrics


def set_determinism(seed: int):
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    if not os.getenv("CUBLAS_WORKSPACE_CONFIG"):
        os.environ["CUBLAS_WORKSPACE_CONFIG"] = ":4096:8"


if __name__ == "__main__":
    print(TrainConfig().model_dump_json(indent=2))
