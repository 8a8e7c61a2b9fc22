# -*- coding: utf-8 -*-
"""
Mix-based augmentation: Mixup, CutMix and Memory-Centric Mix (MC-Mix).

MC-Mix keeps the CutMix image operation and rescales the label coefficients:
    lambda_hat(e, y, lambda) = (w_y * sigma(e) + 1) * lambda
where w_y = Freq[y] - 1 is the normalized inverse class frequency minus one and
sigma(e) is a non-stationary schedule over training epochs. Rare (memory) classes
get w_y > 0 and their label mass grows as training proceeds.

Every function takes an explicit numpy Generator; the callers own rng streams.
"""
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Literal, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit

from cil_errors import ConfigurationError, InvariantViolation

logger = logging.getLogger(__name__)

MixMethod = Literal["none", "mixup", "cutmix", "cutmix-w", "mcmix"]


# --- Schedule ---

class MixSchedule(BaseModel):
    kind: Literal["sigmoid", "linear", "step", "constant"] = "sigmoid"
    gamma: float = Field(0.5, gt=0)
    tau: float = Field(0.6, ge=0, le=1)
    total_epochs: int = Field(240, ge=1)

    @property
    def centre(self) -> float:
        return self.tau * self.total_epochs


def schedule_value(schedule: MixSchedule, e: float) -> float:
    """sigma_{gamma,tau}(e) in [0, 1]."""
    shift = e - schedule.centre
    if schedule.kind == "sigmoid":
        return float(expit(schedule.gamma * shift))
    if schedule.kind == "linear":
        # same slope as the sigmoid at its centre
        return float(np.clip(0.5 + schedule.gamma / 4.0 * shift, 0.0, 1.0))
    if schedule.kind == "step":
        return 1.0 if shift >= 0 else 0.0
    return 1.0


def mean_function(w_y: float, schedule: MixSchedule, e: float) -> float:
    """Expected lambda_hat under a symmetric Beta: (w_y * sigma(e) + 1) / 2."""
    return (w_y * schedule_value(schedule, e) + 1.0) / 2.0


# --- Class weights ---

@dataclass(frozen=True)
class ClassWeights:
    w: Dict[int, float]
    counts: Dict[int, int]

    def __getitem__(self, y: int) -> float:
        return self.w[y]

    @classmethod
    def zeros(cls, classes) -> "ClassWeights":
        return cls({int(c): 0.0 for c in classes}, {int(c): 0 for c in classes})


def class_weights(counts: Mapping[int, int]) -> ClassWeights:
    """Freq[y] = C' (1/n_y) / sum_j (1/n_j); w_y = Freq[y] - 1. Exact on integer counts."""
    for y, n in counts.items():
        if n < 1:
            raise InvariantViolation(f"Class {y} has {n} samples; every seen class needs at least one")
    inv_total = sum(Fraction(1, int(n)) for n in counts.values())
    seen = len(counts)
    w = {int(y): float(seen * Fraction(1, int(n)) / inv_total - 1) for y, n in counts.items()}
    return ClassWeights(w, {int(y): int(n) for y, n in counts.items()})


# --- Coefficients and masks ---

def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    if alpha <= 0:
        raise ConfigurationError(f"Beta shape alpha must be > 0, got {alpha}")
    return float(rng.beta(alpha, alpha))


def sample_cut_mask(height: int, width: int, lam_raw: float, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
    """
    Binary mask with a rectangle of zeros of area ~ (1 - lam_raw) * H * W.
    Ones keep x_i, zeros show x_j. Returns the mask and the realized fraction of ones.
    """
    cut_rat = np.sqrt(1.0 - lam_raw)
    cut_h, cut_w = int(height * cut_rat), int(width * cut_rat)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))

    if cut_h >= height:
        y1, y2 = 0, height
    else:
        y1, y2 = np.clip(cy - cut_h // 2, 0, height), np.clip(cy - cut_h // 2 + cut_h, 0, height)
    if cut_w >= width:
        x1, x2 = 0, width
    else:
        x1, x2 = np.clip(cx - cut_w // 2, 0, width), np.clip(cx - cut_w // 2 + cut_w, 0, width)

    mask = np.ones((height, width), dtype=np.uint8)
    mask[y1:y2, x1:x2] = 0
    return mask, float(mask.sum()) / (height * width)


def lambda_hat(lam: float, w_y: float, sigma: float) -> float:
    return (w_y * sigma + 1.0) * lam


def mix_labels(y_i: int, y_j: int, lam: float, e: float, weights: ClassWeights,
               schedule: MixSchedule, num_classes: int) -> np.ndarray:
    """lambda_hat(e, y_i, lambda) onehot(y_i) + lambda_hat(e, y_j, 1 - lambda) onehot(y_j). Not renormalized."""
    sigma = schedule_value(schedule, e)
    label = np.zeros(num_classes, dtype=np.float64)
    label[y_i] += lambda_hat(lam, weights[y_i], sigma)
    label[y_j] += lambda_hat(1.0 - lam, weights[y_j], sigma)
    return label


# --- Batches ---

@dataclass
class MixBatch:
    images: np.ndarray                # (B, H, W, C)
    soft_labels: np.ndarray           # (B, num_classes)
    labels_i: np.ndarray              # (B,) hard label of x_i
    labels_j: np.ndarray              # (B,) hard label of the partner x_j
    lambdas: np.ndarray               # (B, 3): lambda, lambda_hat_i, lambda_hat_j
    masks: Optional[np.ndarray]       # (B, H, W) binary, None for mixup / pass-through
    pairing: np.ndarray               # (B,) partner index per sample

    def dominant_labels(self) -> np.ndarray:
        """Per sample, the pair member with the larger lambda_hat (ties keep x_i)."""
        return np.where(self.lambdas[:, 1] >= self.lambdas[:, 2], self.labels_i, self.labels_j)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def passthrough_batch(images: np.ndarray, labels: np.ndarray, num_classes: int) -> MixBatch:
    n = len(labels)
    ones = np.ones(n)
    return MixBatch(images, _one_hot(labels, num_classes), labels, labels,
                    np.stack([ones, ones, np.zeros(n)], axis=1), None, np.arange(n))


def mc_mix_batch(images: np.ndarray, labels: np.ndarray, epoch: float, weights: ClassWeights,
                 schedule: MixSchedule, alpha: float, rng: np.random.Generator, num_classes: int,
                 task_index: int = 2, cut: bool = True) -> MixBatch:
    """
    Pair the batch with a random permutation of itself; per pair draw one lambda and
    one mask, mix images and build soft labels with the realized lambda.
    `cut=False` interpolates whole images instead (Mixup).
    """
    n = len(labels)
    if task_index < 2 or n < 2:
        return passthrough_batch(images, labels, num_classes)

    pairing = rng.permutation(n)
    height, width = images.shape[1], images.shape[2]
    mixed = np.empty_like(images)
    soft = np.zeros((n, num_classes), dtype=np.float64)
    lambdas = np.zeros((n, 3), dtype=np.float64)
    masks = np.zeros((n, height, width), dtype=np.uint8) if cut else None
    sigma = schedule_value(schedule, epoch)

    for i in range(n):
        j = pairing[i]
        lam = sample_lambda(alpha, rng)
        if cut:
            mask, lam = sample_cut_mask(height, width, lam, rng)
            masks[i] = mask
            m = mask[..., None].astype(images.dtype)
            mixed[i] = m * images[i] + (1 - m) * images[j]
        else:
            mixed[i] = lam * images[i] + (1.0 - lam) * images[j]
        y_i, y_j = int(labels[i]), int(labels[j])
        soft[i] = mix_labels(y_i, y_j, lam, epoch, weights, schedule, num_classes)
        lambdas[i] = (lam, lambda_hat(lam, weights[y_i], sigma), lambda_hat(1.0 - lam, weights[y_j], sigma))

    return MixBatch(mixed, soft, labels.copy(), labels[pairing], lambdas, masks, pairing)


def mix_batch(method: MixMethod, images: np.ndarray, labels: np.ndarray, epoch: float,
              weights: ClassWeights, schedule: MixSchedule, alpha: float, rng: np.random.Generator,
              num_classes: int, task_index: int) -> MixBatch:
    """Dispatch over the ablation methods; all share the rng call order of mc_mix_batch."""
    if method == "none":
        return passthrough_batch(images, labels, num_classes)
    if method == "mcmix":
        return mc_mix_batch(images, labels, epoch, weights, schedule, alpha, rng, num_classes, task_index)
    if method == "cutmix-w":
        constant = schedule.model_copy(update={"kind": "constant"})
        return mc_mix_batch(images, labels, epoch, weights, constant, alpha, rng, num_classes, task_index)
    unweighted = ClassWeights.zeros(range(num_classes))
    if method == "cutmix":
        return mc_mix_batch(images, labels, epoch, unweighted, schedule, alpha, rng, num_classes, task_index)
    if method == "mixup":
        return mc_mix_batch(images, labels, epoch, unweighted, schedule, alpha, rng, num_classes, task_index, cut=False)
    raise ConfigurationError(f"Unknown mix method '{method}'")
