# -*- coding: utf-8 -*-
"""
Directional statistics for the vMF classifier.

p(z | mu, kappa) = C_d(kappa) * exp(kappa * <mu, z>) on the unit sphere S^{d-1},
C_d(kappa) = kappa^(d/2 - 1) / ((2 pi)^(d/2) * I_{d/2-1}(kappa)),
A_d(kappa) = I_{d/2}(kappa) / I_{d/2-1}(kappa) = E[<mu, z>].

Statistics helpers (normalizer, density, sampler, KL, Monte-Carlo oracle) work on
numpy arrays; classifier-side quantities (posterior, NLL, matching loss) are torch
so they can be trained and gradient-checked.
"""
import math
import logging
from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import special

from cil_errors import InvariantViolation, NumericError

logger = logging.getLogger(__name__)

KAPPA_SWITCH = 1e4
KAPPA_INIT = 10.0
UNIT_TOL = 1e-4
_TINY = 1e-300


# ==============================================================================
# BESSEL RATIO
# ==============================================================================

def _ratio_continued_fraction(nu: float, x: float, tol: float = 1e-15, max_iter: int = 200000) -> float:
    """I_{nu+1}(x) / I_nu(x) = 1 / (2(nu+1)/x + 1 / (2(nu+2)/x + ...)), modified Lentz."""
    f = _TINY
    c, d = f, 0.0
    for k in range(1, max_iter + 1):
        b = 2.0 * (nu + k) / x
        d = b + d
        if d == 0.0:
            d = _TINY
        c = b + 1.0 / c
        if c == 0.0:
            c = _TINY
        d = 1.0 / d
        delta = c * d
        f *= delta
        if abs(delta - 1.0) < tol:
            return f
    raise NumericError(f"Bessel ratio continued fraction did not converge (nu={nu}, kappa={x})")


def bessel_ratio_A(d: int, kappa: float) -> float:
    """A_d(kappa) in [0, 1). Continued fraction up to KAPPA_SWITCH, asymptotic expansion beyond."""
    if d < 2:
        raise InvariantViolation(f"A_d needs d >= 2, got d={d}")
    kappa = float(kappa)
    if not math.isfinite(kappa) or kappa < 0:
        raise NumericError(f"A_d undefined for (d={d}, kappa={kappa})")
    if kappa == 0.0:
        return 0.0
    if kappa > KAPPA_SWITCH:
        value = 1.0 - (d - 1) / (2.0 * kappa) + (d - 1) * (d - 3) / (8.0 * kappa ** 2)
    else:
        value = _ratio_continued_fraction(d / 2.0 - 1.0, kappa)
    if not math.isfinite(value):
        raise NumericError(f"A_d overflowed for (d={d}, kappa={kappa})")
    return value


def bessel_ratio_derivative(d: int, kappa: float) -> float:
    """dA_d/dkappa = 1 - A^2 - (d - 1) A / kappa; equals 1/d at kappa = 0."""
    if kappa == 0.0:
        return 1.0 / d
    a = bessel_ratio_A(d, kappa)
    return 1.0 - a * a - (d - 1) * a / kappa


class _BesselRatio(torch.autograd.Function):

    @staticmethod
    def forward(ctx, kappa, d):
        ctx.d = d
        ctx.save_for_backward(kappa)
        return kappa.new_tensor(bessel_ratio_A(d, kappa.item()))

    @staticmethod
    def backward(ctx, grad_output):
        (kappa,) = ctx.saved_tensors
        return grad_output * kappa.new_tensor(bessel_ratio_derivative(ctx.d, kappa.item())), None


def bessel_ratio_torch(d: int, kappa: torch.Tensor) -> torch.Tensor:
    """Differentiable A_d for a scalar kappa tensor."""
    return _BesselRatio.apply(kappa, d)


# ==============================================================================
# DENSITY, SAMPLER, KL
# ==============================================================================

def _log_bessel_series(nu: float, x: float, terms: int = 200) -> float:
    k = np.arange(terms)
    log_terms = (2 * k + nu) * math.log(x / 2.0) - special.gammaln(k + 1) - special.gammaln(nu + k + 1)
    return float(special.logsumexp(log_terms))


def log_bessel_iv(nu: float, x: float) -> float:
    """log I_nu(x) through the exponentially scaled Bessel function."""
    scaled = special.ive(nu, x)
    if scaled > 0 and math.isfinite(scaled):
        return math.log(scaled) + x
    value = _log_bessel_series(nu, x)
    if not math.isfinite(value):
        raise NumericError(f"log I_nu overflowed for (nu={nu}, x={x})")
    return value


def log_vmf_normalizer(d: int, kappa: float) -> float:
    if kappa < 1e-8:
        # uniform on the sphere: 1 / |S^{d-1}|
        return special.gammaln(d / 2.0) - math.log(2.0) - (d / 2.0) * math.log(math.pi)
    return ((d / 2.0 - 1.0) * math.log(kappa) - (d / 2.0) * math.log(2.0 * math.pi)
            - log_bessel_iv(d / 2.0 - 1.0, kappa))


def _check_unit(name: str, x: np.ndarray):
    norms = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise InvariantViolation(f"{name} must be unit norm (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def vmf_log_pdf(z_bar: np.ndarray, mu: np.ndarray, kappa: float, d: int) -> np.ndarray:
    """log C_d(kappa) + kappa <mu, z>; accepts one vector or a batch of rows."""
    z_bar = np.asarray(z_bar, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z_bar.shape[-1] != d or mu.shape[-1] != d:
        raise InvariantViolation(f"Dimension mismatch: z {z_bar.shape}, mu {mu.shape}, d={d}")
    _check_unit("z_bar", z_bar)
    _check_unit("mu", mu)
    return log_vmf_normalizer(d, kappa) + kappa * (z_bar @ mu)


def vmf_sample(mu: np.ndarray, kappa: float, d: int, n: int, rng: np.random.Generator,
               max_rounds: int = 1000) -> np.ndarray:
    """Wood's rejection sampler, vectorized over n draws."""
    mu = np.asarray(mu, dtype=np.float64)
    if kappa < 0:
        raise NumericError(f"vMF sampling needs kappa >= 0, got {kappa}")
    _check_unit("mu", mu)
    dim = d - 1
    b = dim / (math.sqrt(4.0 * kappa ** 2 + dim ** 2) + 2.0 * kappa)
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + dim * math.log(1.0 - x0 ** 2)

    accepted, count = [], 0
    for _ in range(max_rounds):
        z = rng.beta(dim / 2.0, dim / 2.0, size=n)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform(size=n)
        keep = kappa * w + dim * np.log(1.0 - x0 * w) - c >= np.log(u)
        accepted.append(w[keep])
        count += int(keep.sum())
        if count >= n:
            break
    else:
        raise NumericError(f"vMF rejection sampler exceeded {max_rounds} rounds (d={d}, kappa={kappa})")
    w = np.concatenate(accepted)[:n]

    # direction orthogonal to mu, uniform on the remaining sphere
    v = rng.standard_normal((n, d))
    v -= np.outer(v @ mu, mu)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * np.sqrt(np.clip(1.0 - w ** 2, 0.0, None))[:, None] + w[:, None] * mu


def vmf_kl(mu_p: np.ndarray, mu_q: np.ndarray, kappa: float, d: int) -> float:
    """KL(vMF(mu_p, kappa) || vMF(mu_q, kappa)) = kappa A_d(kappa) (1 - <mu_p, mu_q>)."""
    # 1 - cos = ||mu_p - mu_q||^2 / 2 for unit vectors; exact 0 for identical inputs
    diff = np.asarray(mu_p, dtype=np.float64) - np.asarray(mu_q, dtype=np.float64)
    one_minus_cos = float(np.clip(0.5 * np.dot(diff, diff), 0.0, 2.0))
    return kappa * bessel_ratio_A(d, kappa) * one_minus_cos


def kl_monte_carlo(mu_p: np.ndarray, mu_q: np.ndarray, kappa: float, d: int, n: int,
                   rng: np.random.Generator) -> Tuple[float, float]:
    """E_p[log p - log q] over n sampler draws; returns (estimate, standard error)."""
    z = vmf_sample(mu_p, kappa, d, n, rng)
    diff = vmf_log_pdf(z, mu_p, kappa, d) - vmf_log_pdf(z, mu_q, kappa, d)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n))


# ==============================================================================
# CLASSIFIER STATE, POSTERIOR, LOSSES
# ==============================================================================

class VmfClassifier(nn.Module):
    """
    Class directions plus one shared concentration kappa = exp(rho).

    `weight` holds the raw (unnormalized) rows; the mean directions are their
    L2-normalized versions. The scale s of a cosine-softmax plays the role of kappa.
    """

    def __init__(self, num_classes: int, dim: int, kappa_init: float = KAPPA_INIT):
        super().__init__()
        self.dim = dim
        self.weight = nn.Parameter(F.normalize(torch.randn(num_classes, dim), dim=1))
        self.log_kappa = nn.Parameter(torch.tensor(math.log(kappa_init)))

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def directions(self) -> torch.Tensor:
        return F.normalize(self.weight, dim=1)

    def kappa(self) -> torch.Tensor:
        return self.log_kappa.exp()

    def forward(self, z_bar: torch.Tensor) -> torch.Tensor:
        return self.kappa() * z_bar @ self.directions().t()


@dataclass
class BatchPrototypes:
    classes: torch.Tensor     # (K,) class ids present in the batch
    directions: torch.Tensor  # (K, d) unit class means
    counts: torch.Tensor      # (K,) samples per class

    def __len__(self):
        return int(self.classes.numel())


def vmf_posterior(z_bar: torch.Tensor, state: VmfClassifier) -> torch.Tensor:
    return torch.softmax(state(z_bar), dim=1)


def nll_soft(logits: torch.Tensor, soft_labels: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of sum_c y_c * (-log p_c), with p = softmax(logits)."""
    return -(soft_labels * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def batch_prototypes(z_bar: torch.Tensor, labels: torch.Tensor) -> BatchPrototypes:
    classes, inverse, counts = torch.unique(labels, sorted=True, return_inverse=True, return_counts=True)
    sums = z_bar.new_zeros(len(classes), z_bar.shape[1]).index_add(0, inverse, z_bar)
    means = sums / counts.unsqueeze(1).to(z_bar.dtype)
    return BatchPrototypes(classes, F.normalize(means, dim=1), counts)


def matching_loss(state: VmfClassifier, prototypes: BatchPrototypes, detach_prototypes: bool = False,
                  kappa_grad: bool = True) -> torch.Tensor:
    """
    Mean over present classes of kappa A_d(kappa) (1 - <mu_i, mu~_i>).

    With kappa_grad=False the kappa A_d(kappa) factor is a constant and kappa
    only receives gradient from the NLL.
    """
    if len(prototypes) == 0:
        return state.log_kappa * 0.0
    if int(prototypes.classes.max()) >= state.num_classes:
        raise InvariantViolation(f"Prototype class {int(prototypes.classes.max())} not in a {state.num_classes}-class head")
    kappa = state.kappa() if kappa_grad else state.kappa().detach()
    protos = prototypes.directions.detach() if detach_prototypes else prototypes.directions
    cos = (state.directions()[prototypes.classes] * protos).sum(dim=1)
    return kappa * bessel_ratio_torch(state.dim, kappa) * (1.0 - cos).mean()


# ==============================================================================
# FINITE DIFFERENCES
# ==============================================================================

def finite_difference_grad(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of a scalar function, one coordinate at a time."""
    grad = torch.zeros_like(x)
    flat_x, flat_g = x.detach().reshape(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat_x.numel()):
            base = flat_x[i].item()
            plus, minus = flat_x.clone(), flat_x.clone()
            plus[i], minus[i] = base + h, base - h
            flat_g[i] = (fn(plus.view_as(x)) - fn(minus.view_as(x))).item() / (2 * h)
    return grad


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / scale


if __name__ == "__main__":
    for d, kappa in [(3, 2.0), (8, 10.0), (64, 1000.0)]:
        print(f"A_{d}({kappa}) = {bessel_ratio_A(d, kappa):.10f}")
    print(f"A_3(2) closed form = {1 / math.tanh(2.0) - 0.5:.10f}")
