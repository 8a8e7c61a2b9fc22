# -*- coding: utf-8 -*-
"""
Numerical verification suite for the vMF layer: Monte-Carlo KL oracle, Bessel
ratio closed form and derivative identity, gradient checks of the NLL and
matching losses, posterior normalization. Produces a JSON-serializable report.
"""
import json
import logging
import math
import os
import time
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn.functional as F

from vmf_math import (VmfClassifier, batch_prototypes, bessel_ratio_A, bessel_ratio_derivative,
                      finite_difference_grad, kl_monte_carlo, matching_loss, nll_soft, relative_error,
                      vmf_kl, vmf_posterior)

logger = logging.getLogger(__name__)

KL_DIMS = (3, 8, 64)
KL_KAPPAS = (0.5, 2.0, 10.0, 50.0)
GRADIENT_GRID = [(d, c, b) for d in (4, 8, 32) for c in (3, 10) for b in (8, 32)]


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def check_kl_oracle(pairs: int = 50, samples: int = 200_000, seed: int = 0, min_pass_rate: float = 0.95) -> Dict:
    """Closed-form KL inside 3 standard errors of the Monte-Carlo estimate for most pairs."""
    rng = np.random.default_rng(seed)
    grid = [(d, k) for d in KL_DIMS for k in KL_KAPPAS]
    within, worst = 0, 0.0
    for i in range(pairs):
        d, kappa = grid[i % len(grid)]
        mu_p, mu_q = _unit(rng, d), _unit(rng, d)
        estimate, stderr = kl_monte_carlo(mu_p, mu_q, kappa, d, samples, rng)
        z = abs(vmf_kl(mu_p, mu_q, kappa, d) - estimate) / max(stderr, 1e-300)
        worst = max(worst, z)
        within += int(z <= 3.0)
    rate = within / pairs
    return {"pairs": pairs, "samples": samples, "pass_rate": float(rate), "worst_z": float(worst),
            "passed": bool(rate >= min_pass_rate)}


def check_bessel_closed_form(tol: float = 1e-10) -> Dict:
    """A_3(kappa) = coth(kappa) - 1/kappa on [0.1, 100]."""
    kappas = np.geomspace(0.1, 100.0, 60)
    errors = [abs(bessel_ratio_A(3, k) - (1.0 / math.tanh(k) - 1.0 / k)) / (1.0 / math.tanh(k) - 1.0 / k) for k in kappas]
    worst = float(max(errors))
    return {"max_rel_error": worst, "passed": bool(worst < tol)}


def check_derivative_identity(tol: float = 1e-6) -> Dict:
    worst = 0.0
    for d in KL_DIMS:
        for kappa in np.geomspace(0.1, 1000.0, 25):
            h = 1e-5 * max(kappa, 1.0)
            fd = (bessel_ratio_A(d, kappa + h) - bessel_ratio_A(d, kappa - h)) / (2 * h)
            worst = max(worst, float(abs(bessel_ratio_derivative(d, kappa) - fd) / abs(fd)))
    return {"max_rel_error": worst, "passed": bool(worst < tol)}


def _loss(kind: str, state: VmfClassifier, z: torch.Tensor, labels: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    z_bar = F.normalize(z, dim=1)
    if kind == "nll":
        return nll_soft(state(z_bar), soft)
    return matching_loss(state, batch_prototypes(z_bar, labels))


def _param_fn(kind, state, param, z, labels, soft):
    original = param.detach().clone()

    def fn(x):
        with torch.no_grad():
            param.copy_(x)
        value = _loss(kind, state, z, labels, soft)
        with torch.no_grad():
            param.copy_(original)
        return value
    return fn


def gradient_check(kind: str, seed: int, d: int = 8, classes: int = 3, batch: int = 8, h: float = 1e-5) -> Dict[str, float]:
    """Relative error of autograd vs central differences w.r.t. features, directions and log kappa."""
    gen = torch.Generator().manual_seed(seed)
    state = VmfClassifier(classes, d).double()
    with torch.no_grad():
        state.weight.copy_(torch.randn(classes, d, generator=gen, dtype=torch.float64))
        state.log_kappa.fill_(float(torch.empty(1, dtype=torch.float64).uniform_(0.0, 3.0, generator=gen)))
    z = torch.randn(batch, d, generator=gen, dtype=torch.float64)
    labels = torch.randint(classes, (batch,), generator=gen)
    soft = torch.rand(batch, classes, generator=gen, dtype=torch.float64)

    z_var = z.clone().requires_grad_(True)
    state.zero_grad()
    _loss(kind, state, z_var, labels, soft).backward()
    analytic = {"features": z_var.grad.clone(), "directions": state.weight.grad.clone(),
                "log_kappa": state.log_kappa.grad.clone()}

    numeric = {
        "features": finite_difference_grad(lambda x: _loss(kind, state, x, labels, soft), z, h),
        "directions": finite_difference_grad(_param_fn(kind, state, state.weight, z, labels, soft), state.weight.detach(), h),
        "log_kappa": finite_difference_grad(_param_fn(kind, state, state.log_kappa, z, labels, soft), state.log_kappa.detach(), h),
    }
    return {name: relative_error(analytic[name], numeric[name]) for name in analytic}


def check_gradients(instances: int = 20, tol: float = 1e-4, seed: int = 0, h: float = 1e-5) -> Dict:
    """Instances cycle over GRADIENT_GRID (d, C, B)."""
    report = {}
    for kind in ("nll", "matching"):
        worst = {"features": 0.0, "directions": 0.0, "log_kappa": 0.0}
        for i in range(instances):
            d, classes, batch = GRADIENT_GRID[i % len(GRADIENT_GRID)]
            for name, err in gradient_check(kind, seed + i, d, classes, batch, h).items():
                worst[name] = max(worst[name], float(err))
        report[kind] = {"max_rel_error": worst, "passed": bool(max(worst.values()) < tol)}
    report["passed"] = all(r["passed"] for r in report.values())
    return report


def check_posterior_normalization(tol: float = 1e-12, seed: int = 0) -> Dict:
    gen = torch.Generator().manual_seed(seed)
    state = VmfClassifier(7, 16).double()
    z_bar = F.normalize(torch.randn(64, 16, generator=gen, dtype=torch.float64), dim=1)
    with torch.no_grad():
        deviation = (vmf_posterior(z_bar, state).sum(dim=1) - 1.0).abs().max().item()
    return {"max_deviation": float(deviation), "passed": bool(deviation < tol)}


def run_checks(kl_pairs: int = 50, kl_samples: int = 200_000, seed: int = 0,
               report_path: Optional[str] = None) -> Dict:
    started = time.time()
    logger.info("=== VMF CHECK START ===")
    report = {
        "kl_oracle": check_kl_oracle(kl_pairs, kl_samples, seed),
        "bessel_closed_form": check_bessel_closed_form(),
        "derivative_identity": check_derivative_identity(),
        "gradients": check_gradients(seed=seed),
        "posterior_normalization": check_posterior_normalization(seed=seed),
    }
    report["passed"] = all(section["passed"] for section in report.values())
    report["seconds"] = time.time() - started
    for name, section in report.items():
        if isinstance(section, dict):
            level = logging.INFO if section["passed"] else logging.ERROR
            logger.log(level, f"{name}: {'PASS' if section['passed'] else 'FAIL'}")
    if report_path:
        parent = os.path.dirname(report_path)
        if parent and not os.path.exists(parent):
            os.makedirs(parent)
        with open(report_path, "w") as f:
            json.dump(report, f, indent=2)
    logger.info(f"=== VMF CHECK END === {'PASS' if report['passed'] else 'FAIL'} in {report['seconds']:.1f}s")
    return report


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    print(json.dumps(run_checks(kl_pairs=12, kl_samples=20_000), indent=2))
