"""Central finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .heads import AuxiliaryHeadConfig, AuxiliaryHeads
from .losses import LossConfig, total_loss_and_grad

FD_STEP = 1e-5
# Gradients smaller than this are compared in absolute terms: their central
# differences are dominated by rounding (about 1e-10 at this step size).
REL_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> np.ndarray:
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_gradient(fn: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central differences of ``fn`` wrt every entry of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


@dataclass
class GradCheckResult:
    max_relative_error: float
    max_absolute_error: float
    worst: str
    checked: int

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error <= tol


def tiny_problem(seed: int = 0, batch: int = 4, variant: str = "align", prenorm: bool = False):
    """Heads, ego feature and targets of the tiny gradient-check configuration:
    D=8, C=4, L=2 tokens, action sizes 4/4/5."""
    rng = np.random.default_rng(seed)
    cfg = AuxiliaryHeadConfig(model_dim=8, num_heads=2, num_layers=3, text_out_dim=4, prenorm=prenorm)
    heads = AuxiliaryHeads(cfg, seed=seed)
    f_ego = rng.normal(size=(batch, 2, cfg.model_dim))
    y1 = [rng.normal(size=(batch, cfg.text_out_dim)) for _ in range(3)]
    y2 = [np.eye(n)[rng.integers(0, n, size=batch)] for n in cfg.action_sizes]
    return heads, f_ego, y1, y2, LossConfig(alignment_variant=variant)


def check_total_loss(heads: AuxiliaryHeads, f_ego: np.ndarray, y1, y2, cfg: LossConfig, step: float = FD_STEP) -> GradCheckResult:
    """Compare analytic gradients of the total loss wrt every head parameter
    (queries included) and the ego feature against central differences."""

    def loss() -> float:
        return total_loss_and_grad(y1, y2, heads.forward(f_ego), cfg)[0].total

    heads.zero_grad()
    _, grads = total_loss_and_grad(y1, y2, heads.forward(f_ego), cfg)
    d_ego = heads.backward(grads)
    analytic = {name: heads.store.grads[name].copy() for name in heads.store.names()}
    analytic["f_ego"] = d_ego
    targets = dict(heads.store.params)
    targets["f_ego"] = f_ego
    worst, worst_rel, worst_abs, checked = "", 0.0, 0.0, 0
    for name, value in targets.items():
        numeric = numeric_gradient(loss, value, step)
        rel = relative_error(analytic[name], numeric)
        checked += rel.size
        if rel.max() > worst_rel:
            worst_rel, worst = float(rel.max()), name
        worst_abs = max(worst_abs, float(np.max(np.abs(analytic[name] - numeric))))
    return GradCheckResult(worst_rel, worst_abs, worst, checked)
