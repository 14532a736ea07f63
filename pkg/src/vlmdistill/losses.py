"""Distillation losses over the auxiliary head outputs.

Every loss is computed per sample and averaged over the batch, except the
contrastive variant, which is defined over the whole batch. Each function
returns its value together with the gradient wrt the head outputs so the
heads can backpropagate without an autodiff engine.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError
from .heads import ACTION_TERMS, TEXT_TERMS, AuxiliaryOutputs, OutputGrads
from .nn import log_softmax, softmax

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
CONTRASTIVE_TEMPERATURE = 0.07
ALIGNMENT_VARIANTS = ("align", "mse", "kl", "cosine", "contrastive")


@dataclass(frozen=True)
class LossConfig:
    tau_t: float = 0.04
    tau_s: float = 0.1
    lambda1: float = 1.0
    lambda2: float = 0.1
    alignment_variant: str = "align"

    def __post_init__(self) -> None:
        if self.tau_t <= 0 or self.tau_s <= 0:
            raise ConfigurationError("temperatures must be positive")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigurationError("loss weights must be non-negative")
        if self.alignment_variant not in ALIGNMENT_VARIANTS:
            raise ConfigurationError(f"unknown alignment variant {self.alignment_variant!r}")


@dataclass
class LossBreakdown:
    l_align: float
    l_action: float
    total: float
    align_terms: dict[str, float] = field(default_factory=dict)
    action_terms: dict[str, float] = field(default_factory=dict)
    clamped: int = 0

    def to_dict(self) -> dict:
        return {
            "l_align": self.l_align,
            "l_action": self.l_action,
            "total": self.total,
            **{f"align_{k}": v for k, v in self.align_terms.items()},
            **{f"action_{k}": v for k, v in self.action_terms.items()},
        }


def log_line(step: int, breakdown: LossBreakdown) -> str:
    return json.dumps({"step": step, **breakdown.to_dict()})


def temperature_distribution(v: np.ndarray, tau: float) -> np.ndarray:
    """Softmax of ``v / tau`` over the last axis."""
    if not tau > 0:
        raise ConfigurationError("temperature must be positive")
    return softmax(np.asarray(v, dtype=float) / tau, axis=-1)


def reduce_terms(values: list[float]) -> float:
    """How the three per-term losses combine: a plain sum."""
    return float(sum(values))


def _terms(x, names) -> list[np.ndarray]:
    """Normalize a triple (dataclass, list or stacked array) to three 2-D arrays."""
    if isinstance(x, AuxiliaryOutputs):
        x = x.f_hat if names is TEXT_TERMS else x.probs
    elif hasattr(x, "y_c"):
        x = [x.y_c, x.y_f, x.y_r]
    elif hasattr(x, "y_control"):
        x = [x.y_control, x.y_turn, x.y_lane]
    if len(x) != 3:
        raise ConfigurationError("expected three terms")
    out = [np.atleast_2d(np.asarray(a, dtype=float)) for a in x]
    return out


def _check_pair(y: np.ndarray, f: np.ndarray) -> None:
    if y.shape != f.shape:
        raise ConfigurationError(f"dimension mismatch: target {y.shape} vs output {f.shape}")


def alignment_loss_and_grad(y1, f1, cfg: LossConfig = LossConfig()) -> tuple[float, dict[str, float], list[np.ndarray]]:
    """Temperature-normalized cross-entropy between teacher and head features.

    For each term: ``-sum_k P(y)_k log P(f)_k`` with ``P(y)`` at ``tau_t`` and
    ``P(f)`` at ``tau_s``. No centering is applied to the teacher side.
    """
    ys, fs = _terms(y1, TEXT_TERMS), _terms(f1, TEXT_TERMS)
    per_term, grads = {}, []
    for name, y, f in zip(TEXT_TERMS, ys, fs):
        _check_pair(y, f)
        p_y = temperature_distribution(y, cfg.tau_t)
        log_p_f = log_softmax(f / cfg.tau_s)
        per_term[name] = float(np.mean(-np.sum(p_y * log_p_f, axis=-1)))
        grads.append((np.exp(log_p_f) - p_y) / (cfg.tau_s * len(f)))
    return reduce_terms(list(per_term.values())), per_term, grads


def alignment_loss(y1, f1, cfg: LossConfig = LossConfig()) -> tuple[float, dict[str, float]]:
    value, per_term, _ = alignment_loss_and_grad(y1, f1, cfg)
    return value, per_term


def action_loss_and_grad(y2, probs) -> tuple[float, dict[str, float], list[np.ndarray], int]:
    ys, ps = _terms(y2, ACTION_TERMS), _terms(probs, ACTION_TERMS)
    per_term, grads, clamped = {}, [], 0
    for name, y, p in zip(ACTION_TERMS, ys, ps):
        _check_pair(y, p)
        safe = np.maximum(p, LOG_EPS)
        hits = int(np.count_nonzero((p < LOG_EPS) & (y > 0)))
        if hits:
            clamped += hits
            log.warning("%s: %d true-class probabilities clamped to %g", name, hits, LOG_EPS)
        per_term[name] = float(np.mean(-np.sum(y * np.log(safe), axis=-1)))
        grads.append(np.where(p >= LOG_EPS, -y / safe, 0.0) / len(p))
    return reduce_terms(list(per_term.values())), per_term, grads, clamped


def action_loss(y2, probs) -> tuple[float, dict[str, float]]:
    value, per_term, _, _ = action_loss_and_grad(y2, probs)
    return value, per_term


# -- ablation variants --------------------------------------------------------


def _unit_rows(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DegenerateInputError(f"zero-norm {what} vector")
    return x / norm, norm


def _mse(y, f, cfg):
    diff = f - y
    return float(np.mean(np.mean(diff**2, axis=-1))), 2.0 * diff / (f.shape[-1] * len(f))


def _kl(y, f, cfg):
    log_p_y = log_softmax(y / cfg.tau_t)
    log_p_f = log_softmax(f / cfg.tau_s)
    p_y = np.exp(log_p_y)
    value = float(np.mean(np.sum(p_y * (log_p_y - log_p_f), axis=-1)))
    return value, (np.exp(log_p_f) - p_y) / (cfg.tau_s * len(f))


def _cosine(y, f, cfg):
    y_hat, _ = _unit_rows(y, "target")
    f_hat, f_norm = _unit_rows(f, "output")
    cos = np.sum(y_hat * f_hat, axis=-1, keepdims=True)
    grad = -(y_hat - cos * f_hat) / f_norm / len(f)
    return float(np.mean(1.0 - cos)), grad


def _contrastive(y, f, cfg):
    y_hat, _ = _unit_rows(y, "target")
    f_hat, f_norm = _unit_rows(f, "output")
    B = len(f)
    logits = f_hat @ y_hat.T / CONTRASTIVE_TEMPERATURE
    idx = np.arange(B)
    row_lp = log_softmax(logits, axis=1)
    col_lp = log_softmax(logits, axis=0)
    value = 0.5 * (-row_lp[idx, idx].mean() - col_lp[idx, idx].mean())
    eye = np.eye(B)
    g_logits = 0.5 * ((np.exp(row_lp) - eye) + (np.exp(col_lp) - eye)) / B
    g_fhat = g_logits @ y_hat / CONTRASTIVE_TEMPERATURE
    grad = (g_fhat - f_hat * np.sum(g_fhat * f_hat, axis=-1, keepdims=True)) / f_norm
    return float(value), grad


_VARIANTS = {"mse": _mse, "kl": _kl, "cosine": _cosine, "contrastive": _contrastive}


def alignment_variant_loss_and_grad(y1, f1, variant: str, cfg: LossConfig = LossConfig()):
    if variant == "align":
        return alignment_loss_and_grad(y1, f1, cfg)
    if variant not in _VARIANTS:
        raise ConfigurationError(f"unknown alignment variant {variant!r}")
    ys, fs = _terms(y1, TEXT_TERMS), _terms(f1, TEXT_TERMS)
    per_term, grads = {}, []
    for name, y, f in zip(TEXT_TERMS, ys, fs):
        _check_pair(y, f)
        per_term[name], g = _VARIANTS[variant](y, f, cfg)
        grads.append(g)
    return reduce_terms(list(per_term.values())), per_term, grads


def alignment_variant_loss(y1, f1, variant: str, cfg: LossConfig = LossConfig()) -> float:
    return alignment_variant_loss_and_grad(y1, f1, variant, cfg)[0]


# -- weighted total ------------------------------------------------------------


def combine(l_align: float, l_action: float, cfg: LossConfig) -> float:
    return cfg.lambda1 * l_align + cfg.lambda2 * l_action


def total_loss_and_grad(y1, y2, outputs: AuxiliaryOutputs, cfg: LossConfig = LossConfig()) -> tuple[LossBreakdown, OutputGrads]:
    l_align, align_terms, g_align = alignment_variant_loss_and_grad(
        y1, outputs.f_hat, cfg.alignment_variant, cfg
    )
    l_action, action_terms, g_action, clamped = action_loss_and_grad(y2, outputs.probs)
    breakdown = LossBreakdown(
        l_align=l_align,
        l_action=l_action,
        total=combine(l_align, l_action, cfg),
        align_terms=align_terms,
        action_terms=action_terms,
        clamped=clamped,
    )
    grads = OutputGrads(
        f_hat=[cfg.lambda1 * g for g in g_align],
        probs=[cfg.lambda2 * g for g in g_action],
    )
    if not np.isfinite(breakdown.total):
        log.warning("non-finite auxiliary loss: %s", breakdown.to_dict())
    return breakdown, grads


def total_loss(y1, y2, outputs: AuxiliaryOutputs, cfg: LossConfig = LossConfig()) -> LossBreakdown:
    return total_loss_and_grad(y1, y2, outputs, cfg)[0]


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))
