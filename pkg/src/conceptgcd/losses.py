"""Loss functions with analytic gradients.

Primitive losses return plain tuples ``(value, grad, ...)``. The stage
combinators work on ``LossValue`` objects, whose gradients are keyed by
whatever tensor the caller attached them to, and combine linearly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BatchError, DataError, DimensionError, ParameterError
from .numerics import l2_normalize_backward, l2_normalize_rows, log_softmax_rows, softmax_rows


@dataclass
class LossValue:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __mul__(self, w: float) -> "LossValue":
        return LossValue(w * self.value, {k: w * g for k, g in self.grads.items()})

    __rmul__ = __mul__

    def __add__(self, other: "LossValue") -> "LossValue":
        grads = dict(self.grads)
        for k, g in other.grads.items():
            grads[k] = grads[k] + g if k in grads else g
        return LossValue(self.value + other.value, grads)


ZERO = LossValue(0.0)


def supervised_ce(logits: np.ndarray, labels: np.ndarray, tau: float, n_known: int | None = None):
    """Mean cross-entropy of ``softmax(logits / tau)`` against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"{b} logit rows but labels have shape {labels.shape}")
    if b == 0:
        return 0.0, np.zeros_like(logits)
    limit = k if n_known is None else n_known
    if labels.min() < 0 or labels.max() >= limit:
        raise DataError(f"labels must lie in [0, {limit}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax_rows(logits, tau)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / (b * tau)


def covariance_loss(z: np.ndarray):
    """Mean squared off-diagonal entry of the unbiased batch covariance of ``z``."""
    b, l = z.shape
    if b < 2:
        raise BatchError(f"covariance needs at least 2 rows, got {b}")
    if l < 2:
        return 0.0, np.zeros_like(z)
    zc = z - z.mean(axis=0)
    cov = zc.T @ zc / (b - 1)
    off = cov - np.diag(np.diag(cov))
    scale = 1.0 / (l * (l - 1))
    loss = scale * float(np.sum(off * off))
    grad_zc = (4.0 * scale / (b - 1)) * (zc @ off)
    return loss, grad_zc - grad_zc.mean(axis=0)


@dataclass
class ViewPair:
    logits_v1: np.ndarray
    logits_v2: np.ndarray
    tau: float
    tau_prime: float

    def __post_init__(self):
        if self.logits_v1.shape != self.logits_v2.shape:
            raise DimensionError(f"view shapes differ: {self.logits_v1.shape} vs {self.logits_v2.shape}")
        if not (self.tau > 0 and self.tau_prime > 0):
            raise ParameterError(f"temperatures must be positive: tau={self.tau}, tau'={self.tau_prime}")


def _entropy(p: np.ndarray) -> float:
    p = np.clip(p, 1e-300, None)
    return float(-np.sum(p * np.log(p)))


def self_label_loss(pair: ViewPair, epsilon: float, entropy_sign: float = -1.0, targets=None):
    """Cross-view self-distillation with a mean-entropy regularizer.

    Each view's sharp prediction ``p`` (temperature ``tau``) is trained toward
    the other view's pseudo-label ``q`` (temperature ``tau_prime``), which is
    treated as a constant. The regularizer adds
    ``entropy_sign * epsilon * H(mean p)``; the default sign of -1 rewards a
    uniform mean prediction. ``targets=(q1, q2)`` overrides the pseudo-labels.

    Returns ``(loss, grad_logits_v1, grad_logits_v2)``.
    """
    if epsilon < 0:
        raise ParameterError(f"epsilon must be >= 0, got {epsilon}")
    y1, y2 = pair.logits_v1, pair.logits_v2
    b = y1.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(y1), np.zeros_like(y2)
    tau = pair.tau
    if targets is None:
        q1, q2 = softmax_rows(y1, pair.tau_prime), softmax_rows(y2, pair.tau_prime)
    else:
        q1, q2 = targets
    logp1, logp2 = log_softmax_rows(y1, tau), log_softmax_rows(y2, tau)
    p1, p2 = np.exp(logp1), np.exp(logp2)
    ce = -(np.sum(q2 * logp1) + np.sum(q1 * logp2)) / (2 * b)
    g1 = (p1 * q2.sum(axis=1, keepdims=True) - q2) / (2 * b * tau)
    g2 = (p2 * q1.sum(axis=1, keepdims=True) - q1) / (2 * b * tau)

    mean_p = (p1.sum(axis=0) + p2.sum(axis=0)) / (2 * b)
    reg = entropy_sign * epsilon * _entropy(mean_p)
    if epsilon:
        dreg_dmean = entropy_sign * epsilon * -(np.log(np.clip(mean_p, 1e-300, None)) + 1.0)
        gp = dreg_dmean / (2 * b)
        g1 += p1 * (gp - p1 @ gp[:, None]) / tau
        g2 += p2 * (gp - p2 @ gp[:, None]) / tau
    return float(ce + reg), g1, g2


@dataclass
class ContrastiveBatch:
    u_block: np.ndarray
    v_block: np.ndarray
    negatives: np.ndarray
    tau: float
    exclude: np.ndarray | None = None  # (B, |N|) True where a negative must be skipped

    def __post_init__(self):
        m = self.u_block.shape[1]
        if self.v_block.shape != self.u_block.shape:
            raise DimensionError(f"u block {self.u_block.shape} vs v block {self.v_block.shape}")
        if self.negatives.ndim != 2 or (self.negatives.shape[0] and self.negatives.shape[1] != m):
            raise DimensionError(f"negatives {self.negatives.shape} do not have width {m}")
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")


def contrastive_transfer_loss(batch: ContrastiveBatch):
    """InfoNCE between each u row, its matching v row, and a bank of negatives.

    All rows are L2-normalized first. Only ``u`` receives a gradient.
    Returns ``(loss, grad_u_block)``.
    """
    u = batch.u_block
    b = u.shape[0]
    if b == 0:
        return 0.0, np.zeros_like(u)
    un, _ = l2_normalize_rows(u)
    vn, _ = l2_normalize_rows(batch.v_block)
    tau = batch.tau
    pos = np.einsum("ij,ij->i", un, vn) / tau
    if batch.negatives.shape[0]:
        zn, _ = l2_normalize_rows(batch.negatives)
        neg = un @ zn.T
        neg /= tau
        if batch.exclude is not None:
            neg[batch.exclude] = -np.inf
        top = np.maximum(pos, neg.max(axis=1))
        neg -= top[:, None]
        np.exp(neg, out=neg)
    else:
        zn = np.zeros((0, u.shape[1]))
        neg = np.zeros((b, 0))
        top = pos
    e_pos = np.exp(pos - top)
    denom = e_pos + neg.sum(axis=1)
    loss = float(np.mean(np.log(denom) + top - pos))
    neg /= denom[:, None]
    grad_un = ((e_pos / denom - 1.0)[:, None] * vn + neg @ zn) / (tau * b)
    return loss, l2_normalize_backward(u, grad_un)


def base_loss(sup: LossValue, unsup: LossValue, alpha: float) -> LossValue:
    if not 0 <= alpha <= 1:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    return (1 - alpha) * sup + alpha * unsup


def _check_weight(name: str, w: float) -> None:
    if w < 0:
        raise ParameterError(f"{name} must be >= 0, got {w}")


def stage1_loss(sup: LossValue, cov: LossValue, lam: float) -> LossValue:
    _check_weight("lambda", lam)
    return sup + lam * cov


def stage2_loss(base: LossValue, cov: LossValue, lam: float) -> LossValue:
    _check_weight("lambda", lam)
    return base + lam * cov


def stage3_loss(base: LossValue, smi: LossValue, beta: float, cov: LossValue | None = None, lam: float = 1.0) -> LossValue:
    _check_weight("beta", beta)
    total = base + beta * smi
    if cov is not None:
        _check_weight("lambda", lam)
        total = total + lam * cov
    return total
