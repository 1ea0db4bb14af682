"""Contrastive losses with exact analytic gradients.

The training objective is a batch softmax cross-entropy between query and
reference embeddings. With row-aligned unit-normalised batches Q and R,
logits are exp(logit_scale) * Q @ R^T; query->reference reads logits by
rows, reference->query by columns, and the symmetric mode averages the
two so its scale matches a single direction. Label smoothing mixes the
one-hot target with a uniform distribution:

    target[i, j] = (1 - eps) * [i == j] + eps / N

Two triplet objectives are included as baselines for the collapse
comparison; both use squared Euclidean distances between rows.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ValidationError

DIRECTIONS = ("query_to_ref", "ref_to_query", "symmetric")


@dataclass(frozen=True)
class LossConfig:
    """Batch-softmax loss parameters.

    ``logit_scale`` is the log of the similarity multiplier, i.e.
    exp(logit_scale) = 1/tau; it is the learnable temperature, clamped
    from above by ``logit_scale_max``. The default initialises
    tau = 0.07.
    """

    label_smoothing: float = 0.1
    logit_scale: float = math.log(1.0 / 0.07)
    logit_scale_max: float = math.log(100.0)
    direction: str = "symmetric"
    triplet_margin: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing must be in [0, 1)")
        if self.direction not in DIRECTIONS:
            raise ValidationError(
                f"direction {self.direction!r} not in {DIRECTIONS}"
            )


@dataclass(frozen=True)
class LossOutput:
    """Loss value plus exact gradients w.r.t. every input.

    For the triplet losses, grad_queries holds the anchor gradient,
    grad_references the positive gradient, and grad_negatives the
    negative gradient; info_nce leaves grad_negatives as None.
    """

    loss: float
    grad_queries: np.ndarray
    grad_references: np.ndarray
    grad_negatives: np.ndarray | None = None
    grad_logit_scale: float = 0.0


def _as_batch(name: str, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def info_nce(queries: np.ndarray, references: np.ndarray, cfg: LossConfig) -> LossOutput:
    """Smoothed batch softmax cross-entropy between two embedding batches.

    Row i of ``references`` is the positive for row i of ``queries``.
    Returns the loss for cfg.direction along with analytic gradients
    w.r.t. queries, references, and logit_scale; the symmetric loss is
    exactly the arithmetic mean of the two single directions.
    """
    q = _as_batch("queries", queries)
    r = _as_batch("references", references)
    if q.shape != r.shape:
        raise ValidationError(f"shape mismatch: queries {q.shape} vs references {r.shape}")
    n = q.shape[0]
    if n < 1:
        raise ValidationError("batch must contain at least one pair")

    scale = math.exp(cfg.logit_scale)
    logits = scale * (q @ r.T)
    eps = cfg.label_smoothing
    target = np.full((n, n), eps / n)
    np.fill_diagonal(target, 1.0 - eps + eps / n)

    def direction_loss(lg: np.ndarray) -> tuple[float, np.ndarray]:
        # rows of lg are softmax rows; target is symmetric so it serves both
        m = lg.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(lg - m).sum(axis=1))
        loss = float(np.mean(lse - (target * lg).sum(axis=1)))
        probs = np.exp(lg - lse[:, None])
        return loss, (probs - target) / n

    loss_qr, g_qr = direction_loss(logits)
    loss_rq, g_rq_t = direction_loss(logits.T)
    g_rq = g_rq_t.T

    if cfg.direction == "query_to_ref":
        loss, grad_logits = loss_qr, g_qr
    elif cfg.direction == "ref_to_query":
        loss, grad_logits = loss_rq, g_rq
    else:
        loss = 0.5 * (loss_qr + loss_rq)
        grad_logits = 0.5 * (g_qr + g_rq)

    return LossOutput(
        loss=loss,
        grad_queries=scale * grad_logits @ r,
        grad_references=scale * grad_logits.T @ q,
        grad_logit_scale=float((grad_logits * logits).sum()),
    )


def _pair_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=1)


def triplet_loss(
    anchor: np.ndarray,
    positive: np.ndarray,
    negative: np.ndarray,
    margin: float = 0.3,
) -> LossOutput:
    """Hinge triplet loss, mean over rows of max(0, d(a,p)^2 - d(a,n)^2 + margin).

    The subgradient at the hinge kink is taken as 0.
    """
    a = _as_batch("anchor", anchor)
    p = _as_batch("positive", positive)
    ng = _as_batch("negative", negative)
    if not (a.shape == p.shape == ng.shape):
        raise ValidationError(
            f"shape mismatch: anchor {a.shape}, positive {p.shape}, negative {ng.shape}"
        )
    n = a.shape[0]
    arg = _pair_sq_dists(a, p) - _pair_sq_dists(a, ng) + margin
    active = (arg > 0).astype(np.float64)[:, None]
    loss = float(np.mean(np.maximum(arg, 0.0)))
    grad_a = active * 2.0 * (ng - p) / n
    grad_p = active * (-2.0) * (a - p) / n
    grad_n = active * 2.0 * (a - ng) / n
    return LossOutput(loss=loss, grad_queries=grad_a, grad_references=grad_p, grad_negatives=grad_n)


def soft_margin_triplet_loss(
    anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray
) -> LossOutput:
    """Smooth triplet loss, mean over rows of ln(1 + exp(d(a,p)^2 - d(a,n)^2)).

    Evaluated through logaddexp so large positive arguments cannot
    overflow.
    """
    a = _as_batch("anchor", anchor)
    p = _as_batch("positive", positive)
    ng = _as_batch("negative", negative)
    if not (a.shape == p.shape == ng.shape):
        raise ValidationError(
            f"shape mismatch: anchor {a.shape}, positive {p.shape}, negative {ng.shape}"
        )
    n = a.shape[0]
    x = _pair_sq_dists(a, p) - _pair_sq_dists(a, ng)
    loss = float(np.mean(np.logaddexp(0.0, x)))
    sig = expit(x)[:, None]
    grad_a = sig * 2.0 * (ng - p) / n
    grad_p = sig * (-2.0) * (a - p) / n
    grad_n = sig * 2.0 * (a - ng) / n
    return LossOutput(loss=loss, grad_queries=grad_a, grad_references=grad_p, grad_negatives=grad_n)


def clamp_logit_scale(cfg: LossConfig) -> LossConfig:
    """Cap logit_scale at logit_scale_max; idempotent."""
    if cfg.logit_scale <= cfg.logit_scale_max:
        return cfg
    return dataclasses.replace(cfg, logit_scale=cfg.logit_scale_max)
