"""Float64 primitives for last-layer training over frozen embeddings.

Everything here is a pure function of its arguments. Functions taking a
``Logits``/``ProbDist`` accept either one vector or a 2-D array whose rows
are samples; reductions are along the last axis.
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from rebalance.errors import InvalidInputError
from rebalance.models import LinearHead, OptimConfig

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _finite(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise InvalidInputError(f"{name} must be a non-empty vector or matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def log_softmax(logits) -> np.ndarray:
    z = _finite(logits, "logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits) -> np.ndarray:
    """Numerically stable softmax (max-subtraction)."""
    z = _finite(logits, "logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, label) -> float:
    """-log softmax(logits)[label] for one row, or the per-row vector for a batch."""
    z = _finite(logits, "logits")
    k = z.shape[-1]
    labels = np.asarray(label)
    if not np.issubdtype(labels.dtype, np.integer):
        raise InvalidInputError("label must be an integer class id")
    if np.any(labels < 0) or np.any(labels >= k):
        raise InvalidInputError(f"label out of range [0, {k})")
    logp = log_softmax(z)
    if z.ndim == 1:
        if labels.ndim != 0:
            raise InvalidInputError("a single logit vector takes a scalar label")
        return float(-logp[int(labels)])
    if labels.shape != (z.shape[0],):
        raise InvalidInputError(f"expected {z.shape[0]} labels, got shape {labels.shape}")
    return -logp[np.arange(z.shape[0]), labels]


def _check_pair(p, q) -> Tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim not in (1, 2):
        raise InvalidInputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise InvalidInputError("distributions contain non-finite values")
    if np.any(p < 0) or np.any(q < 0):
        raise InvalidInputError("distributions must be non-negative")
    return p, q


def kl_divergence(p, q):
    """sum p_i ln(p_i / q_i), with 0 ln(0/q) = 0."""
    p, q = _check_pair(p, q)
    support = p > 0
    if np.any(support & (q <= 0)):
        raise InvalidInputError("q must be positive wherever p is positive")
    ratio = np.where(support, p / np.where(support, q, 1.0), 1.0)
    terms = np.where(support, p * np.log(ratio), 0.0)
    # rounding can leave tiny negatives for p == q
    result = np.maximum(terms.sum(axis=-1), 0.0)
    return float(result) if p.ndim == 1 else result


def total_variation(p, q):
    p, q = _check_pair(p, q)
    result = 0.5 * np.abs(p - q).sum(axis=-1)
    return float(result) if p.ndim == 1 else result


def logit_divergence(logits_p, logits_q, divergence: str = "kl"):
    """Divergence between softmax(logits_p) and softmax(logits_q).

    KL is evaluated in log space so saturated softmax outputs never hit ln 0.
    """
    logp = log_softmax(logits_p)
    logq = log_softmax(logits_q)
    if logp.shape != logq.shape:
        raise InvalidInputError(f"logit shapes differ: {logp.shape} vs {logq.shape}")
    if divergence == "tvd":
        return total_variation(np.exp(logp), np.exp(logq))
    if divergence != "kl":
        raise InvalidInputError(f"unknown divergence '{divergence}'")
    result = np.maximum((np.exp(logp) * (logp - logq)).sum(axis=-1), 0.0)
    return float(result) if logp.ndim == 1 else result


def linear_forward(head: LinearHead, embedding) -> np.ndarray:
    x = np.asarray(embedding, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != head.input_dim:
        raise InvalidInputError(
            f"embedding dimension {x.shape[-1] if x.ndim else 0} does not match head input {head.input_dim}"
        )
    if x.ndim == 1:
        return head.weights @ x + head.bias
    return x @ head.weights.T + head.bias


def ce_gradient(head: LinearHead, embedding, label: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exact gradient of cross_entropy(linear_forward(head, x), label)."""
    x = np.asarray(embedding, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("ce_gradient takes a single embedding; use ce_gradient_batch for batches")
    logits = linear_forward(head, x)
    if not (0 <= int(label) < head.num_classes):
        raise InvalidInputError(f"label out of range [0, {head.num_classes})")
    delta = softmax(logits)
    delta[int(label)] -= 1.0
    return np.outer(delta, x), delta


def ce_gradient_batch(head: LinearHead, features: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Mean loss and mean gradient over a minibatch.

    Returns:
        tuple: (loss, dW, dbias)
    """
    logits = linear_forward(head, features)
    logp = log_softmax(logits)
    rows = np.arange(features.shape[0])
    loss = float(-logp[rows, labels].mean())
    delta = np.exp(logp)
    delta[rows, labels] -= 1.0
    delta /= features.shape[0]
    return loss, delta.T @ features, delta.sum(axis=0)


def sgd_step(param, grad, lr: float, weight_decay: float = 0.0) -> np.ndarray:
    """Plain SGD with coupled l2: param - lr * (grad + weight_decay * param)."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape:
        raise InvalidInputError(f"parameter shape {param.shape} does not match gradient shape {grad.shape}")
    return param - lr * (grad + weight_decay * param)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def fresh(cls, like) -> "AdamState":
        shape = np.shape(like)
        return cls(np.zeros(shape), np.zeros(shape), 0)


def adaptive_step(state: AdamState, param, grad, lr: float, weight_decay: float = 0.0) -> Tuple[np.ndarray, AdamState]:
    """AdamW step: decoupled decay first, then the bias-corrected moment update."""
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if param.shape != grad.shape or state.m.shape != param.shape or state.v.shape != param.shape:
        raise InvalidInputError("optimizer state, parameter and gradient shapes must match")

    t = state.t + 1
    m = ADAM_BETA1 * state.m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * state.v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1 ** t)
    v_hat = v / (1.0 - ADAM_BETA2 ** t)

    decayed = param - lr * weight_decay * param
    updated = decayed - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return updated, AdamState(m, v, t)


def lr_at(config: OptimConfig, step: int) -> float:
    total = config.total_steps
    if step < 0 or step > total:
        raise InvalidInputError(f"step {step} outside [0, {total}]")
    if config.schedule == "constant" or total == 0:
        return config.lr0
    progress = step / total
    if config.schedule == "cosine":
        return config.lr0 * 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.lr0 * (1.0 - progress)
