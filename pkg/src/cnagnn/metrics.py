"""Task metrics and oversmoothing diagnostics.

The diagnostics operate on plain arrays (they are never differentiated);
``cross_entropy_loss`` is the one tape-recorded operation here.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate, record_op
from .errors import ContractError, UndefinedResultError

__all__ = [
    "dirichlet_energy",
    "mad",
    "accuracy",
    "nmse",
    "cross_entropy_loss",
    "mse_loss",
]


def _as_array(h) -> np.ndarray:
    if isinstance(h, Tensor):
        return h.data
    return np.asarray(h, dtype=np.float64)


def dirichlet_energy(edges: np.ndarray, h) -> float:
    """(1/|V|) * sum over undirected edges of the squared feature difference.

    Near-zero values indicate collapsed (oversmoothed) representations.
    """
    h = _as_array(h)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size == 0:
        return 0.0
    diff = h[edges[:, 0]] - h[edges[:, 1]]
    return float((diff * diff).sum() / h.shape[0])


def mad(edges: np.ndarray, h) -> float:
    """Mean cosine distance between connected nodes' features.

    Edges touching a zero-norm row are excluded; if that empties the edge
    set the result is undefined and an error is raised.
    """
    h = _as_array(h)
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    norms = np.sqrt((h * h).sum(axis=1))
    keep = (norms[edges[:, 0]] > 0) & (norms[edges[:, 1]] > 0) if edges.size else np.zeros(0, bool)
    if not keep.any():
        raise UndefinedResultError("mad: no edge with two nonzero-norm endpoints")
    e = edges[keep]
    cos = (h[e[:, 0]] * h[e[:, 1]]).sum(axis=1) / (norms[e[:, 0]] * norms[e[:, 1]])
    return float(np.mean(1.0 - cos))


def accuracy(logits, labels: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked nodes whose argmax logit (ties to the lowest class)
    equals the label."""
    logits = _as_array(logits)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("accuracy: empty mask")
    pred = np.argmax(logits[mask], axis=1)
    return float(np.mean(pred == np.asarray(labels)[mask]))


def nmse(pred, target: np.ndarray, mask: np.ndarray) -> float:
    """Squared error normalized by the masked target variance.

    Suited to targets spanning several orders of magnitude; a constant
    prediction at the target mean scores exactly 1.
    """
    pred = _as_array(pred).reshape(-1)
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if mask.sum() < 2:
        raise ContractError("nmse: mask must select at least 2 nodes")
    p, t = pred[mask], target[mask]
    denom = ((t - t.mean()) ** 2).sum()
    if denom <= 0:
        raise ContractError("nmse: target variance on mask is zero")
    return float(((p - t) ** 2).sum() / denom)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the true class over masked nodes.

    Uses max-subtraction for stability and records the classic softmax-minus-
    one-hot backward rule on the tape.
    """
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("cross_entropy_loss: empty mask")
    idx = np.flatnonzero(mask)
    rows = logits.data[idx]
    lab = labels[idx]
    shifted = rows - rows.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    m = idx.size
    loss = -log_probs[np.arange(m), lab].mean()

    def backward_fn(grad):
        soft = np.exp(log_probs)
        soft[np.arange(m), lab] -= 1.0
        full = np.zeros_like(logits.data)
        full[idx] = soft * (float(grad[0, 0]) / m)
        accumulate(logits, full)

    return record_op(np.array([[loss]]), (logits,), backward_fn, "cross_entropy")


def mse_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked nodes, on the tape (training objective
    for regression; NMSE is what gets reported)."""
    target = np.asarray(target, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ContractError("mse_loss: empty mask")
    idx = np.flatnonzero(mask)
    diff = pred.data[idx, 0] - target[idx]
    m = idx.size
    loss = float((diff * diff).mean())

    def backward_fn(grad):
        full = np.zeros_like(pred.data)
        full[idx, 0] = diff * (2.0 * float(grad[0, 0]) / m)
        accumulate(pred, full)

    return record_op(np.array([[loss]]), (pred,), backward_fn, "mse")
