"""CTC loss with analytic gradient, and best-path decoding.

The blank class is always the last column of a lattice (index ``V``).
"""
from __future__ import annotations

import numpy as np

from . import diffcore
from .errors import FeasibilityError, NumericError
from .kernels import ctc_forward_backward


def _logp_array(lattice) -> np.ndarray:
    return np.asarray(getattr(lattice, "logp", lattice), dtype=np.float64)


def min_frames(labels) -> int:
    """Frames needed to emit ``labels``: one per label plus one per repeat."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0
    return int(labels.size + np.count_nonzero(labels[1:] == labels[:-1]))


def is_feasible(n_frames: int, labels) -> bool:
    return n_frames >= min_frames(labels)


def _check(logp: np.ndarray, labels: np.ndarray):
    blank = logp.shape[1] - 1
    if labels.size and (labels.min() < 0 or labels.max() >= blank):
        raise ValueError(f"labels must lie in [0, {blank}); blank is {blank}")
    need = min_frames(labels)
    if logp.shape[0] < need:
        raise FeasibilityError(f"{labels.size} labels need {need} frames, lattice has {logp.shape[0]}")


def ctc_loss(lattice, labels) -> tuple[float, np.ndarray]:
    """Return ``(loss, dloss/dlogits)`` for a (T', V+1) log-probability lattice.

    The gradient is with respect to the pre-softmax logits that produced the
    lattice: ``softmax - occupancy``. Rows of it sum to zero.
    """
    logp = _logp_array(lattice)
    labels = np.asarray(labels, dtype=np.int64)
    _check(logp, labels)
    nll, occ = ctc_forward_backward(logp, labels, logp.shape[1] - 1)
    if not np.isfinite(nll):
        raise NumericError("ctc_loss: label sequence has zero probability under the lattice")
    return max(nll, 0.0), np.exp(logp) - occ


def ctc_loss_op(logp: diffcore.Tensor, labels) -> diffcore.Tensor:
    """Differentiable CTC loss on a log-probability tensor.

    The local gradient is ``-occupancy``; composed with ``log_softmax`` it
    becomes ``softmax - occupancy`` on the logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    _check(logp.data, labels)
    nll, occ = ctc_forward_backward(logp.data, labels, logp.shape[1] - 1)
    if not np.isfinite(nll):
        raise NumericError("ctc_loss: label sequence has zero probability under the lattice")
    return diffcore.custom(np.array(nll), (logp,), lambda g: (-float(g) * occ,), "ctc_loss")


def best_path(lattice) -> np.ndarray:
    """Per-frame argmax; ties go to the lowest index."""
    return np.argmax(_logp_array(lattice), axis=1)


def collapse(path, blank: int) -> list[int]:
    path = np.asarray(path, dtype=np.int64)
    if path.size == 0:
        return []
    keep = np.ones(path.size, dtype=bool)
    keep[1:] = path[1:] != path[:-1]
    out = path[keep]
    return [int(v) for v in out[out != blank]]


def greedy_decode(lattice) -> list[int]:
    logp = _logp_array(lattice)
    return collapse(best_path(logp), logp.shape[1] - 1)


def blank_ratio(lattice) -> float:
    logp = _logp_array(lattice)
    if logp.shape[0] == 0:
        return 0.0
    return float(np.mean(best_path(logp) == logp.shape[1] - 1))
