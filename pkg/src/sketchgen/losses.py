"""Objective functions with exact backward passes.

Three losses drive training: plain MSE for the structural branch, the
sorted-matching MSE for the textural branch, and a per-pixel softmax
cross-entropy for the parsing network. Each returns a `LossValue`
carrying the scalar and the gradient with respect to the prediction.

The sorted-matching loss compares ascending-sorted pixel sequences, so
any spatial rearrangement of the target (or prediction) leaves the value
unchanged; its gradient flows through the prediction's sort permutation
the way max-pool gradients flow through the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from sketchgen.ops import ShapeError

N_CLASSES = 3


@dataclass(frozen=True)
class LossValue:
    """Scalar loss and its gradient with respect to the prediction."""

    value: float
    grad: np.ndarray


def _as_pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ShapeError("empty prediction")
    return pred, target


def mse(pred, target) -> LossValue:
    """Mean squared error; grad = 2(pred - target) / N."""
    pred, target = _as_pair(pred, target)
    diff = pred - target
    return LossValue(float(np.mean(diff * diff)), 2.0 * diff / diff.size)


def sort_permutation(x) -> np.ndarray:
    """Stable ascending argsort of the flattened array.

    Maps sorted rank to original flat index; equal values keep their
    original relative order.
    """
    return np.argsort(np.asarray(x).ravel(), kind="stable")


def sm_mse(pred, target) -> LossValue:
    """MSE between the ascending-sorted prediction and target sequences.

    The gradient treats the prediction's sort permutation as locally
    constant: each sorted-difference term is routed back to the
    prediction pixel that produced it.
    """
    pred, target = _as_pair(pred, target)
    pf, tf = pred.ravel(), target.ravel()
    perm = sort_permutation(pf)
    diff = pf[perm] - np.sort(tf, kind="stable")
    n = pf.size
    grad_flat = np.zeros(n)
    grad_flat[perm] = 2.0 * diff / n
    return LossValue(float(np.mean(diff * diff)), grad_flat.reshape(pred.shape))


def textural_loss(pred, target, beta: float = 10.0) -> LossValue:
    """MSE regularizer plus beta-weighted sorted-matching term."""
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    m = mse(pred, target)
    s = sm_mse(pred, target)
    return LossValue(m.value + beta * s.value, m.grad + beta * s.grad)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis of a (C, H, W) tensor."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def softmax_parsing_loss(logits: np.ndarray, labels: np.ndarray) -> LossValue:
    """Mean per-pixel negative log-likelihood of the true class.

    `logits` is (3, H, W); `labels` is an (H, W) integer map with values
    in {1, 2, 3} (face, hair, background). grad = (softmax - onehot) / HW.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3 or logits.shape[0] != N_CLASSES:
        raise ShapeError(f"logits must be ({N_CLASSES}, H, W), got shape {logits.shape}")
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise ShapeError(f"label map shape {labels.shape} != logit map shape {logits.shape[1:]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.min() < 1 or labels.max() > N_CLASSES:
        raise ValueError(f"labels must lie in 1..{N_CLASSES}")

    shifted = logits - logits.max(axis=0, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    idx = labels - 1
    h, w = labels.shape
    n = h * w
    picked = np.take_along_axis(log_probs, idx[None], axis=0)[0]
    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, idx[None], 1.0, axis=0)
    grad = (np.exp(log_probs) - onehot) / n
    return LossValue(float(-picked.mean()), grad)


def combined_bfcn_loss(struct_term: LossValue, text_term: LossValue,
                       alpha: float = 1.0) -> LossValue:
    """Total generation objective: structural + alpha * textural.

    The returned grad stacks the structural gradient and the
    alpha-scaled textural gradient along a new leading axis, in that
    order; each slice backpropagates into its own branch.
    """
    if alpha < 0:
        raise ValueError(f"alpha must be nonnegative, got {alpha}")
    if struct_term.grad.shape != text_term.grad.shape:
        raise ShapeError(
            f"branch gradient shapes differ: {struct_term.grad.shape} "
            f"vs {text_term.grad.shape}"
        )
    value = struct_term.value + alpha * text_term.value
    return LossValue(value, np.stack([struct_term.grad, alpha * text_term.grad]))
