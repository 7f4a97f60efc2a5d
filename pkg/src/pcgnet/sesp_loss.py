"""Sensitivity/specificity loss.

Class index 0 is normal, index 1 abnormal. For every row whose predicted
class (argmax, ties to class 0) matches the truth, the softmax probability
of the true class enters a mask; softmax sensitivity is the abnormal mask
sum over the abnormal row count, softmax specificity the normal mask sum
over the normal row count. The objective is ``-(Se + Sp) + lambda * R(W)``
with ``R`` the sum of squares of the dense-layer weights and biases.

The argmax selection is non-differentiable and is held fixed for the
backward pass, so gradients flow only through the selected probabilities.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .tensor_nn import REGULARIZED, NetworkParams, softmax

NORMAL, ABNORMAL = 0, 1


@dataclasses.dataclass
class LabeledBatch:
    logits: np.ndarray
    one_hot: np.ndarray
    probabilities: np.ndarray = None

    def __post_init__(self):
        self.logits = np.asarray(self.logits)
        self.one_hot = np.asarray(self.one_hot)
        if self.logits.ndim != 2 or self.logits.shape[1] != 2 or self.one_hot.shape != self.logits.shape:
            raise ValueError(f"expected n x 2 logits and labels, got {self.logits.shape} and {self.one_hot.shape}")
        if self.probabilities is None:
            self.probabilities = softmax(self.logits)

    @classmethod
    def from_labels(cls, logits, labels):
        labels = np.asarray(labels, dtype=int)
        one_hot = np.zeros((len(labels), 2))
        one_hot[np.arange(len(labels)), labels] = 1.0
        return cls(logits=logits, one_hot=one_hot)

    @property
    def labels(self) -> np.ndarray:
        return self.one_hot.argmax(axis=1)


@dataclasses.dataclass
class LossReport:
    se: float
    sp: float
    penalty: float
    total: float
    logit_gradient: np.ndarray


def correct_rows(probabilities, one_hot) -> np.ndarray:
    # np.argmax returns the first maximum, which gives the class-0 tie rule
    return np.argmax(probabilities, axis=1) == np.argmax(one_hot, axis=1)


def build_masks(batch: LabeledBatch):
    """Per-row mask entries ``(Y_Nn, Y_Aa)``."""
    p = batch.probabilities
    ok = correct_rows(p, batch.one_hot)
    truth = batch.labels
    y_nn = np.where(ok & (truth == NORMAL), p[:, NORMAL], 0.0)
    y_aa = np.where(ok & (truth == ABNORMAL), p[:, ABNORMAL], 0.0)
    return y_nn, y_aa


def sesp_values(batch: LabeledBatch) -> tuple[float, float]:
    """Softmax sensitivity and specificity; an absent class scores 1."""
    y_nn, y_aa = build_masks(batch)
    counts = batch.one_hot.sum(axis=0)
    se = float(y_aa.sum() / counts[ABNORMAL]) if counts[ABNORMAL] > 0 else 1.0
    sp = float(y_nn.sum() / counts[NORMAL]) if counts[NORMAL] > 0 else 1.0
    return se, sp


def sesp_logit_gradient(batch: LabeledBatch) -> np.ndarray:
    """Gradient of ``-(Se + Sp)`` w.r.t. the logits with the masks frozen."""
    p = batch.probabilities
    truth = batch.labels
    ok = correct_rows(p, batch.one_hot)
    counts = batch.one_hot.sum(axis=0)
    grad = np.zeros_like(p)
    for cls in (NORMAL, ABNORMAL):
        if counts[cls] == 0:
            continue
        rows = ok & (truth == cls)
        if not rows.any():
            continue
        pc = p[rows, cls][:, None]
        # d p_c / d y = p_c (e_c - p)
        e = np.zeros((1, 2))
        e[0, cls] = 1.0
        grad[rows] -= pc * (e - p[rows]) / counts[cls]
    return grad


def l2_penalty(params: NetworkParams | dict, lam: float):
    """``lam`` times the sum of squares of the dense-layer tensors.

    Returns ``(value, grads)`` where ``grads`` maps each regularised tensor
    name to ``2 * lam * tensor``. Convolution parameters are not penalised.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    tensors = getattr(params, "tensors", params)
    value = 0.0
    grads = {}
    for name in REGULARIZED:
        if name not in tensors:
            continue
        t = np.asarray(tensors[name])
        value += float(np.sum(np.square(t, dtype=np.float64)))
        grads[name] = (2.0 * lam) * t
    return lam * value, grads


def sesp_loss(batch: LabeledBatch, params: NetworkParams | dict | None = None, lam: float = 0.0) -> LossReport:
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    se, sp = sesp_values(batch)
    penalty = l2_penalty(params, lam)[0] if params is not None else 0.0
    return LossReport(se=se, sp=sp, penalty=penalty, total=-(se + sp) + penalty,
                      logit_gradient=sesp_logit_gradient(batch))
