"""Weighted multi-class log loss, softmax and label smoothing.

Class order is fixed to (CE, LAA) wherever a probability vector appears.
"""

from __future__ import annotations

import numpy as np

CLASSES = ("CE", "LAA")
DEFAULT_CLAMP = 1e-15


class NonFiniteInput(ValueError):
    pass


class ClassAbsent(ValueError):
    pass


def softmax(logits) -> np.ndarray:
    """Row-wise stable softmax; accepts a single vector or a 2-D batch."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NonFiniteInput("softmax of non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_jacobian(logits) -> np.ndarray:
    """d softmax_i / d z_j for a single logit vector."""
    p = softmax(logits)
    return np.diag(p) - np.outer(p, p)


def smooth_labels(true_class, epsilon: float = 0.01, num_classes: int = 2) -> np.ndarray:
    """Uniform-mixture smoothing: ``(1 - eps) * onehot + eps / K``.

    ``true_class`` may be a scalar or an integer array; the result has a
    trailing class axis.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must be in [0, 1), got {epsilon}")
    cls = np.asarray(true_class)
    if np.any(cls < 0) or np.any(cls >= num_classes):
        raise ValueError(f"class index out of range for K={num_classes}")
    onehot = np.eye(num_classes)[cls]
    return (1.0 - epsilon) * onehot + epsilon / num_classes


def class_row_weights(true_class, class_weights=None, num_classes: int = 2,
                      allow_absent: bool = False) -> np.ndarray:
    """Per-row weights ``w_i / (N_i * sum(w))`` that turn the loss into a weighted sum.

    With ``allow_absent`` the normalisation runs over the classes actually
    present, which is what a training mini-batch needs.
    """
    cls = np.asarray(true_class, dtype=np.int64)
    w = np.ones(num_classes) if class_weights is None else np.asarray(class_weights, float)
    if w.shape != (num_classes,) or np.any(w <= 0):
        raise ValueError("class weights must be K positive reals")
    counts = np.bincount(cls, minlength=num_classes)
    present = counts > 0
    if not allow_absent and not present.all():
        missing = [CLASSES[i] if i < len(CLASSES) else str(i) for i in np.flatnonzero(~present)]
        raise ClassAbsent(f"no rows for class(es) {', '.join(missing)}")
    total_w = w[present].sum()
    per_class = np.zeros(num_classes)
    per_class[present] = w[present] / (counts[present] * total_w)
    return per_class[cls]


def _check_rows(true_class, probs, num_classes):
    cls = np.asarray(true_class, dtype=np.int64)
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != cls.shape[0]:
        raise ValueError(f"probs shape {p.shape} does not match {cls.shape[0]} rows")
    if num_classes is None:
        num_classes = p.shape[1]
    if np.any(cls < 0) or np.any(cls >= num_classes):
        raise ValueError("class index out of range")
    return cls, p, num_classes


def wmcll(true_class, probs, class_weights=None, clamp_eps: float = DEFAULT_CLAMP) -> float:
    """Weighted multi-class log loss.

    ``-sum_i w_i * sum_j (y_ij / N_i) * ln p_ij / sum_i w_i`` where ``N_i`` is
    the number of rows whose true class is ``i``. Probabilities are clamped
    to ``[clamp_eps, 1 - clamp_eps]`` before the log.
    """
    if not 0.0 < clamp_eps < 0.5:
        raise ValueError("clamp_eps must lie in (0, 0.5)")
    cls, p, k = _check_rows(true_class, probs, None)
    row_w = class_row_weights(cls, class_weights, k)
    p_true = np.clip(p[np.arange(len(cls)), cls], clamp_eps, 1.0 - clamp_eps)
    return float(-np.sum(row_w * np.log(p_true)))


def smoothed_wmcll(true_class, targets, probs, class_weights=None,
                   clamp_eps: float = DEFAULT_CLAMP, allow_absent: bool = False) -> float:
    """WMCLL with soft targets ``t_ij`` in place of the one-hot ``y_ij``.

    Rows are still grouped by their true class for the ``N_i`` normaliser.
    With one-hot targets this is exactly :func:`wmcll`.
    """
    cls, p, k = _check_rows(true_class, probs, None)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != p.shape:
        raise ValueError(f"targets shape {t.shape} != probs shape {p.shape}")
    row_w = class_row_weights(cls, class_weights, k, allow_absent=allow_absent)
    logp = np.log(np.clip(p, clamp_eps, 1.0 - clamp_eps))
    # sum over classes first so a one-hot target reproduces wmcll's terms bit for bit
    per_row = np.where(t == 0.0, 0.0, t * logp).sum(axis=1)
    return float(-np.sum(row_w * per_row))


def accuracy(true_class, probs) -> float:
    cls = np.asarray(true_class)
    return float(np.mean(np.argmax(np.asarray(probs), axis=1) == cls))
