"""Cross-entropy, the KL consistency term and the combined training objective."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12


class LabelError(ValueError):
    pass


def _check_labels(y, n_classes):
    y = np.asarray(y)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        raise LabelError("labels must be a 1-D integer array")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise LabelError(f"labels must lie in 0..{n_classes - 1}")
    return y


def cross_entropy(z, y) -> Tensor:
    """Mean negative log-likelihood of ``y`` under ``softmax(z)``."""
    z = T.as_tensor(z)
    y = _check_labels(y, z.shape[1])
    logp = T.log_softmax(z, axis=1)
    picked = T.take_along_last(logp, y)
    return T.mul(T.mean(picked), -1.0)


def kl_term(z, z_tilde) -> Tensor:
    """Batch-mean ``KL(softmax(z) || softmax(z_tilde))`` with probabilities floored at 1e-12."""
    z, z_tilde = T.as_tensor(z), T.as_tensor(z_tilde)
    if z.shape != z_tilde.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_tilde.shape}")
    p = T.clip_min(T.softmax(z, axis=1), PROB_FLOOR)
    q = T.clip_min(T.softmax(z_tilde, axis=1), PROB_FLOOR)
    ratio = T.add(T.log(p), T.mul(T.log(q), -1.0))
    per_row = T.sum_(T.mul(p, ratio), axis=1)
    return T.mean(per_row)


def total_loss(z, y, alpha: float = 0.0, z_tilde=None) -> Tensor:
    """``CE(z, y) + alpha * (KL(z, z~) + KL(z~, z))``.

    The noisy logits only ever enter through the symmetric KL term; the
    cross-entropy is computed on the raw logits alone.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    loss = cross_entropy(z, y)
    if z_tilde is None:
        if alpha > 0:
            raise ValueError("alpha > 0 requires noisy logits")
        return loss
    reg = T.add(kl_term(z, z_tilde), kl_term(z_tilde, z))
    return T.add(loss, T.mul(reg, float(alpha)))
