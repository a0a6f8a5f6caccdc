import math

import numpy as np

from .tensor import guard


def adam_step(model, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place to ``model``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    for name, g in grads.items():
        guard(g, f"gradient of {name}")
    model.step += 1
    t = model.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in model.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = model.m[name]
        v = model.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return model


def lr_schedule(epoch, base_lr=5e-4, warmup=5, max_epoch=100):
    """Linear warmup to ``base_lr`` then half-cosine decay to zero at ``max_epoch``.

    ``epoch`` may be fractional so the schedule can be evaluated per step.
    """
    if not 0 <= epoch <= max_epoch:
        raise ValueError(f"epoch {epoch} outside [0, {max_epoch}]")
    if warmup > 0 and epoch < warmup:
        return base_lr * epoch / warmup
    if max_epoch == warmup:
        return base_lr
    progress = (epoch - warmup) / (max_epoch - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
