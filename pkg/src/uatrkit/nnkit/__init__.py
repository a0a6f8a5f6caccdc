from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .losses import LabelError, cross_entropy, kl_term, total_loss
from .model import LogitBundle, ModelConfig, ModelState, attention_pool, forward
from .optim import adam_step, lr_schedule
from .tensor import NumericGuardError, Tensor


def loss_and_grads(model, batch, y, alpha=0.0, noisy_batch=None):
    """Forward raw (and noisy) inputs, assemble the objective and backpropagate.

    Returns ``(loss_value, grads, bundle)`` where ``grads`` maps parameter
    names to arrays.
    """
    params = model.tensors()
    bundle = forward(model, batch, params)
    if noisy_batch is not None:
        bundle.z_tilde = forward(model, noisy_batch, params).z
    loss = total_loss(bundle.z, y, alpha, bundle.z_tilde)
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else 0.0 * t.data) for k, t in params.items()}
    return float(loss.data), grads, bundle


__all__ = [
    "CheckpointError",
    "LabelError",
    "LogitBundle",
    "ModelConfig",
    "ModelState",
    "NumericGuardError",
    "Tensor",
    "adam_step",
    "attention_pool",
    "cross_entropy",
    "forward",
    "kl_term",
    "load_checkpoint",
    "loss_and_grads",
    "lr_schedule",
    "save_checkpoint",
    "total_loss",
]
