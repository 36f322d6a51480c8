import math
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import ShapeError


@dataclass
class AdamState:
    """Moment accumulators and hyperparameters of decoupled-weight-decay Adam."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_parameters(cls, params, **hyperparameters):
        state = cls(**hyperparameters)
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
        return state


def _check_shapes(state, params, grads):
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ShapeError("parameter, gradient and moment lists differ in length")
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")


def adam_step(state, params, grads, lr=None):
    """Update params in place and return them. `lr` overrides state.lr for this step."""
    _check_shapes(state, params, grads)
    state.step += 1
    lr = state.lr if lr is None else lr
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step

    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p -= lr * state.weight_decay * p
        p -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return params


def clip_grad_norm(grads, max_norm):
    """Scale grads in place so their global L2 norm is at most max_norm; returns the norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def learning_rate(base_lr, step, warmup_steps=0, schedule="constant", total_steps=None):
    """Linear warmup followed by a constant or cosine-decayed rate."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if schedule == "cosine" and total_steps:
        progress = min(1.0, (step - warmup_steps) / max(total_steps - warmup_steps, 1))
        return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))
    return base_lr
