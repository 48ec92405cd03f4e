"""Adam optimizer and gradient utilities."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor

logger = logging.getLogger(__name__)

# PyTorch's defaults for torch.optim.Adam.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers keyed by parameter name."""

    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> None:
    """Apply one bias-corrected Adam update, then zero the gradients."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"adam_step: no gradient for {', '.join(missing)}")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, param in params.items():
        grad = param.grad.astype(np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(param.shape, dtype=np.float64)
            v = np.zeros(param.shape, dtype=np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (
            np.sqrt(v / correction2) + state.eps
        )
        param.data = (param.data - update).astype(param.data.dtype)
        param.grad = np.zeros_like(param.data)


def grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for param in params.values():
        if param.grad is not None:
            total += float(np.sum(param.grad.astype(np.float64) ** 2))
    return float(np.sqrt(total))


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    Returns the norm measured before clipping.
    """
    norm = grad_norm(params)
    if norm > max_norm > 0.0:
        factor = max_norm / (norm + 1e-6)
        for param in params.values():
            if param.grad is not None:
                param.grad = (param.grad * factor).astype(param.data.dtype)
        logger.debug("clipped gradient norm %.4f to %.4f", norm, max_norm)
    return norm
