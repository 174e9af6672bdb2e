"""
Adam Optimizer
==============

Adam with bias correction over named parameter arrays (updated in place).

Defaults used in the laboratory:
- classifier: lr=1e-3, beta1=0.9
- GAN components and detector: lr=2e-4, beta1=0.5
- beta2=0.999, eps=1e-8 everywhere
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from errors import NonFiniteError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments and step counter for one optimised parameter set."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_num: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_classifier(cls) -> 'AdamState':
        return cls(lr=1e-3, beta1=0.9)

    @classmethod
    def for_gan(cls) -> 'AdamState':
        return cls(lr=2e-4, beta1=0.5)


def adam_step(state: AdamState, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> AdamState:
    """
    One Adam update of every parameter that has a gradient.

    Parameters are modified in place. A parameter whose gradient is exactly
    zero everywhere is left untouched (its moments too), so zero gradients
    never move parameters. The step counter advances on every call that
    succeeds; a rejected gradient leaves the state and every parameter as
    they were.

    Raises:
        ShapeError: gradient shaped differently from its parameter
        NonFiniteError: NaN/Inf in a gradient (names the parameter)
    """
    updates = [(name, g) for name, g in grads.items() if name in params]
    for name, g in updates:
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}",
                             layer=name, expected=p.shape, actual=g.shape)
        if not np.isfinite(g).all():
            logger.error(f"✗ Non-finite gradient for parameter {name} at step {state.t + 1}")
            raise NonFiniteError("non-finite gradient", where=name)

    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t

    for name, g in updates:
        if not g.any():
            continue
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)

        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps_num)).astype(p.dtype)

    return state
