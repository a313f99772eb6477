"""Adam optimizer over a named parameter dictionary."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    """A parameter received a NaN or infinite gradient."""


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.alpha < 0:
            raise ValueError("learning rate must be non-negative")


def adam_step(params: dict[str, Tensor], state: AdamState, grads: dict[str, np.ndarray] | None = None) -> None:
    """Apply one bias-corrected Adam update in place.

    Gradients default to ``param.grad``; a missing gradient counts as zero.
    Every gradient is checked before any parameter is touched, so a
    non-finite value leaves the parameters and state unchanged.
    """
    resolved = {}
    for name, p in params.items():
        g = p.grad if grads is None else grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g)
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter '{name}' at step {state.step + 1}")
        m = state.first_moment.get(name)
        if m is not None and m.shape != p.shape:
            raise ValueError(f"optimizer state for '{name}' has shape {m.shape}, parameter has {p.shape}")
        resolved[name] = g

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = resolved[name]
        m = state.first_moment.setdefault(name, np.zeros_like(p.data))
        v = state.second_moment.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
