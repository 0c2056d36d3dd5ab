"""SGD with heavy-ball momentum and seeded weight initialisation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, ShapeError


@dataclass
class SgdState:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             state: SgdState) -> dict[str, np.ndarray]:
    """One update ``v <- m*v - lr*g; p <- p + v``.

    Parameters without a gradient entry are passed through untouched. Returns a
    new mapping; the input arrays are not modified.
    """
    out = dict(params)
    for name, g in grads.items():
        if name not in params:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError("sgd_step", p.shape, g.shape, detail=name)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"sgd_step[{name}]")
        v = state.velocity.get(name)
        if v is None:
            v = -state.learning_rate * g
        else:
            if v.shape != p.shape:
                raise ShapeError("sgd_step", p.shape, v.shape, detail=f"velocity {name}")
            v = state.momentum * v - state.learning_rate * g
        state.velocity[name] = v
        out[name] = p + v
    return out


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)
