"""SGD with momentum and per-parameter-group learning-rate multipliers."""

from __future__ import annotations

from dataclasses import dataclass, field
from fnmatch import fnmatchcase

import numpy as np

from .errors import UsageError
from .model import ModelParams

__all__ = ["OptimState", "make_optim_state", "sgd_step"]


@dataclass
class OptimState:
    base_lr: float
    momentum: float = 0.9
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def multiplier(self, name: str) -> float:
        """First matching pattern wins; unmatched parameters get 1.0."""
        for pattern, mult in self.lr_multipliers.items():
            if fnmatchcase(name, pattern):
                return mult
        return 1.0

    def lr(self, name: str) -> float:
        return self.base_lr * self.multiplier(name)


def make_optim_state(config) -> OptimState:
    """Ranker (``rn.*``) at ``lr_rn``, localizer (``stn.*``) at ``lr_stn``."""
    base = max(config.lr_rn, config.lr_stn)
    if base == 0:
        mults = {}
    else:
        mults = {"rn.*": config.lr_rn / base, "stn.*": config.lr_stn / base}
    return OptimState(base_lr=base, momentum=config.momentum, lr_multipliers=mults)


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimState) -> None:
    """In place: ``v <- momentum * v - lr * g``; ``p <- p + v``.

    The scale output is kept inside its bounds by the clamp in the forward
    map, so no parameter projection is needed after the update.
    """
    for name, tensor in params.tensors.items():
        if name not in grads:
            raise UsageError(f"no gradient supplied for parameter {name}")
        g = grads[name]
        if g.shape != tensor.shape:
            raise UsageError(f"gradient for {name} has shape {g.shape}, parameter has {tensor.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(tensor.data)
        elif v.shape != tensor.shape:
            raise UsageError(f"velocity for {name} has shape {v.shape}, parameter has {tensor.shape}")
        v = state.momentum * v - state.lr(name) * g
        state.velocity[name] = v
        tensor.data += v
