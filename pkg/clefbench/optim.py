import logging
from dataclasses import dataclass

import numpy as np

from clefbench.errors import ShapeError, ValidationError

logger = logging.getLogger("OPTIM")

OPTIMIZERS = ("sgd", "momentum", "adam")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 3e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.kind not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got {self.kind}")
        if self.lr < 0:
            raise ValidationError(f"learning rate must be >= 0, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("adam betas must be in [0, 1)")
        return self


def optimizer_step(params, grads, state, config):
    """Update each array in params in place from the matching grad.

    state is a dict owned by the caller; it carries momentum buffers, Adam
    moments and the step count between calls.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param dims {p.shape} vs grad dims {g.shape}")
    t = state.get("t", 0) + 1
    state["t"] = t
    if config.kind == "sgd":
        for p, g in zip(params, grads):
            p -= config.lr * g
    elif config.kind == "momentum":
        velocity = state.setdefault("velocity", [np.zeros_like(p) for p in params])
        for p, g, v in zip(params, grads, velocity):
            v *= config.momentum
            v += g
            p -= config.lr * v
    elif config.kind == "adam":
        m = state.setdefault("m", [np.zeros_like(p) for p in params])
        v = state.setdefault("v", [np.zeros_like(p) for p in params])
        c1 = 1.0 - config.beta1 ** t
        c2 = 1.0 - config.beta2 ** t
        for p, g, m_i, v_i in zip(params, grads, m, v):
            m_i *= config.beta1
            m_i += (1.0 - config.beta1) * g
            v_i *= config.beta2
            v_i += (1.0 - config.beta2) * g * g
            p -= config.lr * (m_i / c1) / (np.sqrt(v_i / c2) + config.eps)
    else:
        raise ValidationError(f"Unknown optimizer {config.kind}")


class Optimizer:
    """Binds a fixed parameter list (Tensors) to a config and its state"""

    def __init__(self, params, config):
        self.params = list(params)
        self.config = config.validate()
        self.state = {}

    def step(self):
        optimizer_step(
            [p.data for p in self.params],
            [p.grad for p in self.params],
            self.state,
            self.config,
        )

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
