"""
Adam parameter updates with bias correction
"""
from dataclasses import dataclass, field
from typing import Dict, Mapping, Union

import numpy as np

from simreg.models.configs import TrainConfig
from simreg.services.autodiff import Tensor
from simreg.services.network import NetworkParameters

Params = Union[NetworkParameters, Mapping[str, Tensor]]


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step count"""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params: Params, grads: Dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """
    One in-place Adam update of every parameter tensor.

    param -= lr / bc1 * m / (sqrt(v / bc2) + eps), bc_k = 1 - beta_k^t
    """
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    step_size = cfg.learning_rate / bc1

    for name, tensor in params.items():
        g = grads[name]
        if g.shape != tensor.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {tensor.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)

        state.m[name] *= b1
        state.m[name] += (1.0 - b1) * g
        state.v[name] *= b2
        state.v[name] += (1.0 - b2) * (g * g)

        denom = np.sqrt(state.v[name] / bc2) + cfg.adam_eps
        tensor.data = tensor.data - step_size * state.m[name] / denom


class Adam:
    """
    Stateful wrapper around adam_step.

    Usage:
        optimizer = Adam(params, cfg)
        loss.backward()
        optimizer.step()
    """

    def __init__(self, params: NetworkParameters, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.state = AdamState()

    def zero_grad(self) -> None:
        self.params.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.params.grads(), self.state, self.cfg)
