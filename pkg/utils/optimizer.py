"""Adam with decoupled weight decay"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from utils.config import TrainConfig
from utils.errors import NumericalError
from utils.tensor_core import ModelParams


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig, epoch: Optional[int] = None) -> AdamState:
    """One update from the gradients currently stored on `params`.

    theta <- theta * (1 - lr * wd), then the bias-corrected Adam step.
    """
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            where = f" at epoch {epoch}" if epoch is not None else ""
            raise NumericalError(f"non-finite gradient for {param.name}{where}")

    beta1, beta2 = cfg.betas
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    decay = 1.0 - cfg.lr * cfg.weight_decay

    for param in params:
        grad = param.grad
        m = beta1 * state.m.get(param.name, 0.0) + (1.0 - beta1) * grad
        v = beta2 * state.v.get(param.name, 0.0) + (1.0 - beta2) * grad * grad
        state.m[param.name], state.v[param.name] = m, v
        update = (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        param.data = param.data * decay - cfg.lr * update
    return state
