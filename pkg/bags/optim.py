"""Adam with per-group learning rates and row remapping for densification"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from bags.errors import ShapeError
from bags.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    """First/second moments of one parameter and its own step count"""
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15) -> Tuple[np.ndarray, AdamState]:
    """
    One bias-corrected Adam update

    Args:
        param: current parameter values
        grad: dL/d(param), same shape
        state: moments shaped like param
        lr: step size
        beta1, beta2: moment decay rates in [0, 1)
        eps: denominator floor

    Returns:
        (new parameter array, new state); the inputs are left untouched
    """
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise ShapeError("adam moments and gradient must match the parameter", param.shape, grad.shape, state.m.shape)
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new_param.astype(param.dtype, copy=False), AdamState(m, v, step)


def get_expon_lr_func(lr_init: float, lr_final: float, max_steps: int) -> Callable[[int], float]:
    """Log-linear decay from lr_init to lr_final over max_steps, then constant"""

    def helper(step: int) -> float:
        if lr_init == 0.0 and lr_final == 0.0:
            return 0.0
        t = float(np.clip(step / max(max_steps, 1), 0.0, 1.0))
        return float(np.exp(np.log(lr_init) * (1.0 - t) + np.log(lr_final) * t))

    return helper


def param_group(name: str) -> str:
    """Parameters are grouped by the prefix before the first dot"""
    return name.split(".", 1)[0]


class Adam:
    """
    Adam over a named set of tensors.

    Learning rates are given per group (see param_group); a group may instead
    carry a schedule, evaluated at the iteration passed to step().
    """

    def __init__(self, params: Dict[str, Tensor], lrs: Dict[str, float],
                 schedules: Optional[Dict[str, Callable[[int], float]]] = None,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-15):
        self.params: Dict[str, Tensor] = {}
        self.state: Dict[str, AdamState] = {}
        self.lrs = dict(lrs)
        self.schedules = dict(schedules or {})
        self.betas = betas
        self.eps = eps
        self.add_params(params)

    def add_params(self, params: Dict[str, Tensor]) -> None:
        for name, tensor in params.items():
            group = param_group(name)
            if group not in self.lrs and group not in self.schedules:
                raise KeyError(f"no learning rate for parameter group '{group}'")
            self.params[name] = tensor
            self.state.setdefault(name, AdamState.zeros_like(tensor.data))

    def lr_for(self, name: str, iteration: int = 0) -> float:
        group = param_group(name)
        if group in self.schedules:
            return self.schedules[group](iteration)
        return self.lrs[group]

    def zero_grad(self) -> None:
        for tensor in self.params.values():
            tensor.grad = None

    def step(self, iteration: int = 0) -> None:
        beta1, beta2 = self.betas
        for name, tensor in self.params.items():
            if tensor.grad is None:
                continue
            new_value, self.state[name] = adam_step(
                tensor.data, tensor.grad, self.state[name], self.lr_for(name, iteration), beta1, beta2, self.eps
            )
            tensor.data = new_value

    def replace(self, name: str, tensor: Tensor, source_rows: np.ndarray) -> None:
        """
        Swap in a parameter whose rows were rebuilt by densification

        Args:
            name: registered parameter name
            tensor: the new parameter
            source_rows: for each new row, the old row its moments come from, or -1 for fresh rows
        """
        old = self.state[name]
        source_rows = np.asarray(source_rows, dtype=np.int64)
        if source_rows.shape[0] != tensor.shape[0]:
            raise ShapeError("row map length differs from the new parameter rows", source_rows.shape, tensor.shape)
        fresh = source_rows < 0
        safe = np.where(fresh, 0, source_rows)
        m = old.m[safe] if old.m.shape[0] else np.zeros_like(tensor.data)
        v = old.v[safe] if old.v.shape[0] else np.zeros_like(tensor.data)
        m[fresh] = 0.0
        v[fresh] = 0.0
        self.params[name] = tensor
        self.state[name] = AdamState(m.reshape(tensor.shape), v.reshape(tensor.shape), old.step)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {}
        for name, st in self.state.items():
            arrays[f"m/{name}"] = st.m
            arrays[f"v/{name}"] = st.v
        return arrays

    def state_steps(self) -> Dict[str, int]:
        return {name: st.step for name, st in self.state.items()}

    def load_state(self, arrays: Dict[str, np.ndarray], steps: Dict[str, int]) -> None:
        for name, tensor in self.params.items():
            try:
                m, v = arrays[f"m/{name}"], arrays[f"v/{name}"]
            except KeyError:
                logger.warning("No optimizer moments stored for %s, starting from zero", name)
                continue
            if m.shape != tensor.shape:
                raise ShapeError(f"stored moments for {name} do not match", m.shape, tensor.shape)
            self.state[name] = AdamState(m.astype(tensor.dtype), v.astype(tensor.dtype), int(steps.get(name, 0)))
