"""Central finite-difference checks for analytic gradients"""
from typing import Callable, Dict, Optional

import numpy as np

from bags.tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error, floored so two zero gradients compare equal"""
    diff = np.linalg.norm(np.ravel(analytic) - np.ravel(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def numeric_gradient(loss_fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-6,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Estimate dL/d(tensor) at the given flat indices (all entries by default)

    The tensor's data is perturbed in place through its setter and restored afterwards.
    """
    original = tensor.data
    flat = original.ravel().copy()
    if indices is None:
        indices = np.arange(flat.size)
    grads = np.zeros(len(indices), dtype=np.float64)
    try:
        with no_grad():
            for slot, index in enumerate(indices):
                saved = flat[index]
                flat[index] = saved + eps
                tensor.data = flat.reshape(original.shape).copy()
                plus = loss_fn().item()
                flat[index] = saved - eps
                tensor.data = flat.reshape(original.shape).copy()
                minus = loss_fn().item()
                flat[index] = saved
                grads[slot] = (plus - minus) / (2.0 * eps)
    finally:
        tensor.data = original
    return grads


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Dict[str, Tensor], eps: float = 1e-6,
                    max_entries: Optional[int] = None, seed: int = 0) -> Dict[str, float]:
    """
    Compare backward() against central differences for every named tensor

    Args:
        loss_fn: rebuilds the scalar loss from the current tensor values
        tensors: name -> tensor to check (must require grad)
        eps: finite-difference step
        max_entries: check a seeded random subset of at most this many entries per tensor
        seed: subset selection seed

    Returns:
        name -> relative error
    """
    for tensor in tensors.values():
        tensor.grad = None
    loss_fn().backward()
    analytic = {name: (t.grad if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    errors = {}
    for name, tensor in tensors.items():
        indices = np.arange(tensor.size)
        if max_entries is not None and tensor.size > max_entries:
            indices = np.sort(rng.choice(tensor.size, size=max_entries, replace=False))
        numeric = numeric_gradient(loss_fn, tensor, eps, indices)
        errors[name] = relative_error(np.ravel(analytic[name])[indices], numeric)
    return errors
