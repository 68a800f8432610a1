from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .layers import ParameterSet
from .tensor import Tensor, backward, clear_tape, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    tolerance: float
    per_tensor: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error; 0 when both gradients vanish."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterSet,
    tolerance: float = 1e-4,
    h: float = 1e-6,
    max_entries: int | None = 24,
    seed: int = 0,
    reference_fn: Callable[[], Tensor] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. At most ``max_entries`` randomly chosen entries per tensor are
    perturbed (all of them when ``None``). ``reference_fn`` replaces
    ``loss_fn`` on the numeric side; use it when the loss holds stop-gradient
    branches, freezing them at the current parameter values.
    """
    clear_tape()
    for name in params:
        params[name].grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: (params[name].grad.copy() if params[name].grad is not None
                       else np.zeros_like(params[name].data)) for name in params}
    clear_tape()

    numeric_fn = reference_fn or loss_fn
    rng = np.random.default_rng(seed)
    per_tensor: dict[str, float] = {}
    for name in params:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                fp = float(numeric_fn().data)
                flat[i] = old - h
                fm = float(numeric_fn().data)
                flat[i] = old
                numeric[j] = (fp - fm) / (2.0 * h)
        per_tensor[name] = relative_error(analytic[name].reshape(-1)[idx], numeric)
    errs = list(per_tensor.values()) or [0.0]
    return GradCheckReport(float(max(errs)), float(np.mean(errs)), tolerance, per_tensor)
