"""Central finite-difference verification of the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    worst_index: tuple[int, ...]
    checked_coords: int
    skipped: bool = False
    skip_reason: str = ""

    def __str__(self):
        if self.skipped:
            return f"grad check skipped: {self.skip_reason}"
        return (f"grad check over {self.checked_coords} coords: "
                f"max rel err {self.max_rel_error:.3e} at "
                f"{self.worst_param}{list(self.worst_index)}")


def _rel_err(a: float, n: float) -> float:
    # Mixed absolute/relative criterion: coordinates whose gradients sit below
    # 1e-3 are compared on that absolute scale, which keeps the central
    # difference noise floor (~1e-9 at f64) from masquerading as error.
    m = max(abs(a), abs(n))
    if m < 1e-8:
        return 0.0
    return abs(a - n) / max(m, 1e-3)


def grad_check(params: dict[str, Tensor], loss_fn: Callable[[], Tensor],
               eps: float = 1e-4, dropout_p: float = 0.0,
               max_coords_per_param: int | None = None) -> GradCheckReport:
    """Compare autodiff gradients against central differences, coordinatewise.

    All parameters must be float64; ``loss_fn`` is re-evaluated with single
    coordinates perturbed, so it must be deterministic.
    """
    if dropout_p > 0.0:
        return GradCheckReport(0.0, "", (), 0, skipped=True,
                               skip_reason="dropout active; forward is stochastic")
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 parameters ({name} is {p.data.dtype})")
        p.grad = None

    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = (0.0, "", ())
    checked = 0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idxs = range(flat.size)
        if max_coords_per_param is not None and flat.size > max_coords_per_param:
            rng = np.random.default_rng(0)
            idxs = sorted(rng.choice(flat.size, size=max_coords_per_param, replace=False))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn().data)
            flat[i] = orig - eps
            f_minus = float(loss_fn().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = _rel_err(a, numeric)
            checked += 1
            if err > worst[0]:
                worst = (err, name, np.unravel_index(i, p.data.shape))
    return GradCheckReport(worst[0], worst[1], worst[2], checked)
