"""Central-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    tol: float
    worst: tuple[int, int] | None = None  # (tensor index, flat element index)
    failure: str | None = None
    per_tensor: list[float] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.0e} checked={self.checked}"
        if self.failure:
            msg += f" ({self.failure})"
        return msg


def grad_check(
    f: Callable[[], Tensor],
    point: Tensor | Sequence[Tensor],
    h: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-6,
    max_elements: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must read the current values of the tensors
    in ``point``, which are perturbed in place and restored afterwards. The
    discrepancy for one element is ``|a - n| / max(|a|, |n|, floor)``.
    ``max_elements`` caps the number of probed elements per tensor (chosen
    with a seeded RNG) to bound runtime on large parameter sets.
    """
    tensors = [point] if isinstance(point, Tensor) else list(point)
    for t in tensors:
        t.requires_grad = True
        t.grad = None

    loss = f()
    if loss.size != 1:
        return GradCheckReport(np.inf, False, 0, tol, failure=f"f returned shape {loss.shape}, not a scalar")
    if not np.isfinite(loss.data).all():
        return GradCheckReport(np.inf, False, 0, tol, failure="f is not finite at the base point")
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst_err, worst_at, checked = 0.0, None, 0
    per_tensor = []
    for ti, t in enumerate(tensors):
        flat = t.data.reshape(-1)
        if not flat.flags.writeable or not np.shares_memory(flat, t.data):
            t.data = t.data.copy()
            flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        a_flat = analytic[ti].reshape(-1)
        t_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                return GradCheckReport(
                    np.inf, False, checked, tol, worst=(ti, int(i)),
                    failure=f"f not finite when perturbing tensor {ti} element {int(i)}",
                )
            numeric = (fp - fm) / (2 * h)
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            t_worst = max(t_worst, err)
            if err > worst_err:
                worst_err, worst_at = err, (ti, int(i))
        per_tensor.append(t_worst)
    for t in tensors:
        t.grad = None
    return GradCheckReport(worst_err, worst_err < tol, checked, tol, worst=worst_at, per_tensor=per_tensor)
