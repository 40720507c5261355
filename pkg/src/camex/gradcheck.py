"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class OracleError(RuntimeError):
    """The function under test is not a deterministic function of its inputs."""


@dataclass
class GradCheckReport:
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]
    rel_err: list[np.ndarray]
    tol: float
    max_rel_err: float = field(init=False)

    def __post_init__(self):
        self.max_rel_err = max((float(e.max()) for e in self.rel_err if e.size), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """|a - b| / max(floor, |a|, |b|) elementwise.

    The floor keeps entries whose true derivative is ~0 from blowing up; with
    the default of 1 the measure is absolute for small gradients.
    """
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


def fd_check_params(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1.0,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` w.r.t. ``params`` to central differences.

    ``f`` must rebuild its graph from the current values of ``params`` on each
    call.  Parameter values are perturbed in place and restored.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError(f"fd_check: f must return a scalar, got shape {loss.shape}")
    again = f()
    if not np.array_equal(loss.data, again.data):
        raise OracleError("fd_check: two evaluations at the same point differ")
    loss.backward()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()

    numeric = []
    for p in params:
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        numeric.append(num)
    errs = [relative_error(a, n, floor) for a, n in zip(analytic, numeric)]
    return GradCheckReport(analytic, numeric, errs, tol)


def fd_check(
    f: Callable[[Tensor], Tensor],
    x,
    step: float = 1e-5,
    tol: float = 1e-5,
    floor: float = 1.0,
) -> GradCheckReport:
    """Single-input form: ``f`` maps a tensor to a scalar tensor."""
    leaf = Tensor(x.data if isinstance(x, Tensor) else x, requires_grad=True)
    return fd_check_params(lambda: f(leaf), [leaf], step=step, tol=tol, floor=floor)
