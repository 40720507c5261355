"""Runtime checks of the curvature-gradient identities on dense, tiny instances.

Everything here materialises full ``P x P`` curvature matrices, so the vector
length ``P`` of a parameter is capped at ``DENSE_CAP``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

DENSE_CAP = 64


class OracleCapError(ValueError):
    """The dense reference path refuses parameters this large."""


def _check_cap(p: int) -> None:
    if p > DENSE_CAP:
        raise OracleCapError(f"dense oracle limited to vec length {DENSE_CAP}, got {p}")


def curvature_grad_identity(grad_merged, score: float, tau, alpha: float) -> np.ndarray:
    """Closed-form dL/dM_j = alpha * s_j * vec(dL/dE_hat) vec(tau_j)^T."""
    g = np.asarray(grad_merged.data if isinstance(grad_merged, Tensor) else grad_merged, dtype=np.float64)
    tau = np.asarray(tau.data if isinstance(tau, Tensor) else tau, dtype=np.float64)
    _check_cap(max(g.size, tau.size))
    return alpha * score * np.outer(g.reshape(-1), tau.reshape(-1))


def dense_merge(base, taus, scores, alpha: float, mats) -> Tensor:
    """E_m + alpha * sum_j s_j M_j vec(tau_j) with dense ``mats[j]`` (``[n, P, P]``)."""
    base, taus, scores, mats = (T.as_tensor(x) for x in (base, taus, scores, mats))
    n = taus.shape[0]
    vecs = taus.reshape(n, -1, 1)
    applied = (mats @ vecs).reshape(n, -1)  # [n, P]
    delta = (scores.reshape(1, n) @ applied).reshape(base.shape)
    return base + delta * float(alpha)


def autodiff_curvature_grads(loss_fn: Callable[[Tensor], Tensor], base, taus, scores, alpha: float,
                             mats) -> tuple[np.ndarray, np.ndarray, float]:
    """Backprop through a dense curvature merge.

    Returns ``(dL/dM, dL/dE_hat, L)``; ``dL/dE_hat`` is obtained by a second
    pass where the merged value is a leaf.
    """
    mats = np.asarray(mats, dtype=np.float64)
    _check_cap(mats.shape[-1])
    m_leaf = Tensor(mats, requires_grad=True)
    merged = dense_merge(base, taus, scores, alpha, m_leaf)
    loss = loss_fn(merged)
    loss.backward()
    e_leaf = Tensor(merged.data, requires_grad=True)
    loss_fn(e_leaf).backward()
    return m_leaf.grad, e_leaf.grad, loss.item()


@dataclass
class TwoStepState:
    """Everything the two-step check needs; ``*_t`` is step t, ``*_t1`` step t+1."""

    base: np.ndarray
    mats: np.ndarray  # [n, P, P]
    taus_t: np.ndarray  # [n, ...]
    taus_t1: np.ndarray
    scores_t: np.ndarray  # [n]
    scores_t1: np.ndarray
    loss_fn: Callable[[Tensor], Tensor]


@dataclass
class TwoStepReport:
    simulated: np.ndarray
    closed_form: np.ndarray
    max_abs_diff: float
    matching_weights: np.ndarray  # tau_j^t . dL/dE_hat^t per expert
    agreement: np.ndarray  # s_j^t s_j^{t+1} (tau_j^t . tau_j^{t+1})
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tol


def verify_two_step_decomposition(state: TwoStepState, lr: float, alpha: float,
                                  optimizer: str = "sgd", tol: float = 1e-9) -> TwoStepReport:
    """Take one plain gradient step on dense M, merge, compare with the two-term form.

    simulated   = E_m + alpha sum_j s_j^{t+1} M_j^{t+1} tau_j^{t+1}
    closed form = E_m + alpha sum_j s_j^{t+1} M_j^t tau_j^{t+1}
                  - alpha^2 lr sum_j s_j^t s_j^{t+1} (tau_j^t . tau_j^{t+1}) dL/dE_hat^t
    """
    if optimizer != "sgd":
        raise NotImplementedError("the two-step decomposition assumes plain gradient descent")
    grad_m, grad_e, _ = autodiff_curvature_grads(
        state.loss_fn, state.base, state.taus_t, state.scores_t, alpha, state.mats)
    mats_next = state.mats - lr * grad_m
    simulated = dense_merge(state.base, state.taus_t1, state.scores_t1, alpha, mats_next).data

    n = state.taus_t.shape[0]
    flat_t = state.taus_t.reshape(n, -1)
    flat_t1 = state.taus_t1.reshape(n, -1)
    inner = (flat_t * flat_t1).sum(axis=1)
    agreement = state.scores_t * state.scores_t1 * inner
    first = dense_merge(state.base, state.taus_t1, state.scores_t1, alpha, state.mats).data
    closed = first - alpha * alpha * lr * agreement.sum() * grad_e
    matching = flat_t @ grad_e.reshape(-1)
    diff = float(np.abs(simulated - closed).max())
    return TwoStepReport(simulated, closed, diff, matching, agreement, tol)


def gradient_matching_form(state: TwoStepState, lr: float, alpha: float) -> np.ndarray:
    """Same update written with per-expert weights (tau_j^t . g) scaling tau_j^{t+1}.

    Equals the two-term form only where the identity
    (tau^t . tau^{t+1}) g == (tau^t . g) tau^{t+1} holds; returned for reporting.
    """
    _, grad_e, _ = autodiff_curvature_grads(
        state.loss_fn, state.base, state.taus_t, state.scores_t, alpha, state.mats)
    n = state.taus_t.shape[0]
    first = dense_merge(state.base, state.taus_t1, state.scores_t1, alpha, state.mats).data
    w = state.scores_t * state.scores_t1 * (state.taus_t.reshape(n, -1) @ grad_e.reshape(-1))
    corr = (w.reshape(n, 1) * state.taus_t1.reshape(n, -1)).sum(axis=0).reshape(first.shape)
    return first - alpha * alpha * lr * corr


def random_two_step_state(rng: np.random.Generator, shape=(4, 4), n: int = 2,
                          loss: str = "quadratic") -> TwoStepState:
    """Random instance with a smooth loss of the merged parameter."""
    p = int(np.prod(shape))
    _check_cap(p)
    target = rng.normal(size=shape)
    weight = rng.normal(size=shape)

    def quadratic(e: Tensor) -> Tensor:
        d = e - target
        return (d * d).sum() * 0.5 + (e * weight).sum()

    def nonlinear(e: Tensor) -> Tensor:
        return T.log_softmax(e.reshape(1, -1), axis=-1).sum() * -1.0 + (T.tanh(e) * weight).sum()

    fn = quadratic if loss == "quadratic" else nonlinear
    scores_t = rng.dirichlet(np.ones(n))
    scores_t1 = rng.dirichlet(np.ones(n))
    return TwoStepState(
        base=rng.normal(size=shape),
        mats=np.eye(p)[None].repeat(n, 0) + 0.1 * rng.normal(size=(n, p, p)),
        taus_t=rng.normal(size=(n,) + tuple(shape)),
        taus_t1=rng.normal(size=(n,) + tuple(shape)),
        scores_t=scores_t,
        scores_t1=scores_t1,
        loss_fn=fn,
    )
