"""Router, feed-forward experts and the two SMoE forward paths."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PARAM_NAMES = ("W1", "b1", "W2", "b2")
ACTIVATIONS = ("gelu", "identity")


@dataclass
class Expert:
    """Two-layer FFN ``W2 act(W1 h + b1) + b2``.

    The same container is used for a stack of experts: every tensor then
    carries matching leading axes (e.g. ``W1`` of shape ``[n, d_ff, d_model]``).
    """

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    activation: str = "gelu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        lead = self.W1.shape[:-2]
        d_ff, d_model = self.W1.shape[-2:]
        expected = {
            "b1": lead + (d_ff,),
            "W2": lead + (d_model, d_ff),
            "b2": lead + (d_model,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"expert {name}: expected {shape}, got {getattr(self, name).shape}")

    @property
    def d_model(self) -> int:
        return self.W1.shape[-1]

    @property
    def d_ff(self) -> int:
        return self.W1.shape[-2]

    @property
    def lead_shape(self) -> tuple[int, ...]:
        return self.W1.shape[:-2]

    def params(self) -> dict[str, Tensor]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def map(self, fn) -> "Expert":
        """New expert with ``fn(name, tensor)`` applied to every parameter."""
        return Expert(**{n: fn(n, t) for n, t in self.params().items()}, activation=self.activation)

    def index(self, i) -> "Expert":
        """Select expert(s) ``i`` from a stack."""
        return self.map(lambda _, t: T.take(t, i, axis=0))

    def param_count(self) -> int:
        return sum(t.size for t in self.params().values())

    def detach(self) -> "Expert":
        return self.map(lambda _, t: T.detach(t))


def init_expert(rng: np.random.Generator, d_model: int, d_ff: int, lead=(), scale: float = 1.0,
                activation: str = "gelu", requires_grad: bool = True) -> Expert:
    lead = tuple(lead)
    s1 = scale / np.sqrt(d_model)
    s2 = scale / np.sqrt(d_ff)
    return Expert(
        W1=Tensor(rng.normal(0.0, s1, lead + (d_ff, d_model)), requires_grad),
        b1=Tensor(np.zeros(lead + (d_ff,)), requires_grad),
        W2=Tensor(rng.normal(0.0, s2, lead + (d_model, d_ff)), requires_grad),
        b2=Tensor(np.zeros(lead + (d_model,)), requires_grad),
        activation=activation,
    )


@dataclass
class ExpertBank:
    """Base expert ``E_m`` plus the stacked domain experts ``E_1 .. E_{N-1}``."""

    base: Expert
    domain: Expert  # stacked, leading axis N - 1

    def __post_init__(self):
        if self.base.lead_shape != ():
            raise ShapeError("base expert must not be stacked")
        if len(self.domain.lead_shape) != 1:
            raise ShapeError("domain experts must be stacked along one leading axis")
        for name, t in self.base.params().items():
            if self.domain.params()[name].shape[1:] != t.shape:
                raise ShapeError(f"domain {name} does not match base shape {t.shape}")
        if self.N < 2:
            raise ValueError("an expert bank needs N >= 2")

    @property
    def N(self) -> int:
        return self.domain.lead_shape[0] + 1

    def experts(self) -> list[Expert]:
        """Per-expert views ``[E_1, ..., E_{N-1}]`` (differentiable slices)."""
        return [self.domain.index(i) for i in range(self.N - 1)]


@dataclass
class Router:
    W_g: Tensor  # [n_scores, d_model]

    @property
    def n_scores(self) -> int:
        return self.W_g.shape[0]


def init_router(rng: np.random.Generator, n_scores: int, d_model: int, scale: float = 1.0) -> Router:
    return Router(Tensor(rng.normal(0.0, scale / np.sqrt(d_model), (n_scores, d_model)), True))


def route_tokens(router: Router, h) -> Tensor:
    """softmax(W_g h_t) for every row of ``h``; shape ``[..., n_scores]``."""
    h = T.as_tensor(h)
    if h.shape[-1] != router.W_g.shape[1]:
        raise ShapeError(f"router expects d_model={router.W_g.shape[1]}, got {h.shape}")
    if h.size == 0:
        return Tensor(np.zeros(h.shape[:-1] + (router.n_scores,)))
    if h.ndim == 1:
        return T.softmax(h.reshape(1, -1) @ router.W_g.T, axis=-1).reshape(router.n_scores)
    return T.softmax(h @ router.W_g.T, axis=-1)


def _row_bias(b: Tensor, ndim_h: int) -> Tensor:
    # bias [..., n] against activations [..., T, n]
    if b.ndim == 1:
        return b
    return b.reshape(b.shape[:-1] + (1,) + b.shape[-1:])


def expert_forward(e: Expert, h) -> Tensor:
    """y_t = W2 act(W1 h_t + b1) + b2 for every token row of ``h``."""
    h = T.as_tensor(h)
    if h.shape[-1] != e.d_model:
        raise ShapeError(f"expert expects d_model={e.d_model}, got input {h.shape}")
    z = h @ e.W1.transpose(tuple(range(e.W1.ndim - 2)) + (e.W1.ndim - 1, e.W1.ndim - 2))
    z = z + _row_bias(e.b1, h.ndim)
    if e.activation == "gelu":
        z = T.gelu(z)
    y = z @ e.W2.transpose(tuple(range(e.W2.ndim - 2)) + (e.W2.ndim - 1, e.W2.ndim - 2))
    return y + _row_bias(e.b2, h.ndim)


def merged_forward(merged: Expert, h) -> Tensor:
    """Run a merged expert over all tokens of ``h`` (same contract as ``expert_forward``)."""
    return expert_forward(merged, h)


def smoe_forward(experts: Expert, router: Router, h, k: int) -> Tensor:
    """Token-level top-k mixture: y_t = sum_{i in top-k} G(t, i) FFN_i(h_t).

    ``experts`` is a stack of ``router.n_scores`` experts.  Scores are used
    as produced by the softmax; they are not renormalised over the top-k set.
    """
    h = T.as_tensor(h)
    if k < 1:
        raise ValueError("smoe_forward: k must be >= 1")
    n = router.n_scores
    if experts.lead_shape != (n,):
        raise ShapeError(f"router scores {n} experts, bank holds {experts.lead_shape}")
    if k > n:
        raise ValueError(f"smoe_forward: k={k} exceeds {n} experts")
    lead, d = h.shape[:-1], h.shape[-1]
    flat = h.reshape(-1, d)
    scores = route_tokens(router, flat)  # [T, n]
    idx = T.topk_indices(scores, k, axis=-1)
    mask = np.zeros(scores.shape)
    np.put_along_axis(mask, idx, 1.0, axis=-1)
    gates = scores * mask
    outs = expert_forward(experts, flat.reshape(1, -1, d))  # [n, T, d]
    weights = gates.transpose().reshape(n, -1, 1)
    return (outs * weights).sum(axis=0).reshape(lead + (d,))
