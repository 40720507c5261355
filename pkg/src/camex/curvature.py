"""Kronecker-factored curvature matrices.

A curvature matrix acting on a ``[d_out, d_in]`` parameter is stored as R
sets of four small factors ``(A, B, C, D)`` of sizes ``d_out1, d_out2,
d_in1, d_in2`` with ``d_out = d_out1 * d_out2`` and ``d_in = d_in1 * d_in2``.
The represented operator is ``sum_r (A_r kron B_r) kron (C_r kron D_r)`` acting
on the row-major vectorisation of the parameter; it is applied by contracting
each factor against one axis of the parameter viewed as a 4-axis tensor, never
by forming the Kronecker product.

Vector parameters (biases) are treated as ``[d, 1]`` matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FACTOR_NAMES = ("A", "B", "C", "D")


def near_square_pair(n: int) -> tuple[int, int]:
    """(a, b) with a * b == n, a <= b and a as large as possible."""
    if n < 1:
        raise ValueError(f"cannot factor {n}")
    a = math.isqrt(n)
    while n % a:
        a -= 1
    return a, n // a


@dataclass(frozen=True)
class DimFactorization:
    d_out1: int
    d_out2: int
    d_in1: int
    d_in2: int

    def __post_init__(self):
        if min(self.dims) < 1:
            raise ValueError(f"factor dims must be positive: {self.dims}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return (self.d_out1, self.d_out2, self.d_in1, self.d_in2)

    @property
    def d_out(self) -> int:
        return self.d_out1 * self.d_out2

    @property
    def d_in(self) -> int:
        return self.d_in1 * self.d_in2

    @property
    def vec_len(self) -> int:
        return self.d_out * self.d_in

    def matrix_shape(self) -> tuple[int, int]:
        return (self.d_out, self.d_in)

    def factor_params(self) -> int:
        """Entries in one rank term: d_out1^2 + d_out2^2 + d_in1^2 + d_in2^2."""
        return sum(d * d for d in self.dims)

    @classmethod
    def for_shape(cls, shape: tuple[int, ...], override=None) -> "DimFactorization":
        if override is not None:
            f = cls(*override)
            if f.matrix_shape() != _as_matrix_shape(shape):
                raise ShapeError(f"factorization {f.dims} does not cover shape {shape}")
            return f
        d_out, d_in = _as_matrix_shape(shape)
        return cls(*near_square_pair(d_out), *near_square_pair(d_in))


def _as_matrix_shape(shape) -> tuple[int, int]:
    shape = tuple(shape)
    if len(shape) == 1:
        return (shape[0], 1)
    if len(shape) == 2:
        return shape
    raise ShapeError(f"curvature applies to vectors or matrices, got shape {shape}")


@dataclass
class CurvatureFactors:
    """Factors for one parameter tensor, possibly stacked over experts.

    Each of ``A, B, C, D`` has shape ``lead + (R, d, d)``.
    """

    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor
    dims: DimFactorization
    param_shape: tuple[int, ...]

    def __post_init__(self):
        lead = self.A.shape[:-3]
        R = self.A.shape[-3]
        for name, d in zip(FACTOR_NAMES, self.dims.dims):
            t = getattr(self, name)
            if t.shape != lead + (R, d, d):
                raise ShapeError(f"factor {name}: expected {lead + (R, d, d)}, got {t.shape}")
        if self.dims.matrix_shape() != _as_matrix_shape(self.param_shape):
            raise ShapeError(f"factorization {self.dims.dims} vs parameter {self.param_shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[-3]

    @property
    def lead_shape(self) -> tuple[int, ...]:
        return self.A.shape[:-3]

    def factors(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in FACTOR_NAMES}

    def param_count(self) -> int:
        return sum(t.size for t in self.factors().values())

    def expected_param_count(self) -> int:
        return int(np.prod(self.lead_shape, dtype=np.int64)) * self.rank * self.dims.factor_params()

    def index(self, i) -> "CurvatureFactors":
        return CurvatureFactors(*(T.take(getattr(self, n), i, axis=0) for n in FACTOR_NAMES),
                                dims=self.dims, param_shape=self.param_shape)

    def dense(self) -> np.ndarray:
        """Materialise ``sum_r (A kron B) kron (C kron D)``; shape ``lead + (P, P)``.

        Only for small oracle checks.
        """
        a, b, c, d = (getattr(self, n).data for n in FACTOR_NAMES)
        return batched_kron(batched_kron(a, b), batched_kron(c, d)).sum(axis=-3)


def batched_kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``np.kron`` over the last two axes, broadcasting the leading ones."""
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    (p, q), (r, s) = a.shape[-2:], b.shape[-2:]
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(lead + (p * r, q * s))


def init_factors(param_shape, rank: int, lead=(), override=None,
                 requires_grad: bool = True) -> CurvatureFactors:
    """Rank slot 0 is the identity operator; higher slots start as a zero operator.

    A zero rank term is encoded as ``A = 0`` with ``B, C, D = I`` rather than
    all-zero factors, so the term still receives gradient through ``A``.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    dims = DimFactorization.for_shape(tuple(param_shape), override)
    lead = tuple(lead)
    tensors = {}
    for name, d in zip(FACTOR_NAMES, dims.dims):
        arr = np.zeros(lead + (rank, d, d))
        arr[..., 0, :, :] = np.eye(d)
        if name != "A":
            arr[..., 1:, :, :] = np.eye(d)
        tensors[name] = Tensor(arr, requires_grad)
    return CurvatureFactors(**tensors, dims=dims, param_shape=tuple(param_shape))


def _contract(x: Tensor, m: Tensor, core_axis: int, n_lead: int) -> Tensor:
    # x: lead + (R', d0, d1, d2, d3); m: lead + (R, d, d) acting on core axis
    base = n_lead + 1
    ax = base + core_axis
    ndim = base + 4
    perm = list(range(base)) + [ax] + [base + c for c in range(4) if c != core_axis]
    moved = x.transpose(perm)
    shp = moved.shape
    flat = moved.reshape(shp[:base] + (shp[base], int(np.prod(shp[base + 1:]))))
    y = m @ flat
    y = y.reshape(y.shape[:base] + shp[base:])
    inverse = list(np.argsort(perm))
    assert len(inverse) == ndim
    return y.transpose(inverse)


def apply_curvature(f: CurvatureFactors, tau) -> Tensor:
    """``M tau`` with ``M = sum_r (A_r kron B_r) kron (C_r kron D_r)``.

    ``tau`` has shape ``f.lead_shape + f.param_shape``.  Differentiable in
    both the factors and ``tau``.
    """
    tau = T.as_tensor(tau)
    lead = f.lead_shape
    if tau.shape != lead + tuple(f.param_shape):
        raise ShapeError(f"apply_curvature: tau {tau.shape} vs factors for {lead + tuple(f.param_shape)}")
    n_lead = len(lead)
    x = tau.reshape(lead + (1,) + f.dims.dims)
    for axis, name in enumerate(FACTOR_NAMES):
        x = _contract(x, getattr(f, name), axis, n_lead)
    return x.sum(axis=n_lead).reshape(tau.shape)


def apply_dense(m, tau) -> Tensor:
    """Reference path: materialised ``M`` (``lead + (P, P)``) times ``vec(tau)``."""
    m, tau = T.as_tensor(m), T.as_tensor(tau)
    lead = m.shape[:-2]
    vec = tau.reshape(lead + (-1, 1))
    return (m @ vec).reshape(tau.shape)


# name -> factors stacked over the N - 1 domain experts
CurvatureBank = dict


def init_curvature_bank(param_shapes: dict[str, tuple[int, ...]], n_experts: int, rank: int,
                        overrides: dict | None = None) -> CurvatureBank:
    overrides = overrides or {}
    return {name: init_factors(shape, rank, lead=(n_experts,), override=overrides.get(name))
            for name, shape in param_shapes.items()}


def curvature_param_count(bank: CurvatureBank) -> int:
    return sum(f.param_count() for f in bank.values())


def dense_bank(bank: CurvatureBank) -> dict[str, np.ndarray]:
    return {name: f.dense() for name, f in bank.items()}
