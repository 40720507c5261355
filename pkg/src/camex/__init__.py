"""Curvature-aware merging of experts for sparse mixture-of-experts layers."""

from .curvature import CurvatureFactors, DimFactorization, apply_curvature
from .merging import MergeSpec, domain_vectors, merge_ca, merge_domain_specific
from .tensor import Tensor

__all__ = [
    "CurvatureFactors",
    "DimFactorization",
    "MergeSpec",
    "Tensor",
    "apply_curvature",
    "domain_vectors",
    "merge_ca",
    "merge_domain_specific",
]
