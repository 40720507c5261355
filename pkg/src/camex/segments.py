"""Causal segment routing.

A length-L sequence is cut into K = L / S contiguous segments.  Segment k >= 1
is merged with scores computed from the mean hidden state of segment k - 1;
segment 0 uses its own mean, with the scores cut from the graph.
"""

from __future__ import annotations

import contextlib

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .curvature import CurvatureBank
from .merging import MergeSpec, domain_vectors, merge_with_spec
from .moe import ExpertBank, Router, merged_forward, route_tokens
from .tensor import ShapeError, Tensor

OWN_MEAN_DETACHED = "own-mean-detached"
PREVIOUS_SEGMENT_MEAN = "previous-segment-mean"


@dataclass(frozen=True)
class SegmentPlan:
    L: int
    S: int

    @property
    def K(self) -> int:
        return self.L // self.S

    @property
    def boundaries(self) -> list[tuple[int, int]]:
        return [(k * self.S, (k + 1) * self.S) for k in range(self.K)]


def plan_segments(L: int, S: int) -> SegmentPlan:
    if L <= 0 or S <= 0:
        raise ValueError(f"segment plan needs positive sizes, got L={L}, S={S}")
    if L % S:
        raise ValueError(f"segment length {S} does not divide sequence length {L}; pad upstream")
    return SegmentPlan(L, S)


@dataclass
class SegmentScores:
    scores: Tensor  # [..., K, n]
    provenance: list[str]


def _segment_view(h: Tensor, plan: SegmentPlan) -> Tensor:
    if h.ndim < 2 or h.shape[-2] != plan.L:
        raise ShapeError(f"hidden states {h.shape} do not match plan length {plan.L}")
    return h.reshape(h.shape[:-2] + (plan.K, plan.S, h.shape[-1]))


_PINS: dict | None = None


@contextlib.contextmanager
def pinned_first_segment():
    """Hold the detached first-segment scores at their first-seen values.

    Inside this block the loss is a function of the parameters in which the
    stop-gradient branch is a true constant, so finite differences and
    reverse mode describe the same map.
    """
    global _PINS
    prev, _PINS = _PINS, {}
    try:
        yield
    finally:
        _PINS = prev


def segment_scores(router: Router, h, plan: SegmentPlan) -> SegmentScores:
    h = T.as_tensor(h)
    means = _segment_view(h, plan).mean(axis=-2)  # [..., K, d]
    probs = route_tokens(router, means)  # [..., K, n]
    K = plan.K
    shifted = T.take(probs, [0] + list(range(K - 1)), axis=-2)
    first = np.zeros((K, 1))
    first[0] = 1.0
    frozen = T.detach(shifted)
    if _PINS is not None:
        frozen = Tensor(_PINS.setdefault(id(router), frozen.data.copy()))
    scores = frozen * first + shifted * (1.0 - first)
    return SegmentScores(scores, [OWN_MEAN_DETACHED] + [PREVIOUS_SEGMENT_MEAN] * (K - 1))


def sequence_scores(router: Router, h) -> Tensor:
    """Non-causal pooling for classification: one score vector per sequence."""
    h = T.as_tensor(h)
    return route_tokens(router, h.mean(axis=-2))


def segment_merged_forward(bank: ExpertBank, curvature: CurvatureBank | None, router: Router, h,
                           plan: SegmentPlan, spec: MergeSpec, layer: int = 0, step: int = 0) -> Tensor:
    """One merged expert per segment, applied to every token of that segment."""
    h = T.as_tensor(h)
    seg = _segment_view(h, plan)
    lead = seg.shape[:-3]
    d = h.shape[-1]
    scores = segment_scores(router, h, plan).scores
    n = scores.shape[-1]
    merged = merge_with_spec(bank.base, domain_vectors(bank), scores.reshape(-1, n), spec,
                             curvature, layer=layer, step=step)
    out = merged_forward(merged, seg.reshape(-1, plan.S, d))
    return out.reshape(lead + (plan.L, d))
