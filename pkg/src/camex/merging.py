"""Domain vectors and the merging protocols built on them.

All merges act tensor-by-tensor on the four FFN parameters; router scores are
shared across the four.  Tensor-level helpers take the domain axis first
(``taus[i]`` is the i-th domain vector); scores may be ``[n]`` for one merge
or ``[B, n]`` for a batch of merges, in which case the result gains a
leading ``B`` axis.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .curvature import CurvatureBank, apply_curvature
from .moe import PARAM_NAMES, Expert, ExpertBank
from .tensor import ShapeError, Tensor

PROTOCOLS = ("domain_specific", "ties", "dare", "fisher_diag")


class DegenerateWeightError(ValueError):
    """Precision weights sum to zero somewhere."""


@dataclass
class MergeSpec:
    protocol: str = "domain_specific"
    alpha: float = 1.0
    ca_enabled: bool = False
    dare_drop_prob: float = 0.0
    ties_trim_fraction: float = 0.0
    rng_seed: int = 0
    # also scale the merged update by the elected TIES sign; off by default
    ties_sign_multiplier: bool = False

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not 0.0 <= self.dare_drop_prob < 1.0:
            raise ValueError("dare_drop_prob must lie in [0, 1)")
        if not 0.0 <= self.ties_trim_fraction < 1.0:
            raise ValueError("ties_trim_fraction must lie in [0, 1)")


@dataclass
class DomainVectors:
    """``taus[name][i] = E_i[name] - E_m[name]``."""

    taus: dict[str, Tensor]
    fingerprint: str = ""

    @property
    def n(self) -> int:
        return next(iter(self.taus.values())).shape[0]

    def __getitem__(self, name: str) -> Tensor:
        return self.taus[name]

    def tau(self, i: int) -> dict[str, Tensor]:
        return {name: T.take(t, i, axis=0) for name, t in self.taus.items()}

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "DomainVectors":
        return DomainVectors({n: fn(n, t) for n, t in self.taus.items()}, self.fingerprint)


def _fingerprint(bank: ExpertBank) -> str:
    h = hashlib.sha256()
    for e in (bank.base, bank.domain):
        for name in PARAM_NAMES:
            h.update(getattr(e, name).data.tobytes())
    return h.hexdigest()[:16]


def domain_vectors(bank: ExpertBank) -> DomainVectors:
    taus = {name: bank.domain.params()[name] - t for name, t in bank.base.params().items()}
    return DomainVectors(taus, _fingerprint(bank))


def _as_taus(taus) -> dict[str, Tensor]:
    return taus.taus if isinstance(taus, DomainVectors) else taus


# --------------------------------------------------------------- tensor level
def weighted_sum(deltas: Tensor, scores) -> Tensor:
    """sum_i s_i * deltas[i]; ``scores`` is ``[n]`` or ``[B, n]``."""
    scores = T.as_tensor(scores)
    n = deltas.shape[0]
    if scores.shape[-1] != n or scores.ndim not in (1, 2):
        raise ShapeError(f"{scores.shape} scores for {n} domain vectors")
    inner = deltas.shape[1:]
    flat = deltas.reshape(n, -1)
    if scores.ndim == 1:
        return (scores.reshape(1, n) @ flat).reshape(inner)
    return (scores @ flat).reshape((scores.shape[0],) + inner)


def merge_tensor(base: Tensor, deltas: Tensor, scores, alpha: float) -> Tensor:
    """base + alpha * sum_i s_i deltas[i]."""
    return base + weighted_sum(deltas, scores) * float(alpha)


def ties_mask_tensor(taus, trim_fraction: float = 0.0) -> tuple[Tensor, np.ndarray]:
    """Trim (optional), elect a sign per entry, drop disagreeing entries.

    Returns the masked stack and the elected sign array.  An entry whose
    summed value is exactly zero elects no sign and is zeroed everywhere.
    """
    taus = T.as_tensor(taus)
    vals = taus.data
    n = vals.shape[0]
    keep = np.ones_like(vals)
    if trim_fraction > 0:
        flat = np.abs(vals.reshape(n, -1))
        n_drop = int(np.floor(trim_fraction * flat.shape[1]))
        if n_drop:
            order = np.argsort(flat, axis=1, kind="stable")[:, :n_drop]
            k = keep.reshape(n, -1)
            np.put_along_axis(k, order, 0.0, axis=1)
    trimmed = vals * keep
    elected = np.sign(trimmed.sum(axis=0))
    agree = (np.sign(trimmed) == elected) & (elected != 0)
    mask = keep * agree
    return taus * mask, elected


def dare_key(seed: int, layer: int = 0, tensor: int = 0, expert: int = 0, step: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(layer), int(tensor), int(expert), int(step) & 0xFFFFFFFF])


def dare_mask_tensor(taus, p: float, seed: int, layer: int = 0, tensor: int = 0, step: int = 0,
                     masks: np.ndarray | None = None) -> Tensor:
    """Keep each entry with probability 1 - p and rescale survivors by 1/(1 - p).

    ``masks`` (0/1, same shape as ``taus``) bypasses the random draw.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"DARE drop probability must lie in [0, 1), got {p}")
    taus = T.as_tensor(taus)
    if masks is None:
        masks = np.empty(taus.shape)
        for i in range(taus.shape[0]):
            rng = np.random.default_rng(dare_key(seed, layer, tensor, i, step))
            masks[i] = rng.random(taus.shape[1:]) >= p
    elif masks.shape != taus.shape:
        raise ShapeError(f"DARE mask {masks.shape} vs taus {taus.shape}")
    return taus * (np.asarray(masks, dtype=np.float64) / (1.0 - p))


# --------------------------------------------------------------- expert level
def merge_domain_specific(base: Expert, taus, scores, alpha: float = 1.0) -> Expert:
    """E_m + alpha * sum_i s_i tau_i, per parameter tensor."""
    taus = _as_taus(taus)
    return base.map(lambda n, t: merge_tensor(t, taus[n], scores, alpha))


def ties_mask(taus, trim_fraction: float = 0.0) -> DomainVectors:
    taus = taus if isinstance(taus, DomainVectors) else DomainVectors(dict(taus))
    return taus.map(lambda _, t: ties_mask_tensor(t, trim_fraction)[0])


def dare_mask(taus, p: float, seed: int, layer: int = 0, step: int = 0) -> DomainVectors:
    taus = taus if isinstance(taus, DomainVectors) else DomainVectors(dict(taus))
    names = list(taus.taus)
    return taus.map(lambda n, t: dare_mask_tensor(t, p, seed, layer, names.index(n), step))


def merge_ca(base: Expert, taus, scores, alpha: float, curvature: CurvatureBank) -> Expert:
    """E_m + alpha * sum_i M_i (s_i tau_i) with Kronecker-factored M_i."""
    taus = _as_taus(taus)
    if set(curvature) != set(taus):
        raise ShapeError(f"curvature covers {sorted(curvature)}, taus cover {sorted(taus)}")
    for name, f in curvature.items():
        if f.lead_shape != (taus[name].shape[0],):
            raise ShapeError(f"{name}: {f.lead_shape} factor sets for {taus[name].shape[0]} domain vectors")
    return base.map(lambda n, t: merge_tensor(t, apply_curvature(curvature[n], taus[n]), scores, alpha))


def merge_dynamic(base_l: Expert, taus_l, domain_next: Expert, scores_next, alpha: float,
                  curvature_l: CurvatureBank | None, curvature_next: CurvatureBank | None):
    """One hop of the dynamic architecture.

    The next layer's base is ``E_m^l + alpha/(N-1) sum_i M_i tau_i^l`` (uniform
    weights, no scores); the next layer's domain vectors are taken against
    that propagated base and merged with the next layer's scores.  Returns
    ``(E_m^{l+1}, merged^{l+1})``.  ``None`` curvature means identity.
    """
    taus_l = _as_taus(taus_l)
    n = next(iter(taus_l.values())).shape[0]
    if n < 1:
        raise ValueError("dynamic merging needs N >= 2")
    uniform = np.full(n, 1.0 / n)
    curve = (lambda name, t: apply_curvature(curvature_l[name], t)) if curvature_l else (lambda _, t: t)
    base_next = base_l.map(lambda name, t: merge_tensor(t, curve(name, taus_l[name]), uniform, alpha))
    taus_next = {name: domain_next.params()[name] - t for name, t in base_next.params().items()}
    if curvature_next:
        merged = merge_ca(base_next, taus_next, scores_next, alpha, curvature_next)
    else:
        merged = merge_domain_specific(base_next, taus_next, scores_next, alpha)
    return base_next, merged


def reparameterize(base: Expert, taus, curvature: CurvatureBank | None, alpha: float = 1.0,
                   strict: bool = True) -> Expert:
    """Fold curvature into stored experts: E'_i = E_m + M_i tau_i (stacked).

    Merging the E'_i with the plain score-weighted rule at alpha = 1 gives the
    curvature-aware merge without touching the factors again.  With
    ``strict`` the call refuses alpha != 1.
    """
    if strict and alpha != 1.0:
        raise ValueError("reparameterize: exact equivalence is only provided for alpha == 1")
    taus = _as_taus(taus)
    out = {}
    for name, t in base.params().items():
        tau = taus[name]
        if curvature is not None:
            f = curvature[name]
            if f.lead_shape != (tau.shape[0],) or tuple(f.param_shape) != tau.shape[1:]:
                raise ShapeError(f"{name}: factors for {f.param_shape} x{f.lead_shape}, tau {tau.shape}")
            tau = apply_curvature(f, tau)
        out[name] = t + tau
    return Expert(**out, activation=base.activation)


# ---------------------------------------------------------------- pipeline
def prepare_deltas(taus, spec: MergeSpec, curvature: CurvatureBank | None = None,
                   layer: int = 0, step: int = 0) -> tuple[dict[str, Tensor], dict[str, np.ndarray]]:
    """Mask, then apply curvature: the per-expert updates fed to the weighted sum.

    Returns ``(deltas, elected_signs)``; elected signs are only filled for TIES.
    """
    taus = _as_taus(taus)
    deltas, signs = {}, {}
    for ti, (name, tau) in enumerate(taus.items()):
        if spec.protocol == "ties":
            tau, signs[name] = ties_mask_tensor(tau, spec.ties_trim_fraction)
        elif spec.protocol == "dare":
            tau = dare_mask_tensor(tau, spec.dare_drop_prob, spec.rng_seed, layer, ti, step)
        elif spec.protocol == "fisher_diag":
            raise ValueError("fisher_diag merging needs Fisher estimates; use fisher_diag_merge")
        if spec.ca_enabled and curvature is not None:
            tau = apply_curvature(curvature[name], tau)
        deltas[name] = tau
    return deltas, signs


def merge_with_spec(base: Expert, taus, scores, spec: MergeSpec,
                    curvature: CurvatureBank | None = None, layer: int = 0, step: int = 0) -> Expert:
    """Full merge: masking -> curvature -> score-weighted sum."""
    deltas, signs = prepare_deltas(taus, spec, curvature, layer, step)

    def one(name, t):
        upd = weighted_sum(deltas[name], scores) * float(spec.alpha)
        if spec.protocol == "ties" and spec.ties_sign_multiplier:
            upd = upd * signs[name]
        return t + upd

    return base.map(one)


# ------------------------------------------------------------ Fisher baseline
def fisher_diag_merge_arrays(params: Sequence[np.ndarray], fishers: Sequence[np.ndarray]) -> np.ndarray:
    """(sum_i F_i)^-1 (sum_i F_i theta_i) with diagonal F_i."""
    params = np.stack([np.asarray(p, dtype=np.float64) for p in params])
    fishers = np.stack([np.asarray(f, dtype=np.float64) for f in fishers])
    if params.shape != fishers.shape:
        raise ShapeError(f"fishers {fishers.shape} vs params {params.shape}")
    if (fishers < 0).any():
        raise ValueError("Fisher diagonals must be nonnegative")
    total = fishers.sum(axis=0)
    if (total <= 0).any():
        raise DegenerateWeightError(f"zero total Fisher at {int((total <= 0).sum())} entries")
    return (fishers * params).sum(axis=0) / total


def fisher_diag_merge(experts: Sequence[Expert], fishers: Sequence[dict[str, np.ndarray]]) -> Expert:
    if len(experts) != len(fishers):
        raise ValueError(f"{len(experts)} experts but {len(fishers)} Fisher estimates")
    merged = {
        name: Tensor(fisher_diag_merge_arrays([e.params()[name].data for e in experts],
                                              [f[name] for f in fishers]))
        for name in PARAM_NAMES
    }
    return Expert(**merged, activation=experts[0].activation)


def estimate_diag_fisher(logits_fn: Callable[[object], Tensor], params: dict[str, Tensor], batch,
                         labels: str = "empirical", rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Mean over the batch of squared gradients of log p(y | x).

    ``batch`` is a sequence of ``(x, y)``; ``logits_fn(x)`` returns a 1-D
    logit tensor built from ``params``.  With ``labels="sampled"`` y is drawn
    from the model's own predictive distribution instead.
    """
    batch = list(batch)
    if not batch:
        raise ValueError("estimate_diag_fisher: empty batch")
    if labels not in ("empirical", "sampled"):
        raise ValueError(f"labels must be 'empirical' or 'sampled', got {labels!r}")
    if labels == "sampled" and rng is None:
        rng = np.random.default_rng(0)
    acc = {name: np.zeros_like(p.data) for name, p in params.items()}
    for x, y in batch:
        for p in params.values():
            p.zero_grad()
        logp = T.log_softmax(logits_fn(x), axis=-1)
        if labels == "sampled":
            probs = np.exp(logp.data)
            y = int(rng.choice(probs.size, p=probs / probs.sum()))
        logp[int(y)].backward()
        for name, p in params.items():
            acc[name] += p.grad * p.grad
    for p in params.values():
        p.zero_grad()
    return {name: a / len(batch) for name, a in acc.items()}
