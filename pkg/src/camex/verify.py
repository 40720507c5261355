"""Self-verification suites run by ``camex verify``.

Each check compares a production path against an independent reference
(finite differences, materialised Kronecker products, re-evaluation on
perturbed inputs, a simulated gradient step) and returns a ``CheckResult``.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig
from .curvature import DimFactorization, apply_curvature, init_curvature_bank, init_factors
from .gradcheck import fd_check, fd_check_params
from .harness import build_model
from .identities import (autodiff_curvature_grads, curvature_grad_identity, random_two_step_state,
                         verify_two_step_decomposition)
from .merging import MergeSpec, domain_vectors, merge_ca, merge_domain_specific, reparameterize
from .moe import ExpertBank, Router, init_expert, init_router
from .segments import pinned_first_segment, plan_segments, segment_merged_forward, segment_scores
from .tensor import Tensor

SUITES = ("gradcheck", "kronecker", "causal", "eq8", "reparam")


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}/{self.name}: {self.detail}"


def kronecker_factorizations(max_vec: int = 64):
    """Every (d_out1, d_out2, d_in1, d_in2) with positive entries and product <= max_vec."""
    def rec(prefix, budget):
        if len(prefix) == 4:
            yield DimFactorization(*prefix)
            return
        for d in range(1, budget + 1):
            yield from rec(prefix + (d,), budget // d)

    yield from rec((), max_vec)


def randomize_factors(f, rng, scale: float = 0.5):
    for name, t in f.factors().items():
        t.data[...] = rng.normal(0.0, scale, t.shape)
    return f


def toy_model(seed: int = 0, variant: str = "merge", ca: bool = True, rank: int = 2,
              layers: int = 2, n_experts: int = 3, d_model: int = 4, d_ff: int = 4):
    cfg = TrainConfig(variant=variant, n_experts=n_experts, layers=layers, d_model=d_model, d_ff=d_ff,
                      vocab=5, seq_len=4, segment_len=2, kronecker_rank=rank, seed=seed,
                      merge=MergeSpec(ca_enabled=ca))
    model = build_model(cfg)
    rng = np.random.default_rng(seed + 101)
    for layer in model.layers:
        if layer.curvature is not None:
            for f in layer.curvature.values():
                for t in f.factors().values():
                    t.data += rng.normal(0.0, 0.3, t.shape)
        # non-zero biases so every gradient path is exercised
        for e in [layer.base, layer.domain]:
            if e is not None:
                e.b1.data[...] = rng.normal(0.0, 0.3, e.b1.shape)
                e.b2.data[...] = rng.normal(0.0, 0.3, e.b2.shape)
    return model


# --------------------------------------------------------------- suites
def check_gradcheck(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    prims = {
        "matmul": lambda x: (x @ x.T @ x).sum(),
        "softmax": lambda x: (T.softmax(x, axis=-1) * np.arange(1.0, 4.0)).sum(),
        "log_softmax": lambda x: (T.log_softmax(x, axis=0) * np.arange(1.0, 4.0)).sum(),
        "gelu": lambda x: T.gelu(x).sum(),
        "exp_log": lambda x: T.log(T.exp(x) + 1.0).sum(),
        "abs": lambda x: (T.tabs(x) * x).sum(),
        "reshape_transpose": lambda x: (x.reshape(9, 1).T @ x.reshape(9, 1)).sum(),
        "mean": lambda x: (x.mean(axis=0) * x.mean(axis=1)).sum(),
        "take": lambda x: (T.take(x, [2, 0, 2], axis=1) * x).sum(),
    }
    for name, fn in prims.items():
        worst = 0.0
        for _ in range(5):
            rep = fd_check(fn, rng.uniform(-2, 2, (3, 3)))
            worst = max(worst, rep.max_rel_err)
        out.append(CheckResult("gradcheck", name, worst <= 1e-5, f"max rel err {worst:.2e}"))

    model = toy_model(seed)
    tokens = np.random.default_rng(seed + 1).integers(5, size=(2, 4))
    targets = np.random.default_rng(seed + 2).integers(5, size=(2, 4))
    # the first evaluation is unperturbed, so the pins hold the reference scores
    with pinned_first_segment():
        rep = fd_check_params(lambda: model.loss(tokens, targets), model.parameters())
    out.append(CheckResult("gradcheck", "ca_pipeline", rep.passed, f"max rel err {rep.max_rel_err:.2e}"))
    return out


def check_kronecker(instances: int = 50, seed: int = 0, max_vec: int = 64) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst, count = 0.0, 0
    for dims in kronecker_factorizations(max_vec):
        # the instances ride along a leading axis; rank varies between calls
        rank = int(rng.integers(1, 4))
        f = randomize_factors(init_factors(dims.matrix_shape(), rank, lead=(instances,), override=dims.dims), rng)
        tau = rng.normal(size=(instances,) + dims.matrix_shape())
        fast = apply_curvature(f, tau).data
        dense = f.dense() @ tau.reshape(instances, -1, 1)
        worst = max(worst, float(np.abs(fast - dense.reshape(fast.shape)).max()))
        count += instances
    return [CheckResult("kronecker", "factored_vs_dense", worst <= 1e-10,
                        f"{count} instances, max abs diff {worst:.2e}")]


def check_causal(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    d, dff, N, K, S = 4, 5, 4, 3, 3
    bank = ExpertBank(init_expert(rng, d, dff), init_expert(rng, d, dff, lead=(N - 1,)))
    router = init_router(rng, N - 1, d)
    curv = init_curvature_bank({n: t.shape for n, t in bank.base.params().items()}, N - 1, 1)
    for f in curv.values():
        randomize_factors(f, rng, 0.5)
    plan = plan_segments(K * S, S)
    spec = MergeSpec(ca_enabled=True)
    h = rng.normal(size=(K * S, d))
    base_scores = segment_scores(router, h, plan).scores.data
    base_out = segment_merged_forward(bank, curv, router, h, plan, spec).data
    ok_scores, ok_out = True, True
    for k in range(K):
        pert = h.copy()
        pert[k * S:(k + 1) * S] += rng.normal(size=(S, d))
        sc = segment_scores(router, pert, plan).scores.data
        out = segment_merged_forward(bank, curv, router, pert, plan, spec).data
        # only segment k + 1 (and segment 0 itself when k == 0) may move
        unchanged = [j for j in range(K) if j != k + 1 and not (k == 0 and j == 0)]
        ok_scores &= all(np.array_equal(sc[j], base_scores[j]) for j in unchanged)
        ok_out &= np.array_equal(out[:k * S], base_out[:k * S])
    res = [CheckResult("causal", "scores_depend_on_previous_segment", bool(ok_scores), "perturbation re-evaluation"),
           CheckResult("causal", "outputs_ignore_later_segments", bool(ok_out), "bit-identical prefixes")]

    one = plan_segments(S, S)
    W = Tensor(router.W_g.data, requires_grad=True)
    loss = (segment_scores(Router(W), h[:S], one).scores * rng.normal(size=(1, N - 1))).sum()
    loss.backward()
    res.append(CheckResult("causal", "first_segment_stop_gradient", bool(np.all(W.grad == 0.0)),
                           f"max |dL/dW_g| = {np.abs(W.grad).max():.1e}"))
    return res


def check_eq8(instances: int = 20, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        state = random_two_step_state(rng, shape=(4, 4), n=3, loss="quadratic" if i % 2 else "nonlinear")
        rep = verify_two_step_decomposition(state, lr=float(rng.uniform(0.01, 0.5)),
                                            alpha=float(rng.uniform(0.5, 1.5)))
        worst = max(worst, rep.max_abs_diff)
    res = [CheckResult("eq8", "two_step_decomposition", worst <= 1e-9, f"max abs diff {worst:.2e}")]

    worst = 0.0
    for _ in range(5):
        st = random_two_step_state(rng, shape=(4, 4), n=3)
        alpha = float(rng.uniform(0.5, 1.5))
        gm, ge, _ = autodiff_curvature_grads(st.loss_fn, st.base, st.taus_t, st.scores_t, alpha, st.mats)
        for j in range(3):
            ref = curvature_grad_identity(ge, st.scores_t[j], st.taus_t[j], alpha)
            worst = max(worst, float(np.abs(gm[j] - ref).max() / max(np.abs(ref).max(), 1e-300)))
    res.append(CheckResult("eq8", "curvature_gradient_outer_product", worst <= 1e-8, f"max rel err {worst:.2e}"))
    return res


def check_reparam(instances: int = 50, seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        d, dff, N = int(rng.integers(2, 5)), int(rng.integers(2, 7)), int(rng.integers(2, 6))
        bank = ExpertBank(init_expert(rng, d, dff), init_expert(rng, d, dff, lead=(N - 1,)))
        curv = init_curvature_bank({n: t.shape for n, t in bank.base.params().items()}, N - 1, int(rng.integers(1, 3)))
        for f in curv.values():
            randomize_factors(f, rng)
        taus = domain_vectors(bank)
        s = rng.dirichlet(np.ones(N - 1))
        direct = merge_ca(bank.base, taus, s, 1.0, curv)
        rebank = ExpertBank(bank.base, reparameterize(bank.base, taus, curv))
        plain = merge_domain_specific(bank.base, domain_vectors(rebank), s, 1.0)
        for n, t in direct.params().items():
            worst = max(worst, float(np.abs(t.data - plain.params()[n].data).max()))
    res = [CheckResult("reparam", "reparameterized_equals_ca", worst <= 1e-12, f"max abs diff {worst:.2e}")]

    from .cli import reparameterized_checkpoint

    model = toy_model(seed, ca=True, rank=1)
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.cmex"
        dst = Path(tmp) / "out.cmex"
        save_checkpoint(model, src)
        reparameterized_checkpoint(src, dst, MergeSpec(alpha=1.0, ca_enabled=True))
        loaded = load_checkpoint(dst).model
    worst = 0.0
    for l, layer in enumerate(model.layers):
        s = rng.dirichlet(np.ones(model.cfg.n_experts - 1))
        bank = ExpertBank(layer.base, layer.domain)
        direct = merge_ca(bank.base, domain_vectors(bank), s, 1.0, layer.curvature)
        after = loaded.bank(l)
        plain = merge_domain_specific(after.base, domain_vectors(after), s, 1.0)
        for n, t in direct.params().items():
            worst = max(worst, float(np.abs(t.data - plain.params()[n].data).max()))
    res.append(CheckResult("reparam", "through_checkpoint", worst <= 1e-12, f"max abs diff {worst:.2e}"))
    return res


def run_suites(suite: str = "all", seed: int = 0) -> list[CheckResult]:
    chosen = SUITES if suite == "all" else (suite,)
    if any(s not in SUITES for s in chosen):
        raise ValueError(f"unknown suite {suite!r}")
    fns = {"gradcheck": check_gradcheck, "kronecker": check_kronecker, "causal": check_causal,
           "eq8": check_eq8, "reparam": check_reparam}
    results = []
    for s in chosen:
        results.extend(fns[s](seed=seed))
    return results
