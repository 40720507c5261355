import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from camex.curvature import init_curvature_bank
from camex.merging import (DegenerateWeightError, DomainVectors, MergeSpec, dare_mask_tensor, domain_vectors,
                           estimate_diag_fisher, fisher_diag_merge, fisher_diag_merge_arrays, merge_ca,
                           merge_domain_specific, merge_with_spec, reparameterize, ties_mask, ties_mask_tensor)
from camex.moe import ExpertBank, init_expert
from camex.tensor import ShapeError, Tensor
from camex import tensor as T

from camex.verify import randomize_factors

vals = st.floats(-5, 5, allow_nan=False).map(lambda v: round(v, 3))


def bank(rng, d=3, dff=4, N=4):
    return ExpertBank(init_expert(rng, d, dff, requires_grad=False),
                      init_expert(rng, d, dff, lead=(N - 1,), requires_grad=False))


def dyadic_bank(rng, d=3, dff=4, N=4):
    """Weights on a 1/8 grid, so differences and sums are exact in float64."""
    b = bank(rng, d, dff, N)
    for e in (b.base, b.domain):
        for t in e.params().values():
            t.data[...] = rng.integers(-16, 17, t.shape) / 8.0
    return b


def ulp_close(a, b, ulps=2):
    scale = np.maximum(np.abs(a), np.abs(b))
    return np.all(np.abs(a - b) <= ulps * np.spacing(np.maximum(scale, 1.0)))


def test_merge_spec_validation():
    assert MergeSpec().alpha == 1.0
    with pytest.raises(ValueError):
        MergeSpec(protocol="avg")
    with pytest.raises(ValueError):
        MergeSpec(protocol="dare", dare_drop_prob=1.0)
    with pytest.raises(ValueError):
        MergeSpec(ties_trim_fraction=1.5)


def test_domain_vectors(rng):
    b = dyadic_bank(rng)
    taus = domain_vectors(b)
    for n, t in b.base.params().items():
        for i in range(3):
            ref = np.array([[x - y for x, y in zip(ra, rb)] for ra, rb in
                            zip(np.atleast_2d(b.domain.params()[n].data[i]), np.atleast_2d(t.data))])
            assert np.array_equal(np.atleast_2d(taus[n].data[i]), ref)
    same = ExpertBank(b.base, b.base.map(lambda _, t: Tensor(np.repeat(t.data[None], 2, 0))))
    assert all(np.array_equal(t.data, np.zeros_like(t.data)) for t in domain_vectors(same).taus.values())
    plus = ExpertBank(b.base, b.base.map(lambda _, t: Tensor(t.data[None] + 1.0)))
    assert all(np.array_equal(t.data, np.ones_like(t.data)) for t in domain_vectors(plus).taus.values())


def test_merge_examples(rng):
    b = dyadic_bank(rng)
    taus = domain_vectors(b)
    m0 = merge_domain_specific(b.base, taus, rng.dirichlet(np.ones(3)), 0.0)
    for n, t in m0.params().items():
        assert np.array_equal(t.data, b.base.params()[n].data)
    one = merge_domain_specific(b.base, taus, np.array([0.0, 1.0, 0.0]), 1.0)
    for n, t in one.params().items():
        np.testing.assert_array_equal(t.data, b.domain.params()[n].data[1])
    # on general floats the telescoping E_m + (E_j - E_m) is exact up to rounding
    g = bank(rng)
    one = merge_domain_specific(g.base, domain_vectors(g), np.array([0.0, 1.0, 0.0]), 1.0)
    for n, t in one.params().items():
        assert ulp_close(t.data, g.domain.params()[n].data[1])
    base = b.base
    t2 = DomainVectors({n: Tensor(np.stack([np.ones(t.shape), -np.ones(t.shape)])) for n, t in base.params().items()})
    half = merge_domain_specific(base, t2, np.array([0.5, 0.5]), 0.5)
    for n, t in half.params().items():
        assert np.array_equal(t.data, base.params()[n].data)


def test_merge_score_length_mismatch(rng):
    b = bank(rng)
    with pytest.raises(ShapeError):
        merge_domain_specific(b.base, domain_vectors(b), np.ones(2) / 2, 1.0)


@given(st.integers(0, 2 ** 31))
def test_alpha_zero_is_base_bit_exact(seed):
    rng = np.random.default_rng(seed)
    b = bank(rng)
    m = merge_domain_specific(b.base, domain_vectors(b), rng.normal(size=3) * 100, 0.0)
    for n, t in m.params().items():
        assert np.array_equal(t.data, b.base.params()[n].data)


def test_ties_examples():
    masked, elected = ties_mask_tensor(np.array([[1.0, -2.0], [3.0, 1.0]]))
    assert elected.tolist() == [1.0, -1.0]
    assert masked.data.tolist() == [[1.0, -2.0], [3.0, 0.0]]
    single = np.array([[0.5, -1.5, 2.0]])
    assert np.array_equal(ties_mask_tensor(single)[0].data, single)
    tau = np.array([1.0, -2.0, 0.5])
    out, el = ties_mask_tensor(np.stack([tau, -tau]))
    assert np.array_equal(el, np.zeros(3))
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_ties_trim():
    taus = np.array([[0.1, -5.0, 3.0, 0.2], [4.0, 0.3, -0.1, 2.0]])
    out, _ = ties_mask_tensor(taus, trim_fraction=0.5)
    assert out.data.tolist() == [[0.0, -5.0, 3.0, 0.0], [4.0, 0.0, 0.0, 2.0]]


@given(arrays(np.float64, (3, 6), elements=vals), st.sampled_from([0.0, 0.2, 0.5]))
def test_ties_unanimity_and_idempotence(taus, trim):
    once, elected = ties_mask_tensor(taus, trim)
    s = np.sign(once.data)
    for j in range(taus.shape[1]):
        nz = s[:, j][s[:, j] != 0]
        assert len(set(nz.tolist())) <= 1
        if nz.size:
            assert nz[0] == elected[j]
    twice, _ = ties_mask_tensor(once.data, 0.0)
    assert np.array_equal(twice.data, once.data)


def test_ties_mask_expert_level(rng):
    b = bank(rng)
    out = ties_mask(domain_vectors(b))
    assert set(out.taus) == {"W1", "b1", "W2", "b2"}


def test_dare_examples():
    tau = np.array([[4.0, 8.0, -4.0, 2.0]])
    out = dare_mask_tensor(tau, 0.5, seed=0, masks=np.array([[1.0, 0.0, 1.0, 0.0]]))
    assert out.data.tolist() == [[8.0, 0.0, -8.0, 0.0]]
    assert np.array_equal(dare_mask_tensor(tau, 0.0, seed=3).data, tau)
    with pytest.raises(ValueError):
        dare_mask_tensor(tau, 1.0, seed=0)


@given(st.integers(0, 2 ** 31), st.floats(0.05, 0.9))
def test_dare_seed_determinism(seed, p):
    tau = np.arange(1.0, 13.0).reshape(2, 6)
    a = dare_mask_tensor(tau, p, seed, layer=1, tensor=2, step=3).data
    b = dare_mask_tensor(tau, p, seed, layer=1, tensor=2, step=3).data
    assert np.array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], tau[kept] / (1 - p), rtol=1e-15)


def test_dare_keys_differ_by_step_and_layer():
    tau = np.ones((1, 64))
    a = dare_mask_tensor(tau, 0.5, 0, layer=0, step=0).data
    assert not np.array_equal(a, dare_mask_tensor(tau, 0.5, 0, layer=1, step=0).data)
    assert not np.array_equal(a, dare_mask_tensor(tau, 0.5, 0, layer=0, step=1).data)


def test_dare_unbiased_within_three_sigma():
    tau = np.array([[4.0, -2.0, 0.5, 1.0]])
    p, n = 0.3, 10_000
    draws = np.stack([dare_mask_tensor(tau, p, seed=s).data for s in range(n)])
    mean = draws.mean(axis=0)
    sigma = np.abs(tau) * np.sqrt(p / (1 - p)) / np.sqrt(n)
    assert np.all(np.abs(mean - tau) <= 3 * sigma)


def test_mask_then_curvature_order(rng):
    b = bank(rng, N=3)
    curv = init_curvature_bank({n: t.shape for n, t in b.base.params().items()}, 2, 1)
    for f in curv.values():
        randomize_factors(f, rng)
    s = np.array([0.3, 0.7])
    spec = MergeSpec(protocol="ties", ca_enabled=True)
    out = merge_with_spec(b.base, domain_vectors(b), s, spec, curv)
    ref = merge_ca(b.base, ties_mask(domain_vectors(b)), s, 1.0, curv)
    for n, t in out.params().items():
        np.testing.assert_allclose(t.data, ref.params()[n].data, atol=1e-14)


def test_ties_sign_multiplier_flag(rng):
    b = bank(rng, N=3)
    s = np.array([0.4, 0.6])
    plain = merge_with_spec(b.base, domain_vectors(b), s, MergeSpec(protocol="ties"))
    signed = merge_with_spec(b.base, domain_vectors(b), s, MergeSpec(protocol="ties", ties_sign_multiplier=True))
    for n in plain.params():
        upd_plain = plain.params()[n].data - b.base.params()[n].data
        upd_signed = signed.params()[n].data - b.base.params()[n].data
        np.testing.assert_allclose(upd_signed, np.abs(upd_plain), atol=1e-14)


def test_fisher_examples():
    assert fisher_diag_merge_arrays([np.array(2.0), np.array(4.0)], [np.array(1.0), np.array(3.0)]) == 3.5
    big = fisher_diag_merge_arrays([np.array([2.0, -1.0]), np.array([4.0, 7.0])],
                                   [np.array([1e12, 1e12]), np.array([1.0, 1.0])])
    np.testing.assert_allclose(big, [2.0, -1.0], atol=1e-9)
    with pytest.raises(DegenerateWeightError):
        fisher_diag_merge_arrays([np.ones(2), np.ones(2)], [np.array([0.0, 1.0]), np.zeros(2)])


@given(st.integers(0, 2 ** 31))
def test_fisher_convex_combination(seed):
    rng = np.random.default_rng(seed)
    params = [rng.normal(size=5) for _ in range(3)]
    fishers = [rng.uniform(0.01, 5, size=5) for _ in range(3)]
    out = fisher_diag_merge_arrays(params, fishers)
    lo, hi = np.min(params, axis=0), np.max(params, axis=0)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_fisher_expert_merge_equal_fisher_is_average(rng):
    es = [init_expert(rng, 3, 2, requires_grad=False) for _ in range(3)]
    f = {n: np.full(t.shape, 0.7) for n, t in es[0].params().items()}
    out = fisher_diag_merge(es, [f, f, f])
    for n, t in out.params().items():
        np.testing.assert_allclose(t.data, np.mean([e.params()[n].data for e in es], axis=0), atol=1e-14)


def _fisher_setup(rng):
    W = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return {"W": W}, (lambda x: (W @ x.reshape(-1, 1)).reshape(-1))


def test_estimate_fisher_single_example(rng):
    params, fn = _fisher_setup(rng)
    x, y = rng.normal(size=4), 2
    F = estimate_diag_fisher(fn, params, [(x, y)])
    W = params["W"]
    W.zero_grad()
    T.log_softmax(fn(x), axis=-1)[y].backward()
    assert np.array_equal(F["W"], W.grad * W.grad)


def test_estimate_fisher_batch_loop_oracle(rng):
    params, fn = _fisher_setup(rng)
    batch = [(rng.normal(size=4), int(rng.integers(3))) for _ in range(4)]
    F = estimate_diag_fisher(fn, params, batch)
    Wd = params["W"].data
    acc = np.zeros_like(Wd)
    for x, y in batch:
        z = Wd @ x
        p = np.exp(z - z.max())
        p /= p.sum()
        g = (np.eye(3)[y] - p)[:, None] * x[None, :]
        acc += g * g
    np.testing.assert_allclose(F["W"], acc / 4, atol=1e-12)


def test_estimate_fisher_zero_gradient_and_errors(rng):
    W = Tensor(np.zeros((3, 4)), requires_grad=True)
    fn = lambda x: (W @ x.reshape(-1, 1)).reshape(-1)  # noqa: E731
    F = estimate_diag_fisher(fn, {"W": W}, [(np.zeros(4), 1)])
    assert np.array_equal(F["W"], np.zeros((3, 4)))
    with pytest.raises(ValueError):
        estimate_diag_fisher(fn, {"W": W}, [])
    Fs = estimate_diag_fisher(fn, {"W": W}, [(np.ones(4), 0)], labels="sampled",
                              rng=np.random.default_rng(0))
    assert Fs["W"].shape == (3, 4)


def test_reparameterize_examples(rng):
    b = dyadic_bank(rng)
    curv = init_curvature_bank({n: t.shape for n, t in b.base.params().items()}, 3, 1)
    out = reparameterize(b.base, domain_vectors(b), curv)
    for n, t in out.params().items():
        np.testing.assert_array_equal(t.data, b.domain.params()[n].data)
    g = bank(rng)
    out = reparameterize(g.base, domain_vectors(g), curv)
    for n, t in out.params().items():
        assert ulp_close(t.data, g.domain.params()[n].data)
    with pytest.raises(ValueError):
        reparameterize(b.base, domain_vectors(b), curv, alpha=0.5)


def test_reparameterize_matches_ca(rng):
    for _ in range(50):
        N = int(rng.integers(2, 5))
        b = bank(rng, d=int(rng.integers(2, 5)), dff=int(rng.integers(2, 6)), N=N)
        curv = init_curvature_bank({n: t.shape for n, t in b.base.params().items()}, N - 1, 2)
        for f in curv.values():
            randomize_factors(f, rng)
        s = rng.dirichlet(np.ones(N - 1))
        direct = merge_ca(b.base, domain_vectors(b), s, 1.0, curv)
        rb = ExpertBank(b.base, reparameterize(b.base, domain_vectors(b), curv))
        plain = merge_domain_specific(b.base, domain_vectors(rb), s, 1.0)
        for n, t in direct.params().items():
            assert np.abs(t.data - plain.params()[n].data).max() <= 1e-12
