import numpy as np
import pytest

from camex.identities import (OracleCapError, autodiff_curvature_grads, curvature_grad_identity,
                              gradient_matching_form, random_two_step_state, verify_two_step_decomposition)


def test_outer_product_identity(rng):
    worst = 0.0
    for _ in range(10):
        st = random_two_step_state(rng, shape=(4, 4), n=3, loss="nonlinear")
        alpha = float(rng.uniform(0.3, 1.7))
        gm, ge, _ = autodiff_curvature_grads(st.loss_fn, st.base, st.taus_t, st.scores_t, alpha, st.mats)
        for j in range(3):
            ref = curvature_grad_identity(ge, st.scores_t[j], st.taus_t[j], alpha)
            worst = max(worst, np.abs(gm[j] - ref).max() / np.abs(ref).max())
    assert worst <= 1e-8


def test_identity_zero_cases(rng):
    tau = rng.normal(size=(4, 4))
    assert np.array_equal(curvature_grad_identity(np.zeros((4, 4)), 0.3, tau, 1.0), np.zeros((16, 16)))
    assert np.array_equal(curvature_grad_identity(rng.normal(size=(4, 4)), 0.0, tau, 1.0), np.zeros((16, 16)))


def test_oracle_cap():
    with pytest.raises(OracleCapError):
        random_two_step_state(np.random.default_rng(0), shape=(9, 9))


@pytest.mark.parametrize("loss", ["quadratic", "nonlinear"])
def test_two_step_decomposition(rng, loss):
    for _ in range(10):
        st = random_two_step_state(rng, n=3, loss=loss)
        rep = verify_two_step_decomposition(st, lr=float(rng.uniform(0.01, 0.5)), alpha=float(rng.uniform(0.5, 1.5)))
        assert rep.max_abs_diff <= 1e-9


def test_zero_step_size_is_plain_ca_merge(rng):
    st = random_two_step_state(rng, n=3)
    rep = verify_two_step_decomposition(st, lr=0.0, alpha=1.0)
    np.testing.assert_array_equal(rep.simulated, rep.closed_form)


def test_orthogonal_domain_vectors_remove_correction(rng):
    st = random_two_step_state(rng, n=2)
    # make tau^{t+1} orthogonal to tau^t for every expert
    for j in range(2):
        a = st.taus_t[j].reshape(-1)
        b = st.taus_t1[j].reshape(-1)
        st.taus_t1[j] = (b - a * (a @ b) / (a @ a)).reshape(st.taus_t1[j].shape)
    rep = verify_two_step_decomposition(st, lr=0.3, alpha=1.0)
    assert np.abs(rep.agreement).max() <= 1e-12
    zero_lr = verify_two_step_decomposition(st, lr=0.0, alpha=1.0)
    assert np.abs(rep.simulated - zero_lr.simulated).max() <= 1e-12


def test_only_plain_gradient_descent(rng):
    with pytest.raises(NotImplementedError):
        verify_two_step_decomposition(random_two_step_state(rng), lr=0.1, alpha=1.0, optimizer="adamw")


def test_gradient_matching_rewrite_differs_in_general(rng):
    st = random_two_step_state(rng, n=2)
    rep = verify_two_step_decomposition(st, lr=0.2, alpha=1.0)
    alt = gradient_matching_form(st, lr=0.2, alpha=1.0)
    assert np.abs(alt - rep.closed_form).max() > 1e-6


def test_gradient_matching_rewrite_agrees_when_directions_align(rng):
    # with tau^{t+1} and g parallel the two orderings coincide
    st = random_two_step_state(rng, n=1)
    _, g, _ = autodiff_curvature_grads(st.loss_fn, st.base, st.taus_t, st.scores_t, 1.0, st.mats)
    st.taus_t1[0] = 2.5 * g
    rep = verify_two_step_decomposition(st, lr=0.2, alpha=1.0)
    np.testing.assert_allclose(gradient_matching_form(st, lr=0.2, alpha=1.0), rep.closed_form, atol=1e-12)
