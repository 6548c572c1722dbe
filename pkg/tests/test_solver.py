import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq
from scipy.stats import norm

from mlglm_replica.channels import Activation, NetworkSpec, Prior
from mlglm_replica.replica_solver import (
    D_TILDE_MAX,
    D_TILDE_MIN,
    ReplicaState,
    SolverOptions,
    d_first_layer,
    d_middle_layer,
    d_tilde_update,
    forward_power_sweep,
    q_last_layer,
    q_middle_layer,
    solve,
    solve_slm,
)
from mlglm_replica.scalar_estimators import SisoChannel, qpsk_mse_closed_form, scalar_mmse


def state(t_x, d, d_tilde=None):
    L = len(t_x)
    dt = np.ones(L) if d_tilde is None else np.asarray(d_tilde, float)
    return ReplicaState(np.asarray(t_x, float), np.asarray(d, float), np.zeros(L), dt)


def gaussian_posterior_powers(m, B, noise, A):
    """Powers of E[z|obs,b] and E[x|obs,b] for z = b + u, x = z + n, obs = x + w.

    Computed from the explicit covariance of (z, x, obs) given b, independent
    of the solver's scalar formulas.
    """
    cov = np.array([[B, B, B], [B, B + noise, B + noise], [B, B + noise, B + noise + A]])
    gain = cov[:2, 2] / cov[2, 2]
    # estimate = b + gain * (obs - b); power = m + gain^2 Var(obs - b)
    return m + gain[0] ** 2 * cov[2, 2], m + gain[1] ** 2 * cov[2, 2]


def dense_sign_middle(m, B, A, pre=0.0):
    """q and d for a sign layer seen through noise A, by brute-force grids."""
    xi, wx = np.polynomial.hermite_e.hermegauss(120)
    wx = wx / wx.sum()
    zeta = np.linspace(-10, 10, 2001)
    u = np.linspace(-10, 10, 4001)
    du, dz = u[1] - u[0], zeta[1] - zeta[0]
    q = d = 0.0
    for x, w in zip(xi, wx):
        pu = norm.pdf(u, math.sqrt(m) * x, math.sqrt(B)) * du
        p_plus = norm.cdf(u / math.sqrt(pre)) if pre > 0 else (u > 0).astype(float)
        parts = {1: p_plus * pu, -1: (1 - p_plus) * pu}
        lik = {s: norm.pdf(zeta, s, math.sqrt(A)) for s in (-1, 1)}
        Z = sum(lik[s] * parts[s].sum() for s in (-1, 1))
        Nu = sum(lik[s] * (parts[s] @ u) for s in (-1, 1))
        Ns = sum(s * lik[s] * parts[s].sum() for s in (-1, 1))
        ok = Z > 1e-300
        q += w * np.sum(Nu[ok] ** 2 / Z[ok]) * dz
        d += w * np.sum(Ns[ok] ** 2 / Z[ok]) * dz
    return q, d


# --- forward sweep --------------------------------------------------------------


def test_power_single_layer():
    assert forward_power_sweep(NetworkSpec(Prior.gaussian(), [(2.0, Activation.awgn(0.1))])) == [1.0]


def test_power_identity_layer():
    net = NetworkSpec(Prior.gaussian(), [(2.0, Activation.identity()), (1.0, Activation.awgn(0.1))])
    assert forward_power_sweep(net)[1] == pytest.approx(0.5)


@pytest.mark.parametrize("alpha", [0.3, 1.0, 4.0])
def test_power_sign_layer(alpha):
    net = NetworkSpec(Prior.gaussian(), [(alpha, Activation.sign()), (1.0, Activation.awgn(0.1))])
    assert forward_power_sweep(net)[1] == pytest.approx(1.0, abs=1e-15)


def test_power_probit_quantizer_against_integral():
    act = Activation.discrete_map([0.0, 1.0, 3.0], [-0.2, 0.8], variance=0.4)
    net = NetworkSpec(Prior.gaussian(0, 2.0), [(0.5, act), (1.0, Activation.awgn(0.1))])
    # z ~ N(0, 4), pre-noise 0.4: bins of N(0, 4.4)
    s = math.sqrt(4.4)
    p = np.diff(norm.cdf(np.array([-np.inf, -0.2, 0.8, np.inf]) / s))
    assert forward_power_sweep(net)[1] == pytest.approx(p @ np.array([0.0, 1.0, 9.0]), rel=1e-13)


# --- last layer ------------------------------------------------------------------


@pytest.mark.parametrize("alpha,noise", [(1.0, 0.1), (2.0, 0.5), (0.5, 1e-3)])
def test_q_last_gaussian_closed_form(alpha, noise):
    net = NetworkSpec(Prior.gaussian(), [(alpha, Activation.awgn(noise))])
    rho = 1.0 / alpha
    assert q_last_layer(net, state([1.0], [0.0])) == pytest.approx(rho**2 / (rho + noise), rel=1e-14)


def test_q_last_noiseless_sign_two_over_pi():
    net = NetworkSpec(Prior.binary(), [(1.0, Activation.sign())])
    assert q_last_layer(net, state([1.0], [0.0])) == pytest.approx(2 / math.pi, abs=1e-12)


def test_q_last_probit_against_dense_oracle():
    # oracle: sum over y of (E[v 1{y}])^2 / P(y) with v ~ N(b, B), b ~ N(0, m)
    net = NetworkSpec(Prior.binary(), [(2.0, Activation.sign(0.3))])
    m, B = 0.3 / 2, 0.7 / 2
    xi, wx = np.polynomial.hermite_e.hermegauss(150)
    wx = wx / wx.sum()
    v = np.linspace(-8, 8, 16001)
    ref = 0.0
    for x, w in zip(xi, wx):
        pv = norm.pdf(v, math.sqrt(m) * x, math.sqrt(B)) * (v[1] - v[0])
        pp = norm.cdf(v / math.sqrt(0.3))
        for py in (pp, 1 - pp):
            ref += w * (pv * py @ v) ** 2 / (pv @ py)
    assert q_last_layer(net, state([1.0], [0.3])) == pytest.approx(ref, abs=1e-7)


def test_q_last_near_perfect_knowledge_is_finite():
    net = NetworkSpec(Prior.binary(), [(1.5, Activation.awgn(0.0))])
    val = q_last_layer(net, state([1.0], [0.999999]))
    assert math.isfinite(val)
    assert val == pytest.approx(1.0 / 1.5, rel=1e-5)


def test_q_last_rejects_degenerate_d():
    net = NetworkSpec(Prior.binary(), [(1.0, Activation.sign())])
    with pytest.raises(ValueError):
        q_last_layer(net, state([1.0], [1.0]))


# --- middle layers ----------------------------------------------------------------


@pytest.mark.parametrize("noise", [0.0, 0.05, 0.7])
@pytest.mark.parametrize("dt_next", [1e-3, 0.8, 50.0])
def test_gaussian_middle_layer_matches_covariance_oracle(noise, dt_next):
    act = Activation.identity() if noise == 0 else Activation.awgn(noise)
    net = NetworkSpec(Prior.gaussian(), [(1.5, act), (2.0, Activation.awgn(0.1))])
    t_next = 1.0 / 1.5 + noise
    st_ = state([1.0, t_next], [0.4, 0.2], [1.0, dt_next])
    m, B = 0.4 / 1.5, 0.6 / 1.5
    q_ref, d_ref = gaussian_posterior_powers(m, B, noise, 1.0 / (2 * dt_next))
    assert q_middle_layer(net, st_, 0) == pytest.approx(q_ref, abs=1e-7)
    assert d_middle_layer(net, st_, 1) == pytest.approx(d_ref, abs=1e-7)


@pytest.mark.parametrize("m,B,A,pre", [(0.3, 0.5, 0.2, 0.0), (0.1, 0.65, 0.6, 0.0),
                                       (0.4, 0.4, 0.1, 0.25)])
def test_sign_middle_layer_matches_dense_grid(m, B, A, pre):
    alpha = 1.0 / (m + B)  # so that t_x = 1 gives m + B = 1/alpha with d = alpha m
    net = NetworkSpec(Prior.binary(), [(alpha, Activation.sign(pre)), (1.0, Activation.awgn(0.1))])
    st_ = state([1.0, 1.0], [alpha * m, 0.5], [1.0, 1.0 / (2 * A)])
    q_ref, d_ref = dense_sign_middle(m, B, A, pre)
    assert q_middle_layer(net, st_, 0) == pytest.approx(q_ref, abs=2e-6)
    assert d_middle_layer(net, st_, 1) == pytest.approx(d_ref, abs=2e-6)


def test_middle_layer_without_downstream_information():
    net = NetworkSpec(Prior.binary(), [(1.0, Activation.sign()), (1.0, Activation.awgn(0.1))])
    st_ = state([1.0, 1.0], [0.0, 0.5], [1.0, 1e-9])
    assert d_middle_layer(net, st_, 1) == pytest.approx(0.0, abs=1e-8)


def test_three_level_quantizer_reduces_to_sign_when_middle_bin_is_empty():
    # two adjacent thresholds 1e-9 apart leave a bin of negligible mass
    net3 = NetworkSpec(Prior.binary(), [(1.0, Activation.discrete_map([-1, 0, 1], [0.0, 1e-12], 0.2)),
                                        (1.0, Activation.awgn(0.1))])
    net2 = NetworkSpec(Prior.binary(), [(1.0, Activation.sign(0.2)), (1.0, Activation.awgn(0.1))])
    st_ = state([1.0, 1.0], [0.3, 0.5], [1.0, 2.0])
    assert q_middle_layer(net3, st_, 0) == pytest.approx(q_middle_layer(net2, st_, 0), abs=1e-9)
    assert d_middle_layer(net3, st_, 1) == pytest.approx(d_middle_layer(net2, st_, 1), abs=1e-9)


def test_middle_layer_argument_checks():
    net = NetworkSpec(Prior.binary(), [(1.0, Activation.sign()), (1.0, Activation.awgn(0.1))])
    with pytest.raises(ValueError):
        q_middle_layer(net, state([1.0, 1.0], [0.1, 0.1], [1.0, 0.0]), 0)
    with pytest.raises(ValueError):
        d_middle_layer(net, state([1.0, 1.0], [0.1, 0.1]), 0)
    with pytest.raises(ValueError):
        q_middle_layer(net, state([1.0, 1.0], [0.1, 0.1]), 1)


# --- d_tilde and first layer ---------------------------------------------------------


def test_d_tilde_zero_numerator_is_clamped():
    assert d_tilde_update(1.0, 0.4, 0.4, 1.0) == D_TILDE_MIN


def test_d_tilde_arithmetic():
    assert d_tilde_update(1.0, 0.5, 0.5, 2.0) == pytest.approx(2.0)


def test_d_tilde_saturates():
    assert d_tilde_update(1.0, 1.0 - 1e-13, 0.5, 2.0) == D_TILDE_MAX


@given(st.floats(0.1, 10), st.floats(0, 0.99), st.floats(0, 5), st.floats(0.1, 5))
@settings(max_examples=100, deadline=None)
def test_d_tilde_within_clamp(t, frac, q, alpha):
    val = d_tilde_update(t, frac * t, q, alpha)
    assert D_TILDE_MIN <= val <= D_TILDE_MAX


def test_d_first_gaussian_wiener():
    assert d_first_layer(Prior.gaussian(), 0.5) == pytest.approx(0.5, abs=1e-14)


@pytest.mark.parametrize("dt", [0.1, 0.5, 1.0, 2.0, 10.0])
def test_d_first_binary_matches_tanh_formula(dt):
    assert abs(d_first_layer(Prior.binary(), dt) - (1 - qpsk_mse_closed_form(dt))) < 1e-9


def test_d_first_without_information():
    assert d_first_layer(Prior.binary(), 1e-12) == pytest.approx(0.0, abs=1e-10)


# --- solve ---------------------------------------------------------------------------


def gaussian_eta_root(noise, alpha):
    # eta = noise + (1/alpha) eta/(1+eta)  <=>  alpha eta^2 + (alpha - alpha noise - 1) eta - alpha noise = 0
    a, b, c = alpha, alpha - alpha * noise - 1, -alpha * noise
    return (-b + math.sqrt(b * b - 4 * a * c)) / (2 * a)


def test_solve_matches_quadratic_root():
    net = NetworkSpec(Prior.gaussian(), [(2.0, Activation.awgn(0.1))])
    res = solve(net, SolverOptions(tol=1e-12))
    assert res.converged
    assert abs(res.eta - gaussian_eta_root(0.1, 2.0)) < 1e-8


@pytest.mark.parametrize("noise,alpha", [(0.1, 2.0), (0.5, 0.5), (0.01, 1.0)])
def test_solve_agrees_with_slm_iteration(noise, alpha):
    for prior in (Prior.gaussian(), Prior.binary()):
        a = solve(NetworkSpec(prior, [(alpha, Activation.awgn(noise))]), SolverOptions(tol=1e-12))
        b = solve_slm(prior, noise, alpha, SolverOptions(tol=1e-12))
        assert a.converged and b.converged
        assert abs(a.eta - b.eta) < 1e-8


@pytest.mark.parametrize("last", [Activation.discrete_map([1.0]),
                                  Activation.discrete_map([-2.0])])
def test_zero_capacity_network(last):
    net = NetworkSpec(Prior.binary(), [(2.0, Activation.sign(0.1)), (1.0, last)])
    res = solve(net)
    assert res.converged
    assert np.allclose(res.state.d, 0.0, atol=1e-9)
    assert res.avg_mse == pytest.approx(1.0, abs=1e-9)


def test_fixed_point_residual_on_reevaluation():
    net = NetworkSpec(Prior.binary(), [(1.5, Activation.sign(0.2)), (2.0, Activation.awgn(0.1))])
    opts = SolverOptions(tol=1e-11)
    res = solve(net, opts)
    st_ = res.state
    assert res.converged and res.residual <= opts.tol
    q1 = q_last_layer(net, st_)
    q0 = q_middle_layer(net, st_, 0)
    dt0 = d_tilde_update(st_.t_x[0], st_.d[0], q0, 1.5)
    d1 = d_middle_layer(net, st_, 1)
    d0 = d_first_layer(net.prior, dt0)
    for new, old in [(q1, st_.q[1]), (q0, st_.q[0]), (dt0, st_.d_tilde[0]), (d1, st_.d[1]),
                     (d0, st_.d[0])]:
        assert abs(new - old) <= 1e-9 * abs(old)


def test_avg_mse_identity_and_bounds():
    net = NetworkSpec(Prior.discrete([-1.0, 0.0, 1.0], [0.25, 0.5, 0.25]),
                      [(1.0, Activation.awgn(0.2)), (0.7, Activation.sign(0.1))])
    res = solve(net)
    mmse = scalar_mmse(SisoChannel(net.prior, res.eta))
    assert res.avg_mse == res.state.t_x[0] - res.state.d[0]
    assert abs(res.avg_mse - mmse) < 1e-7
    assert 0 <= res.avg_mse <= net.prior.second_moment()


def test_two_layer_names():
    net = NetworkSpec(Prior.binary(), [(1.0, Activation.sign(0.1)), (2.0, Activation.awgn(0.1))])
    names = solve(net).state.as_two_layer()
    assert set(names) == {"c", "d", "e", "f", "q", "h", "d_tilde", "f_tilde"}
    assert names["c"] == 1.0


def test_non_convergence_is_reported():
    net = NetworkSpec(Prior.binary(), [(2.0, Activation.awgn(0.2))])
    res = solve(net, SolverOptions(max_iter=2))
    assert not res.converged
    assert res.iterations == 2 and res.residual > 1e-9


def test_binary_perceptron_threshold():
    # the uninformed fixed point of a noiseless sign layer with +-1 input loses
    # stability near alpha = 1.49 (known teacher-student perceptron threshold)
    below = solve(NetworkSpec(Prior.binary(), [(1.45, Activation.sign())]), SolverOptions(max_iter=20000))
    above = solve(NetworkSpec(Prior.binary(), [(1.55, Activation.sign())]), SolverOptions(max_iter=20000))
    assert below.converged and below.avg_mse > 0.1
    assert above.converged and above.avg_mse < 1e-6


def test_multi_start_reports_coexisting_solutions():
    net = NetworkSpec(Prior.binary(), [(1.4, Activation.sign())])
    res = solve(net, SolverOptions(init_style="multi_start", starts=((1e-3,), (1 - 1e-6,)),
                                   max_iter=3000))
    mses = sorted(m for _, m in res.all_solutions)
    assert len(mses) == 2
    assert mses[0] < 1e-6 < 0.1 < mses[1]


def test_warm_start_reaches_same_point():
    net = NetworkSpec(Prior.binary(), [(2.0, Activation.sign(0.3))])
    cold = solve(net)
    warm = solve(net, SolverOptions(init_style="warm", init=(0.9,)))
    assert abs(cold.eta - warm.eta) < 1e-7


@pytest.mark.parametrize("kwargs", [dict(damping=1.0), dict(tol=0.0), dict(max_iter=0),
                                    dict(grid_order=1), dict(init_style="hot"),
                                    dict(init_style="warm")])
def test_solver_options_validation(kwargs):
    with pytest.raises(ValueError):
        SolverOptions(**kwargs)


# --- scalar special case ---------------------------------------------------------------


def test_slm_large_alpha():
    res = solve_slm(Prior.binary(), 0.3, 1e6)
    assert res.eta == pytest.approx(0.3, rel=1e-5)


def test_slm_noiseless_binary_alpha_two():
    # eta = eps(eta)/2 has no positive root: eps(eta) < eta for +-1 inputs
    g = [e - scalar_mmse(SisoChannel(Prior.binary(), e)) / 2 for e in np.geomspace(1e-6, 10, 40)]
    assert min(g) > 0
    res = solve_slm(Prior.binary(), 0.0, 2.0)
    assert res.converged and res.eta < 1e-6


def test_slm_noiseless_binary_bisection_oracle():
    # at alpha = 1/4 the cold start settles on the largest root
    f = lambda e: e - 4 * scalar_mmse(SisoChannel(Prior.binary(), e))
    root = brentq(f, 2.0, 10.0, xtol=1e-14)
    res = solve_slm(Prior.binary(), 0.0, 0.25, SolverOptions(tol=1e-13))
    assert res.converged
    assert res.eta == pytest.approx(root, abs=1e-9)


def test_slm_rejects_bad_arguments():
    with pytest.raises(ValueError):
        solve_slm(Prior.binary(), -0.1, 1.0)
    with pytest.raises(ValueError):
        solve_slm(Prior.binary(), 0.1, 0.0)
