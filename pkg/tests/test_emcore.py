import warnings

import numpy as np
import pytest
from scipy import optimize

from helpers import VARIANTS, dense_posterior, dense_q, dense_q_gradient, records_from_rows, small_instance
from mmvam.design import build_design
from mmvam.emcore import (
    EMConfig,
    ParamLayout,
    ParamState,
    e_step,
    em_iteration,
    initial_params,
    loglik,
    m_step_alpha,
    m_step_beta,
    m_step_gamma,
    m_step_gamma_stu,
    m_step_r,
    m_step_sigma_years,
    q_gradient,
    run_em,
    score_vector,
)
from mmvam.emcore.mstep import SigmaProblem, alpha_gradient, expected_residual_pairs, pattern_moments, sigma_gradient
from mmvam.errors import ConfigError, ConvergenceWarning, EStepError, IdentifiabilityError
from mmvam.ingest import build_dataset
from mmvam.simgen import SimSpec, default_truth, dense_eblup, dense_oracle_loglik, simulate_dataset


def simulated(variant, seed, n=300, T=3, **kw):
    data, truth = simulate_dataset(SimSpec(n=n, T=T, m=10, variant=variant, seed=seed, **kw))
    return data, build_design(data, variant), truth


def with_block(params, **changes):
    out = params.copy()
    for k, v in changes.items():
        setattr(out, k, v)
    return out


def block_mask(design, *kinds):
    return np.isin(ParamLayout(design).kinds(), kinds)


# ---------------------------------------------------------------------------
# log-likelihood and E-step
# ---------------------------------------------------------------------------


class TestLoglik:
    def test_single_observation(self):
        design = build_design(build_dataset(records_from_rows([("a", 1, "t", 2.5)]), T=1), "gp.r")
        p = ParamState(np.array([1.0]), [np.array([[0.3]])], sigma=np.array([[0.7]]))
        v = 0.7 + 0.3
        assert loglik(design, p) == pytest.approx(-0.5 * np.log(v) - 0.5 * 1.5**2 / v, abs=1e-14)

    def test_unlinked_rows_contribute_plain_gaussian_terms(self):
        rows = [("a", 1, None, 1.0), ("b", 1, None, -2.0), ("c", 1, "t", 0.5)]
        design = build_design(build_dataset(records_from_rows(rows), T=1), "gp.r")
        p = ParamState(np.array([0.0]), [np.array([[0.5]])], sigma=np.array([[1.0]]))
        expected = -0.5 * (1.0 + 4.0) - 0.5 * np.log(1.5) - 0.5 * 0.25 / 1.5
        assert loglik(design, p) == pytest.approx(expected, abs=1e-14)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_matches_dense_oracle(self, variant):
        for seed in range(3):
            data, design, params = small_instance(variant, seed)
            ref = dense_oracle_loglik(data, design, params)
            assert abs(loglik(design, params) - ref) <= 1e-9 * abs(ref)


class TestEStep:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_eta_matches_dense_form(self, variant):
        for seed in range(3):
            _, design, params = small_instance(variant, 100 + seed)
            m = e_step(design, params)
            assert np.abs(m.eta_tilde - dense_eblup(design, params)).max() <= 1e-9
            _, v = dense_posterior(design, params)
            assert np.allclose(m.v_dense(), v, atol=1e-10, rtol=0)
            assert np.allclose(m.v_diag(), np.diag(v), atol=1e-10, rtol=0)

    def test_perfect_fit_gives_zero_eta(self):
        rows = [(s, g, f"t{s}{g}", 3.0 + g) for s in "abc" for g in (1, 2)]
        design = build_design(build_dataset(records_from_rows(rows), T=2), "gp.r")
        p = ParamState(np.array([4.0, 5.0]), [np.eye(2) * 0.2, np.eye(1) * 0.2], sigma=np.eye(2))
        assert np.abs(e_step(design, p).eta_tilde).max() <= 1e-15

    def test_normal_equations_hold(self):
        _, design, params = small_instance("vp", 5)
        m = e_step(design, params)
        eta, _ = dense_posterior(design, params)
        assert np.allclose(m.eta_tilde, eta, atol=1e-10, rtol=0)
        assert np.linalg.eigvalsh(m.v_dense()).min() > 0

    def test_broken_params_raise(self):
        _, design, params = small_instance("gp.r", 2, T=2)
        bad = params.copy()
        bad.gammas[0] = -np.eye(len(bad.gammas[0]))
        with pytest.raises(Exception):
            e_step(design, bad)


# ---------------------------------------------------------------------------
# M-steps
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("variant", VARIANTS)
def test_beta_step(variant):
    _, design, params = small_instance(variant, 7)
    m = e_step(design, params)
    beta = m_step_beta(design, m)
    new = with_block(params, beta=beta)
    g = q_gradient(design, m, new)["beta"]
    assert np.abs(g).max() <= 1e-9 * max(1.0, np.abs(design.X.T @ design.data.y).max())
    dense = dense_q_gradient(design, new, dense_posterior(design, params))
    assert np.abs(dense[block_mask(design, "beta")]).max() <= 1e-6


def test_beta_is_year_means_without_random_effect_signal():
    rows = [("a", 1, None, 1.0), ("b", 1, None, 3.0), ("c", 1, "t", 2.0), ("c", 2, "u", 5.0), ("d", 2, None, 7.0)]
    design = build_design(build_dataset(records_from_rows(rows), T=2), "gp.r")
    p = ParamState(np.array([2.0, 6.0]), [np.eye(2), np.eye(1)], sigma=np.eye(2))
    m = e_step(design, p)
    # residuals of the linked student are -0 and -1, so eta~ shrinks them; compare the plain formula
    eta = m.eta_tilde
    u = design.S() @ eta
    expected = [np.mean((design.data.y - u)[design.data.obs_year == g]) for g in (1, 2)]
    assert np.allclose(m_step_beta(design, m), expected, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
def test_gamma_step(variant):
    _, design, params = small_instance(variant, 8)
    m = e_step(design, params)
    gammas = m_step_gamma(design, m)
    new = with_block(params, gammas=gammas)
    assert np.abs(q_gradient(design, m, new)["gamma"]).max() <= 1e-9
    eta, v = dense_posterior(design, params)
    omega = v + np.outer(eta, eta)
    for b in design.teacher_blocks:
        starts = b.offset + b.size * np.arange(b.multiplicity)
        blocks = [omega[j : j + b.size, j : j + b.size] for j in starts]
        assert np.allclose(gammas[b.grade - 1], np.mean(blocks, axis=0), atol=1e-10, rtol=0)


def test_gamma_stu_and_sigma_years():
    _, design, params = small_instance("gp.g", 9, T=3)
    m = e_step(design, params)
    gs = m_step_gamma_stu(design, m)
    beta = m_step_beta(design, m)
    s2 = m_step_sigma_years(design, m, beta)
    new = with_block(params, beta=beta, gamma_stu=gs, sigma2=s2)
    g = q_gradient(design, m, new)
    assert abs(g["gamma_stu"][0]) <= 1e-9 * max(1.0, 1 / gs)
    assert np.abs(g["sigma2"]).max() <= 1e-9 * max(1.0, 1 / s2.min())
    eta, v = dense_posterior(design, params)
    n = design.data.n
    assert gs == pytest.approx(np.mean(np.diag(v)[:n] + eta[:n] ** 2), abs=1e-12)
    mask = block_mask(design, "sigma2", "gamma_stu")
    assert np.abs(dense_q_gradient(design, new, (eta, v))[mask]).max() <= 1e-6


def test_gamma_stu_requires_gpg():
    _, design, params = small_instance("gp.r", 1)
    with pytest.raises(ValueError):
        m_step_gamma_stu(design, e_step(design, params))


class TestSigmaStep:
    @pytest.mark.parametrize("variant", ["gp.r", "rgp.r", "vp", "cp"])
    def test_stationary(self, variant):
        for seed in range(3):
            _, design, params = small_instance(variant, 20 + seed, n=25)
            m = e_step(design, params)
            sigma = m_step_r(design, m, params.beta, EMConfig(), outer_iter=0)
            g = sigma_gradient(design, m, params.beta, sigma)
            assert np.abs(g).max() <= EMConfig().nr_inner_tol
            new = with_block(params, sigma=sigma)
            dense = dense_q_gradient(design, new, dense_posterior(design, params))
            assert np.abs(dense[block_mask(design, "sigma")]).max() <= 1e-6

    def test_T1_closed_form(self):
        _, design, params = small_instance("gp.r", 4, T=1, n=20)
        m = e_step(design, params)
        info = {}
        sigma = m_step_r(design, m, params.beta, info=info)
        expected = expected_residual_pairs(design, m, params.beta).sum() / design.data.n
        assert sigma[0, 0] == pytest.approx(expected, rel=1e-14)
        assert info["inner_iterations"] <= 2

    def test_complete_data_blockwise_average(self):
        _, design, params = small_instance("gp.r", 6, T=3, n=20, missing_rate=0.0)
        assert design.patterns == (7,)
        m = e_step(design, params)
        sigma = m_step_r(design, m, params.beta)
        W = pattern_moments(design, expected_residual_pairs(design, m, params.beta))[0]
        assert np.allclose(sigma, W / design.data.n, atol=1e-10, rtol=0)

    def test_mixed_patterns_match_numerical_maximizer(self):
        rows = []
        rng = np.random.default_rng(0)
        for i in range(12):
            years = [(1, 2, 3), (1, 3), (2, 3)][i % 3]
            for g in (1, 2, 3):
                score = float(rng.normal(g, 1)) if g in years else None
                rows.append((f"s{i:02d}", g, f"t{g}{i % 2}", score))
        design = build_design(build_dataset(records_from_rows(rows), T=3), "gp.r")
        assert set(design.patterns) == {3, 5, 7}
        params = initial_params(design)
        m = e_step(design, params)
        sigma = m_step_r(design, m, params.beta)
        assert np.abs(sigma_gradient(design, m, params.beta, sigma)).max() <= 1e-10

        post = dense_posterior(design, params)
        ia, ib = np.tril_indices(3)

        def neg_q(theta):
            s = np.zeros((3, 3))
            s[ia, ib] = theta
            s = s + np.tril(s, -1).T
            if np.linalg.eigvalsh(s).min() <= 0:
                return 1e10
            return -dense_q(design, with_block(params, sigma=s), post)

        start = np.eye(3)[ia, ib]
        res = optimize.minimize(neg_q, start, method="Nelder-Mead", options={"xatol": 1e-11, "fatol": 1e-14, "maxiter": 40000, "maxfev": 40000})
        res = optimize.minimize(neg_q, res.x, method="BFGS", options={"gtol": 1e-10})
        assert np.abs(sigma[ia, ib] - res.x).max() <= 1e-6

    def test_damping_reported(self):
        _, design, params = small_instance("gp.r", 3, n=25, T=3)
        assert len(design.patterns) > 1
        m = e_step(design, params)
        info = {}
        m_step_r(design, m, params.beta, EMConfig(), outer_iter=0, info=info)
        assert info["damping"] > 0
        info = {}
        m_step_r(design, m, params.beta, EMConfig(), outer_iter=None, info=info)
        assert info["damping"] >= 0

    def test_problem_derivatives(self):
        _, design, params = small_instance("gp.r", 12, n=25, T=3)
        m = e_step(design, params)
        prob = SigmaProblem(design, pattern_moments(design, expected_residual_pairs(design, m, params.beta)))
        theta = prob.theta(params.sigma)
        A, ld = prob.inverses(params.sigma)
        g, B = prob.gradient(A)
        H = prob.hessian(A, B)
        h = 1e-6
        for j in range(len(theta)):
            e = np.zeros_like(theta)
            e[j] = h
            up = prob.inverses(prob.grid(theta + e, params.sigma))
            dn = prob.inverses(prob.grid(theta - e, params.sigma))
            assert (prob.value(*up) - prob.value(*dn)) / (2 * h) == pytest.approx(g[j], rel=1e-6, abs=1e-6)
            fd = (prob.gradient(up[0])[0] - prob.gradient(dn[0])[0]) / (2 * h)
            assert np.allclose(fd, H[:, j], rtol=1e-5, atol=1e-5)


class TestAlphaStep:
    def test_single_step_is_exact(self):
        for seed in range(5):
            _, design, params = small_instance("vp", 30 + seed, n=25)
            m = e_step(design, params)
            alpha = m_step_alpha(design, m, params.beta)
            new = with_block(params, alpha=alpha)
            assert np.abs(alpha_gradient(design, m, new)).max() <= 1e-10
            dense = dense_q_gradient(design, new, dense_posterior(design, params))
            assert np.abs(dense[block_mask(design, "alpha")]).max() <= 1e-6

    def test_T2_scalar_quadratic(self):
        _, design, params = small_instance("vp", 40, n=25, T=2)
        m = e_step(design, params)
        (a_hat,) = m_step_alpha(design, m, params.beta)
        post = dense_posterior(design, params)
        f = [dense_q(design, with_block(params, alpha=np.array([a])), post) for a in (-1.0, 0.0, 1.0)]
        # Q is quadratic in a scalar alpha, so the parabola through three points is exact
        vertex = 0.5 * (f[0] - f[2]) / (f[0] - 2 * f[1] + f[2])
        assert a_hat == pytest.approx(vertex, abs=1e-9)

    def test_cp_keeps_alpha_at_one(self):
        _, design, params = small_instance("cp", 3, T=3)
        assert np.array_equal(m_step_alpha(design, e_step(design, params), params.beta), np.ones(3))

    def test_unidentified(self):
        # nobody with a year-1 teacher is scored in year 2, so alpha_21 never enters the likelihood
        rows = [(f"a{i}", 1, f"t{i % 2}", float(i)) for i in range(4)] + [(f"b{i}", 2, f"u{i % 2}", float(i)) for i in range(4)]
        design = build_design(build_dataset(records_from_rows(rows), T=2), "vp")
        params = initial_params(design)
        with pytest.raises(IdentifiabilityError):
            m_step_alpha(design, e_step(design, params), params.beta)

    def test_gp_design_refused(self):
        _, design, params = small_instance("gp.r", 3)
        with pytest.raises(ValueError):
            m_step_alpha(design, e_step(design, params), params.beta)


# ---------------------------------------------------------------------------
# score
# ---------------------------------------------------------------------------


def test_score_beta_block_definition():
    _, design, params = small_instance("vp", 50)
    m = e_step(design, params)
    S = design.S(params.alpha).toarray()
    _, Rinv = dense_posterior(design, params)[1], None
    from mmvam.design import assemble_R_inverse

    Rinv = assemble_R_inverse(design, sigma=params.sigma)[1].toarray()
    expected = design.X.T @ Rinv @ (design.data.y - design.X @ params.beta - S @ m.eta_tilde)
    assert np.allclose(score_vector(design, params, m)[: len(params.beta)], expected, atol=1e-12, rtol=0)


def test_score_equals_dense_q_gradient_at_own_moments():
    for variant in VARIANTS:
        _, design, params = small_instance(variant, 60)
        dense = dense_q_gradient(design, params, dense_posterior(design, params))
        assert np.allclose(score_vector(design, params), dense, rtol=1e-6, atol=1e-6)


# ---------------------------------------------------------------------------
# EM loop
# ---------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        EMConfig(rel_tol=0)
    with pytest.raises(ConfigError):
        EMConfig(max_iter=0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_em_monotone_and_pd(variant):
    _, design, _ = simulated(variant, 1, n=150, missing_rate=0.2)
    mins = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = run_em(design, config=EMConfig(max_iter=60), callback=lambda k, p, m: mins.append(min(p.min_eigenvalues().values())))
    assert fit.trace.is_monotone(1e-8)
    assert min(mins) > 0
    assert len(fit.trace.loglik) == fit.trace.iterations + 1
    rows = list(fit.trace.rows())
    assert rows[0]["iteration"] == 0 and len(rows) == len(fit.trace.loglik)


def test_em_iteration_blocks_are_conditionally_stationary():
    _, design, params = small_instance("vp", 70, n=25)
    m = e_step(design, params)
    new = em_iteration(design, params, m, EMConfig())
    g = q_gradient(design, m, with_block(params, beta=new.beta))["beta"]
    assert np.abs(g).max() <= 1e-9 * max(1.0, np.abs(design.X.T @ design.data.y).max())
    assert np.abs(q_gradient(design, m, new)["gamma"]).max() <= 1e-9
    assert np.abs(sigma_gradient(design, m, new.beta, new.sigma, m.assembly.coef)).max() <= 1e-10
    assert np.abs(q_gradient(design, m, new)["alpha"]).max() <= 1e-10


def test_converged_fit_is_stationary():
    data, truth = simulate_dataset(SimSpec(n=400, T=2, m=10, variant="vp", seed=4, missing_rate=0.1))
    design = build_design(data, "vp")
    fit = run_em(design, truth.params, EMConfig(rel_tol=1e-15))
    # the loglik stalls at roundoff before the slow EM map settles; keep sweeping
    params, moments = fit.params, fit.moments
    for _ in range(1500):
        params = em_iteration(design, params, moments, EMConfig())
        moments = e_step(design, params)
    assert np.abs(score_vector(design, params, moments)).max() <= 1e-6


def test_cp_equals_frozen_vp():
    data, _ = simulate_dataset(SimSpec(n=120, T=3, m=8, variant="vp", seed=2, missing_rate=0.2))
    a = run_em(build_design(data, "cp"), config=EMConfig(max_iter=30))
    b = run_em(build_design(data, "vp", fixed_alpha=1.0), config=EMConfig(max_iter=30))
    assert np.array_equal(a.trace.loglik, b.trace.loglik) or np.allclose(a.trace.loglik, b.trace.loglik, rtol=1e-10, atol=0)
    assert np.allclose(a.moments.eta_tilde, b.moments.eta_tilde, atol=1e-10, rtol=0)


def test_gpr_equals_rgpr_at_T2():
    data, _ = simulate_dataset(SimSpec(n=120, T=2, m=8, variant="gp.r", seed=5, missing_rate=0.1))
    config = EMConfig(max_iter=80)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        a = run_em(build_design(data, "gp.r"), config=config)
        b = run_em(build_design(data, "rgp.r"), config=config)
    assert np.allclose(a.trace.loglik, b.trace.loglik, rtol=1e-8, atol=0)
    assert np.allclose(a.params.beta, b.params.beta, atol=1e-8)
    assert np.allclose(a.params.sigma, b.params.sigma, atol=1e-8)


def test_nonconvergence_warns():
    _, design, _ = simulated("gp.r", 0, n=100)
    with pytest.warns(ConvergenceWarning):
        fit = run_em(design, config=EMConfig(max_iter=2))
    assert not fit.converged and fit.trace.iterations == 2


def test_zero_teacher_variance_stays_monotone():
    truth = default_truth("gp.r", 3)
    truth.gammas = [g * 1e-12 + np.eye(len(g)) * 1e-12 for g in truth.gammas]
    data, _ = simulate_dataset(SimSpec(n=200, T=3, m=8, variant="gp.r", truth=truth, seed=1))
    design = build_design(data, "gp.r")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = run_em(design, config=EMConfig(max_iter=100))
    assert fit.trace.is_monotone(1e-8)
    assert all(min(np.linalg.eigvalsh(g)) > 0 for g in fit.params.gammas)
