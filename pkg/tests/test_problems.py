import numpy as np
import pytest

from catalyst_dsgd.problems import (NO_NOISE, NoiseModel, QuadraticObjective, Problem, grad,
                                    load_problem, make_logistic_problem, make_quadratic_problem,
                                    noise_stats_at_optimum, save_problem, shift_problem,
                                    stoch_grad, with_noise)

GAUSS = NoiseModel("gaussian", 0.1)


def families():
    """One generator per instance family used across the package."""
    return {
        "quad_clean": make_quadratic_problem(4, 6, 50, seed=1),
        "quad_het_gauss": make_quadratic_problem(4, 6, 50, heterogeneity=1.0, noise=GAUSS, seed=2),
        "quad_minibatch": make_quadratic_problem(3, 5, 20, heterogeneity=0.5,
                                                 noise=NoiseModel("minibatch", 0.3, 4), seed=3),
        "logistic_clean": make_logistic_problem(3, 4, samples=20, l2=0.1, seed=4),
        "logistic_minibatch": make_logistic_problem(3, 4, samples=20, l2=0.1, heterogeneity=1.0,
                                                    noise=NoiseModel("minibatch", batch_size=2),
                                                    seed=5),
        "logistic_gauss": make_logistic_problem(3, 4, samples=20, l2=0.05, noise=GAUSS, seed=6),
    }


def test_single_quadratic():
    p = make_quadratic_problem(1, 1, 1.0, seed=0)
    b = p.locals[0].linear / p.locals[0].hessian[0, 0]
    assert p.L == p.mu == 1.0
    np.testing.assert_allclose(p.x_star, b, atol=1e-15)
    assert p.zeta_bar_sq == 0 and p.sigma_bar_sq == 0
    assert p.gap(p.x_star + 2.0) == pytest.approx(0.5 * 4.0)


def test_homogeneous_has_zero_heterogeneity():
    p = make_quadratic_problem(4, 3, 10, heterogeneity=0.0, seed=0)
    assert p.zeta_bar_sq == 0.0
    direct = np.mean([np.sum(grad(p, i, p.x_star) ** 2) for i in range(p.n)])
    assert direct < 1e-20


def test_heterogeneous_zeta_matches_direct():
    p = make_quadratic_problem(4, 3, 10, heterogeneity=1.0, seed=1)
    H = sum(f.hessian for f in p.locals)
    Hb = sum(f.linear for f in p.locals)
    x_star = np.linalg.solve(H, Hb)
    np.testing.assert_allclose(p.x_star, x_star, atol=1e-12)
    centers = [np.linalg.solve(f.hessian, f.linear) for f in p.locals]
    direct = np.mean([np.sum((f.hessian @ (x_star - b)) ** 2) for f, b in zip(p.locals, centers)])
    assert p.zeta_bar_sq > 0
    assert abs(p.zeta_bar_sq - direct) < 1e-8


def test_condition_number_and_spectra():
    p = make_quadratic_problem(5, 8, 100, mu=0.5, seed=3)
    assert p.L == 50.0 and p.mu == 0.5
    for f in p.locals:
        ev = np.linalg.eigvalsh(f.hessian)
        assert ev[0] >= 0.5 * (1 - 1e-12) and ev[-1] <= 50 * (1 + 1e-12)
    ev = np.linalg.eigvalsh(p.stacked[2])
    assert ev[-1] / ev[0] == pytest.approx(100, rel=1e-9)


def test_make_quadratic_errors():
    with pytest.raises(ValueError):
        make_quadratic_problem(2, 2, 0.5)
    with pytest.raises(ValueError):
        make_quadratic_problem(2, 2, 10, heterogeneity=-1)


def test_problem_invariants():
    for name, p in families().items():
        assert p.mu > 0 and p.L >= p.mu, name
        assert np.linalg.norm(p.full_grad(p.x_star)) <= 1e-8, name
        direct = np.mean([np.sum(grad(p, i, p.x_star) ** 2) for i in range(p.n)])
        assert abs(p.zeta_bar_sq - direct) <= 1e-8, name
        assert abs(p.value(p.x_star) - p.f_star) <= 1e-12 * max(1, abs(p.f_star)), name


def test_problem_rejects_bad_constants():
    f = QuadraticObjective(np.eye(2), np.zeros(2))
    with pytest.raises(ValueError):
        Problem((f,), 1.0, 0.0, np.zeros(2), 0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        Problem((f,), 1.0, 2.0, np.zeros(2), 0.0, 0.0, 0.0)


def test_grad_examples():
    f = QuadraticObjective.from_center(2 * np.eye(2), np.zeros(2))
    p = Problem((f,), 2.0, 2.0, np.zeros(2), 0.0, 0.0, 0.0)
    np.testing.assert_allclose(grad(p, 0, np.array([1.0, 1.0])), [2.0, 2.0])
    q = make_quadratic_problem(3, 4, 10, heterogeneity=1.0, seed=0)
    for f in q.locals:
        b = np.linalg.solve(f.hessian, f.linear)
        np.testing.assert_allclose(f.grad(b), 0.0, atol=1e-12)


def test_logistic_gradient_finite_differences():
    p = make_logistic_problem(2, 5, samples=15, heterogeneity=0.5, seed=9)
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(5):
        x = rng.standard_normal(5)
        for f in p.locals:
            fd = np.array([(f.value(x + h * e) - f.value(x - h * e)) / (2 * h) for e in np.eye(5)])
            np.testing.assert_allclose(f.grad(x), fd, rtol=1e-6, atol=1e-9)


def test_logistic_requires_l2():
    with pytest.raises(ValueError):
        make_logistic_problem(2, 3, l2=0.0)


def test_stoch_grad_noiseless_is_exact():
    p = make_quadratic_problem(3, 4, 10, heterogeneity=1.0, seed=0)
    x = np.ones(4)
    rng = np.random.default_rng(0)
    for i in range(3):
        np.testing.assert_array_equal(stoch_grad(p, i, x, rng), grad(p, i, x))


def test_stoch_grad_variance():
    p = make_quadratic_problem(2, 10, 5, noise=GAUSS, seed=0)
    rng = np.random.default_rng(1)
    x = np.zeros(10)
    g = grad(p, 0, x)
    dev = np.array([stoch_grad(p, 0, x, rng) - g for _ in range(100_000)])
    assert np.mean(np.sum(dev**2, axis=1)) == pytest.approx(0.1, rel=0.05)


def test_stoch_grad_reproducible():
    p = make_quadratic_problem(2, 3, 5, noise=GAUSS, seed=0)
    a = stoch_grad(p, 1, np.ones(3), np.random.default_rng([7, 3, 1]))
    b = stoch_grad(p, 1, np.ones(3), np.random.default_rng([7, 3, 1]))
    np.testing.assert_array_equal(a, b)


def test_batched_noise_matches_single_draws():
    for noise in (GAUSS, NoiseModel("minibatch", 0.2, 3)):
        f = make_quadratic_problem(1, 4, 5, noise=noise, seed=1).locals[0]
        batch = f.sample_noise(np.random.default_rng(5), 6)
        rng = np.random.default_rng(5)
        single = [f.grad_xi(np.zeros(4), f.draw_xi(rng)) - f.grad(np.zeros(4)) for _ in range(6)]
        np.testing.assert_allclose(batch, single, atol=1e-15)


def test_noise_stats():
    assert noise_stats_at_optimum(make_quadratic_problem(3, 3, 5, seed=0), 10).sigma_bar_sq_hat == 0
    assert noise_stats_at_optimum(make_quadratic_problem(3, 3, 5, seed=0), 10).zeta_bar_sq == 0
    p = make_quadratic_problem(2, 5, 5, noise=GAUSS, seed=0)
    st = noise_stats_at_optimum(p, draws=20_000, seed=1)
    assert st.sigma_bar_sq == pytest.approx(0.05)
    assert st.sigma_bar_sq_hat == pytest.approx(0.05, rel=0.05)
    mb = families()["logistic_minibatch"]
    st = noise_stats_at_optimum(mb, draws=20_000, seed=2)
    assert st.sigma_bar_sq_hat == pytest.approx(st.sigma_bar_sq, rel=0.05)
    with pytest.raises(ValueError):
        noise_stats_at_optimum(p, draws=0)


def test_shift_problem_examples():
    p = make_quadratic_problem(3, 4, 10, seed=0)
    assert shift_problem(p, np.zeros((3, 4)), 0.0) is p
    f = QuadraticObjective.from_center(np.eye(2), np.zeros(2))
    unit = Problem((f, f), 1.0, 1.0, np.zeros(2), 0.0, 0.0, 0.0)
    sp = shift_problem(unit, np.array([[2.0, 0.0], [2.0, 0.0]]), 1.0)
    np.testing.assert_allclose(sp.x_star, [1.0, 0.0], atol=1e-15)
    q = make_quadratic_problem(2, 3, 10, seed=0)
    sq = shift_problem(q, np.ones((2, 3)), 9.0)
    assert (sq.L, sq.mu) == (19.0, 10.0)
    with pytest.raises(ValueError):
        shift_problem(q, np.ones((2, 3)), -1.0)
    with pytest.raises(ValueError):
        shift_problem(q, np.ones((3, 3)), 1.0)


def test_shift_problem_keeps_assumptions():
    rng = np.random.default_rng(0)
    for name, p in families().items():
        Y = rng.standard_normal((p.n, p.d))
        sp = shift_problem(p, Y, 2.0)
        ybar = Y.mean(axis=0)
        g = p.full_grad(sp.x_star) + 2.0 * (sp.x_star - ybar)
        assert np.linalg.norm(g) <= 1e-10, name
        assert sp.sigma_bar_sq == pytest.approx(
            np.mean([f.noise_variance(sp.x_star) for f in p.locals]), rel=1e-12), name
        _check_pairs(sp, 500, rng)


def _check_pairs(p, pairs, rng):
    """Smoothness with a shared sample and strong convexity on random pairs."""
    scale = 3.0
    for i, f in enumerate(p.locals):
        streams = np.random.default_rng(rng.integers(2**32))
        x1 = p.x_star + scale * rng.standard_normal((pairs, p.d))
        x2 = p.x_star + scale * rng.standard_normal((pairs, p.d))
        for a, b in zip(x1, x2):
            xi = f.draw_xi(streams)
            lhs = np.linalg.norm(f.grad_xi(a, xi) - f.grad_xi(b, xi))
            assert lhs <= p.L * np.linalg.norm(a - b) * (1 + 1e-9) + 1e-12
            gap = f.value(a) - f.value(b) + 0.5 * p.mu * np.sum((a - b) ** 2)
            assert gap <= f.grad(a) @ (a - b) + 1e-9 * (1 + abs(f.value(a)))


def test_save_load_roundtrip(tmp_path):
    p = make_quadratic_problem(3, 4, 10, heterogeneity=0.5,
                               noise=NoiseModel("minibatch", 0.2, 2), seed=0)
    save_problem(p, tmp_path / "p.npz")
    q = load_problem(tmp_path / "p.npz")
    np.testing.assert_array_equal(q.x_star, p.x_star)
    assert (q.L, q.mu, q.zeta_bar_sq, q.sigma_bar_sq) == (p.L, p.mu, p.zeta_bar_sq, p.sigma_bar_sq)
    x = np.arange(4.0)
    assert q.value(x) == p.value(x)
    with pytest.raises(ValueError):
        save_problem(make_logistic_problem(2, 2, seed=0), tmp_path / "l.npz")


def test_with_noise():
    p = make_quadratic_problem(3, 5, 10, seed=0)
    q = with_noise(p, GAUSS)
    assert q.sigma_bar_sq == pytest.approx(0.05)
    assert q.locals[0].noise == GAUSS and p.locals[0].noise == NO_NOISE
