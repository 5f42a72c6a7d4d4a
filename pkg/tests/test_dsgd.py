import json
import math

import numpy as np
import pytest

from catalyst_dsgd import dsgd
from catalyst_dsgd.dsgd import (NodeStates, dsgd_complexity_bound, dsgd_run, dsgd_step,
                                horizon_for_accuracy, lemma_bound, node_streams,
                                recompute_weighted_gap, stepsize_theorem1)
from catalyst_dsgd.network import (build_graph, iid_schedule, metropolis_weights,
                                   periodic_schedule, static_schedule)
from catalyst_dsgd.problems import (NoiseModel, Problem, ProblemConstants, QuadraticObjective,
                                    make_logistic_problem, make_quadratic_problem)


def two_node_problem():
    locals_ = tuple(QuadraticObjective.from_center(np.eye(1), np.array([b])) for b in (0.0, 2.0))
    return Problem(locals_, 1.0, 1.0, np.array([1.0]), 1.0, 1.0, 0.0)


def test_step_hand_trace():
    p = two_node_problem()
    W = np.full((2, 2), 0.5)
    out = dsgd_step(NodeStates(np.array([[0.0], [2.0]])), p, W, 0.5, node_streams(0, 2))
    np.testing.assert_allclose(out.X, [[1.0], [1.0]])
    assert out.t == 1


def test_step_identity_is_gradient_descent():
    p = make_quadratic_problem(3, 4, 10, heterogeneity=1.0, seed=0)
    X = np.random.default_rng(0).standard_normal((3, 4))
    out = dsgd_step(NodeStates(X), p, np.eye(3), 0.05, node_streams(0, 3))
    expected = np.stack([X[i] - 0.05 * p.locals[i].grad(X[i]) for i in range(3)])
    np.testing.assert_allclose(out.X, expected, atol=1e-14)


def test_step_zero_eta_is_gossip():
    p = make_quadratic_problem(4, 3, 10, noise=NoiseModel("gaussian", 1.0), seed=0)
    W = metropolis_weights(build_graph("ring", 4))
    X = np.random.default_rng(1).standard_normal((4, 3))
    out = dsgd_step(NodeStates(X), p, W, 0.0, node_streams(0, 4))
    np.testing.assert_allclose(out.X, W @ X, atol=1e-15)
    np.testing.assert_allclose(out.mean, X.mean(axis=0), atol=1e-10)


def test_step_dimension_errors():
    p = make_quadratic_problem(3, 4, 10, seed=0)
    with pytest.raises(ValueError):
        dsgd_step(NodeStates(np.zeros((3, 5))), p, np.eye(3), 0.1, node_streams(0, 3))
    with pytest.raises(ValueError):
        dsgd_step(NodeStates(np.zeros((3, 4))), p, np.eye(4), 0.1, node_streams(0, 3))
    with pytest.raises(ValueError):
        dsgd_step(NodeStates(np.zeros((3, 4))), p, np.eye(3), 0.1, node_streams(0, 2))


def test_stepsize_cap():
    pc = ProblemConstants(L=1.0, mu=1.0, n=1)
    plan = stepsize_theorem1(pc, 1, 1.0, 1.0, 10)
    assert plan.constants["d"] == pytest.approx(96 * math.sqrt(3))
    assert plan.regime == "capped"
    assert plan.eta == pytest.approx(6.014065e-3, rel=1e-6)
    assert plan.constants["b"] == 1.0


def test_stepsize_zero_noise_log_argument():
    pc = ProblemConstants(L=10.0, mu=1.0, n=4)
    T = 10**6
    plan = stepsize_theorem1(pc, 1, 0.5, 123.0, T)
    assert plan.eta == pytest.approx(min(1 / plan.constants["d"], math.log(2) / (0.5 * T)))
    assert plan.regime == "log"


def test_stepsize_noisy_log_argument():
    pc = ProblemConstants(L=10.0, mu=1.0, n=4, sigma_bar_sq=0.2)
    T, r0 = 10**6, 3.0
    plan = stepsize_theorem1(pc, 2, 0.5, r0, T)
    a, c = 0.5, 0.05
    assert plan.eta == pytest.approx(math.log(a * a * r0 * T * T / c) / (a * T))
    assert plan.constants["A"] == pytest.approx(0.2)
    assert plan.constants["B"] == 30.0


def test_stepsize_tau_doubling():
    pc = ProblemConstants(L=3.0, mu=1.0, n=2, zeta_bar_sq=0.5)
    a = stepsize_theorem1(pc, 1, 0.4, 1.0, 5)
    b = stepsize_theorem1(pc, 2, 0.4, 1.0, 5)
    assert 1 / b.constants["d"] == pytest.approx(0.5 / a.constants["d"])
    assert b.constants["A"] - 0.0 == pytest.approx(18 * 2 / 0.4 * 0.5)


def test_stepsize_errors():
    with pytest.raises(ValueError):
        stepsize_theorem1(ProblemConstants(L=1.0, mu=0.0), 1, 1.0, 1.0, 10)
    pc = ProblemConstants(L=1.0, mu=1.0)
    for args in [(1, 1.0, 1.0, 0), (1, 1.0, -1.0, 10), (1, 0.0, 1.0, 10), (1, 1.5, 1.0, 10)]:
        with pytest.raises(ValueError):
            stepsize_theorem1(pc, *args)


def test_horizon_for_accuracy_noisy():
    pc = ProblemConstants(L=10.0, mu=1.0, n=4, sigma_bar_sq=0.05)
    eps = 1e-3
    T = horizon_for_accuracy(pc, 1, 1.0, 1.0, eps)
    assert 2 * lemma_bound(stepsize_theorem1(pc, 1, 1.0, 1.0, T)) <= eps
    assert 2 * lemma_bound(stepsize_theorem1(pc, 1, 1.0, 1.0, T - 1)) > eps


def test_horizon_zero_noise_is_last_capped_horizon():
    pc = ProblemConstants(L=10.0, mu=1.0, n=4)
    T = horizon_for_accuracy(pc, 1, 0.5, 1.0, 1e-8)
    plan = stepsize_theorem1(pc, 1, 0.5, 1.0, T)
    assert plan.regime == "capped"
    assert stepsize_theorem1(pc, 1, 0.5, 1.0, T + 1).regime == "log"


def test_complexity_bound_examples():
    clean = ProblemConstants(L=100.0, mu=1.0, n=1)
    noise, cross, log_term = dsgd.dsgd_bound_terms(clean, 1, 1.0, 0.01, 1e-6)
    assert noise == cross == 0
    assert dsgd_complexity_bound(clean, 1, 1.0, 0.01, 1e-6) == log_term
    ratio = dsgd_complexity_bound(clean, 1, 1.0, 0.01, 1e-8) / dsgd_complexity_bound(clean, 1, 1.0, 0.01, 1e-4)
    assert ratio == pytest.approx(2.0, rel=1e-12)
    noisy = ProblemConstants(L=4.0, mu=1.0, n=3, sigma_bar_sq=0.3, zeta_bar_sq=0.2)
    a = dsgd.dsgd_bound_terms(noisy, 2, 0.5, 1.0, 1e-3)
    b = dsgd.dsgd_bound_terms(noisy, 2, 0.5, 1.0, 5e-4)
    assert b[0] == pytest.approx(2 * a[0])
    assert b[1] == pytest.approx(math.sqrt(2) * a[1])
    with pytest.raises(ValueError):
        dsgd_complexity_bound(noisy, 1, 1.0, 1.0, 0.0)


def test_run_matches_gradient_descent_contraction():
    p = make_quadratic_problem(4, 5, 20, seed=0)
    s = static_schedule(metropolis_weights(build_graph("complete", 4)))
    eta = 1.0 / p.L
    X0 = np.tile(np.random.default_rng(0).standard_normal(5), (4, 1))
    T = 300
    rec = dsgd_run(p, s, T, eta, X0)
    assert np.all(np.diff(rec.gap) <= 1e-15)
    r0 = np.sum((X0[0] - p.x_star) ** 2)
    assert rec.dist_sq[-1] <= (1 - eta * p.mu) ** (2 * T) * r0 * (1 + 1e-6)


def test_run_deterministic_and_csv(tmp_path):
    p = make_quadratic_problem(4, 3, 10, heterogeneity=1.0, noise=NoiseModel("gaussian", 0.1), seed=0)
    s = static_schedule(metropolis_weights(build_graph("ring", 4)))
    plan = stepsize_theorem1(p, 1, s.p, 1.0, 200)
    a = dsgd_run(p, s, 200, plan, np.zeros((4, 3)), seed=5)
    b = dsgd_run(p, s, 200, plan, np.zeros((4, 3)), seed=5)
    c = dsgd_run(p, s, 200, plan, np.zeros((4, 3)), seed=6)
    assert a.csv_text() == b.csv_text()
    assert a.csv_text() != c.csv_text()
    lines = a.csv_text().splitlines()
    assert lines[0] == "t,gap,dist_sq,consensus_err,w_t"
    assert len(lines) == 202
    meta = json.loads(a.to_json(config={"k": 1}))
    assert meta["meta"]["seed"] == 5 and meta["config"] == {"k": 1}


def test_weighted_gap_matches_series():
    p = make_quadratic_problem(5, 4, 30, heterogeneity=0.5, noise=NoiseModel("gaussian", 0.05), seed=2)
    s = static_schedule(metropolis_weights(build_graph("ring", 5)))
    plan = stepsize_theorem1(p, 1, s.p, 1.0, 9000)
    rec = dsgd_run(p, s, 9000, plan, np.ones((5, 4)), seed=1, chunk=1000)
    w = plan.weights(p.mu, 9000)
    np.testing.assert_allclose(rec.w_t[:-1], w, rtol=1e-12)
    assert rec.weighted_gap == pytest.approx(recompute_weighted_gap(rec), rel=1e-9)
    direct = np.sum(w * rec.gap[:-1]) / np.sum(w) + p.mu * rec.dist_sq[-1]
    assert rec.weighted_gap == pytest.approx(direct, rel=1e-9)


@pytest.mark.parametrize("noise", [NoiseModel(), NoiseModel("gaussian", 0.2),
                                   NoiseModel("minibatch", 0.3, 2)])
def test_compiled_matches_reference_loop(noise):
    p = make_quadratic_problem(4, 3, 15, heterogeneity=1.0, noise=noise, seed=1)
    W = metropolis_weights(build_graph("ring", 4))
    for s in (static_schedule(W), periodic_schedule(W, 3)):
        a = dsgd_run(p, s, 250, 0.01, np.ones((4, 3)), seed=2, compiled=True, chunk=64)
        b = dsgd_run(p, s, 250, 0.01, np.ones((4, 3)), seed=2, compiled=False)
        np.testing.assert_allclose(a.X_final, b.X_final, atol=1e-12)
        np.testing.assert_allclose(a.gap, b.gap, rtol=1e-9, atol=1e-15)


def test_dense_kernel_for_non_commuting_hessians():
    p = make_quadratic_problem(3, 4, 10, heterogeneity=1.0, seed=0)
    rng = np.random.default_rng(0)
    M = rng.standard_normal((4, 4))
    locals_ = (QuadraticObjective(M @ M.T + np.eye(4), np.ones(4)),) + p.locals[1:]
    x = np.linalg.solve(sum(f.hessian for f in locals_), sum(f.linear for f in locals_))
    q = Problem(locals_, 50.0, 0.1, x, float(np.mean([f.value(x) for f in locals_])), 0.0, 0.0)
    eng = dsgd.make_engine(q)
    assert eng.Q is None
    s = static_schedule(metropolis_weights(build_graph("complete", 3)))
    a = dsgd_run(q, s, 100, 0.005, np.zeros((3, 4)), compiled=True)
    b = dsgd_run(q, s, 100, 0.005, np.zeros((3, 4)), compiled=False)
    np.testing.assert_allclose(a.X_final, b.X_final, atol=1e-12)


def test_iid_schedule_run_is_reproducible():
    g = build_graph("ring", 5)
    s = iid_schedule(g, keep_prob=0.6, p=0.05)
    p = make_quadratic_problem(5, 3, 10, heterogeneity=1.0, seed=3)
    a = dsgd_run(p, s, 120, 0.01, np.zeros((5, 3)), seed=4)
    b = dsgd_run(p, s, 120, 0.01, np.zeros((5, 3)), seed=4, compiled=False)
    np.testing.assert_allclose(a.X_final, b.X_final, atol=1e-12)


def test_logistic_run():
    p = make_logistic_problem(3, 4, samples=10, noise=NoiseModel("minibatch", batch_size=2), seed=0)
    s = static_schedule(metropolis_weights(build_graph("complete", 3)))
    rec = dsgd_run(p, s, 400, 0.5, np.zeros((3, 4)), seed=1)
    assert rec.gap[-1] < rec.gap[0]
    assert np.isfinite(rec.weighted_gap)


def test_targets_and_thinning():
    p = make_quadratic_problem(4, 3, 10, seed=0)
    s = static_schedule(metropolis_weights(build_graph("complete", 4)))
    full = dsgd_run(p, s, 500, 0.05, np.zeros((4, 3)), targets=[1e-3, 1e-6])
    hit = int(np.argmax(p.mu * full.dist_sq <= 1e-6))
    assert full.reached[1e-6] == hit
    thin = dsgd_run(p, s, 500, 0.05, np.zeros((4, 3)), targets=[1e-3, 1e-6], record_every=50)
    assert thin.reached == full.reached
    assert set(thin.t) >= {0, 500, full.reached[1e-3], hit}
    assert thin.weighted_gap == pytest.approx(full.weighted_gap, rel=1e-12)
    stop = dsgd_run(p, s, 500, 0.05, np.zeros((4, 3)), targets=[1e-6], stop_at_target=True)
    assert stop.rounds == hit and stop.t[-1] == hit


def test_run_errors():
    p = make_quadratic_problem(3, 2, 10, seed=0)
    s = static_schedule(metropolis_weights(build_graph("complete", 3)))
    with pytest.raises(ValueError):
        dsgd_run(p, s, 0, 0.1, np.zeros((3, 2)))
    with pytest.raises(ValueError):
        dsgd_run(p, s, 5, 0.1, np.zeros((3, 3)))
    s4 = static_schedule(metropolis_weights(build_graph("complete", 4)))
    with pytest.raises(ValueError):
        dsgd_run(p, s4, 5, 0.1, np.zeros((3, 2)))


def test_consensus_contracts_in_expectation():
    W = metropolis_weights(build_graph("ring", 6))
    s = static_schedule(W)
    p = make_quadratic_problem(6, 3, 5, noise=NoiseModel("gaussian", 1.0), seed=0)
    ratios = []
    for seed in range(200):
        X = np.random.default_rng(seed).standard_normal((6, 3))
        out = dsgd_step(NodeStates(X), p, W, 0.0, node_streams(seed, 6))
        ratios.append(out.consensus_error / NodeStates(X).consensus_error)
    assert np.mean(ratios) <= (1 - s.p) * 1.05


def test_noise_neighborhood():
    p = make_quadratic_problem(4, 5, 5, noise=NoiseModel("gaussian", 0.1), seed=0)
    s = static_schedule(metropolis_weights(build_graph("complete", 4)))
    eps = 1e-3
    r0 = float(np.sum(p.x_star**2))
    T = horizon_for_accuracy(p, 1, s.p, r0, eps)
    plan = stepsize_theorem1(p, 1, s.p, r0, T)
    tails = []
    for seed in range(10):
        rec = dsgd_run(p, s, T, plan, np.zeros((4, 5)), seed=seed)
        tails.append(np.mean(p.mu * rec.dist_sq[-(T // 5):]))
    assert np.mean(tails) <= 3 * eps
