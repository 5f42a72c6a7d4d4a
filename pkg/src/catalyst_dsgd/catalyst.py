"""Catalyst outer loop around DSGD: surrogates, momentum, accuracy and budget schedules."""

from __future__ import annotations

import csv
import io
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .dsgd import (NodeStates, NumpyEngine, QuadraticEngine, RunRecord, _Recorder,
                   horizon_for_accuracy, node_streams, stepsize_theorem1)
from .network import MixingSchedule
from .problems import Problem, ProblemConstants, shift_problem

EPS_CONSTANT = 2.0 / 9.0


@dataclass(frozen=True)
class CatalystParams:
    kappa: float
    q: float
    rho: float
    alpha0: float
    eps_constant: float = EPS_CONSTANT

    @classmethod
    def from_constants(cls, mu: float, L: float, kappa: float | None = None,
                       eps_constant: float = EPS_CONSTANT) -> CatalystParams:
        """``kappa`` defaults to ``L - mu``, which makes ``q = mu / L``."""
        if not mu > 0:
            raise ValueError("Catalyst needs mu > 0")
        kappa = L - mu if kappa is None else float(kappa)
        if kappa < 0:
            raise ValueError(f"kappa must be non-negative, got {kappa}")
        q = mu / (mu + kappa)
        return cls(kappa, q, math.sqrt(q) / 3.0, math.sqrt(q), eps_constant)


@dataclass
class CatalystState:
    k: int
    X: np.ndarray
    Y: np.ndarray
    alpha: float
    eps: float = math.nan
    T: int = 0
    sigma_y: float = 0.0


def solve_alpha(alpha_prev: float, q: float) -> float:
    """Positive root of ``a^2 + (alpha_prev^2 - q) a - alpha_prev^2 = 0``."""
    if not 0.0 < alpha_prev <= 1.0:
        raise ValueError(f"alpha_prev must lie in (0, 1], got {alpha_prev}")
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    b = alpha_prev * alpha_prev - q
    c = alpha_prev * alpha_prev
    disc = math.sqrt(b * b + 4.0 * c)
    # pick the cancellation-free form of the root
    return 2.0 * c / (b + disc) if b >= 0 else 0.5 * (disc - b)


def beta(alpha_prev: float, alpha: float) -> float:
    den = alpha_prev * alpha_prev + alpha
    if not den > 0:
        raise ValueError("momentum weight is undefined for alpha_prev = alpha = 0")
    return alpha_prev * (1.0 - alpha_prev) / den


def anchor_spread(Y) -> float:
    """``sigma_y = (1/n) sum ||y_i||^2 - (1/n^2) ||sum y_i||^2``, computed as a centered sum."""
    Y = np.asarray(Y, dtype=float)
    return float(np.sum((Y - Y.mean(axis=0)) ** 2) / Y.shape[0])


@dataclass(frozen=True, eq=False)
class Surrogate:
    """Proximal surrogate of ``base`` around per-node anchors ``Y``.

    ``problem`` holds the shifted local objectives; ``evaluate_H`` is the
    per-node-anchored objective with the ``sigma_y`` correction and
    ``evaluate_h`` its common-anchor form. The two agree at consensual points.
    """

    base: Problem
    anchors: np.ndarray
    kappa: float
    problem: Problem

    @property
    def ybar(self) -> np.ndarray:
        return self.anchors.mean(axis=0)

    @property
    def sigma_y(self) -> float:
        return anchor_spread(self.anchors)

    def evaluate_H(self, X) -> float:
        X = np.asarray(X, dtype=float)
        vals = [f.value(x) for f, x in zip(self.base.locals, X)]
        prox = np.sum((X - self.anchors) ** 2, axis=1)
        return float(np.mean(vals) + 0.5 * self.kappa * (np.mean(prox) - self.sigma_y))

    def evaluate_h(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return self.base.value(x) + 0.5 * self.kappa * float(np.sum((x - self.ybar) ** 2))

    def grad_h(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.base.full_grad(x) + self.kappa * (x - self.ybar)


def surrogate(p: Problem, Y, kappa: float) -> Surrogate:
    Y = np.array(Y, dtype=float)
    return Surrogate(p, Y, float(kappa), shift_problem(p, Y, kappa))


def eps_schedule(k: int, q: float, initial_gap: float, constant: float = EPS_CONSTANT) -> float:
    """``constant * (1 - sqrt(q)/3)^k * initial_gap``."""
    if k < 1:
        raise ValueError("outer index starts at 1")
    if not initial_gap > 0:
        raise ValueError("initial gap must be positive; the problem is already solved")
    return constant * (1.0 - math.sqrt(q) / 3.0) ** k * initial_gap


def outer_iterations(q: float, initial_gap: float, eps: float) -> int:
    """``ceil((3/sqrt(q)) log(gap / (q eps)))``; 0 when already solved, else at least 1."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if initial_gap <= eps:
        return 0
    val = 3.0 / math.sqrt(q) * math.log(initial_gap / (q * eps))
    return max(1, math.ceil(val))


def inner_budget_terms(eps_k: float, pc_consts, kappa: float, tau: int,
                       pc: float) -> tuple[float, float, float]:
    """Noise, heterogeneity/cross and log terms of the inner round budget."""
    if not eps_k > 0:
        raise ValueError("eps_k must be positive")
    L_h, mu_h = pc_consts.L + kappa, pc_consts.mu + kappa
    q = pc_consts.mu / mu_h
    sigma, zeta = math.sqrt(pc_consts.sigma_bar_sq), math.sqrt(pc_consts.zeta_bar_sq)
    noise = L_h * pc_consts.sigma_bar_sq / (mu_h**2 * pc_consts.n * eps_k)
    cross = L_h * (zeta * tau + sigma * math.sqrt(pc * tau)) / (math.sqrt(mu_h) * mu_h * pc
                                                                 * math.sqrt(eps_k))
    log_term = L_h * tau / (mu_h * pc) * math.log(tau * L_h**2 / (mu_h**2 * pc * q**2))
    return noise, cross, log_term


def inner_budget(eps_k: float, pc_consts, kappa: float, tau: int, pc: float) -> int:
    """Rounds for inner run ``k``: the three terms with unit constants, rounded up."""
    return max(1, math.ceil(sum(inner_budget_terms(eps_k, pc_consts, kappa, tau, pc))))


def warm_start_gap_bound(eps_prev: float, q: float) -> float:
    return eps_prev / (q * q)


def catalyst_rate_bound(k: int, q: float, initial_gap: float, eps_sequence) -> float:
    """``r^k (2 gap + 4 sum_{j<=k} r^{-j} (eps_j + eps_j/sqrt(q)))`` with ``r = 1 - sqrt(q)/2``."""
    eps = np.asarray(eps_sequence, dtype=float)
    if len(eps) < k:
        raise ValueError(f"need {k} accuracies, got {len(eps)}")
    r = 1.0 - math.sqrt(q) / 2.0
    j = np.arange(1, k + 1)
    tail = np.sum(r ** (k - j) * eps[:k] * (1.0 + 1.0 / math.sqrt(q)))
    return float(2.0 * r**k * initial_gap + 4.0 * tail)


def catalyst_total_terms(pc_consts, tau: int, pc: float, eps: float) -> tuple[float, float, float]:
    """Log, noise and heterogeneity/cross terms of the accelerated total round count."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    L, mu = pc_consts.L, pc_consts.mu
    sigma, zeta = math.sqrt(pc_consts.sigma_bar_sq), math.sqrt(pc_consts.zeta_bar_sq)
    log_term = tau * math.sqrt(L) / (pc * math.sqrt(mu)) * max(math.log(1.0 / eps), 0.0)
    noise = math.sqrt(L) * pc_consts.sigma_bar_sq / (pc_consts.n * mu * math.sqrt(mu) * eps)
    cross = math.sqrt(L) * (zeta * tau + sigma * math.sqrt(pc * tau)) / (mu * pc * math.sqrt(eps))
    return log_term, noise, cross


def catalyst_total_complexity(pc_consts, tau: int, pc: float, eps: float) -> float:
    return sum(catalyst_total_terms(pc_consts, tau, pc, eps))


@dataclass(frozen=True)
class OuterStep:
    k: int
    eps_k: float
    T_k: int
    alpha_k: float
    beta_k: float
    gap: float
    dist_sq: float
    realized_inner_gap: float


OUTER_COLUMNS = ("k", "eps_k", "T_k", "alpha_k", "beta_k", "gap", "dist_sq", "realized_inner_gap")


@dataclass
class CatalystResult:
    params: CatalystParams
    K: int
    outer: list[OuterStep]
    record: RunRecord
    state: CatalystState
    rounds: int
    reached: dict
    meta: dict = field(default_factory=dict)

    def outer_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(OUTER_COLUMNS)
        for s in self.outer:
            w.writerow([s.k, repr(s.eps_k), s.T_k, repr(s.alpha_k), repr(s.beta_k),
                        repr(s.gap), repr(s.dist_sq), repr(s.realized_inner_gap)])
        return buf.getvalue()

    def outer_to_target(self, eps: float) -> int | None:
        """First outer index whose iterate satisfies ``mu ||xbar_k - x*||^2 <= eps``."""
        mu = self.record.mu
        for s in self.outer:
            if s.dist_sq <= eps / mu:
                return s.k
        return None


class _InnerGap:
    """Oracle for ``h_k(xbar) - h_k*``, used only for diagnostics."""

    def __init__(self, p: Problem, kappa: float):
        self.p, self.kappa = p, kappa
        if p.is_quadratic:
            nu, self.V = np.linalg.eigh(p.stacked[2])
            self.nu = nu
            self.xs = p.x_star @ self.V

    def __call__(self, xbar, Y) -> float:
        ybar = Y.mean(axis=0)
        if self.p.is_quadratic:
            c = self.nu + self.kappa
            z = (self.nu * self.xs + self.kappa * (ybar @ self.V)) / c
            e = xbar @ self.V - z
            return float(0.5 * np.sum(c * e * e))
        sp = shift_problem(self.p, np.broadcast_to(ybar, Y.shape), self.kappa)
        return sp.value(xbar) - sp.f_star


def catalyst_dsgd_run(p: Problem, s: MixingSchedule, eps: float, seed: int = 0, *,
                      kappa: float | None = None, X0=None, r0: float | None = None,
                      initial_gap: float | None = None, tau: int | None = None,
                      pc: float | None = None, eps_constant: float = EPS_CONSTANT,
                      max_rounds: int = 10**7, until_target: bool = False,
                      stop_at_target: bool = False, record_every: int = 1, targets=(),
                      dsgd_horizon: int | None = None, compiled: bool | None = None,
                      chunk: int = 4096) -> CatalystResult:
    """Catalyst-accelerated DSGD.

    The concatenated record carries no weights (``w_t`` is ``nan``) because each
    inner run has its own step size. Runs ``K = outer_iterations(q, gap, eps)`` outer steps; with ``until_target``
    it keeps going (with the same schedules) until ``mu ||xbar - x*||^2`` drops
    below the smallest of ``eps`` and ``targets`` or ``max_rounds`` total rounds
    are spent. ``initial_gap`` and ``r0`` default to their
    ground-truth values at ``X0`` (zeros by default). ``kappa = 0`` degenerates
    to one inner DSGD run on ``f`` whose length is ``dsgd_horizon`` (the
    explicit-bound horizon by default).
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not p.mu > 0:
        raise ValueError("Catalyst needs mu > 0")
    tau = s.tau if tau is None else tau
    pc = s.p if pc is None else pc
    params = CatalystParams.from_constants(p.mu, p.L, kappa, eps_constant)
    X = np.zeros((p.n, p.d)) if X0 is None else np.array(
        X0.X if isinstance(X0, NodeStates) else X0, dtype=float)
    xbar0 = X.mean(axis=0)
    if r0 is None:
        r0 = float(np.sum((xbar0 - p.x_star) ** 2))
    if initial_gap is None:
        initial_gap = p.gap(xbar0)
    degenerate = params.kappa == 0
    K = 1 if degenerate else outer_iterations(params.q, initial_gap, eps)
    L_h, mu_h = p.L + params.kappa, p.mu + params.kappa
    inner_consts = ProblemConstants(L_h, mu_h, p.n, p.sigma_bar_sq, p.zeta_bar_sq)
    if compiled is None:
        compiled = p.is_quadratic
    base_engine = QuadraticEngine(p, p) if compiled else None
    inner_gap = _InnerGap(p, params.kappa)

    state = CatalystState(0, X, X.copy(), params.alpha0)
    rec = _Recorder(p, math.nan, [eps, *targets], record_every, 0)
    xbar = X.mean(axis=0)
    rec.add(np.array([0]), np.array([p.gap(xbar)]),
            np.array([float(np.sum((xbar - p.x_star) ** 2))]),
            np.array([float(np.sum((X - xbar) ** 2))]))
    outer = []
    used = k = 0
    eta = math.nan
    while used < max_rounds:
        if (k >= K and not until_target) or (until_target and rec.done):
            break
        k += 1
        eps_k = params.eps_constant * (1.0 - math.sqrt(params.q) / 3.0) ** k * initial_gap
        # the continuation past K can run the geometric schedule into underflow
        eps_k = max(eps_k, sys.float_info.min)
        if degenerate and k == 1:
            T_k = dsgd_horizon or horizon_for_accuracy(p, tau, pc, r0, eps)
            r0_k = r0
        else:
            T_k = inner_budget(eps_k, p.constants, params.kappa, tau, pc)
            gap_k = initial_gap if k == 1 else warm_start_gap_bound(outer[-1].eps_k, params.q)
            r0_k = 2.0 * gap_k / mu_h
        eta = stepsize_theorem1(inner_consts, tau, pc, r0_k, T_k).eta
        if compiled:
            engine = base_engine.shifted(state.Y, params.kappa)
        else:
            engine = NumpyEngine(shift_problem(p, state.Y, params.kappa), p)
        rngs = node_streams(np.random.SeedSequence([seed, k]), p.n) if engine.needs_streams else None
        X_new = state.X
        stop_dist = rec.targets[-1] / p.mu if stop_at_target else -1.0
        T_run = min(T_k, max_rounds - used)
        for start in range(0, T_run, chunk):
            m = min(chunk, T_run - start)
            gap, dist, cons, X_new = engine.rounds(s, X_new, eta, rngs, used, m, seed, stop_dist)
            rec.add(np.arange(used + 1, used + len(gap) + 1), gap, dist, cons)
            used += len(gap)
            if len(gap) < m:
                break
        alpha = solve_alpha(state.alpha, params.q)
        b = beta(state.alpha, alpha)
        Y = X_new + b * (X_new - state.X)
        xbar = X_new.mean(axis=0)
        outer.append(OuterStep(k, eps_k, T_k, alpha, b, p.gap(xbar),
                               float(np.sum((xbar - p.x_star) ** 2)), inner_gap(xbar, state.Y)))
        state = CatalystState(k, X_new, Y, alpha, eps_k, T_k, anchor_spread(Y))
        if stop_at_target and rec.done:
            break
    record = rec.finish(used, state.X, {"seed": seed})
    record.eta = eta
    meta = {"seed": seed, "kappa": params.kappa, "q": params.q, "K": K, "tau": tau, "pc": pc,
            "r0": r0, "initial_gap": initial_gap}
    return CatalystResult(params, K, outer, record, state, used, dict(record.reached), meta)
