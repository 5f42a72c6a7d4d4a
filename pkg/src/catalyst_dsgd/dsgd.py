"""Decentralized SGD over a gossip schedule, its step-size rule and complexity bound."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .network import MixingSchedule
from .problems import Problem

SQRT3 = math.sqrt(3.0)


@dataclass
class NodeStates:
    """Row-stacked node iterates ``X`` (shape ``(n, d)``) after ``t`` rounds."""

    X: np.ndarray
    t: int = 0

    @property
    def mean(self) -> np.ndarray:
        return self.X.mean(axis=0)

    @property
    def consensus_error(self) -> float:
        return float(np.sum((self.X - self.mean) ** 2))


@dataclass(frozen=True)
class StepSizePlan:
    eta: float
    regime: str
    T: int
    tau: int
    pc: float
    constants: dict

    def weights(self, mu: float, rounds: int) -> np.ndarray:
        """``w_t = (1 - mu eta / 2)^{-(t+1)}`` for ``t < rounds``."""
        return np.exp(_log_weights(mu, self.eta, 0, rounds))


def stepsize_theorem1(p, tau: int, pc: float, r0: float, T: int) -> StepSizePlan:
    """Constant step ``min(1/d, ln(max(2, a^2 r0 T^2 / c)) / (a T))``.

    ``a = mu/2``, ``c = sigma^2/n``, ``B = 3L``, ``A = sigma^2 + 18 tau zeta^2 / p``,
    ``d = 96 sqrt(3) tau L / p``. When ``c = 0`` the log argument is taken as 2.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    if r0 < 0:
        raise ValueError("r0 must be non-negative")
    if not 0.0 < pc <= 1.0:
        raise ValueError(f"consensus rate must lie in (0, 1], got {pc}")
    if not p.mu > 0:
        raise ValueError("step-size theory needs mu > 0")
    a = p.mu / 2.0
    c = p.sigma_bar_sq / p.n
    B = 3.0 * p.L
    A = p.sigma_bar_sq + 18.0 * tau / pc * p.zeta_bar_sq
    d = 96.0 * SQRT3 * tau * p.L / pc
    arg = 2.0 if c == 0 else max(2.0, a * a * r0 * T * T / c)
    log_eta = math.log(arg) / (a * T)
    eta, regime = (1.0 / d, "capped") if 1.0 / d <= log_eta else (log_eta, "log")
    constants = {"a": a, "b": 1.0, "c": c, "d": d, "B": B, "A": A, "r0": r0}
    return StepSizePlan(eta, regime, T, tau, pc, constants)


def lemma_bound(plan: StepSizePlan) -> float:
    """``(r0/eta) exp(-a eta (T+1)) + c eta + 64 B A (tau/p) eta^2``.

    Half the weighted-gap-plus-distance accuracy is bounded by this value.
    """
    k = plan.constants
    eta = plan.eta
    return (k["r0"] / eta * math.exp(-k["a"] * eta * (plan.T + 1)) + k["c"] * eta
            + 64.0 * k["B"] * k["A"] * plan.tau / plan.pc * eta * eta)


def horizon_for_accuracy(p, tau: int, pc: float, r0: float, eps: float,
                         max_T: int = 10**9) -> int:
    """Smallest ``T`` whose plan certifies accuracy ``eps`` (``2 * lemma_bound <= eps``).

    The bound is searched on a doubling grid and refined by bisection. If no
    horizon qualifies, which happens without gradient noise because the log
    argument is then fixed at 2, the grid point with the smallest bound is returned.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def ok(T):
        return 2.0 * lemma_bound(stepsize_theorem1(p, tau, pc, r0, T)) <= eps

    T, best = 1, (math.inf, 1)
    while T <= max_T:
        if ok(T):
            lo, hi = T // 2, T
            while hi - lo > 1:
                mid = (lo + hi) // 2
                lo, hi = (lo, mid) if ok(mid) else (mid, hi)
            return max(hi, 1)
        val = lemma_bound(stepsize_theorem1(p, tau, pc, r0, T))
        best = min(best, (val, T))
        T *= 2
    # refine around the best grid point; the last capped horizon is a kink of the bound
    lo, hi = max(1, best[1] // 2), min(max_T, best[1] * 2)
    plan = stepsize_theorem1(p, tau, pc, r0, 1)
    switch = int(plan.constants["d"] * math.log(2.0) / plan.constants["a"])
    grid = np.unique(np.append(np.geomspace(lo, hi, 64).astype(int), max(1, switch)))
    vals = [lemma_bound(stepsize_theorem1(p, tau, pc, r0, int(t))) for t in grid]
    return int(grid[int(np.argmin(vals))])


def dsgd_bound_terms(p, tau: int, pc: float, r0: float, eps: float) -> tuple[float, float, float]:
    """Noise, heterogeneity/cross and log terms of the DSGD round count (unit constants)."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    sigma, zeta = math.sqrt(p.sigma_bar_sq), math.sqrt(p.zeta_bar_sq)
    noise = p.sigma_bar_sq / (p.mu * p.n * eps)
    cross = math.sqrt(p.L) * (zeta * tau + sigma * math.sqrt(pc * tau)) / (p.mu * pc * math.sqrt(eps))
    arg = r0 * tau * p.L / (eps * pc)
    log_term = p.L * tau / (p.mu * pc) * max(math.log(arg), 0.0) if arg > 0 else 0.0
    return noise, cross, log_term


def dsgd_complexity_bound(p, tau: int, pc: float, r0: float, eps: float) -> float:
    """Predicted DSGD rounds to accuracy ``eps``; for scaling comparisons only."""
    return sum(dsgd_bound_terms(p, tau, pc, r0, eps))


def node_streams(seed, n: int) -> list[np.random.Generator]:
    """Independent per-node generators derived from ``seed``."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def dsgd_step(states: NodeStates, p: Problem, W: np.ndarray, eta: float,
              rngs: list[np.random.Generator]) -> NodeStates:
    """One round: local stochastic gradient step on every node, then gossip with ``W``."""
    X = np.asarray(states.X, dtype=float)
    W = np.asarray(W, dtype=float)
    if X.shape != (p.n, p.d):
        raise ValueError(f"iterates have shape {X.shape}, expected {(p.n, p.d)}")
    if W.shape != (p.n, p.n):
        raise ValueError(f"mixing matrix has shape {W.shape}, expected {(p.n, p.n)}")
    if len(rngs) != p.n:
        raise ValueError("need one random stream per node")
    G = np.stack([f.grad_xi(X[i], f.draw_xi(rngs[i])) for i, f in enumerate(p.locals)])
    return NodeStates(W @ (X - eta * G), states.t + 1)


def _log_weights(mu, eta, start, stop):
    t = np.arange(start, stop, dtype=float)
    return -(t + 1.0) * math.log1p(-0.5 * mu * eta)


@dataclass
class RunRecord:
    """Per-round metrics of a run (possibly thinned) plus provenance.

    Row ``t`` describes the iterate after ``t`` rounds: ``gap = f(xbar^t) - f*``,
    ``dist_sq = ||xbar^t - x*||^2``, ``consensus_err = ||X^t - Xbar^t||_F^2`` and
    the weight ``w_t`` (``nan`` on the final row, which carries no weight).
    """

    t: np.ndarray
    gap: np.ndarray
    dist_sq: np.ndarray
    consensus_err: np.ndarray
    w_t: np.ndarray
    eta: float
    mu: float
    rounds: int
    weighted_gap: float
    reached: dict
    X_final: np.ndarray
    meta: dict = field(default_factory=dict)

    CSV_COLUMNS = ("t", "gap", "dist_sq", "consensus_err", "w_t")

    @property
    def final_dist_sq(self) -> float:
        return float(self.dist_sq[-1])

    def rounds_to(self, eps: float) -> int | None:
        return self.reached.get(eps)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for row in zip(self.t, self.gap, self.dist_sq, self.consensus_err, self.w_t):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "eta": self.eta, "mu": self.mu, "rounds": self.rounds,
            "weighted_gap": self.weighted_gap, "final_gap": float(self.gap[-1]),
            "final_dist_sq": self.final_dist_sq,
            "reached": {repr(k): v for k, v in self.reached.items()},
        }

    def to_json(self, **extra) -> str:
        return json.dumps(dict(self.summary(), meta=self.meta, **extra), indent=2, sort_keys=True)


def recompute_weighted_gap(rec: RunRecord) -> float:
    """Weighted gap from stored full-resolution rows (requires ``record_every == 1``)."""
    w = rec.w_t[:-1]
    return float(np.sum(w * rec.gap[:-1]) / np.sum(w) + rec.mu * rec.dist_sq[-1])


class _Recorder:
    """Thins rows, tracks target crossings and the stable weighted-gap accumulator."""

    def __init__(self, ref: Problem, eta, targets, record_every, t_start, clock=0):
        self.mu = ref.mu
        self.eta = eta
        self.targets = sorted(set(float(e) for e in targets), reverse=True)
        self.reached = {}
        self.every = max(1, int(record_every))
        self.rows = []
        self.num = self.den = 0.0
        self.ref_lw = None
        self.t_start = t_start
        self.clock = clock
        self.last = None

    def _crossings(self, t, dist):
        hits = set()
        for eps in self.targets:
            if eps in self.reached:
                continue
            idx = np.flatnonzero(dist <= eps / self.mu)
            if idx.size:
                self.reached[eps] = int(t[idx[0]])
                hits.add(int(idx[0]))
        return hits

    def add(self, t, gap, dist, cons):
        """Append rows for iterates ``t`` (consecutive round indices)."""
        t = np.asarray(t)
        hits = self._crossings(t, dist)
        keep = ((t + self.clock) % self.every == 0)
        if not self.rows:
            keep[0] = True
        for h in hits:
            keep[h] = True
        for j in np.flatnonzero(keep):
            self.rows.append((int(t[j]), float(gap[j]), float(dist[j]), float(cons[j])))
        self.last = (int(t[-1]), float(gap[-1]), float(dist[-1]), float(cons[-1]))

    def weigh(self, t, gap):
        if len(t) == 0:
            return
        lw = _log_weights(self.mu, self.eta, t[0], t[-1] + 1)
        new_ref = lw[-1]
        scale = math.exp(self.ref_lw - new_ref) if self.ref_lw is not None else 0.0
        w = np.exp(lw - new_ref)
        self.num = self.num * scale + float(np.sum(w * gap))
        self.den = self.den * scale + float(np.sum(w))
        self.ref_lw = new_ref

    @property
    def done(self) -> bool:
        return bool(self.targets) and self.targets[-1] in self.reached

    def finish(self, rounds, X, meta) -> RunRecord:
        if not self.rows or self.rows[-1][0] != self.last[0]:
            self.rows.append(self.last)
        arr = np.array(self.rows, dtype=float)
        t = arr[:, 0].astype(np.int64)
        if math.isnan(self.eta):
            w = np.full(len(t), np.nan)
            weighted = math.nan
        else:
            w = np.exp(-((t - self.t_start) + 1.0) * math.log1p(-0.5 * self.mu * self.eta))
            w[-1] = np.nan
            weighted = (self.num / self.den if self.den > 0 else 0.0) + self.mu * self.last[2]
        return RunRecord(t, arr[:, 1], arr[:, 2], arr[:, 3], w, self.eta, self.mu, rounds,
                         weighted, dict(self.reached), X, meta)


class QuadraticEngine:
    """Compiled round loop for quadratic problems.

    When every node Hessian and the reference Hessian are diagonal in one shared
    orthonormal basis, iterates are advanced in that basis at ``O(nd)`` cost per
    round instead of ``O(nd^2)``.
    """

    DIAG_TOL = 1e-10

    def __init__(self, p: Problem, ref: Problem | None = None, basis=True):
        ref = p if ref is None else ref
        H, g, _ = p.stacked
        self.locals = p.locals
        self.noisy = any(f.noise.kind != "none" for f in p.locals)
        self.needs_streams = self.noisy
        self.ref_x = np.ascontiguousarray(ref.x_star, dtype=float)
        ref_H = ref.stacked[2]
        self.Q = _shared_basis(np.concatenate([H, ref_H[None]]), self.DIAG_TOL) if basis else None
        if self.Q is None:
            self.H, self.g, self.ref_H = H, g, ref_H
        else:
            Q = self.Q
            self.lam = np.ascontiguousarray(np.einsum("ab,iac,cb->ib", Q, H, Q))
            self.g = np.ascontiguousarray(g @ Q)
            self.ref_lam = np.ascontiguousarray(np.einsum("ab,ac,cb->b", Q, ref_H, Q))
            self.ref_x = np.ascontiguousarray(self.ref_x @ Q)

    def shifted(self, anchors, kappa: float) -> QuadraticEngine:
        """Engine for the per-node proximal surrogate, metrics still against the reference."""
        out = object.__new__(QuadraticEngine)
        out.__dict__.update(self.__dict__)
        Y = np.asarray(anchors, dtype=float)
        if self.Q is None:
            out.H = np.ascontiguousarray(self.H + kappa * np.eye(self.H.shape[1]))
            out.g = np.ascontiguousarray(self.g + kappa * Y)
        else:
            out.lam = self.lam + kappa
            out.g = np.ascontiguousarray(self.g + kappa * (Y @ self.Q))
        return out

    def rounds(self, s, X, eta, rngs, t_abs, m, sched_seed, stop_dist):
        if self.noisy:
            noise = np.stack([f.sample_noise(r, m) for f, r in zip(self.locals, rngs)], axis=1)
            if self.Q is not None:
                noise = noise @ self.Q
            noise = np.ascontiguousarray(noise)
        else:
            noise = np.zeros((1, 1, 1))
        mats, widx = s.chunk(t_abs, m, sched_seed)
        mats = np.ascontiguousarray(mats)
        gap, dist, cons = np.empty(m), np.empty(m), np.empty(m)
        if self.Q is None:
            X = np.ascontiguousarray(X, dtype=float).copy()
            k = _kernels.quadratic_rounds(X, self.H, self.g, noise, self.noisy, mats, widx,
                                          float(eta), self.ref_x, self.ref_H, float(stop_dist),
                                          gap, dist, cons)
        else:
            X = np.ascontiguousarray(X @ self.Q)
            k = _kernels.diagonal_rounds(X, self.lam, self.g, noise, self.noisy, mats, widx,
                                         float(eta), self.ref_x, self.ref_lam, float(stop_dist),
                                         gap, dist, cons)
            X = X @ self.Q.T
        return gap[:k], dist[:k], cons[:k], X


def _shared_basis(mats, tol):
    """Orthonormal basis diagonalizing every matrix in ``mats``, or ``None``."""
    coef = np.random.default_rng(0).uniform(1.0, 2.0, size=len(mats))
    _, Q = np.linalg.eigh(np.einsum("k,kab->ab", coef, mats))
    for M in mats:
        R = Q.T @ M @ Q
        scale = max(np.max(np.abs(np.diag(R))), 1e-300)
        if np.max(np.abs(R - np.diag(np.diag(R)))) > tol * scale:
            return None
    return Q


class NumpyEngine:
    """Reference round loop built on :func:`dsgd_step`; works for any objective."""

    needs_streams = True

    def __init__(self, p: Problem, ref: Problem | None = None):
        self.p = p
        self.ref = p if ref is None else ref

    def rounds(self, s, X, eta, rngs, t_abs, m, sched_seed, stop_dist):
        gap, dist, cons = np.empty(m), np.empty(m), np.empty(m)
        state = NodeStates(X)
        for j in range(m):
            state = dsgd_step(state, self.p, s.matrix(t_abs + j, sched_seed), eta, rngs)
            xbar = state.mean
            dist[j] = np.sum((xbar - self.ref.x_star) ** 2)
            gap[j] = self.ref.gap(xbar)
            cons[j] = state.consensus_error
            if dist[j] <= stop_dist:
                return gap[:j + 1], dist[:j + 1], cons[:j + 1], state.X
        return gap, dist, cons, state.X


def make_engine(p: Problem, ref: Problem | None = None, compiled: bool | None = None):
    ref = p if ref is None else ref
    if compiled is None:
        compiled = p.is_quadratic and ref.is_quadratic
    return QuadraticEngine(p, ref) if compiled else NumpyEngine(p, ref)


def dsgd_run(p: Problem, s: MixingSchedule, T: int, plan: StepSizePlan | float, X0,
             seed: int = 0, *, reference: Problem | None = None, targets=(),
             stop_at_target: bool = False, record_every: int = 1, t0: int = 0,
             schedule_seed: int | None = None, streams=None, compiled: bool | None = None,
             engine=None, chunk: int = 4096) -> RunRecord:
    """Run up to ``T`` DSGD rounds with the constant step of ``plan``.

    Metrics are measured against ``reference`` (default ``p``). ``targets`` lists
    accuracies ``eps`` whose first crossing of ``mu * ||xbar - x*||^2 <= eps`` is
    recorded; with ``stop_at_target`` the run ends at the smallest one. Schedule
    round indices start at ``t0`` so consecutive runs can share one time axis.
    Quadratic problems use a compiled loop unless ``compiled=False``. Rows are
    thinned to rounds where ``t0 + t`` is a multiple of ``record_every``; the
    first and last rows and target crossings are always kept.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    ref = p if reference is None else reference
    eta = plan.eta if isinstance(plan, StepSizePlan) else float(plan)
    X = np.array(X0.X if isinstance(X0, NodeStates) else X0, dtype=float, copy=True)
    if X.shape != (p.n, p.d):
        raise ValueError(f"X0 has shape {X.shape}, expected {(p.n, p.d)}")
    if s.n != p.n:
        raise ValueError(f"schedule has {s.n} nodes, problem has {p.n}")
    sched_seed = seed if schedule_seed is None else schedule_seed
    if engine is None:
        engine = make_engine(p, ref, compiled)
    rngs = streams
    if rngs is None and engine.needs_streams:
        rngs = node_streams(seed, p.n)
    rec = _Recorder(ref, eta, targets, record_every, 0, t0)
    xbar = X.mean(axis=0)
    g0 = ref.gap(xbar)
    rec.add(np.array([0]), np.array([g0]), np.array([float(np.sum((xbar - ref.x_star) ** 2))]),
            np.array([float(np.sum((X - xbar) ** 2))]))
    pending_t, pending_gap = np.array([0]), np.array([g0])
    stop_dist = rec.targets[-1] / ref.mu if stop_at_target and rec.targets else -1.0
    done = 0
    if not (stop_at_target and rec.done):
        for start in range(0, T, chunk):
            m = min(chunk, T - start)
            gap, dist, cons, X = engine.rounds(s, X, eta, rngs, t0 + start, m, sched_seed, stop_dist)
            k = len(gap)
            t = np.arange(start + 1, start + k + 1)
            rec.weigh(pending_t, pending_gap)
            rec.add(t, gap, dist, cons)
            pending_t, pending_gap = t, gap
            done = start + k
            if k < m:
                break
    # the newest iterate only enters through the distance term
    rec.weigh(pending_t[:-1], pending_gap[:-1])
    return rec.finish(done, X, {"seed": seed, "t0": t0})
