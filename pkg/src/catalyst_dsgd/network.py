"""Communication graphs, mixing matrices and gossip schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import networkx as nx
import numpy as np

STOCHASTIC_TOL = 1e-12


@dataclass(frozen=True)
class Graph:
    """Undirected graph on nodes ``0..n-1``; self-loops are implicit."""

    n: int
    edges: frozenset[tuple[int, int]]

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("graph needs at least one node")
        normalized = set()
        for i, j in self.edges:
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise ValueError(f"edge ({i}, {j}) has an endpoint outside [0, {self.n})")
            if i == j:
                raise ValueError(f"self-loop ({i}, {j}) is not stored explicitly")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "edges", frozenset(normalized))

    @classmethod
    def from_networkx(cls, g: nx.Graph) -> Graph:
        return cls(g.number_of_nodes(), frozenset((int(i), int(j)) for i, j in g.edges()))

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.n))
        g.add_edges_from(self.edges)
        return g

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def neighbors(self, i: int) -> list[int]:
        return sorted({j for a, b in self.edges for j in (a, b) if i in (a, b) and j != i})

    @property
    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())


def build_graph(kind: str, n: int, seed: int = 0, prob: float = 0.5,
                max_retries: int = 1000) -> Graph:
    """Build a ``ring``, ``complete``, ``star`` (center 0) or ``erdos_renyi`` graph.

    Erdos-Renyi graphs are resampled until connected, at most ``max_retries`` times.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    if kind == "ring":
        return Graph.from_networkx(nx.cycle_graph(n))
    if kind == "complete":
        return Graph.from_networkx(nx.complete_graph(n))
    if kind == "star":
        return Graph.from_networkx(nx.star_graph(n - 1))
    if kind == "erdos_renyi":
        if not 0.0 < prob <= 1.0:
            raise ValueError(f"edge probability must lie in (0, 1], got {prob}")
        rng = np.random.default_rng(seed)
        for _ in range(max_retries):
            g = nx.gnp_random_graph(n, prob, seed=int(rng.integers(2**32)))
            if nx.is_connected(g):
                return Graph.from_networkx(g)
        raise RuntimeError(f"no connected G({n}, {prob}) graph after {max_retries} draws")
    raise ValueError(f"unknown graph kind {kind!r}")


def metropolis_weights(g: Graph) -> np.ndarray:
    """Metropolis-Hastings mixing matrix ``w_ij = 1 / (1 + max(deg_i, deg_j))``."""
    if not g.is_connected:
        raise ValueError("Metropolis weights require a connected graph")
    return _metropolis(g.n, g.edges, g.degrees())


def _metropolis(n, edges, deg) -> np.ndarray:
    W = np.zeros((n, n))
    for i, j in edges:
        w = 1.0 / (1.0 + max(deg[i], deg[j]))
        W[i, j] = W[j, i] = w
    W[np.diag_indices(n)] = 1.0 - W.sum(axis=1)
    return W


def check_mixing_matrix(W: np.ndarray, g: Graph | None = None, tol: float = STOCHASTIC_TOL):
    """Raise ``ValueError`` unless ``W`` is symmetric doubly stochastic (and supported on ``g``)."""
    W = np.asarray(W, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        raise ValueError(f"mixing matrix must be square, got shape {W.shape}")
    if np.any(W < -tol):
        raise ValueError("mixing matrix has negative entries")
    if np.max(np.abs(W - W.T)) > tol:
        raise ValueError("mixing matrix is not symmetric")
    if np.max(np.abs(W.sum(axis=0) - 1)) > tol or np.max(np.abs(W.sum(axis=1) - 1)) > tol:
        raise ValueError("mixing matrix is not doubly stochastic")
    if g is not None:
        allowed = np.eye(g.n, dtype=bool)
        for i, j in g.edges:
            allowed[i, j] = allowed[j, i] = True
        if np.any((np.abs(W) > tol) & ~allowed):
            raise ValueError("mixing matrix puts weight on a non-edge")


def consensus_contraction(W: np.ndarray) -> float:
    """Largest eigenvalue magnitude of ``W`` off the all-ones direction."""
    W = np.asarray(W, dtype=float)
    if np.max(np.abs(W - W.T)) > STOCHASTIC_TOL:
        raise ValueError("spectral consensus rate needs a symmetric matrix")
    n = W.shape[0]
    eig = np.linalg.eigvalsh(W - np.full((n, n), 1.0 / n))
    return float(np.max(np.abs(eig)))


def spectral_consensus_rate(W: np.ndarray) -> float:
    """Tight consensus rate ``p = 1 - lambda^2`` of a static symmetric mixing matrix."""
    lam = consensus_contraction(W)
    p = 1.0 - lam**2
    if not 0.0 < p <= 1.0:
        raise ValueError(f"consensus rate p = {p:.3g} lies outside (0, 1]; the matrix never mixes")
    return min(p, 1.0)


@dataclass(frozen=True)
class MixingSchedule:
    """Source of per-round mixing matrices ``W^t`` with a declared ``(tau, p)``.

    ``static`` repeats ``base``; ``periodic`` gossips with ``base`` on rounds
    ``t % tau == tau - 1`` and does nothing otherwise; ``iid`` keeps every edge
    of ``graph`` independently with probability ``keep_prob`` and applies
    Metropolis weights to the surviving subgraph.
    """

    kind: str
    base: np.ndarray
    tau: int = 1
    p: float = 1.0
    graph: Graph | None = None
    keep_prob: float = 1.0
    _identity: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in ("static", "periodic", "iid"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.tau < 1:
            raise ValueError(f"tau must be a positive integer, got {self.tau}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"declared p must lie in (0, 1], got {self.p}")
        if self.kind == "iid":
            if self.graph is None:
                raise ValueError("iid schedules need the underlying graph")
            if not 0.0 < self.keep_prob <= 1.0:
                raise ValueError(f"keep_prob must lie in (0, 1], got {self.keep_prob}")
        base = np.array(self.base, dtype=float)
        base.setflags(write=False)
        object.__setattr__(self, "base", base)
        eye = np.eye(base.shape[0])
        eye.setflags(write=False)
        object.__setattr__(self, "_identity", eye)

    @property
    def n(self) -> int:
        return self.base.shape[0]

    @property
    def deterministic(self) -> bool:
        return self.kind != "iid"

    def matrix(self, t: int, seed: int = 0) -> np.ndarray:
        """Mixing matrix for round ``t``; a pure function of ``(t, seed)``."""
        if self.kind == "static":
            return self.base
        if self.kind == "periodic":
            return self.base if t % self.tau == self.tau - 1 else self._identity
        rng = np.random.default_rng([seed, t])
        keep = rng.random(len(self._edge_list)) < self.keep_prob
        edges = [e for e, k in zip(self._edge_list, keep) if k]
        deg = np.zeros(self.n, dtype=int)
        for i, j in edges:
            deg[i] += 1
            deg[j] += 1
        return _metropolis(self.n, edges, deg)

    @property
    def _edge_list(self) -> list[tuple[int, int]]:
        return sorted(self.graph.edges)

    def block(self, ell: int, seed: int = 0, tau: int | None = None) -> np.ndarray:
        """Product ``W^{(l+1)tau-1} ... W^{l tau}`` acting on row-stacked node states."""
        tau = self.tau if tau is None else tau
        out = np.eye(self.n)
        for t in range(ell * tau, (ell + 1) * tau):
            out = self.matrix(t, seed) @ out
        return out

    def chunk(self, t0: int, m: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Matrices for rounds ``t0..t0+m-1`` as a stack plus a per-round index into it."""
        if self.kind == "static":
            return self.base[None], np.zeros(m, dtype=np.int64)
        if self.kind == "periodic":
            idx = ((np.arange(t0, t0 + m) % self.tau) == self.tau - 1).astype(np.int64)
            return np.stack([self._identity, self.base]), idx
        mats = np.stack([self.matrix(t, seed) for t in range(t0, t0 + m)])
        return mats, np.arange(m, dtype=np.int64)


def static_schedule(W: np.ndarray) -> MixingSchedule:
    check_mixing_matrix(W)
    return MixingSchedule("static", W, tau=1, p=spectral_consensus_rate(W))


def periodic_schedule(W: np.ndarray, tau: int) -> MixingSchedule:
    """Gossip once every ``tau`` rounds; every aligned block contracts like ``W``."""
    check_mixing_matrix(W)
    return MixingSchedule("periodic", W, tau=tau, p=spectral_consensus_rate(W))


def iid_schedule(g: Graph, keep_prob: float, p: float, tau: int = 1) -> MixingSchedule:
    """Edge-subsampled Metropolis gossip; ``p`` should come from :func:`verify_consensus_rate`."""
    return MixingSchedule("iid", metropolis_weights(g), tau=tau, p=p, graph=g,
                          keep_prob=keep_prob)


@dataclass(frozen=True)
class ConsensusReport:
    tau: int
    declared_p: float
    max_ratio: float
    mean_ratio: float
    threshold: float
    passed: bool

    @property
    def estimated_p(self) -> float:
        """Consensus rate implied by the worst observed ratio (never above 1)."""
        return min(1.0, 1.0 - self.max_ratio)


def verify_consensus_rate(s: MixingSchedule, trials: int = 1000, seed: int = 0,
                          slack: float = 0.05, tau: int | None = None, p: float | None = None,
                          w_draws: int | None = None, d: int = 8,
                          atol: float = 1e-12) -> ConsensusReport:
    """Monte Carlo check of the expected consensus rate over blocks of ``tau`` rounds.

    Each trial draws a centered Gaussian ``X`` and averages
    ``||W_block X - Xbar||^2 / ||X - Xbar||^2`` over ``w_draws`` independent blocks;
    the schedule passes when the worst trial stays below ``(1 - p)(1 + slack)``.
    ``tau``/``p`` default to the schedule's declared values.
    """
    tau = s.tau if tau is None else tau
    p = s.p if p is None else p
    if trials < 1:
        raise ValueError("need at least one trial")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"declared p must lie in (0, 1], got {p}")
    if w_draws is None:
        w_draws = 1 if s.deterministic else 64
    rng = np.random.default_rng(seed)
    ratios = np.empty(trials)
    for j in range(trials):
        X = rng.standard_normal((s.n, d))
        X -= X.mean(axis=0)
        base = np.sum(X**2)
        acc = 0.0
        for r in range(w_draws):
            ell = j * w_draws + r
            Z = s.block(ell, seed, tau) @ X
            acc += np.sum((Z - Z.mean(axis=0)) ** 2)
        ratios[j] = acc / (w_draws * base)
    # atol absorbs round-off when exact averaging is declared (p = 1)
    threshold = (1.0 - p) * (1.0 + slack) + atol
    worst = float(ratios.max())
    return ConsensusReport(tau, p, worst, float(ratios.mean()), threshold, worst <= threshold)


def export_matrix_csv(W: np.ndarray, path: str | Path):
    np.savetxt(path, np.asarray(W), delimiter=",", fmt="%.17g")
