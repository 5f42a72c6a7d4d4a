"""Local objectives with stochastic gradient oracles and known ground truth.

Every problem is ``f(x) = (1/n) sum_i f_i(x)`` with ``f_i = E_xi F_i(x, xi)``. Oracles
take an explicit per-node ``numpy.random.Generator`` so node updates are
reproducible regardless of evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import optimize
from scipy.special import expit

OPTIMALITY_TOL = 1e-12


@dataclass(frozen=True)
class NoiseModel:
    """Gradient noise: ``none``, ``gaussian`` (isotropic, per-coordinate std ``sigma``)
    or ``minibatch`` (``batch_size`` samples drawn with replacement)."""

    kind: str = "none"
    sigma: float = 0.0
    batch_size: int = 1

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "minibatch"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


NO_NOISE = NoiseModel()


class QuadraticObjective:
    """``F(x, xi) = 1/2 x^T H x - (g + s_xi)^T x + c`` with zero-mean sample shifts ``s``.

    Noise never depends on ``x``: Gaussian noise adds ``sigma * N(0, I)`` to the
    gradient, minibatch noise subtracts the batch mean of the stored shifts.
    """

    kind = "quadratic"

    def __init__(self, hessian, linear, const=0.0, noise: NoiseModel = NO_NOISE, shifts=None):
        self.hessian = np.asarray(hessian, dtype=float)
        self.linear = np.asarray(linear, dtype=float)
        self.const = float(const)
        self.noise = noise
        if noise.kind == "minibatch" and shifts is None:
            raise ValueError("minibatch noise on a quadratic needs sample shifts")
        self.shifts = None if shifts is None else np.asarray(shifts, dtype=float)

    @classmethod
    def from_center(cls, A, b, noise: NoiseModel = NO_NOISE, shifts=None):
        """``1/2 (x - b)^T A (x - b)``."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float)
        return cls(A, A @ b, 0.5 * b @ A @ b, noise, shifts)

    @property
    def dim(self) -> int:
        return self.linear.shape[0]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, self.hessian, x) - x @ self.linear + self.const

    def grad(self, x):
        return np.asarray(x, dtype=float) @ self.hessian - self.linear

    def hess(self, x):
        return self.hessian

    def draw_xi(self, rng: np.random.Generator):
        if self.noise.kind == "gaussian":
            return self.noise.sigma * rng.standard_normal(self.dim)
        if self.noise.kind == "minibatch":
            return rng.integers(0, len(self.shifts), size=self.noise.batch_size)
        return None

    def grad_xi(self, x, xi):
        g = self.grad(x)
        if self.noise.kind == "gaussian":
            return g + xi
        if self.noise.kind == "minibatch":
            return g - self.shifts[xi].mean(axis=0)
        return g

    def sample_noise(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """``count`` consecutive gradient perturbations, drawn exactly as ``draw_xi`` would."""
        if self.noise.kind == "gaussian":
            return self.noise.sigma * rng.standard_normal((count, self.dim))
        if self.noise.kind == "minibatch":
            idx = rng.integers(0, len(self.shifts), size=(count, self.noise.batch_size))
            return -self.shifts[idx].mean(axis=1)
        return np.zeros((count, self.dim))

    def noise_variance(self, x) -> float:
        if self.noise.kind == "gaussian":
            return self.dim * self.noise.sigma**2
        if self.noise.kind == "minibatch":
            return float(np.mean(np.sum(self.shifts**2, axis=1))) / self.noise.batch_size
        return 0.0

    def shifted(self, anchor, kappa: float) -> QuadraticObjective:
        anchor = np.asarray(anchor, dtype=float)
        return QuadraticObjective(self.hessian + kappa * np.eye(self.dim),
                                  self.linear + kappa * anchor,
                                  self.const + 0.5 * kappa * anchor @ anchor,
                                  self.noise, self.shifts)


class LogisticObjective:
    """L2-regularized logistic loss on ``(features, labels)`` with labels in {-1, +1}."""

    kind = "logistic"

    def __init__(self, features, labels, l2: float, noise: NoiseModel = NO_NOISE):
        if l2 <= 0:
            raise ValueError("logistic objectives need l2 > 0 for strong convexity")
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels, dtype=float)
        self.l2 = float(l2)
        self.noise = noise

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def _sample_grads(self, x, idx=None):
        a = self.features if idx is None else self.features[idx]
        y = self.labels if idx is None else self.labels[idx]
        s = -y * expit(-y * (a @ x))
        return s[:, None] * a

    def value(self, x):
        x = np.asarray(x, dtype=float)
        margins = self.labels * (x @ self.features.T)
        return np.mean(np.logaddexp(0.0, -margins), axis=-1) + 0.5 * self.l2 * np.sum(x * x, axis=-1)

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        return self._sample_grads(x).mean(axis=0) + self.l2 * x

    def hess(self, x):
        z = self.features @ x
        w = expit(z) * expit(-z)
        return (self.features.T * w) @ self.features / len(self.labels) + self.l2 * np.eye(self.dim)

    def draw_xi(self, rng: np.random.Generator):
        if self.noise.kind == "gaussian":
            return self.noise.sigma * rng.standard_normal(self.dim)
        if self.noise.kind == "minibatch":
            return rng.integers(0, len(self.labels), size=self.noise.batch_size)
        return None

    def grad_xi(self, x, xi):
        if self.noise.kind == "minibatch":
            return self._sample_grads(x, xi).mean(axis=0) + self.l2 * np.asarray(x, dtype=float)
        g = self.grad(x)
        return g + xi if self.noise.kind == "gaussian" else g

    def noise_variance(self, x) -> float:
        if self.noise.kind == "gaussian":
            return self.dim * self.noise.sigma**2
        if self.noise.kind == "minibatch":
            per = self._sample_grads(np.asarray(x, dtype=float))
            centered = per - per.mean(axis=0)
            return float(np.mean(np.sum(centered**2, axis=1))) / self.noise.batch_size
        return 0.0

    def shifted(self, anchor, kappa: float) -> ShiftedObjective:
        return ShiftedObjective(self, anchor, kappa)

    def sample_smoothness(self) -> float:
        """Smoothness constant valid for every single-sample loss."""
        return float(np.max(np.sum(self.features**2, axis=1))) / 4.0 + self.l2

    def smoothness(self) -> float:
        gram = self.features.T @ self.features / len(self.labels)
        return float(np.linalg.eigvalsh(gram)[-1]) / 4.0 + self.l2


class ShiftedObjective:
    """``base(x) + kappa/2 ||x - anchor||^2`` for objectives without a closed-form shift."""

    def __init__(self, base, anchor, kappa: float):
        self.base = base
        self.anchor = np.asarray(anchor, dtype=float)
        self.kappa = float(kappa)
        self.noise = base.noise

    kind = property(lambda self: self.base.kind)
    dim = property(lambda self: self.base.dim)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return self.base.value(x) + 0.5 * self.kappa * np.sum((x - self.anchor) ** 2, axis=-1)

    def grad(self, x):
        return self.base.grad(x) + self.kappa * (np.asarray(x, dtype=float) - self.anchor)

    def hess(self, x):
        return self.base.hess(x) + self.kappa * np.eye(self.dim)

    def draw_xi(self, rng):
        return self.base.draw_xi(rng)

    def grad_xi(self, x, xi):
        return self.base.grad_xi(x, xi) + self.kappa * (np.asarray(x, dtype=float) - self.anchor)

    def noise_variance(self, x) -> float:
        return self.base.noise_variance(x)

    def shifted(self, anchor, kappa: float) -> ShiftedObjective:
        return ShiftedObjective(self, anchor, kappa)


@dataclass(frozen=True, eq=False)
class Problem:
    """``n`` local objectives plus the constants and ground truth the theory needs."""

    locals: tuple
    L: float
    mu: float
    x_star: np.ndarray
    f_star: float
    zeta_bar_sq: float
    sigma_bar_sq: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"mu must be positive, got {self.mu}")
        if self.L < self.mu:
            raise ValueError(f"L = {self.L} is below mu = {self.mu}")

    @property
    def n(self) -> int:
        return len(self.locals)

    @property
    def d(self) -> int:
        return self.locals[0].dim

    @cached_property
    def is_quadratic(self) -> bool:
        return all(isinstance(f, QuadraticObjective) for f in self.locals)

    @cached_property
    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(H, g, mean H)`` with shapes ``(n, d, d)``, ``(n, d)``, ``(d, d)``; quadratics only."""
        H = np.ascontiguousarray(np.stack([f.hessian for f in self.locals]))
        g = np.ascontiguousarray(np.stack([f.linear for f in self.locals]))
        return H, g, H.mean(axis=0)

    def value(self, x) -> float:
        return float(np.mean([f.value(x) for f in self.locals]))

    def full_grad(self, x) -> np.ndarray:
        return np.mean([f.grad(x) for f in self.locals], axis=0)

    def gap(self, x) -> float:
        """``f(x) - f*``; exact quadratic form for quadratics to avoid cancellation."""
        if self.is_quadratic:
            e = np.asarray(x, dtype=float) - self.x_star
            return float(0.5 * e @ self.stacked[2] @ e)
        return self.value(x) - self.f_star

    @property
    def constants(self) -> ProblemConstants:
        return ProblemConstants(self.L, self.mu, self.n, self.sigma_bar_sq, self.zeta_bar_sq)


@dataclass(frozen=True)
class ProblemConstants:
    """The scalars the complexity bounds consume; duck-type compatible with :class:`Problem`."""

    L: float
    mu: float
    n: int = 1
    sigma_bar_sq: float = 0.0
    zeta_bar_sq: float = 0.0


def grad(p: Problem, i: int, x) -> np.ndarray:
    """Exact local gradient of node ``i``."""
    return p.locals[i].grad(x)


def stoch_grad(p: Problem, i: int, x, rng: np.random.Generator) -> np.ndarray:
    """One stochastic gradient of node ``i`` using its private stream ``rng``."""
    f = p.locals[i]
    return f.grad_xi(x, f.draw_xi(rng))


def _finish(locals_, L, mu, x_star, meta) -> Problem:
    zeta = float(np.mean([np.sum(f.grad(x_star) ** 2) for f in locals_]))
    sigma = float(np.mean([f.noise_variance(x_star) for f in locals_]))
    f_star = float(np.mean([f.value(x_star) for f in locals_]))
    return Problem(tuple(locals_), float(L), float(mu), x_star, f_star, zeta, sigma, meta)


def _quadratic_minimizer(locals_) -> np.ndarray:
    H = sum(f.hessian for f in locals_)
    g = sum(f.linear for f in locals_)
    x = np.linalg.solve(H, g)
    x += np.linalg.solve(H, g - H @ x)  # one refinement step
    return x


def _smooth_minimizer(locals_, x0) -> np.ndarray:
    n = len(locals_)

    def fun(x):
        return sum(f.value(x) for f in locals_) / n

    def jac(x):
        return sum(f.grad(x) for f in locals_) / n

    def hess(x):
        return sum(f.hess(x) for f in locals_) / n

    res = optimize.minimize(fun, x0, jac=jac, hess=hess, method="trust-exact",
                            options={"gtol": OPTIMALITY_TOL / 10, "maxiter": 500})
    x = res.x
    for _ in range(3):  # Newton polish
        if np.linalg.norm(jac(x)) <= OPTIMALITY_TOL / 10:
            break
        x = x - np.linalg.solve(hess(x), jac(x))
    if np.linalg.norm(jac(x)) > OPTIMALITY_TOL:
        raise RuntimeError(f"minimizer not certified: gradient norm {np.linalg.norm(jac(x)):.3g}")
    return x


def _random_orthogonal(rng, d) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def make_quadratic_problem(n: int, d: int, condition_number: float, heterogeneity: float = 0.0,
                           noise: NoiseModel = NO_NOISE, seed: int = 0, mu: float = 1.0,
                           samples: int = 32) -> Problem:
    """Random ``f_i(x) = 1/2 (x - b_i)^T A_i (x - b_i)`` with spectra in ``[mu, mu * cond]``.

    All ``A_i`` share one random eigenbasis whose extreme eigenvalues are exactly
    ``mu`` and ``L`` on every node, so the average also has condition number
    ``cond``. Interior eigenvalues are log-uniform per node. ``b_i`` is a common
    center plus ``heterogeneity`` times a node-specific offset, both of unit
    expected norm. Minibatch noise draws ``samples`` centered Gaussian shifts
    of the linear term per node.
    """
    if condition_number < 1:
        raise ValueError(f"condition_number must be >= 1, got {condition_number}")
    if heterogeneity < 0:
        raise ValueError("heterogeneity must be non-negative")
    if mu <= 0:
        raise ValueError(f"mu must be positive, got {mu}")
    L = mu * condition_number
    rng = np.random.default_rng(seed)
    Q = _random_orthogonal(rng, d)
    center = rng.standard_normal(d) / np.sqrt(d)
    locals_ = []
    for _ in range(n):
        lam = np.exp(rng.uniform(np.log(mu), np.log(L), size=d))
        lam[0] = mu
        if d > 1:
            lam[-1] = L
        A = (Q * lam) @ Q.T
        A = 0.5 * (A + A.T)
        b = center + heterogeneity * rng.standard_normal(d) / np.sqrt(d)
        shifts = None
        if noise.kind == "minibatch":
            shifts = noise.sigma * rng.standard_normal((samples, d))
            shifts -= shifts.mean(axis=0)
        locals_.append(QuadraticObjective.from_center(A, b, noise, shifts))
    meta = {"kind": "quadratic", "condition_number": condition_number, "seed": seed}
    p = _finish(locals_, L, mu, _quadratic_minimizer(locals_), meta)
    if heterogeneity == 0:
        # identical centers: the heterogeneity is exactly zero, not round-off
        p = replace(p, zeta_bar_sq=0.0)
    return p


def make_logistic_problem(n: int, d: int, samples: int = 32, l2: float = 0.1,
                          heterogeneity: float = 0.0, noise: NoiseModel = NO_NOISE,
                          seed: int = 0) -> Problem:
    """Logistic regression with labels from a teacher perturbed per node by ``heterogeneity``."""
    rng = np.random.default_rng(seed)
    teacher = rng.standard_normal(d)
    locals_ = []
    for _ in range(n):
        a = rng.standard_normal((samples, d)) / np.sqrt(d)
        w = teacher + heterogeneity * rng.standard_normal(d)
        y = np.where(rng.random(samples) < expit(a @ w), 1.0, -1.0)
        locals_.append(LogisticObjective(a, y, l2, noise))
    if noise.kind == "minibatch":
        L = max(f.sample_smoothness() for f in locals_)
    else:
        L = max(f.smoothness() for f in locals_)
    x_star = _smooth_minimizer(locals_, np.zeros(d))
    return _finish(locals_, L, l2, x_star, {"kind": "logistic", "seed": seed})


def shift_problem(p: Problem, anchors, kappa: float) -> Problem:
    """Per-node proximal surrogate ``f_i(x) + kappa/2 ||x - y_i||^2``.

    Its optimum is the minimizer of ``f(x) + kappa/2 ||x - mean(y)||^2``.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    if kappa == 0:
        return p
    Y = np.asarray(anchors, dtype=float)
    if Y.shape != (p.n, p.d):
        raise ValueError(f"anchors must have shape {(p.n, p.d)}, got {Y.shape}")
    locals_ = [f.shifted(y, kappa) for f, y in zip(p.locals, Y)]
    if p.is_quadratic:
        x_star = _quadratic_minimizer(locals_)
    else:
        x_star = _smooth_minimizer(locals_, p.x_star)
    meta = dict(p.meta, kappa=kappa)
    return _finish(locals_, p.L + kappa, p.mu + kappa, x_star, meta)


@dataclass(frozen=True)
class NoiseStats:
    zeta_bar_sq: float
    sigma_bar_sq_hat: float
    sigma_bar_sq: float


def noise_stats_at_optimum(p: Problem, draws: int = 10_000, seed: int = 0) -> NoiseStats:
    """Exact heterogeneity, Monte Carlo and exact gradient-noise variance at ``x*``."""
    if draws < 1:
        raise ValueError("draws must be at least 1")
    root = np.random.SeedSequence(seed)
    est = []
    for f, ss in zip(p.locals, root.spawn(p.n)):
        rng = np.random.default_rng(ss)
        g = f.grad(p.x_star)
        dev = np.array([f.grad_xi(p.x_star, f.draw_xi(rng)) - g for _ in range(draws)])
        est.append(np.mean(np.sum(dev**2, axis=1)))
    return NoiseStats(p.zeta_bar_sq, float(np.mean(est)), p.sigma_bar_sq)


def save_problem(p: Problem, path: str | Path):
    """Write a quadratic problem as ``.npz``.

    Layout: scalars ``L, mu, f_star, zeta_bar_sq, sigma_bar_sq``; ``x_star (d,)``;
    ``hessians (n, d, d)``, ``linears (n, d)``, ``consts (n,)``; ``noise_kind``
    (str), ``noise_sigma``, ``noise_batch``; ``shifts (n, m, d)`` when minibatch.
    """
    if not p.is_quadratic:
        raise ValueError("only quadratic problems can be exported")
    H, g, _ = p.stacked
    f0 = p.locals[0]
    extra = {}
    if f0.noise.kind == "minibatch":
        extra["shifts"] = np.stack([f.shifts for f in p.locals])
    np.savez(path, L=p.L, mu=p.mu, f_star=p.f_star, zeta_bar_sq=p.zeta_bar_sq,
             sigma_bar_sq=p.sigma_bar_sq, x_star=p.x_star, hessians=H, linears=g,
             consts=np.array([f.const for f in p.locals]), noise_kind=f0.noise.kind,
             noise_sigma=f0.noise.sigma, noise_batch=f0.noise.batch_size, **extra)


def load_problem(path: str | Path) -> Problem:
    z = np.load(path)
    noise = NoiseModel(str(z["noise_kind"]), float(z["noise_sigma"]), int(z["noise_batch"]))
    shifts = z["shifts"] if "shifts" in z.files else [None] * len(z["consts"])
    locals_ = tuple(QuadraticObjective(H, g, c, noise, s)
                    for H, g, c, s in zip(z["hessians"], z["linears"], z["consts"], shifts))
    return Problem(locals_, float(z["L"]), float(z["mu"]), z["x_star"], float(z["f_star"]),
                   float(z["zeta_bar_sq"]), float(z["sigma_bar_sq"]), {"kind": "quadratic"})


def with_noise(p: Problem, noise: NoiseModel) -> Problem:
    """Same quadratic instance with a different Gaussian noise level."""
    if noise.kind == "minibatch":
        raise ValueError("minibatch noise must be set at construction time")
    locals_ = tuple(QuadraticObjective(f.hessian, f.linear, f.const, noise) for f in p.locals)
    sigma = float(np.mean([f.noise_variance(p.x_star) for f in locals_]))
    return replace(p, locals=locals_, sigma_bar_sq=sigma)
