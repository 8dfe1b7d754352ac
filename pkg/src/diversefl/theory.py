"""Convergence-bound arithmetic and numerical checks of its lemmas.

All logarithms are natural. The bound is

    ||theta_i - theta*|| <= (1 - rho)^i ||theta_0 - theta*||
                            + alpha (2 + eps3)(4 Gamma1 + beta) / rho

and only describes convergence when ``|1 - rho| < 1``. With the stated
``rho`` that never happens for ``mu <= L`` and ``eps3 > 0`` (see
:func:`rho`), so callers get the value plus a contraction flag rather than
an exception.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .enclave import Thresholds, filter_update
from .errors import DomainError


def _positive(**kwargs):
    for name, value in kwargs.items():
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")


def gamma1(sigma1: float, s: int, d: int, delta: float) -> float:
    _positive(sigma1=sigma1, s=s, d=d, delta=delta)
    if not delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    return sigma1 * math.sqrt(2.0 / s) * math.sqrt(d * math.log(6.0) + math.log(3.0 / delta))


def gamma2(sigma2: float, s: int, d: int, lip2: float, r: float, gamma_2: float,
           sigma1: float, delta: float) -> float:
    """Gamma2; ``lip2`` is max(L, L1) and ``gamma_2`` the sub-exponential scale."""
    _positive(sigma2=sigma2, s=s, d=d, lip2=lip2, r=r, gamma_2=gamma_2, sigma1=sigma1, delta=delta)
    if not delta < 1:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if s < d:
        warnings.warn(f"s={s} < d={d}: the log(s/d) term is negative", stacklevel=2)
    terms = (
        d * math.log(18.0 * lip2 / sigma2),
        0.5 * d * math.log(s / d),
        math.log(6.0 * sigma2**2 * r * math.sqrt(s) / (gamma_2 * sigma1 * delta)),
    )
    inner = sum(terms)
    # cancellation round-off is not a domain violation
    if inner < 0 and -inner <= 1e-12 * sum(abs(t) for t in terms):
        inner = 0.0
    if inner < 0:
        raise DomainError(f"Gamma2 square-root argument is negative ({inner:.6g})")
    return sigma2 * math.sqrt(2.0 / s) * math.sqrt(inner)


def default_lr(mu: float, L: float) -> float:
    return mu / (2.0 * L**2)


def rho(mu: float, L: float, alpha: float, eps3: float, big_gamma2: float) -> float:
    """One minus the per-round growth factor of the distance to the optimum.

    Since sqrt(1 - x^2/4) >= 1 - x^2/4 for x = mu/L in (0, 1], the bracket
    exceeds one whenever alpha = mu/(2 L^2) and eps3 >= 0, so the result is
    negative in that regime.
    """
    return 1.0 - (math.sqrt(1.0 - mu**2 / (4.0 * L**2))
                  + 8.0 * alpha * (2.0 + eps3) * big_gamma2
                  + alpha * (1.0 + eps3) * L)


def is_contractive(rho_value: float) -> bool:
    return abs(1.0 - rho_value) < 1.0


def asymptote(rho_value: float, alpha: float, eps3: float, big_gamma1: float, beta: float) -> float:
    if rho_value == 0:
        raise DomainError("rho = 0")
    return alpha * (2.0 + eps3) * (4.0 * big_gamma1 + beta) / rho_value


def error_bound(i: int, dist0: float, rho_value: float, alpha: float, eps3: float,
                big_gamma1: float, beta: float) -> float:
    if rho_value == 0:
        raise DomainError("rho = 0")
    return (1.0 - rho_value) ** i * dist0 + asymptote(rho_value, alpha, eps3, big_gamma1, beta)


def recursion_bound(i: int, dist0: float, rho_value: float, alpha: float, eps3: float,
                    big_gamma1: float, beta: float) -> float:
    """The per-round inequality unrolled exactly, valid for any sign of rho."""
    q = 1.0 - rho_value
    c = alpha * (2.0 + eps3) * (4.0 * big_gamma1 + beta)
    geometric = float(i) if q == 1.0 else (q**i - 1.0) / (q - 1.0)
    return q**i * dist0 + c * geometric


@dataclass
class BoundParams:
    mu: float
    L: float
    sigma1: float
    sigma2: float
    gamma_1: float
    gamma_2: float
    beta: float
    r: float
    s: int
    d: int
    N: int
    delta_total: float
    eps3: float = 2.0
    L1: Optional[float] = None
    alpha: Optional[float] = None

    def __post_init__(self):
        if self.mu > self.L:
            raise DomainError("need mu <= L")
        if not 0 < self.delta_total < 1:
            raise DomainError("delta_total must lie in (0, 1)")
        if not self.eps3 > 1:
            raise DomainError("eps3 must exceed 1")

    @property
    def lip2(self) -> float:
        return max(self.L, self.L if self.L1 is None else self.L1)

    @property
    def delta(self) -> float:
        return self.delta_total / self.N

    @property
    def lr(self) -> float:
        return default_lr(self.mu, self.L) if self.alpha is None else self.alpha

    def evaluate(self) -> dict:
        g1 = gamma1(self.sigma1, self.s, self.d, self.delta)
        g2 = gamma2(self.sigma2, self.s, self.d, self.lip2, self.r, self.gamma_2, self.sigma1, self.delta)
        rv = rho(self.mu, self.L, self.lr, self.eps3, g2)
        notes = []
        if g1 > self.sigma1**2 / self.gamma_1:
            notes.append("Gamma1 > sigma1^2/gamma1: concentration lemma does not apply")
        if g2 > self.sigma2**2 / self.gamma_2:
            notes.append("Gamma2 > sigma2^2/gamma2: concentration lemma does not apply")
        return {
            "gamma1": g1,
            "gamma2": g2,
            "rho": rv,
            "alpha": self.lr,
            "asymptote": asymptote(rv, self.lr, self.eps3, g1, self.beta) if rv != 0 else math.nan,
            "contractive": is_contractive(rv),
            "notes": notes,
        }


@dataclass
class QuadraticProblem:
    """F(theta) = 0.5 (theta - opt)^T A (theta - opt) with A symmetric positive definite."""

    A: np.ndarray
    opt: np.ndarray
    mu: float = field(init=False)
    L: float = field(init=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.opt = np.asarray(self.opt, dtype=np.float64)
        if not np.allclose(self.A, self.A.T):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0:
            raise ValueError("A must be positive definite")
        self.mu, self.L = float(eig[0]), float(eig[-1])

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.A @ (np.asarray(theta) - self.opt)

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator, max_condition: float = 100.0) -> "QuadraticProblem":
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        eig = np.exp(rng.uniform(0.0, math.log(max_condition), size=dim))
        eig *= rng.uniform(0.1, 10.0) / eig.min()
        A = (q * eig) @ q.T
        return cls(0.5 * (A + A.T), rng.normal(size=dim))


@dataclass
class Lemma2Report:
    trials: int
    violations: int
    max_ratio: float
    bound: float

    @property
    def slack(self) -> float:
        return self.bound - self.max_ratio


def check_lemma2(problem: QuadraticProblem, trials: int, seed=0, alpha: Optional[float] = None) -> Lemma2Report:
    """Contraction of one exact gradient step at alpha = mu/(2 L^2)."""
    rng = np.random.default_rng(seed)
    alpha = default_lr(problem.mu, problem.L) if alpha is None else alpha
    bound = math.sqrt(1.0 - problem.mu**2 / (4.0 * problem.L**2))
    g_opt = problem.grad(problem.opt)
    violations = 0
    max_ratio = 0.0
    for _ in range(trials):
        theta = problem.opt + rng.normal(size=problem.opt.size) * rng.uniform(1e-3, 1e3)
        gap = theta - problem.opt
        lhs = np.linalg.norm(gap - alpha * (problem.grad(theta) - g_opt))
        base = np.linalg.norm(gap)
        ratio = lhs / base
        max_ratio = max(max_ratio, ratio)
        # relative slack for round-off
        if lhs > bound * base * (1 + 1e-12):
            violations += 1
    return Lemma2Report(trials, violations, max_ratio, bound)


def check_lemma2_random(n_problems: int, dim: int = 5, seed=0, trials_per_problem: int = 1) -> Lemma2Report:
    rng = np.random.default_rng(seed)
    total = Lemma2Report(0, 0, 0.0, 1.0)
    for _ in range(n_problems):
        problem = QuadraticProblem.random(dim, rng)
        rep = check_lemma2(problem, trials_per_problem, rng.integers(2**63))
        total.trials += rep.trials
        total.violations += rep.violations
        # report the worst ratio relative to its own bound
        if rep.max_ratio / rep.bound > total.max_ratio / total.bound:
            total.max_ratio, total.bound = rep.max_ratio, rep.bound
    return total


@dataclass
class Lemma1Report:
    applicable: bool
    holds: Optional[bool]
    lhs: float
    rhs: float
    reason: str = ""


def check_lemma1(z, guide, g_tilde, grad_theta, grad_opt, alpha: float, eps3: float, beta: float) -> Lemma1Report:
    """Check the single-client deviation inequality for an accepted update.

    Inapplicable (not a failure) unless z . guide > 0, ||z||/||guide|| < eps3,
    guide == alpha * g_tilde and ||grad_opt|| <= beta.
    """
    z, guide, g_tilde, grad_theta, grad_opt = (np.asarray(v, dtype=np.float64)
                                               for v in (z, guide, g_tilde, grad_theta, grad_opt))
    lhs = float(np.linalg.norm(z - alpha * (grad_theta - grad_opt)))
    rhs = float((2 + eps3) * alpha * np.linalg.norm(g_tilde - grad_theta)
                + (1 + eps3) * alpha * np.linalg.norm(grad_theta - grad_opt)
                + (2 + eps3) * alpha * beta)
    guide_norm = np.linalg.norm(guide)
    if not z @ guide > 0:
        return Lemma1Report(False, None, lhs, rhs, "z . guide <= 0")
    if not np.linalg.norm(z) < eps3 * guide_norm:
        return Lemma1Report(False, None, lhs, rhs, "||z||/||guide|| >= eps3")
    if not np.allclose(guide, alpha * g_tilde, rtol=1e-12, atol=1e-15 * max(guide_norm, 1.0)):
        return Lemma1Report(False, None, lhs, rhs, "guide != alpha * g_tilde")
    if np.linalg.norm(grad_opt) > beta * (1 + 1e-12):
        return Lemma1Report(False, None, lhs, rhs, "||grad F(theta*)|| > beta")
    return Lemma1Report(True, lhs <= rhs * (1 + 1e-12) + 1e-300, lhs, rhs)


def capacity(client_round_time: float, enclave_per_client_time: float) -> int:
    """How many clients one enclave can serve without stalling a round."""
    _positive(client_round_time=client_round_time, enclave_per_client_time=enclave_per_client_time)
    return int(math.floor(client_round_time / enclave_per_client_time + 1e-9))


@dataclass
class EmpiricalBoundReport:
    distances: List[float]
    literal_bound: List[float]
    recursion_bound: List[float]
    params: BoundParams
    evaluated: dict
    flagged_rounds: int
    notes: List[str]


def empirical_quadratic_run(
    num_clients: int = 5,
    dim: int = 3,
    rounds: int = 30,
    sample_size: int = 200,
    batch_size: int = 50,
    noise: float = 0.5,
    heterogeneity: float = 1.0,
    start_distance: float = 20.0,
    thresholds: Thresholds = Thresholds(0.0, 0.5, 2.0),
    delta_total: float = 0.1,
    seed=0,
) -> EmpiricalBoundReport:
    """Guided filtering on per-client quadratics, compared with the bound.

    Client ``j`` draws points ``zeta ~ N(c_j, noise^2 I)`` and has loss
    ``0.5 (theta - zeta)^T A (theta - zeta)``, so ``F_j`` is mu-strongly convex
    and L-smooth with a shared ``A``, ``theta* = mean(c_j)`` and
    ``beta = max_j ||A (theta* - c_j)||`` exactly. ``sigma1`` is a doubled
    second-moment proxy; ``h`` has no randomness here, so ``sigma2`` is a
    small positive floor. ``L1`` is taken equal to ``L``. E = 1, every client
    participates, no faults.
    """
    rng = np.random.default_rng(seed)
    problem = QuadraticProblem.random(dim, rng, max_condition=4.0)
    A = problem.A
    centers = problem.opt + heterogeneity * rng.normal(size=(num_clients, dim))
    opt = centers.mean(axis=0)
    alpha = default_lr(problem.mu, problem.L)
    beta = float(max(np.linalg.norm(A @ (opt - c)) for c in centers))

    samples = [c + noise * rng.normal(size=(sample_size, dim)) for c in centers]
    # second moment of single-point gradients at the optimum, all clients pooled
    probe = np.concatenate([c + noise * rng.normal(size=(2000, dim)) for c in centers])
    g_opt = (opt - probe) @ A
    sigma1 = 2.0 * math.sqrt(float(np.linalg.eigvalsh(g_opt.T @ g_opt / len(g_opt))[-1]))
    sigma2 = 1e-6 * problem.L

    theta = opt + start_distance * rng.normal(size=dim) / math.sqrt(dim)
    dist0 = float(np.linalg.norm(theta - opt))
    params = BoundParams(
        mu=problem.mu, L=problem.L, sigma1=sigma1, sigma2=sigma2, gamma_1=sigma1, gamma_2=sigma2,
        beta=beta, r=2.0 * dist0 / math.sqrt(dim), s=sample_size, d=dim, N=num_clients,
        delta_total=delta_total, eps3=thresholds.eps3,
    )
    ev = params.evaluate()

    distances = [dist0]
    flagged_rounds = 0
    for _ in range(rounds):
        accepted = []
        for j in range(num_clients):
            batch = centers[j] + noise * rng.normal(size=(batch_size, dim))
            z = alpha * (A @ (theta - batch.mean(axis=0)))
            guide = alpha * (A @ (theta - samples[j].mean(axis=0)))
            if filter_update(j, z, guide, thresholds).passed:
                accepted.append(z)
        if accepted:
            theta = theta - np.mean(accepted, axis=0)
        if len(accepted) < num_clients:
            flagged_rounds += 1
        distances.append(float(np.linalg.norm(theta - opt)))

    lit = [error_bound(i, dist0, ev["rho"], alpha, params.eps3, ev["gamma1"], beta) for i in range(rounds + 1)]
    rec = [recursion_bound(i, dist0, ev["rho"], alpha, params.eps3, ev["gamma1"], beta) for i in range(rounds + 1)]
    notes = ["L1 set equal to L (exact for quadratics)",
             "sigma1 from a doubled second-moment proxy; sigma2 floored at 1e-6 L"] + ev["notes"]
    if not ev["contractive"]:
        notes.append(f"rho = {ev['rho']:.4g}: bound is not contractive")
    return EmpiricalBoundReport(distances, lit, rec, params, ev, flagged_rounds, notes)
