"""Concept Activation Vector estimators.

Three estimators share one record type, :class:`Cav`:

* ``logistic``: maximizer of the L2-penalized logistic log-likelihood, fitted by
  full-batch damped Newton ascent (deterministic, no stochastic steps).
* ``hinge``: L2-penalized average hinge loss, fitted by SGD with a seeded
  shuffle per epoch.
* ``dom``: difference of means, ``beta = mean(concepts) - mean(references)``.

Concept points carry label 1 in every estimator, so ``beta`` points toward the
concept class. With ``centering`` on, inputs are shifted by the concept mean
before fitting; ``beta`` is unaffected and ``alpha`` is reported in the
uncentered convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import (
    ConvergenceError,
    DomainError,
    LearningRateError,
    SeparabilityError,
    ShapeError,
)
from .latent_model import ConceptSet, as_points

ESTIMATORS = ("logistic", "hinge", "dom")
DIVERGENCE_NORM = 1e6


@dataclass(frozen=True)
class FitOptions:
    lam: float = 1.0
    tolerance: float = 1e-8
    max_iterations: int = 500
    centering: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise DomainError(f"lambda must be >= 0, got {self.lam}")
        if not self.tolerance > 0:
            raise DomainError(f"tolerance must be > 0, got {self.tolerance}")
        if self.max_iterations < 1:
            raise DomainError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class Cav:
    """A fitted CAV. ``beta`` holds raw (unnormalized) coefficients."""

    beta: np.ndarray
    alpha: float
    estimator: str
    lam: float
    n_concept: int
    n_reference: int
    seed: int | None = None
    center: np.ndarray | None = None
    grad_norm: float = 0.0
    iterations: int = 0
    objective: float = float("nan")
    a_n: float | None = field(default=None)

    @property
    def dimension(self) -> int:
        return self.beta.shape[0]

    @property
    def alpha_centered(self) -> float:
        """Intercept in the parameterization sigma(alpha + beta . (u - center))."""
        if self.center is None:
            return self.alpha
        return self.alpha + float(self.beta @ self.center)

    def normalized(self) -> "Cav":
        norm = float(np.linalg.norm(self.beta))
        if norm == 0.0:
            return self
        return replace(self, beta=self.beta / norm, alpha=self.alpha / norm, a_n=None)


def _points(obj, name: str) -> np.ndarray:
    if isinstance(obj, ConceptSet):
        return obj.points
    return as_points(obj, name=name)


def _stack(concepts, references, center):
    x = _points(concepts, "concepts")
    z = _points(references, "references")
    if x.shape[1] != z.shape[1]:
        raise ShapeError(f"concepts have dimension {x.shape[1]}, references {z.shape[1]}")
    if x.shape[0] < 1 or z.shape[0] < 1:
        raise DomainError("need at least one concept and one reference point")
    u = np.vstack([x, z])
    if center is not None:
        u = u - np.asarray(center, dtype=np.float64)
    y = np.concatenate([np.ones(x.shape[0]), np.zeros(z.shape[0])])
    return x, z, u, y


# ---------------------------------------------------------------------------
# logistic


def logistic_objective(alpha, beta, concepts, references, lam, center=None) -> float:
    """Penalized log-likelihood sum_i log s(t_i) + sum_j log(1 - s(t_j)) - lam/2 |beta|^2.

    ``t = alpha + beta . (u - center)``; ``center=None`` means no shift.
    Uses ``log s(t) = -logaddexp(0, -t)`` so sigmoids are never formed.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    _, _, u, y = _stack(concepts, references, center)
    if beta.shape[0] != u.shape[1]:
        raise ShapeError(f"beta has dimension {beta.shape[0]}, data {u.shape[1]}")
    t = alpha + u @ beta
    loglik = np.sum(y * t - np.logaddexp(0.0, t))
    return float(loglik - 0.5 * lam * (beta @ beta))


def _logistic_parts(theta: np.ndarray, u: np.ndarray, y: np.ndarray, lam: float, hessian: bool = True):
    t = theta[0] + u @ theta[1:]
    p = expit(t)
    resid = y - p
    grad = np.empty_like(theta)
    grad[0] = resid.sum()
    grad[1:] = u.T @ resid - lam * theta[1:]
    if not hessian:
        return grad, None
    w = p * (1.0 - p)
    d1 = theta.shape[0]
    hess = np.empty((d1, d1))
    hess[0, 0] = -w.sum()
    cross = -(u.T @ w)
    hess[0, 1:] = cross
    hess[1:, 0] = cross
    hess[1:, 1:] = -(u.T * w) @ u - lam * np.eye(d1 - 1)
    return grad, 0.5 * (hess + hess.T)


def logistic_score_and_hessian(alpha, beta, concepts, references, lam, center=None):
    """Gradient over (alpha, beta) and the (d+1)x(d+1) Hessian of the penalized log-likelihood.

    Index 0 is the intercept. ``center`` follows :func:`logistic_objective`;
    pass the concept mean for the centered parameterization.
    """
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    _, _, u, y = _stack(concepts, references, center)
    if beta.shape[0] != u.shape[1]:
        raise ShapeError(f"beta has dimension {beta.shape[0]}, data {u.shape[1]}")
    theta = np.concatenate([[float(alpha)], beta])
    return _logistic_parts(theta, u, y, float(lam))


def _objective_from_theta(theta, u, y, lam):
    t = theta[0] + u @ theta[1:]
    return float(np.sum(y * t - np.logaddexp(0.0, t)) - 0.5 * lam * (theta[1:] @ theta[1:]))


def fit_logistic_penalized(concepts, references, opts: FitOptions = FitOptions(), seed=None) -> Cav:
    """Maximize the penalized logistic log-likelihood by damped Newton ascent.

    Stops once the gradient infinity-norm is at most ``opts.tolerance``.
    Raises :class:`SeparabilityError` when ``lam == 0`` and the data are
    separable (no finite maximizer), :class:`ConvergenceError` otherwise.
    """
    x = _points(concepts, "concepts")
    center = x.mean(axis=0) if opts.centering else np.zeros(x.shape[1])
    x, z, u, y = _stack(x, references, center)
    n, big_n = x.shape[0], z.shape[0]
    lam = float(opts.lam)

    theta = np.zeros(u.shape[1] + 1)
    theta[0] = math.log(n / big_n)
    obj = _objective_from_theta(theta, u, y, lam)
    gnorm = float("inf")
    for it in range(1, opts.max_iterations + 1):
        grad, hess = _logistic_parts(theta, u, y, lam)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= opts.tolerance:
            break
        if lam == 0.0 and _separates(theta, u, y):
            raise SeparabilityError("data are linearly separable and lambda=0", gnorm, it)
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = grad / max(1.0, float(np.max(np.abs(np.diag(hess)))))
        slope = float(grad @ step)
        if not slope > 0:
            step, slope = grad, float(grad @ grad)
        t = 1.0
        if slope < 1e-12 * max(1.0, abs(obj)):
            # objective gain is below rounding: take the pure Newton step
            cand = theta + step
            cand_obj = _objective_from_theta(cand, u, y, lam)
        else:
            while True:
                cand = theta + t * step
                cand_obj = _objective_from_theta(cand, u, y, lam)
                if cand_obj >= obj + 1e-4 * t * slope or t < 1e-14:
                    break
                t *= 0.5
            if t < 1e-14 and cand_obj < obj:
                raise ConvergenceError("line search failed", gnorm, it)
        theta, obj = cand, cand_obj
        if not np.all(np.isfinite(theta)):
            raise ConvergenceError("non-finite iterate", gnorm, it)
        if np.linalg.norm(theta[1:]) > DIVERGENCE_NORM:
            raise SeparabilityError(f"|beta| exceeded {DIVERGENCE_NORM:g}; data look separable", gnorm, it)
    else:
        grad, _ = _logistic_parts(theta, u, y, lam, hessian=False)
        gnorm = float(np.max(np.abs(grad)))
        if gnorm > opts.tolerance:
            raise ConvergenceError("no convergence within max_iterations", gnorm, opts.max_iterations)
        it = opts.max_iterations

    beta = theta[1:].copy()
    alpha_c = float(theta[0])
    return Cav(
        beta=beta,
        alpha=alpha_c - float(beta @ center),
        estimator="logistic",
        lam=lam,
        n_concept=n,
        n_reference=big_n,
        seed=seed,
        center=center,
        grad_norm=gnorm,
        iterations=it,
        objective=obj,
        a_n=big_n * math.exp(alpha_c),
    )


def _separates(theta, u, y) -> bool:
    t = theta[0] + u @ theta[1:]
    return bool(np.all(t[y == 1] > 0) and np.all(t[y == 0] < 0))


# ---------------------------------------------------------------------------
# hinge


def hinge_objective(alpha, beta, concepts, references, lam, center=None) -> float:
    """Average hinge loss over all n+N points plus lam/2 |beta|^2 (labels +1 / -1)."""
    beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
    _, _, u, y01 = _stack(concepts, references, center)
    y = 2.0 * y01 - 1.0
    margins = y * (u @ beta + alpha)
    return float(np.mean(np.maximum(0.0, 1.0 - margins)) + 0.5 * lam * (beta @ beta))


def _learning_rate(schedule, lam: float, eta0: float):
    if callable(schedule):
        return schedule
    if schedule == "pegasos":
        if lam <= 0:
            raise DomainError("the 1/(lambda t) schedule needs lambda > 0")
        return lambda t: 1.0 / (lam * t)
    if schedule == "constant":
        return lambda t: eta0
    if schedule == "invscaling":
        return lambda t: eta0 / math.sqrt(t)
    raise DomainError(f"unknown learning-rate schedule {schedule!r}")


@np.errstate(over="ignore", invalid="ignore")  # divergence is detected and reported below
def fit_hinge_sgd(
    concepts,
    references,
    opts: FitOptions = FitOptions(),
    epochs: int = 20,
    learning_rate="pegasos",
    eta0: float = 0.01,
    seed=0,
) -> Cav:
    """Minimize the penalized average hinge loss by per-sample SGD.

    Each epoch visits the points in a permutation drawn from ``seed``. The
    iterate with the lowest full objective among the epoch ends (and the
    origin, whose objective is exactly 1) is returned, so the result never
    does worse than the starting point.
    """
    if epochs < 1:
        raise DomainError("epochs must be >= 1")
    x = _points(concepts, "concepts")
    center = x.mean(axis=0) if opts.centering else np.zeros(x.shape[1])
    x, z, u, y01 = _stack(x, references, center)
    y = 2.0 * y01 - 1.0
    lam = float(opts.lam)
    eta = _learning_rate(learning_rate, lam, eta0)
    rng = np.random.default_rng(seed)

    def objective(a, b):
        return float(np.mean(np.maximum(0.0, 1.0 - y * (u @ b + a))) + 0.5 * lam * (b @ b))

    beta = np.zeros(u.shape[1])
    alpha = 0.0
    best = (objective(alpha, beta), alpha, beta.copy(), 0)
    step = 0
    for epoch in range(1, epochs + 1):
        for i in rng.permutation(u.shape[0]):
            step += 1
            lr = eta(step)
            ui, yi = u[i], y[i]
            violated = yi * (ui @ beta + alpha) < 1.0
            beta *= 1.0 - lr * lam
            if violated:
                beta += (lr * yi) * ui
                alpha += lr * yi
        if not (np.all(np.isfinite(beta)) and math.isfinite(alpha)):
            raise LearningRateError(f"non-finite iterate in epoch {epoch}; lower the learning rate")
        obj = objective(alpha, beta)
        if obj < best[0]:
            best = (obj, alpha, beta.copy(), epoch)

    obj, alpha_c, beta, _ = best
    margins = y * (u @ beta + alpha_c)
    active = margins < 1.0
    subgrad = np.concatenate([[-np.sum(y[active])], -(u[active].T @ y[active])]) / u.shape[0]
    subgrad[1:] += lam * beta
    return Cav(
        beta=beta,
        alpha=alpha_c - float(beta @ center),
        estimator="hinge",
        lam=lam,
        n_concept=x.shape[0],
        n_reference=z.shape[0],
        seed=seed,
        center=center,
        grad_norm=float(np.max(np.abs(subgrad))),
        iterations=step,
        objective=obj,
        a_n=z.shape[0] * math.exp(alpha_c) if alpha_c < 700 else math.inf,
    )


# ---------------------------------------------------------------------------
# difference of means


def fit_difference_of_means(concepts, references, seed=None) -> Cav:
    x = _points(concepts, "concepts")
    z = _points(references, "references")
    if x.shape[1] != z.shape[1]:
        raise ShapeError(f"concepts have dimension {x.shape[1]}, references {z.shape[1]}")
    return Cav(
        beta=x.mean(axis=0) - z.mean(axis=0),
        alpha=0.0,
        estimator="dom",
        lam=0.0,
        n_concept=x.shape[0],
        n_reference=z.shape[0],
        seed=seed,
    )


def fit_cav(estimator: str, concepts, references, opts: FitOptions = FitOptions(), seed=None, **hinge_kwargs) -> Cav:
    """Dispatch on the estimator tag."""
    if estimator == "logistic":
        return fit_logistic_penalized(concepts, references, opts, seed=seed)
    if estimator == "hinge":
        return fit_hinge_sgd(concepts, references, opts, seed=0 if seed is None else seed, **hinge_kwargs)
    if estimator == "dom":
        return fit_difference_of_means(concepts, references, seed=seed)
    raise DomainError(f"unknown estimator {estimator!r}; expected one of {ESTIMATORS}")
