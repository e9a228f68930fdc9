"""Computable versions of the asymptotic objects behind the CAV variance laws.

The large-N limits (beta_0, A_0, H_0) are not observable; they are proxied by
a reference logistic fit on many more references than any sweep uses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .cav_estimators import Cav, FitOptions, fit_logistic_penalized
from .errors import DomainError, InsufficientDataError, InvertibilityError, NonFiniteError, ShapeError
from .latent_model import ConceptSet, ReferenceSpec, as_points, repair_psd, sample_references

EXPONENT_CLAMP = 700.0
MAX_CONDITION = 1e12


# ---------------------------------------------------------------------------
# surround assumption


@dataclass(frozen=True)
class SurroundReport:
    epsilon: float
    num_directions: int
    min_cap_mass: float
    min_halfspace_mass: float
    min_positive_part_mean: float
    passed: bool
    worst_direction: np.ndarray | None = None


def _directions(d: int, count: int, seed) -> np.ndarray:
    eye = np.eye(d)
    rand = np.random.default_rng(seed).standard_normal((count, d))
    rand /= np.linalg.norm(rand, axis=1, keepdims=True)
    return np.vstack([eye, -eye, rand])


def check_surrounded_mean(concept_mean, references, epsilon: float, num_directions: int, seed=0) -> SurroundReport:
    """Empirical check that the references surround the concept mean.

    For every tested unit direction w the report takes the fraction of
    references with (z - xbar).w > epsilon (cap mass), the fraction with
    (z - xbar).w >= 0 (half-space mass) and the mean of the positive part of
    (z - xbar).w, and keeps the minimum of each over directions. The 2d signed
    coordinate axes are always tested in addition to ``num_directions`` random
    directions drawn uniformly on the sphere.
    """
    xbar = np.atleast_1d(np.asarray(concept_mean, dtype=np.float64))
    if xbar.ndim != 1 or xbar.shape[0] == 0:
        raise DomainError("concept mean must be a non-empty vector")
    if num_directions < 1:
        raise DomainError("num_directions must be >= 1")
    if epsilon <= 0:
        raise DomainError("epsilon must be > 0")
    z = as_points(references, dim=xbar.shape[0], name="references")
    if z.shape[0] == 0:
        raise DomainError("references are empty")

    dirs = _directions(xbar.shape[0], num_directions, seed)
    proj = (z - xbar) @ dirs.T
    cap = np.mean(proj > epsilon, axis=0)
    half = np.mean(proj >= 0.0, axis=0)
    pos = np.mean(np.maximum(proj, 0.0), axis=0)
    worst = int(np.argmin(cap))
    mins = (float(cap.min()), float(half.min()), float(pos.min()))
    return SurroundReport(
        epsilon=float(epsilon),
        num_directions=int(dirs.shape[0]),
        min_cap_mass=mins[0],
        min_halfspace_mass=mins[1],
        min_positive_part_mean=mins[2],
        passed=all(m > 0 for m in mins),
        worst_direction=dirs[worst],
    )


def surround_projection(concepts, references) -> dict[str, np.ndarray]:
    """Coordinates on the first two principal axes, centered on the concept mean.

    The axes are the top eigenvectors of the second-moment matrix of all
    points about the concept mean.
    """
    x = concepts.points if isinstance(concepts, ConceptSet) else as_points(concepts, name="concepts")
    z = as_points(references, dim=x.shape[1], name="references")
    xbar = x.mean(axis=0)
    both = np.vstack([x, z]) - xbar
    _, _, vt = np.linalg.svd(both, full_matrices=False)
    axes = vt[: min(2, vt.shape[0])]
    # fix the sign of each axis so output is reproducible across LAPACK builds
    signs = np.sign(axes[np.arange(axes.shape[0]), np.argmax(np.abs(axes), axis=1)])
    axes = axes * signs[:, None]
    return {"concepts": (x - xbar) @ axes.T, "references": (z - xbar) @ axes.T, "axes": axes}


# ---------------------------------------------------------------------------
# logistic sandwich


def _rho_exponent(z: np.ndarray, beta0: np.ndarray, alpha_n: float, xbar: np.ndarray) -> np.ndarray:
    expo = alpha_n - float(beta0 @ xbar) + z @ beta0
    if np.any(expo > EXPONENT_CLAMP) or not np.all(np.isfinite(expo)):
        raise NonFiniteError(f"rho exponent exceeds {EXPONENT_CLAMP:g}")
    low = expo < -EXPONENT_CLAMP
    if np.any(low):
        warnings.warn(f"{int(low.sum())} rho exponents clamped at -{EXPONENT_CLAMP:g}", RuntimeWarning, stacklevel=3)
        expo = np.maximum(expo, -EXPONENT_CLAMP)
    return expo


def rho_vectors(z, beta0, alpha_n: float, xbar) -> np.ndarray:
    """Score summands -exp(alpha_N - beta0.xbar) (z - xbar) exp(z.beta0), one row per z.

    ``alpha_n`` is the intercept in the parameterization centered on ``xbar``.
    """
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=np.float64))
    xbar = np.atleast_1d(np.asarray(xbar, dtype=np.float64))
    z = as_points(z, dim=beta0.shape[0], name="z")
    if xbar.shape != beta0.shape:
        raise ShapeError("beta0 and xbar dimensions differ")
    expo = _rho_exponent(z, beta0, float(alpha_n), xbar)
    return -np.exp(expo)[:, None] * (z - xbar)


def rho_vector(z, beta0, alpha_n: float, xbar) -> np.ndarray:
    return rho_vectors(np.atleast_1d(np.asarray(z, dtype=np.float64))[None, :], beta0, alpha_n, xbar)[0]


@dataclass(frozen=True)
class HessianEstimate:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    n_reference: int
    well_sampled: bool

    @property
    def limit_scale(self) -> np.ndarray:
        """N times the estimate, i.e. minus the beta-block Hessian itself.

        The sigmoid weights shrink like A_N / N, so ``matrix`` decays like 1/N;
        this rescaling is the quantity that settles as N grows.
        """
        return self.matrix * self.n_reference

    @property
    def condition_number(self) -> float:
        lo, hi = float(self.eigenvalues[0]), float(self.eigenvalues[-1])
        return math.inf if lo <= 0 else hi / lo


def estimate_limit_hessian(references, cav: Cav, lam: float | None = None, concepts=None) -> HessianEstimate:
    """-(1/N) times the beta-block Hessian of the penalized log-likelihood at the fit.

    Evaluated at the fitted centered intercept and ``cav.beta``. Only the
    reference terms and the penalty enter unless ``concepts`` is given; the
    concept terms vanish in the large-N limit.
    """
    lam = cav.lam if lam is None else float(lam)
    center = cav.center if cav.center is not None else np.zeros(cav.dimension)
    z = as_points(references, dim=cav.dimension, name="references") - center
    big_n = z.shape[0]
    t = cav.alpha_centered + z @ cav.beta
    p = expit(t)
    w = p * (1.0 - p)
    h = (z.T * w) @ z + lam * np.eye(cav.dimension)
    if concepts is not None:
        x = (concepts.points if isinstance(concepts, ConceptSet) else as_points(concepts)) - center
        px = expit(cav.alpha_centered + x @ cav.beta)
        h += (x.T * (px * (1.0 - px))) @ x
    h = h / big_n
    h = 0.5 * (h + h.T)
    if not np.all(np.isfinite(h)):
        raise NonFiniteError("limit Hessian estimate has non-finite entries")
    return HessianEstimate(h, np.linalg.eigvalsh(h), big_n, big_n >= cav.dimension)


def _clamped_psd(m: np.ndarray) -> np.ndarray:
    m = 0.5 * (m + m.T)
    evals, evecs = np.linalg.eigh(m)
    if np.all(evals >= 0):
        return m
    evals = np.where(evals < 0, 0.0, evals)
    out = (evecs * evals) @ evecs.T
    return 0.5 * (out + out.T)


def _checked_inverse(h: np.ndarray, what: str) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise ShapeError(f"{what} must be square")
    cond = np.linalg.cond(h)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise InvertibilityError(f"{what} is singular or ill-conditioned (condition number {cond:.3e})")
    return np.linalg.inv(h)


def logistic_sandwich_sigma(h0, rho_samples) -> tuple[np.ndarray, float]:
    """H0^-1 Cov(rho) H0^-T from a Hessian estimate and score-summand samples.

    ``h0`` may be a matrix or a :class:`HessianEstimate`. Cov uses divisor m-1.
    """
    h = h0.matrix if isinstance(h0, HessianEstimate) else np.asarray(h0, dtype=np.float64)
    h_inv = _checked_inverse(h, "H0")
    rho = as_points(rho_samples, dim=h.shape[0], name="rho samples")
    if rho.shape[0] < 2:
        raise DomainError("need at least two rho samples")
    cov = np.atleast_2d(np.cov(rho, rowvar=False, ddof=1))
    sigma = _clamped_psd(h_inv @ cov @ h_inv.T)
    return sigma, float(np.trace(sigma))


def sensitivity_asymptotic_variance(head_gradient, sigma) -> float:
    """grad . Sigma . grad, the limiting variance of sqrt(N) times the sensitivity error."""
    g = np.atleast_1d(np.asarray(head_gradient, dtype=np.float64))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape != (g.shape[0], g.shape[0]):
        raise ShapeError(f"gradient of dimension {g.shape[0]} against Sigma of shape {sigma.shape}")
    return max(0.0, float(g @ sigma @ g))


def dom_variance_closed_form(sigma_z, n_reference: int) -> float:
    """tr(Sigma_z) / N: exact total variance of the difference-of-means CAV."""
    if n_reference < 1:
        raise DomainError("N must be >= 1")
    sigma_z = np.atleast_2d(np.asarray(sigma_z, dtype=np.float64))
    return float(np.trace(repair_psd(sigma_z, "Sigma_z"))) / n_reference


# ---------------------------------------------------------------------------
# hinge sandwich


@dataclass(frozen=True)
class HingeSandwich:
    m_matrix: np.ndarray
    sigma_z: np.ndarray
    sandwich: np.ndarray
    density: float
    window_count: int


def epanechnikov(u: np.ndarray) -> np.ndarray:
    return np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)


def hinge_sandwich_sigma(
    references, beta0, lam: float, bandwidth: float, alpha0: float = 0.0, min_window: int = 30
) -> HingeSandwich:
    """M^-1 Sigma_Z M^-1 for the hinge-loss CAV.

    Sigma_Z is the sample covariance of z * 1{beta0.z + alpha0 > -1}. The
    density of the projection at -1 and the conditional second moment on the
    level set are estimated jointly with an Epanechnikov kernel of the given
    bandwidth: M = lam I + (1/(m h)) sum_k K((p_k + 1)/h) z_k z_k^T.
    """
    if bandwidth <= 0:
        raise DomainError("bandwidth must be > 0")
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=np.float64))
    z = as_points(references, dim=beta0.shape[0], name="references")
    m, d = z.shape
    proj = z @ beta0 + alpha0
    active = (proj > -1.0).astype(np.float64)
    sigma_z = np.atleast_2d(np.cov(z * active[:, None], rowvar=False, ddof=1))

    u = (proj + 1.0) / bandwidth
    window = int(np.count_nonzero(np.abs(u) <= 1.0))
    if window < min_window:
        raise InsufficientDataError(f"only {window} references within bandwidth of the level set (need {min_window})")
    k = epanechnikov(u)
    density = float(k.sum() / (m * bandwidth))
    m_matrix = lam * np.eye(d) + (z.T * k) @ z / (m * bandwidth)
    m_inv = _checked_inverse(m_matrix, "M")
    sandwich = _clamped_psd(m_inv @ sigma_z @ m_inv)
    return HingeSandwich(m_matrix, sigma_z, sandwich, density, window)


# ---------------------------------------------------------------------------
# end-to-end report


@dataclass(frozen=True)
class AsymptoticReport:
    beta0_ref: np.ndarray
    a0_estimate: float
    alpha0_centered: float
    h0: np.ndarray
    h0_eigenvalues: np.ndarray
    sigma: np.ndarray
    trace_sigma: float
    n_ref: int
    lam: float


def asymptotic_report(
    concepts: ConceptSet,
    reference: ReferenceSpec,
    lam: float = 1.0,
    n_ref: int = 100_000,
    seed=0,
    opts: FitOptions | None = None,
) -> AsymptoticReport:
    """Fit the large-N proxy and assemble H0, Sigma and tr(Sigma).

    The proxy fit's own references double as the rho samples, and both H0
    and rho use the proxy intercept, so the 1/N scalings cancel in Sigma.
    """
    opts = opts or FitOptions(lam=lam)
    z = sample_references(reference, n_ref, seed)
    ref = fit_logistic_penalized(concepts, z, opts, seed=seed)
    hess = estimate_limit_hessian(z, ref, lam=opts.lam)
    rho = rho_vectors(z, ref.beta, ref.alpha_centered, concepts.mean)
    sigma, trace = logistic_sandwich_sigma(hess, rho)
    return AsymptoticReport(
        beta0_ref=ref.beta,
        a0_estimate=float(ref.a_n),
        alpha0_centered=ref.alpha_centered,
        h0=hess.matrix,
        h0_eigenvalues=hess.eigenvalues,
        sigma=sigma,
        trace_sigma=trace,
        n_ref=n_ref,
        lam=float(opts.lam),
    )
