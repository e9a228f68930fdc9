"""Synthetic latent spaces: reference distributions, concept sets, scoring heads.

Points are carried as float64 arrays; a set of points is a 2-D array with one
row per point. Every generator takes an explicit seed and is a pure function
of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError, DomainError, ShapeError

PSD_REPAIR_TOL = 1e-10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_points(points, dim: int | None = None, name: str = "points") -> np.ndarray:
    """Coerce to a finite (count, d) float array; a single vector becomes one row."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ShapeError(f"{name}: expected dimension {dim}, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite entries")
    return arr


def repair_psd(cov, name: str = "covariance") -> np.ndarray:
    """Symmetrize and clamp tiny negative eigenvalues; reject anything worse."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ShapeError(f"{name}: must be square, got {cov.shape}")
    scale = max(1.0, float(np.max(np.abs(cov)))) if cov.size else 1.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-9 * scale:
        raise ConfigurationError(f"{name}: not symmetric")
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    if evals.size and evals[0] < -PSD_REPAIR_TOL:
        raise ConfigurationError(f"{name}: not positive semidefinite (min eigenvalue {evals[0]:.3e})")
    if evals.size and evals[0] < 0:
        evals = np.clip(evals, 0.0, None)
        cov = (evecs * evals) @ evecs.T
        cov = 0.5 * (cov + cov.T)
    return cov


# ---------------------------------------------------------------------------
# reference distributions


@dataclass(frozen=True, eq=False)
class GaussianReference:
    mean: np.ndarray
    covariance: np.ndarray
    _factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        if mean.ndim != 1 or not np.all(np.isfinite(mean)):
            raise ConfigurationError("gaussian mean must be a finite vector")
        cov = repair_psd(self.covariance)
        if cov.shape[0] != mean.shape[0]:
            raise ShapeError(f"mean has dimension {mean.shape[0]}, covariance {cov.shape}")
        evals, evecs = np.linalg.eigh(cov)
        factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "covariance", _frozen(cov))
        object.__setattr__(self, "_factor", _frozen(factor))

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    @property
    def population_mean(self) -> np.ndarray:
        return self.mean

    @property
    def population_covariance(self) -> np.ndarray:
        return self.covariance

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal((count, self.dimension))
        return self.mean + noise @ self._factor.T


@dataclass(frozen=True, eq=False)
class MixtureReference:
    weights: np.ndarray
    components: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        comps = tuple(self.components)
        if w.ndim != 1 or len(comps) != w.shape[0] or not comps:
            raise ConfigurationError("mixture needs one weight per component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"mixture weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        dims = {c.dimension for c in comps}
        if len(dims) != 1:
            raise ShapeError("mixture components disagree on dimension")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "components", comps)

    @property
    def dimension(self) -> int:
        return self.components[0].dimension

    @property
    def population_mean(self) -> np.ndarray:
        return sum(w * c.mean for w, c in zip(self.weights, self.components))

    @property
    def population_covariance(self) -> np.ndarray:
        mu = self.population_mean
        cov = np.zeros((self.dimension, self.dimension))
        for w, c in zip(self.weights, self.components):
            diff = c.mean - mu
            cov += w * (c.covariance + np.outer(diff, diff))
        return cov

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        labels = rng.choice(len(self.components), size=count, p=self.weights)
        out = np.empty((count, self.dimension))
        for k, comp in enumerate(self.components):
            idx = np.flatnonzero(labels == k)
            if idx.size:
                out[idx] = comp.draw(idx.size, rng)
        return out


@dataclass(frozen=True, eq=False)
class EmpiricalReference:
    """A finite pool; draws are uniform with replacement."""

    pool: np.ndarray

    def __post_init__(self):
        pool = np.asarray(self.pool, dtype=np.float64)
        if pool.size == 0:
            raise ConfigurationError("empirical reference pool is empty")
        object.__setattr__(self, "pool", _frozen(as_points(pool, name="reference pool")))

    @property
    def dimension(self) -> int:
        return self.pool.shape[1]

    @property
    def population_mean(self) -> np.ndarray:
        return self.pool.mean(axis=0)

    @property
    def population_covariance(self) -> np.ndarray:
        return np.atleast_2d(np.cov(self.pool, rowvar=False, ddof=0))

    def draw(self, count: int, rng: np.random.Generator) -> np.ndarray:
        idx = rng.integers(0, self.pool.shape[0], size=count)
        return self.pool[idx]


ReferenceSpec = Union[GaussianReference, MixtureReference, EmpiricalReference]


def sample_references(spec: ReferenceSpec, count: int, seed) -> np.ndarray:
    """Draw ``count`` reference points; identical output for identical (spec, count, seed)."""
    if count < 1:
        raise DomainError(f"count must be >= 1, got {count}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return spec.draw(int(count), rng)


# ---------------------------------------------------------------------------
# concept and evaluation sets


@dataclass(frozen=True, eq=False)
class ConceptSet:
    points: np.ndarray
    mean: np.ndarray = field(init=False)

    def __post_init__(self):
        pts = as_points(self.points, name="concept points")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "mean", _frozen(pts.mean(axis=0)))

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True, eq=False)
class EvaluationSet:
    points: np.ndarray

    def __post_init__(self):
        pts = as_points(self.points, name="evaluation points")
        if pts.shape[0] == 0:
            raise DomainError("evaluation set is empty")
        object.__setattr__(self, "points", _frozen(pts))

    @property
    def dimension(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.points.shape[0]


# ---------------------------------------------------------------------------
# scoring heads


@dataclass(frozen=True, eq=False)
class LinearHead:
    weights: np.ndarray
    bias: float = 0.0
    class_index: int = 0

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        if w.ndim != 1 or not np.all(np.isfinite(w)):
            raise ConfigurationError("linear head weights must be a finite vector")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", float(self.bias))

    kind = "linear"

    @property
    def dimension(self) -> int:
        return self.weights.shape[0]

    def values(self, points: np.ndarray) -> np.ndarray:
        return points @ self.weights + self.bias

    def gradients(self, points: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.weights, points.shape).copy()


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda u: 1.0 - np.tanh(u) ** 2),
    "softplus": (lambda u: np.logaddexp(0.0, u), expit),
}


@dataclass(frozen=True, eq=False)
class MLPHead:
    """g(v) = w_out . act(w_in v + b_in) + b_out with a smooth activation."""

    w_in: np.ndarray
    b_in: np.ndarray
    w_out: np.ndarray
    b_out: float = 0.0
    activation: str = "tanh"
    class_index: int = 0

    def __post_init__(self):
        w_in = np.atleast_2d(np.asarray(self.w_in, dtype=np.float64))
        b_in = np.atleast_1d(np.asarray(self.b_in, dtype=np.float64))
        w_out = np.atleast_1d(np.asarray(self.w_out, dtype=np.float64))
        if not (b_in.shape == (w_in.shape[0],) and w_out.shape == (w_in.shape[0],)):
            raise ShapeError("mlp head: hidden sizes of w_in, b_in, w_out disagree")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        for name, arr in (("w_in", w_in), ("b_in", b_in), ("w_out", w_out)):
            if not np.all(np.isfinite(arr)):
                raise ConfigurationError(f"mlp head: non-finite {name}")
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "b_out", float(self.b_out))

    kind = "mlp"

    @property
    def dimension(self) -> int:
        return self.w_in.shape[1]

    def values(self, points: np.ndarray) -> np.ndarray:
        act, _ = _ACTIVATIONS[self.activation]
        return act(points @ self.w_in.T + self.b_in) @ self.w_out + self.b_out

    def gradients(self, points: np.ndarray) -> np.ndarray:
        _, dact = _ACTIVATIONS[self.activation]
        pre = points @ self.w_in.T + self.b_in
        return (dact(pre) * self.w_out) @ self.w_in


ScoringHead = Union[LinearHead, MLPHead]


def head_value_and_gradient(head: ScoringHead, v) -> tuple[float, np.ndarray]:
    """Logit of ``head`` at a single latent point and its gradient."""
    pt = as_points(v, name="latent point")
    if pt.shape[0] != 1:
        raise ShapeError("expected a single latent point")
    if pt.shape[1] != head.dimension:
        raise ShapeError(f"point has dimension {pt.shape[1]}, head expects {head.dimension}")
    return float(head.values(pt)[0]), head.gradients(pt)[0]


def head_gradients(head: ScoringHead, points: np.ndarray) -> np.ndarray:
    points = as_points(points)
    if points.shape[1] != head.dimension:
        raise ShapeError(f"points have dimension {points.shape[1]}, head expects {head.dimension}")
    return head.gradients(points)


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class Scenario:
    concepts: ConceptSet
    reference: ReferenceSpec
    head: ScoringHead
    eval_set: EvaluationSet
    name: str = "custom"
    info: dict = field(default_factory=dict)

    @property
    def dimension(self) -> int:
        return self.concepts.dimension


def make_gaussian_scenario(
    d: int,
    covariance=None,
    n_concept: int = 20,
    concept_shift: float = 1.0,
    concept_scale: float = 0.5,
    n_eval: int = 50,
    seed=0,
) -> Scenario:
    """Gaussian F0 at the origin, concepts shifted along a random unit direction, linear head."""
    if d < 1:
        raise DomainError("d must be >= 1")
    cov = np.eye(d) if covariance is None else np.asarray(covariance, dtype=np.float64)
    if cov.ndim == 1:
        cov = np.diag(cov)
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    concepts = concept_shift * u + concept_scale * rng.standard_normal((n_concept, d))
    w = rng.standard_normal(d)
    eval_pts = rng.standard_normal((n_eval, d))
    return Scenario(
        concepts=ConceptSet(concepts),
        reference=GaussianReference(np.zeros(d), cov),
        head=LinearHead(w),
        eval_set=EvaluationSet(eval_pts),
        name="gaussian",
        info={"concept_direction": u},
    )


FAR_MIN_COSINE = 0.6


def gradient_cosines(head: ScoringHead, points: np.ndarray, direction: np.ndarray) -> np.ndarray:
    grads = head_gradients(head, points)
    return grads @ direction / (np.linalg.norm(grads, axis=1) * np.linalg.norm(direction))


def make_borderline_scenario(
    d: int,
    n_eval: int,
    offset: float = 0.0,
    seed=0,
    n_concept: int = 20,
    hidden: int | None = None,
    concept_shift: float = 2.0,
) -> Scenario:
    """Scenario whose evaluation gradients are nearly orthogonal to the population CAV.

    F0 is a standard gaussian at the origin, so the population difference-of-means
    direction is the concept mean itself. The head is a tanh MLP whose input
    weights are projected off that direction and then tilted back along it by a
    scalar. Evaluation points lie in the orthogonal complement, so the tilt leaves
    pre-activations untouched and every gradient cosine is a monotone function of
    the tilt; the tilt is chosen so that the largest cosine equals ``offset``.

    ``offset=math.inf`` instead tilts until every cosine is at least
    ``FAR_MIN_COSINE``, which gives a far-from-boundary scenario.
    """
    if d < 2:
        raise DomainError("borderline scenarios need d >= 2")
    if n_eval < 1:
        raise DomainError("n_eval must be >= 1")
    far = math.isinf(offset)
    if not far and not (0.0 <= offset < 1.0):
        raise DomainError(f"offset must lie in [0, 1) or be inf, got {offset}")
    hidden = hidden or max(8, 2 * d)
    rng = np.random.default_rng(seed)

    u = rng.standard_normal(d)
    u /= np.linalg.norm(u)
    concepts = ConceptSet(concept_shift * u + 0.5 * rng.standard_normal((n_concept, d)))
    beta_star = concepts.mean.copy()
    b_hat = beta_star / np.linalg.norm(beta_star)

    raw = rng.standard_normal((hidden, d)) / math.sqrt(d)
    w_perp = raw - np.outer(raw @ b_hat, b_hat)
    b_in = 0.5 * rng.standard_normal(hidden)
    w_out = np.abs(rng.standard_normal(hidden)) + 0.1
    tilt_dir = np.abs(rng.standard_normal(hidden)) + 0.1

    eval_pts = rng.standard_normal((n_eval, d))
    eval_pts -= np.outer(eval_pts @ b_hat, b_hat)

    # a_p = w_out * tanh'(w_perp x_p + b_in) is unaffected by the tilt
    pre = eval_pts @ w_perp.T + b_in
    act_grad = (1.0 - np.tanh(pre) ** 2) * w_out
    perp_norm = np.linalg.norm(act_grad @ w_perp, axis=1)
    along = act_grad @ tilt_dir

    def tilt_for(cosine: float) -> np.ndarray:
        return cosine * perp_norm / (along * math.sqrt(1.0 - cosine**2))

    if far:
        tilt = float(np.max(tilt_for(FAR_MIN_COSINE)))
    elif offset == 0.0:
        tilt = 0.0
    else:
        tilt = float(np.min(tilt_for(offset)))

    head = MLPHead(w_perp + tilt * np.outer(tilt_dir, b_hat), b_in, w_out, 0.0, "tanh")
    return Scenario(
        concepts=concepts,
        reference=GaussianReference(np.zeros(d), np.eye(d)),
        head=head,
        eval_set=EvaluationSet(eval_pts),
        name="far" if far else "borderline",
        info={"population_direction": beta_star, "tilt": tilt, "offset": offset},
    )
