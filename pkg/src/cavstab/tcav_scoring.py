"""Sensitivity scores, TCAV scores, the sensitivity t-test and multi-run TCAV."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from ._seeding import child_seed
from .cav_estimators import Cav, FitOptions, fit_cav
from .errors import DomainError, ShapeError
from .latent_model import EvaluationSet, ScoringHead, as_points, head_gradients


@dataclass(frozen=True)
class TTestResult:
    statistic: float
    p_value: float
    degenerate: bool = False


@dataclass(frozen=True, eq=False)
class TcavResult:
    score: float
    per_run_scores: np.ndarray
    multi_run_mean: float
    p_value: float | None
    s: int
    n_per_subset: int
    discarded: int = 0
    cavs: tuple = ()


def _beta(cav) -> np.ndarray:
    return cav.beta if isinstance(cav, Cav) else np.atleast_1d(np.asarray(cav, dtype=np.float64))


def eval_gradients(head: ScoringHead, eval_set) -> np.ndarray:
    points = eval_set.points if isinstance(eval_set, EvaluationSet) else as_points(eval_set)
    return head_gradients(head, points)


def sensitivities_from_gradients(gradients: np.ndarray, cav) -> np.ndarray:
    beta = _beta(cav)
    if gradients.shape[1] != beta.shape[0]:
        raise ShapeError(f"gradients have dimension {gradients.shape[1]}, CAV {beta.shape[0]}")
    return gradients @ beta


def sensitivity_scores(head: ScoringHead, cav, eval_set) -> np.ndarray:
    """S(x) = grad g(x) . beta for every evaluation point, in evaluation-set order."""
    return sensitivities_from_gradients(eval_gradients(head, eval_set), cav)


def tcav_score(sensitivities) -> float:
    """Fraction of sensitivities strictly greater than zero; zeros count as non-positive."""
    s = np.asarray(sensitivities, dtype=np.float64).ravel()
    if s.size == 0:
        raise DomainError("TCAV score of an empty sensitivity vector")
    return float(np.count_nonzero(s > 0.0)) / s.size


def sensitivity_t_test(sensitivities) -> TTestResult:
    """Two-tailed one-sample t-test of mean zero.

    Constant samples are flagged ``degenerate``: p = 0 for a nonzero constant,
    p = 1 when every value is zero.
    """
    s = np.asarray(sensitivities, dtype=np.float64).ravel()
    if s.size < 2:
        raise DomainError("t-test needs at least two sensitivity values")
    mean = float(s.mean())
    if np.ptp(s) == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, True)
    # t is scale free; an exact power-of-two rescale keeps tiny or huge inputs from under/overflowing
    _, exp = np.frexp(np.max(np.abs(s)))
    s = np.ldexp(s, -int(exp))
    mean = float(s.mean())
    sd = float(s.std(ddof=1))
    t = mean / (sd / math.sqrt(s.size))
    p = 2.0 * float(stdtr(s.size - 1, -abs(t)))
    return TTestResult(t, min(1.0, max(0.0, p)), False)


def multi_run_tcav(
    concepts,
    reference_pool,
    s: int,
    head: ScoringHead | None,
    eval_set,
    estimator: str = "logistic",
    opts: FitOptions = FitOptions(),
    seed: int = 0,
    gradients: np.ndarray | None = None,
    keep_cavs: bool = False,
    **hinge_kwargs,
) -> TcavResult:
    """Average TCAV over ``s`` disjoint subsets of a shuffled reference pool.

    The pool is permuted once with ``seed`` and cut into ``s`` blocks of
    ``R // s`` points; the last ``R % s`` points of the permutation are dropped
    and reported in ``discarded``. ``gradients`` may be passed instead of
    ``head`` when the head gradients at the evaluation points are already known.

    ``p_value`` is the t-test on the per-point sensitivities under the average
    CAV (equivalently, the per-point mean over runs); it is ``None`` when the
    evaluation set has a single point.
    """
    pool = as_points(reference_pool, name="reference pool")
    big_r = pool.shape[0]
    if s < 1:
        raise DomainError(f"s must be >= 1, got {s}")
    if s > big_r:
        raise DomainError(f"s={s} exceeds the pool size R={big_r}")
    grads = gradients if gradients is not None else eval_gradients(head, eval_set)

    n_per = big_r // s
    discarded = big_r - n_per * s
    perm = np.random.default_rng(seed).permutation(big_r)
    blocks = perm[: n_per * s].reshape(s, n_per)

    scores = np.empty(s)
    sens_sum = np.zeros(grads.shape[0])
    cavs = []
    for j in range(s):
        cav = fit_cav(estimator, concepts, pool[blocks[j]], opts, seed=child_seed(seed, j), **hinge_kwargs)
        sens = sensitivities_from_gradients(grads, cav)
        scores[j] = tcav_score(sens)
        sens_sum += sens
        if keep_cavs:
            cavs.append(cav)

    mean = float(scores.mean())
    p_value = sensitivity_t_test(sens_sum / s).p_value if grads.shape[0] >= 2 else None
    return TcavResult(
        score=mean,
        per_run_scores=scores,
        multi_run_mean=mean,
        p_value=p_value,
        s=s,
        n_per_subset=n_per,
        discarded=discarded,
        cavs=tuple(cavs),
    )
