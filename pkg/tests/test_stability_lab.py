import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cavstab.cav_estimators import fit_difference_of_means
from cavstab.errors import ConfigurationError, DomainError
from cavstab.latent_model import EmpiricalReference, Scenario, make_borderline_scenario, make_gaussian_scenario
from cavstab.stability_lab import (
    SweepConfig,
    VariancePoint,
    cav_variance_trace,
    fit_inverse_curve,
    run_multirun_sweep,
    run_sweep,
    run_sweep_all,
)
from cavstab.theory_checks import dom_variance_closed_form


def test_identical_cavs_have_zero_variance():
    assert cav_variance_trace([np.ones(3)] * 5) == 0.0


def test_two_point_variance():
    assert cav_variance_trace([np.array([0.0]), np.array([2.0])]) == 2.0


def test_trace_matches_covariance_oracle():
    betas = np.random.default_rng(0).standard_normal((10, 4))
    mean = betas.mean(axis=0)
    cov = sum(np.outer(b - mean, b - mean) for b in betas) / 9
    assert cav_variance_trace(betas) == pytest.approx(np.trace(cov), abs=1e-12)


def test_variance_needs_two_cavs():
    with pytest.raises(DomainError):
        cav_variance_trace([np.ones(2)])


def test_dom_sweep_tracks_closed_form():
    sigma = np.array([1.0, 2.0, 3.0, 4.0])
    sc = make_gaussian_scenario(4, covariance=sigma, seed=0)
    cfg = SweepConfig(estimator="dom", n_grid=(50, 100, 200), m_sets=10, r_runs=20, sampling="fresh", seed=3)
    for p in run_sweep(cfg, sc):
        assert p.mean_variance == pytest.approx(dom_variance_closed_form(np.diag(sigma), p.x), rel=0.15)


def test_single_point_pool_has_no_variance():
    base = make_gaussian_scenario(2, seed=0)
    sc = Scenario(base.concepts, EmpiricalReference(np.ones((1, 2))), base.head, base.eval_set)
    cfg = SweepConfig(estimator="logistic", n_grid=(5, 10), m_sets=3, r_runs=2)
    points = run_sweep(cfg, sc)
    assert all(p.mean_variance == 0.0 for p in points)


def test_sweep_is_reproducible_and_thread_independent():
    sc = make_gaussian_scenario(3, seed=2)
    cfg = SweepConfig(estimator="logistic", n_grid=(20, 40), m_sets=4, r_runs=3, seed=8)
    a, b = run_sweep_all(cfg, sc), run_sweep_all(cfg, sc, threads=4)
    assert a == b


def test_sensitivity_targets():
    sc = make_gaussian_scenario(3, seed=2)
    cfg = SweepConfig(target="sensitivity_variance", estimator="dom", n_grid=(20, 80), m_sets=5, r_runs=4, seed=1)
    arith = run_sweep(cfg, sc)
    geo = run_sweep(SweepConfig(**{**cfg.__dict__, "aggregator": "geometric"}), sc)
    # a linear head has one gradient, so both means agree
    for a, g in zip(arith, geo):
        assert a.mean_variance == pytest.approx(g.mean_variance, rel=1e-10)


def test_failed_fits_are_counted():
    base = make_gaussian_scenario(1, seed=0)
    sep = Scenario(base.concepts, EmpiricalReference(np.full((1, 1), -50.0)), base.head, base.eval_set)
    from cavstab.cav_estimators import FitOptions

    cfg = SweepConfig(estimator="logistic", fit=FitOptions(lam=0.0), n_grid=(3,), m_sets=2, r_runs=2)
    (p,) = run_sweep(cfg, sep)
    assert p.failures == 4 and not p.valid and math.isnan(p.mean_variance)


def test_multirun_single_subset_is_single_run_variance():
    sc = make_borderline_scenario(4, 20, seed=0)
    cfg = SweepConfig(target="multirun_variance", estimator="dom", total_references=200, s_grid=(1,), r_runs=6,
                      e_outer=2, seed=4)
    (p,) = run_multirun_sweep(cfg, sc)
    assert len(p.per_run) == 2 and p.mean_variance >= 0
    assert run_multirun_sweep(cfg, sc) == [p]


def test_config_validation():
    with pytest.raises(ConfigurationError):
        SweepConfig(n_grid=(10, 5))
    with pytest.raises(ConfigurationError):
        SweepConfig(m_sets=1)
    with pytest.raises(ConfigurationError):
        SweepConfig(target="multirun_variance", s_grid=(1, 4000))
    with pytest.raises(ConfigurationError):
        run_sweep(SweepConfig(target="multirun_variance"), make_gaussian_scenario(2))


def test_curve_fit_noiseless():
    ns = [10, 20, 40]
    fit = fit_inverse_curve([(n, 2 / n + 0.5) for n in ns])
    assert fit.a == pytest.approx(2, abs=1e-9) and fit.b == pytest.approx(0.5, abs=1e-9)
    assert fit.residual_rms < 1e-12


def test_curve_fit_flat():
    fit = fit_inverse_curve([(n, 0.3) for n in (10, 20, 40)])
    assert abs(fit.a) <= 1e-9 and fit.b == pytest.approx(0.3, abs=1e-9)


def test_curve_fit_pure_power_law_slope():
    fit = fit_inverse_curve([(n, 5 / n) for n in (10, 20, 40, 80)])
    assert fit.loglog_slope == pytest.approx(-1.0, abs=1e-9)


def test_curve_fit_excludes_nonpositive_from_slope():
    pts = [VariancePoint(10, 0.5, 0.0, ()), VariancePoint(20, 0.25, 0.0, ()), VariancePoint(40, 0.0, 0.0, ())]
    fit = fit_inverse_curve(pts)
    assert fit.excluded_nonpositive == 1 and fit.points_used == 3
    assert fit.loglog_slope == pytest.approx(-1.0)


def test_curve_fit_all_zero_has_nan_slope():
    fit = fit_inverse_curve([(10, 0.0), (20, 0.0)])
    assert fit.a == 0.0 and fit.b == 0.0 and math.isnan(fit.loglog_slope)


def test_curve_fit_needs_two_abscissae():
    with pytest.raises(DomainError):
        fit_inverse_curve([(10, 1.0), (10, 2.0)])


@given(st.floats(-100, 100), st.floats(-10, 10), st.lists(st.integers(1, 10_000), min_size=2, max_size=8, unique=True))
def test_curve_fit_recovers_any_exact_curve(a, b, ns):
    fit = fit_inverse_curve([(n, a / n + b) for n in ns])
    assert fit.a == pytest.approx(a, abs=1e-6 * max(1, abs(a), abs(b)) * max(ns))
    assert fit.b == pytest.approx(b, abs=1e-6 * max(1, abs(a), abs(b)))


@given(st.integers(0, 1000))
def test_dom_variance_is_translation_invariant(seed):
    rng = np.random.default_rng(seed)
    x, zs = rng.standard_normal((5, 2)), [rng.standard_normal((30, 2)) for _ in range(4)]
    shift = rng.standard_normal(2) * 100
    a = cav_variance_trace([fit_difference_of_means(x, z) for z in zs])
    b = cav_variance_trace([fit_difference_of_means(x + shift, z + shift) for z in zs])
    assert a == pytest.approx(b, rel=1e-8, abs=1e-10)
