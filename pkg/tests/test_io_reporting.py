import math
import os

import numpy as np
import pytest

from cavstab.errors import ConfigurationError, DomainError, IngestionError
from cavstab.io_reporting.config import ExperimentConfig, load_config, parse_config_text
from cavstab.io_reporting.embeddings import EmbeddingFile, load_embedding_matrix, write_embedding_matrix
from cavstab.io_reporting.plotting import PlotAxes, render_variance_plot
from cavstab.io_reporting.results import (
    CURVE_COLUMNS,
    TCAV_COLUMNS,
    VARIANCE_COLUMNS,
    cav_table,
    curve_table,
    read_curve_table,
    read_variance_table,
    tcav_table,
    variance_table,
)
from cavstab.cav_estimators import fit_difference_of_means
from cavstab.stability_lab import CurveFit, VariancePoint
from cavstab.tcav_scoring import TcavResult

# -- embeddings ------------------------------------------------------------


def test_csv_parse(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("f0,f1\n1,2\n3,4\n")
    assert np.array_equal(load_embedding_matrix(str(p)), [[1.0, 2.0], [3.0, 4.0]])


def test_raw_round_trip_is_bit_identical(tmp_path):
    m = np.random.default_rng(0).standard_normal((100, 8))
    p = str(tmp_path / "m.f64")
    write_embedding_matrix(p, m, "raw-f64-le")
    assert os.path.getsize(p) == 100 * 8 * 8
    assert load_embedding_matrix(EmbeddingFile(p, "raw-f64-le", 8)).tobytes() == m.tobytes()


def test_csv_round_trip_is_exact(tmp_path):
    m = np.random.default_rng(1).standard_normal((20, 3)) * 1e-7
    p = str(tmp_path / "m.csv")
    write_embedding_matrix(p, m)
    assert np.array_equal(load_embedding_matrix(p), m)


@pytest.mark.parametrize("body, row", [("f0,f1\n1,2\nnan,4\n", 2), ("f0,f1\n1,2\n3\n", 2), ("f0,f1\n1,x\n", 1)])
def test_csv_errors_name_the_row(tmp_path, body, row):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(IngestionError) as info:
        load_embedding_matrix(str(p))
    assert info.value.row == row and f"row {row}" in str(info.value)


def test_csv_header_and_dimension_checks(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(IngestionError):
        load_embedding_matrix(str(p))
    p.write_text("f0,f1\n1,2\n")
    with pytest.raises(IngestionError):
        load_embedding_matrix(str(p), dimension=3)


def test_raw_length_must_match_dimension(tmp_path):
    p = tmp_path / "r.f64"
    np.arange(5, dtype="<f8").tofile(p)
    with pytest.raises(IngestionError):
        load_embedding_matrix(EmbeddingFile(str(p), "raw", 2))
    with pytest.raises(IngestionError):
        EmbeddingFile(str(p), "raw")


def test_raw_non_finite_row(tmp_path):
    p = str(tmp_path / "r.f64")
    m = np.zeros((3, 2))
    m[2, 1] = np.inf
    write_embedding_matrix(p, m, "raw")
    with pytest.raises(IngestionError) as info:
        load_embedding_matrix(p, "raw", 2)
    assert info.value.row == 3


# -- config ----------------------------------------------------------------


def test_defaults_validate():
    cfg = ExperimentConfig()
    assert cfg["estimator"]["name"] == "logistic" and cfg.sweep_config().m_sets == 10


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigurationError, match="unknown key"):
        parse_config_text("[sweep]\nm = 3\n")
    with pytest.raises(ConfigurationError, match="unknown section"):
        parse_config_text("[plots]\nx = 1\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigurationError):
        parse_config_text("[sweep]\nn_grid = 10, 5\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("[estimator]\nname = svm\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("[estimator]\nlam = -1\n")


def test_missing_config_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.ini")
    with pytest.raises(ConfigurationError, match="nope.ini"):
        load_config(missing)


def test_synthetic_xor_files(tmp_path):
    with pytest.raises(ConfigurationError):
        parse_config_text("[scenario]\nkind = gaussian\nconcepts_path = x.csv\n")
    with pytest.raises(ConfigurationError):
        parse_config_text("[scenario]\nkind = files\nconcepts_path = x.csv\n", str(tmp_path))


def test_snapshot_round_trip():
    cfg = parse_config_text("[scenario]\nd = 3\n[sweep]\nn_grid = 5, 10\nseed = 18446744073709551615\n")
    again = parse_config_text(cfg.to_ini())
    assert again.to_ini() == cfg.to_ini()
    assert again.digest("sweep") == cfg.digest("sweep") != cfg.digest("multirun")


def test_files_scenario(tmp_path):
    rng = np.random.default_rng(0)
    for name, m in (("c", rng.standard_normal((5, 3))), ("r", rng.standard_normal((50, 3))),
                    ("e", rng.standard_normal((7, 3))), ("w", rng.standard_normal((1, 3)))):
        write_embedding_matrix(str(tmp_path / f"{name}.csv"), m)
    text = ("[scenario]\nkind = files\nconcepts_path = c.csv\nreferences_path = r.csv\n"
            "eval_path = e.csv\nhead_weights_path = w.csv\n")
    (tmp_path / "cfg.ini").write_text(text)
    sc = load_config(str(tmp_path / "cfg.ini")).build_scenario()
    assert len(sc.concepts) == 5 and sc.reference.pool.shape == (50, 3) and len(sc.eval_set) == 7


# -- tables ----------------------------------------------------------------


def test_golden_column_order():
    assert VARIANCE_COLUMNS == ("target", "estimator", "N_or_s", "run", "mean_variance", "spread", "m", "r",
                                "lambda", "seed", "failures", "manifest_id")
    assert CURVE_COLUMNS == ("target", "a", "b", "residual_rms", "loglog_slope", "points_used", "manifest_id")
    assert TCAV_COLUMNS == ("s", "N_per_subset", "run_index", "T_j", "T_multi", "p_value", "discarded_samples",
                            "manifest_id")


def test_golden_variance_table():
    pts = [VariancePoint(10, 0.25, 0.05, (0.2, 0.3)), VariancePoint(20, 0.1, 0.0, (0.1, 0.1), failures=1)]
    text = variance_table("cav_variance", "dom", pts, 10, 2, 1.0, 7, "abc")
    assert text == (
        "target,estimator,N_or_s,run,mean_variance,spread,m,r,lambda,seed,failures,manifest_id\n"
        "cav_variance,dom,10,0,0.2,,10,2,1.0,7,,abc\n"
        "cav_variance,dom,10,1,0.3,,10,2,1.0,7,,abc\n"
        "cav_variance,dom,10,all,0.25,0.05,10,2,1.0,7,0,abc\n"
        "cav_variance,dom,20,0,0.1,,10,2,1.0,7,,abc\n"
        "cav_variance,dom,20,1,0.1,,10,2,1.0,7,,abc\n"
        "cav_variance,dom,20,all,0.1,0.0,10,2,1.0,7,1,abc\n"
    )


def test_variance_table_reads_back(tmp_path):
    x = 1 / 3
    pts = [VariancePoint(10, x, x / 7, (x,)), VariancePoint(20, x / 2, 0.0, (x / 2,))]
    p = tmp_path / "v.csv"
    p.write_text(variance_table("t", "dom", pts, 2, 1, 0.0, 0, "id"))
    back = read_variance_table(str(p))["t"]
    assert [(q.x, q.mean_variance, q.spread) for q in back] == [(q.x, q.mean_variance, q.spread) for q in pts]


def test_curve_table_reads_back(tmp_path):
    fit = CurveFit(7.71, 0.0999, 1e-3, -0.9, 6)
    p = tmp_path / "c.csv"
    p.write_text(curve_table({"cav_variance": fit}, "id"))
    assert read_curve_table(str(p))["cav_variance"] == fit


def test_cav_and_tcav_tables():
    cav = fit_difference_of_means([[2.0, 0.0]], [[0.0, 2.0]], seed=3)
    assert cav_table([cav], "id").splitlines() == [
        "estimator,lambda,n,N,seed,alpha,beta_0,beta_1,manifest_id",
        "dom,0.0,1,1,3,0.0,2.0,-2.0,id",
    ]
    res = TcavResult(0.5, np.array([0.4, 0.6]), 0.5, 0.01, 2, 10, 1)
    lines = tcav_table(res, "id").splitlines()
    assert lines[1] == "2,10,0,0.4,0.5,0.01,1,id" and len(lines) == 3


def test_bare_variance_table(tmp_path):
    p = tmp_path / "bare.csv"
    p.write_text("N_or_s,mean_variance\n10,0.7\n20,0.6\n")
    assert [q.x for q in read_variance_table(str(p))["variance"]] == [10, 20]
    p.write_text("N,y\n1,2\n")
    with pytest.raises(IngestionError):
        read_variance_table(str(p))


# -- plots -----------------------------------------------------------------


def _points():
    return [VariancePoint(n, 2 / n + 0.01, 0.2 / n, ()) for n in (10, 20, 50, 100)]


def test_single_point_plot():
    svg = render_variance_plot([VariancePoint(10, 0.5, 0.1, ())])
    assert svg.startswith("<svg") and svg.count("<circle") == 1


def test_plot_is_deterministic():
    fit = CurveFit(2.0, 0.01, 0.0, -1.0, 4)
    assert render_variance_plot(_points(), fit) == render_variance_plot(_points(), fit)


def test_legend_format():
    svg = render_variance_plot(_points(), CurveFit(7.71, 0.0999, 0.0, -1.0, 4))
    assert "a=7.71, b=0.0999" in svg
    assert 'stroke-dasharray="6 4"' in svg


def test_all_clipped_warns():
    pts = [VariancePoint(10, 0.0, 0.0, ()), VariancePoint(20, 0.0, 0.0, ())]
    svg = render_variance_plot(pts, axes=PlotAxes(clip_floor=1e-9))
    assert "warning: all points at or below clip floor" in svg
    assert "warning" not in render_variance_plot(_points())


def test_linear_axes_and_empty_input():
    svg = render_variance_plot(_points(), axes=PlotAxes(log_x=False, log_y=False))
    assert svg.count("<circle") == 4
    with pytest.raises(DomainError):
        render_variance_plot([VariancePoint(10, math.nan, 0.0, ())])
