"""Command-line entry point: ``cavstab <subcommand> [flags]``.

Every subcommand writes into ``--out`` a ``config.ini`` snapshot of the
effective settings (file values overridden by flags), its result tables and
a ``manifest.json``. Rerunning the same subcommand with ``--config
<out>/config.ini`` reproduces the tables and plots byte for byte.

Exit codes: 0 success, 1 invalid input or usage, 2 a computation failed.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import __version__
from ._seeding import child_seed
from .cav_estimators import ESTIMATORS, fit_cav
from .errors import ComputationError, ConfigurationError, ValidationError
from .io_reporting.config import ExperimentConfig, load_config
from .io_reporting.embeddings import write_embedding_matrix
from .io_reporting.plotting import PlotAxes, render_variance_plot
from .io_reporting.results import (
    OutputDir,
    cav_table,
    curve_table,
    key_value_table,
    read_curve_table,
    read_variance_table,
    tcav_table,
    variance_table,
)
from .latent_model import EmpiricalReference, LinearHead, Scenario, sample_references
from .stability_lab import AGGREGATORS, SAMPLING_MODES, TARGETS, fit_inverse_curve, run_multirun_sweep, run_sweep, sweep_key
from .tcav_scoring import multi_run_tcav
from .theory_checks import asymptotic_report, check_surrounded_mean, surround_projection

log = logging.getLogger("cavstab")

# seed stream tags for the single-shot commands
_GEN, _FIT, _TCAV, _THEORY, _SURROUND = 11, 12, 13, 14, 15
_MAX_SEED = 2**64 - 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v <= _MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {text}")
    return v


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# flag dest -> (section, key)
_OVERRIDES = {
    "seed": ("sweep", "seed"),
    "kind": ("scenario", "kind"),
    "d": ("scenario", "d"),
    "n_concept": ("scenario", "n_concept"),
    "n_eval": ("scenario", "n_eval"),
    "scenario_seed": ("scenario", "seed"),
    "estimator": ("estimator", "name"),
    "lam": ("estimator", "lam"),
    "epochs": ("estimator", "epochs"),
    "n_reference": ("tcav", "n_reference"),
    "s": ("tcav", "s"),
    "target": ("sweep", "target"),
    "n_grid": ("sweep", "n_grid"),
    "m": ("sweep", "m_sets"),
    "r": ("sweep", "r_runs"),
    "sampling": ("sweep", "sampling"),
    "pool_size": ("sweep", "pool_size"),
    "aggregator": ("sweep", "aggregator"),
    "R": ("sweep", "total_references"),
    "s_grid": ("sweep", "s_grid"),
    "e": ("sweep", "e_outer"),
    "n_ref": ("theory", "n_ref"),
    "epsilon": ("theory", "epsilon"),
    "num_directions": ("theory", "num_directions"),
    "no_plots": ("output", "plots"),
}


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="INI experiment config")
    shared.add_argument("--out", metavar="DIR", required=True, help="output directory")
    shared.add_argument("--seed", type=_u64, help="run seed (overrides [sweep] seed)")
    shared.add_argument("--threads", type=int, default=1, help="worker threads, 0 = auto")
    shared.add_argument("--format", choices=("csv", "raw"), default="csv", help="embedding file format for gen")
    shared.add_argument("-v", "--verbose", action="store_true")

    scen = _Parser(add_help=False)
    scen.add_argument("--kind", choices=("gaussian", "borderline", "far"))
    scen.add_argument("--d", type=int)
    scen.add_argument("--n-concept", type=int)
    scen.add_argument("--n-eval", type=int)
    scen.add_argument("--scenario-seed", type=_u64)

    est = _Parser(add_help=False)
    est.add_argument("--estimator", choices=ESTIMATORS)
    est.add_argument("--lam", type=float)
    est.add_argument("--epochs", type=int)

    p = _Parser(prog="cavstab", description="Variance of concept activation vectors and TCAV scores.")
    p.add_argument("--version", action="version", version=f"cavstab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[shared, scen], help="write scenario embeddings to disk")
    g.add_argument("--n-reference", type=int, help="number of reference rows")

    f = sub.add_parser("fit-cav", parents=[shared, scen, est], help="fit one CAV")
    f.add_argument("--n-reference", type=int)

    t = sub.add_parser("tcav", parents=[shared, scen, est], help="multi-run TCAV score with p-value")
    t.add_argument("--n-reference", type=int, help="reference pool size R")
    t.add_argument("--s", type=int, help="number of disjoint subsets")

    s = sub.add_parser("sweep", parents=[shared, scen, est], help="variance against N")
    s.add_argument("--target", choices=[t for t in TARGETS if t != "multirun_variance"])
    s.add_argument("--n-grid", type=_int_list)
    s.add_argument("--m", type=int, help="CAVs per variance estimate")
    s.add_argument("--r", type=int, help="repetitions per N")
    s.add_argument("--sampling", choices=SAMPLING_MODES)
    s.add_argument("--pool-size", type=int)
    s.add_argument("--aggregator", choices=AGGREGATORS)
    s.add_argument("--no-plots", action="store_false", default=None)

    mr = sub.add_parser("multirun", parents=[shared, scen, est], help="multi-run TCAV variance against s")
    mr.add_argument("--s-grid", type=_int_list)
    mr.add_argument("--R", type=int, help="references per multi-run score")
    mr.add_argument("--r", type=int, help="multi-run scores per variance estimate")
    mr.add_argument("--e", type=int, help="outer repetitions")
    mr.add_argument("--sampling", choices=SAMPLING_MODES)
    mr.add_argument("--pool-size", type=int)
    mr.add_argument("--no-plots", action="store_false", default=None)

    th = sub.add_parser("theory", parents=[shared, scen], help="sandwich covariance and surround check")
    th.add_argument("--lam", type=float)
    th.add_argument("--n-ref", type=int, help="references for the large-N proxy fit")
    th.add_argument("--epsilon", type=float)
    th.add_argument("--num-directions", type=int)

    fc = sub.add_parser("fit-curve", parents=[shared], help="fit a/N + b to a variance table")
    fc.add_argument("--in", dest="input", required=True, metavar="CSV")

    pl = sub.add_parser("plot", parents=[shared], help="render a variance table as SVG")
    pl.add_argument("--in", dest="input", required=True, metavar="CSV")
    pl.add_argument("--fit", metavar="CSV", help="curve-fit table to overlay")
    return p


def _effective_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    for dest, key in _OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            overrides[key] = v
    return cfg.with_overrides(overrides) if overrides else cfg


def _reference_draw(scenario: Scenario, count: int, seed: int) -> np.ndarray:
    if isinstance(scenario.reference, EmpiricalReference):
        return scenario.reference.pool
    return sample_references(scenario.reference, count, seed)


def _variance_outputs(out: OutputDir, cfg: ExperimentConfig, target: str, points, mid: str, m: int, r: int, x_label: str):
    sw = cfg.sweep_config()
    out.write("variance.csv", variance_table(target, sw.estimator, points, m, r, sw.fit.lam, sw.seed, mid))
    try:
        fit = fit_inverse_curve(points)
    except ValidationError as exc:
        log.warning("no curve fit for %s: %s", target, exc)
        fit = None
    if fit is not None:
        out.write("curve_fit.csv", curve_table({target: fit}, mid))
    if cfg["output"]["plots"]:
        axes = PlotAxes(cfg["output"]["log_x"], cfg["output"]["log_y"], cfg["output"]["clip_floor"])
        out.write("variance.svg", render_variance_plot(points, fit, axes, title=target, x_label=x_label))


def _run(args) -> None:
    cfg = _effective_config(args)
    cmd = args.command
    mid = cfg.digest(cmd)
    out = OutputDir(args.out)
    snapshot = cfg.to_ini()
    out.write("config.ini", snapshot)
    seed = cfg["sweep"]["seed"]
    extra = {}

    if cmd in ("fit-curve", "plot"):
        tables = read_variance_table(args.input)
        extra["inputs"] = {"table": os.path.abspath(args.input)}
        if cmd == "fit-curve":
            out.write("curve_fit.csv", curve_table({t: fit_inverse_curve(p) for t, p in tables.items()}, mid))
        else:
            fits = read_curve_table(args.fit) if args.fit else {}
            if args.fit:
                extra["inputs"]["fit"] = os.path.abspath(args.fit)
            axes = PlotAxes(cfg["output"]["log_x"], cfg["output"]["log_y"], cfg["output"]["clip_floor"])
            for target, pts in tables.items():
                name = "variance.svg" if len(tables) == 1 else f"variance_{target}.svg"
                out.write(name, render_variance_plot(pts, fits.get(target), axes, title=target))
        out.write_manifest(mid, cmd, snapshot, {"run": seed}, extra)
        return

    scenario = cfg.build_scenario()
    opts = cfg.fit_options()
    est = cfg["estimator"]["name"]
    n_ref = cfg["tcav"]["n_reference"]

    if cmd == "gen":
        ext = "csv" if args.format == "csv" else "f64"
        refs = _reference_draw(scenario, n_ref, child_seed(seed, _GEN))
        for name, mat in (("concepts", scenario.concepts.points), ("references", refs), ("eval", scenario.eval_set.points)):
            write_embedding_matrix(out.register(f"{name}.{ext}"), mat, args.format)
        if isinstance(scenario.head, LinearHead):
            write_embedding_matrix(out.register(f"head_weights.{ext}"), scenario.head.weights[None, :], args.format)
        extra["embedding_format"] = "csv" if args.format == "csv" else "raw-f64-le"
    elif cmd == "fit-cav":
        refs = _reference_draw(scenario, n_ref, child_seed(seed, _FIT))
        cav = fit_cav(est, scenario.concepts, refs, opts, seed=child_seed(seed, _FIT, 1), **cfg.hinge_kwargs())
        out.write("cav.csv", cav_table([cav], mid))
    elif cmd == "tcav":
        refs = _reference_draw(scenario, n_ref, child_seed(seed, _TCAV))
        res = multi_run_tcav(
            scenario.concepts, refs, cfg["tcav"]["s"], scenario.head, scenario.eval_set, est, opts,
            seed=child_seed(seed, _TCAV, 1), **cfg.hinge_kwargs(),
        )
        out.write("tcav.csv", tcav_table(res, mid))
    elif cmd == "sweep":
        sw = cfg.sweep_config()
        if sw.target == "multirun_variance":
            raise ConfigurationError("target multirun_variance belongs to the multirun subcommand")
        points = run_sweep(sw, scenario, threads=args.threads)
        _variance_outputs(out, cfg, sweep_key(sw), points, mid, sw.m_sets, sw.r_runs, "N")
    elif cmd == "multirun":
        sw = cfg.sweep_config()
        sw = dataclasses.replace(sw, target="multirun_variance")
        points = run_multirun_sweep(sw, scenario, threads=args.threads)
        _variance_outputs(out, cfg, "multirun_variance", points, mid, sw.r_runs, sw.e_outer, "s")
    elif cmd == "theory":
        th = cfg["theory"]
        rep = asymptotic_report(scenario.concepts, scenario.reference, lam=opts.lam, n_ref=th["n_ref"],
                                seed=child_seed(seed, _THEORY), opts=opts)
        refs = _reference_draw(scenario, th["surround_samples"], child_seed(seed, _SURROUND))
        sur = check_surrounded_mean(scenario.concepts.mean, refs, th["epsilon"], th["num_directions"],
                                    seed=child_seed(seed, _SURROUND, 1))
        ev = rep.h0_eigenvalues
        items = [
            ("trace_sigma", rep.trace_sigma),
            ("a0_estimate", rep.a0_estimate),
            ("alpha0_centered", rep.alpha0_centered),
            ("n_ref", rep.n_ref),
            ("lambda", rep.lam),
            ("h0_min_eigenvalue", float(ev[0])),
            ("h0_max_eigenvalue", float(ev[-1])),
            *((f"beta0_{i}", float(b)) for i, b in enumerate(rep.beta0_ref)),
            ("surround_epsilon", sur.epsilon),
            ("surround_directions", sur.num_directions),
            ("surround_min_cap_mass", sur.min_cap_mass),
            ("surround_min_halfspace_mass", sur.min_halfspace_mass),
            ("surround_min_positive_part_mean", sur.min_positive_part_mean),
            ("surround_pass", sur.passed),
        ]
        out.write("theory.csv", key_value_table(items, mid))
        d = rep.sigma.shape[0]
        rows = [",".join(f"s{i}" for i in range(d))] + [",".join(repr(float(v)) for v in row) for row in rep.sigma]
        out.write("sigma.csv", "\n".join(rows) + "\n")
        proj = surround_projection(scenario.concepts, refs)
        lines = ["set,pc1,pc2"]
        for label in ("concepts", "references"):
            c = proj[label]
            c = np.pad(c, ((0, 0), (0, 2 - c.shape[1])))
            lines += [f"{label},{float(a)!r},{float(b)!r}" for a, b in c]
        out.write("projection.csv", "\n".join(lines) + "\n")

    out.write_manifest(mid, cmd, snapshot, {"scenario": cfg["scenario"]["seed"], "run": seed}, extra)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        _run(args)
    except ValidationError as exc:
        print(f"cavstab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ComputationError as exc:
        print(f"cavstab {args.command}: computation failed: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cavstab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
