"""Experiment configuration as an INI document with a fixed schema.

Unknown sections or keys are errors. :meth:`ExperimentConfig.to_ini` writes
every key in schema order, so the snapshot stored with a run is canonical and
hashes to a stable manifest id.
"""

from __future__ import annotations

import configparser
import hashlib
import os
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from ..cav_estimators import ESTIMATORS, FitOptions
from ..errors import ConfigurationError, ValidationError
from ..latent_model import (
    ConceptSet,
    EmpiricalReference,
    EvaluationSet,
    LinearHead,
    Scenario,
    make_borderline_scenario,
    make_gaussian_scenario,
)
from ..stability_lab import AGGREGATORS, SAMPLING_MODES, TARGETS, SweepConfig
from .embeddings import FORMATS, load_embedding_matrix

SCENARIO_KINDS = ("gaussian", "borderline", "far", "files")
_PATH_KEYS = ("concepts_path", "references_path", "eval_path", "head_weights_path")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"{text!r} not in {tuple(options)}")
        return text

    return parse


def _list(item: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        text = text.strip()
        return tuple(item(t) for t in text.split(",")) if text else ()

    return parse


def _float(text: str) -> float:
    return float(text)


def _str(text: str) -> str:
    return text.strip()


def _fmt(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Callable, Any]]] = {
    "scenario": {
        "kind": (_choice(SCENARIO_KINDS), "gaussian"),
        "d": (int, 4),
        "covariance": (_list(float), ()),
        "n_concept": (int, 20),
        "concept_shift": (_float, 1.0),
        "concept_scale": (_float, 0.5),
        "n_eval": (int, 50),
        "offset": (_float, 0.0),
        "seed": (int, 0),
        "concepts_path": (_str, ""),
        "references_path": (_str, ""),
        "eval_path": (_str, ""),
        "head_weights_path": (_str, ""),
        "embedding_format": (_choice(FORMATS), "csv"),
    },
    "estimator": {
        "name": (_choice(ESTIMATORS), "logistic"),
        "lam": (_float, 1.0),
        "tolerance": (_float, 1e-8),
        "max_iterations": (int, 500),
        "centering": (_bool, True),
        "epochs": (int, 20),
    },
    "sweep": {
        "target": (_choice(TARGETS), "cav_variance"),
        "n_grid": (_list(int), (10, 20, 50, 100, 200, 300)),
        "m_sets": (int, 10),
        "r_runs": (int, 10),
        "seed": (int, 0),
        "sampling": (_choice(SAMPLING_MODES), "pool"),
        "pool_size": (int, 10_000),
        "aggregator": (_choice(AGGREGATORS), "arithmetic"),
        "total_references": (int, 2000),
        "s_grid": (_list(int), (1, 2, 4, 8, 16)),
        "e_outer": (int, 10),
    },
    "tcav": {
        "n_reference": (int, 500),
        "s": (int, 1),
    },
    "theory": {
        "n_ref": (int, 100_000),
        "epsilon": (_float, 0.1),
        "num_directions": (int, 256),
        "surround_samples": (int, 10_000),
    },
    "output": {
        "plots": (_bool, True),
        "log_x": (_bool, True),
        "log_y": (_bool, True),
        "clip_floor": (_float, 1e-12),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings, one dict per section. Relative paths resolve against ``base_dir``."""

    values: dict = field(default_factory=dict)
    base_dir: str = "."

    def __post_init__(self):
        full = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec, keys in self.values.items():
            if sec not in SCHEMA:
                raise ConfigurationError(f"unknown section [{sec}]")
            for k, v in keys.items():
                if k not in SCHEMA[sec]:
                    raise ConfigurationError(f"unknown key {k!r} in section [{sec}]")
                full[sec][k] = v
        object.__setattr__(self, "values", full)
        self._validate()

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def _validate(self):
        sc = self["scenario"]
        paths = [k for k in _PATH_KEYS if sc[k]]
        if sc["kind"] == "files":
            missing = [k for k in _PATH_KEYS if not sc[k]]
            if missing:
                raise ConfigurationError(f"scenario kind 'files' needs {', '.join(missing)}")
            for k in _PATH_KEYS:
                p = self.resolve(sc[k])
                if not os.path.isfile(p):
                    raise ConfigurationError(f"{k} does not exist: {p}")
        elif paths:
            raise ConfigurationError(f"synthetic scenario {sc['kind']!r} must not set {', '.join(paths)}")
        if sc["kind"] != "files" and sc["d"] < 1:
            raise ConfigurationError("scenario d must be >= 1")
        if sc["covariance"] and len(sc["covariance"]) != sc["d"]:
            raise ConfigurationError("covariance must list d diagonal entries")
        if self["tcav"]["s"] < 1 or self["tcav"]["n_reference"] < self["tcav"]["s"]:
            raise ConfigurationError("tcav needs 1 <= s <= n_reference")
        th = self["theory"]
        if th["n_ref"] < 2 or th["num_directions"] < 1 or th["surround_samples"] < 1 or th["epsilon"] <= 0:
            raise ConfigurationError("invalid [theory] settings")
        try:
            self.fit_options()
            self.sweep_config()
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from None

    # -- builders ---------------------------------------------------------

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    def fit_options(self) -> FitOptions:
        e = self["estimator"]
        return FitOptions(lam=e["lam"], tolerance=e["tolerance"], max_iterations=e["max_iterations"], centering=e["centering"])

    def hinge_kwargs(self) -> dict:
        return {"epochs": self["estimator"]["epochs"]} if self["estimator"]["name"] == "hinge" else {}

    def sweep_config(self) -> SweepConfig:
        s = self["sweep"]
        return SweepConfig(
            target=s["target"],
            estimator=self["estimator"]["name"],
            n_grid=s["n_grid"],
            m_sets=s["m_sets"],
            r_runs=s["r_runs"],
            fit=self.fit_options(),
            seed=s["seed"],
            sampling=s["sampling"],
            pool_size=s["pool_size"],
            aggregator=s["aggregator"],
            total_references=s["total_references"],
            s_grid=s["s_grid"],
            e_outer=s["e_outer"],
            hinge_epochs=self["estimator"]["epochs"],
        )

    def build_scenario(self) -> Scenario:
        sc = self["scenario"]
        if sc["kind"] == "gaussian":
            return make_gaussian_scenario(
                sc["d"],
                covariance=np.array(sc["covariance"]) if sc["covariance"] else None,
                n_concept=sc["n_concept"],
                concept_shift=sc["concept_shift"],
                concept_scale=sc["concept_scale"],
                n_eval=sc["n_eval"],
                seed=sc["seed"],
            )
        if sc["kind"] in ("borderline", "far"):
            offset = float("inf") if sc["kind"] == "far" else sc["offset"]
            return make_borderline_scenario(sc["d"], sc["n_eval"], offset=offset, seed=sc["seed"], n_concept=sc["n_concept"])
        fmt, d = sc["embedding_format"], (sc["d"] if sc["embedding_format"] == "raw-f64-le" else None)
        load = lambda key: load_embedding_matrix(self.resolve(sc[key]), fmt, d)  # noqa: E731
        concepts = load("concepts_path")
        d = concepts.shape[1]
        weights = load("head_weights_path")
        if weights.shape != (1, d):
            raise ConfigurationError(f"head weights must be a single row of {d} values")
        return Scenario(
            concepts=ConceptSet(concepts),
            reference=EmpiricalReference(load("references_path")),
            head=LinearHead(weights[0]),
            eval_set=EvaluationSet(load("eval_path")),
            name="files",
        )

    # -- serialization ----------------------------------------------------

    def to_ini(self) -> str:
        lines = []
        for sec, keys in SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                v = self.values[sec][k]
                if sec == "scenario" and k in _PATH_KEYS and v:
                    v = os.path.abspath(self.resolve(v))
                lines.append(f"{k} = {_fmt(v)}")
            lines.append("")
        return "\n".join(lines)

    def digest(self, command: str) -> str:
        return hashlib.sha256(f"{command}\n{self.to_ini()}".encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        merged = {sec: dict(keys) for sec, keys in self.values.items()}
        for (sec, key), value in overrides.items():
            merged.setdefault(sec, {})[key] = value
        return ExperimentConfig(merged, self.base_dir)


def parse_config_text(text: str, base_dir: str = ".", source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__no_default__")
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    values: dict[str, dict] = {}
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigurationError(f"{source}: unknown section [{sec}]")
        values[sec] = {}
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigurationError(f"{source}: unknown key {key!r} in section [{sec}]")
            try:
                values[sec][key] = SCHEMA[sec][key][0](raw)
            except ValueError as exc:
                raise ConfigurationError(f"{source}: [{sec}] {key}: {exc}") from None
    return ExperimentConfig(values, base_dir)


def load_config(path: str | None) -> ExperimentConfig:
    """Read and validate a config file; ``None`` gives the all-defaults config."""
    if path is None:
        return ExperimentConfig()
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, os.path.dirname(os.path.abspath(path)), path)
