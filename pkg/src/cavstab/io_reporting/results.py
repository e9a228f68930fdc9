"""Result tables and the run manifest.

Column names and order are part of the on-disk format and are pinned by
golden-file tests; bump ``SCHEMA_VERSION`` whenever they change. Floats are
written with ``repr``, the shortest string that reads back to the same value.
"""

from __future__ import annotations

import csv
import datetime as _dt
import io
import json
import math
import os

from .. import __version__
from ..cav_estimators import Cav
from ..errors import IngestionError
from ..stability_lab import CurveFit, VariancePoint
from ..tcav_scoring import TcavResult

SCHEMA_VERSION = 1

VARIANCE_COLUMNS = (
    "target", "estimator", "N_or_s", "run", "mean_variance", "spread",
    "m", "r", "lambda", "seed", "failures", "manifest_id",
)
CURVE_COLUMNS = ("target", "a", "b", "residual_rms", "loglog_slope", "points_used", "manifest_id")
TCAV_COLUMNS = ("s", "N_per_subset", "run_index", "T_j", "T_multi", "p_value", "discarded_samples", "manifest_id")
CAV_PREFIX = ("estimator", "lambda", "n", "N", "seed", "alpha")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def variance_table(
    target: str, estimator: str, points: list[VariancePoint], m: int, r: int, lam: float, seed: int, manifest_id: str
) -> str:
    """One row per (x, run) with that run's variance, then an ``all`` row with mean and spread."""
    rows = []
    for p in points:
        for i, v in enumerate(p.per_run):
            rows.append((target, estimator, p.x, i, v, None, m, r, lam, seed, None, manifest_id))
        rows.append((target, estimator, p.x, "all", p.mean_variance, p.spread, m, r, lam, seed, p.failures, manifest_id))
    return _csv_text(VARIANCE_COLUMNS, rows)


def curve_table(fits: dict[str, CurveFit], manifest_id: str) -> str:
    rows = [(t, f.a, f.b, f.residual_rms, f.loglog_slope, f.points_used, manifest_id) for t, f in fits.items()]
    return _csv_text(CURVE_COLUMNS, rows)


def cav_table(cavs: list[Cav], manifest_id: str) -> str:
    d = cavs[0].dimension if cavs else 0
    columns = CAV_PREFIX + tuple(f"beta_{i}" for i in range(d)) + ("manifest_id",)
    rows = [
        (c.estimator, float(c.lam), c.n_concept, c.n_reference, c.seed, float(c.alpha), *map(float, c.beta), manifest_id)
        for c in cavs
    ]
    return _csv_text(columns, rows)


def tcav_table(result: TcavResult, manifest_id: str) -> str:
    rows = [
        (result.s, result.n_per_subset, j, float(t), result.multi_run_mean, result.p_value, result.discarded, manifest_id)
        for j, t in enumerate(result.per_run_scores)
    ]
    return _csv_text(TCAV_COLUMNS, rows)


def key_value_table(items: list[tuple[str, object]], manifest_id: str) -> str:
    return _csv_text(("quantity", "value", "manifest_id"), [(k, v, manifest_id) for k, v in items])


def _num(text: str, path: str, line: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise IngestionError(f"{path}: bad number {text!r}", row=line) from None


def read_variance_table(path: str) -> dict[str, list[VariancePoint]]:
    """Aggregate points per target from a variance CSV.

    Tables written by this package contribute their ``all`` rows. A bare
    table with only ``N_or_s`` and ``mean_variance`` (and optionally
    ``spread`` and ``target``) is also accepted, one point per row.
    """
    if not os.path.isfile(path):
        raise IngestionError(f"table not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        if "N_or_s" not in cols or "mean_variance" not in cols:
            raise IngestionError(f"{path}: needs columns N_or_s and mean_variance", row=0)
        out: dict[str, list[VariancePoint]] = {}
        for line, rec in enumerate(reader, start=1):
            if "run" in cols and rec["run"] != "all":
                continue
            spread = rec.get("spread") or ""
            failures = rec.get("failures") or "0"
            point = VariancePoint(
                x=int(_num(rec["N_or_s"], path, line)),
                mean_variance=_num(rec["mean_variance"], path, line),
                spread=_num(spread, path, line) if spread else 0.0,
                per_run=(),
                failures=int(_num(failures, path, line)),
            )
            out.setdefault(rec.get("target") or "variance", []).append(point)
    if not out:
        raise IngestionError(f"{path}: no data rows")
    return out


def read_curve_table(path: str) -> dict[str, CurveFit]:
    if not os.path.isfile(path):
        raise IngestionError(f"table not found: {path}")
    with open(path, newline="") as fh:
        out = {}
        for line, rec in enumerate(csv.DictReader(fh), start=1):
            try:
                out[rec["target"]] = CurveFit(
                    float(rec["a"]), float(rec["b"]), float(rec["residual_rms"]),
                    float(rec["loglog_slope"]), int(rec["points_used"]),
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise IngestionError(f"{path}: malformed curve row ({exc})", row=line) from None
    return out


class OutputDir:
    """Single writer for one output directory; records every file for the manifest."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(path, exist_ok=True)
        self.files: list[str] = []

    def write(self, name: str, text: str) -> str:
        full = os.path.join(self.path, name)
        with open(full, "w", newline="") as fh:
            fh.write(text)
        self.files.append(name)
        return full

    def register(self, name: str) -> str:
        self.files.append(name)
        return os.path.join(self.path, name)

    def write_manifest(self, manifest_id: str, command: str, config_text: str | None, seeds: dict, extra: dict | None = None):
        """manifest.json is the only output that carries a timestamp."""
        manifest = {
            "manifest_id": manifest_id,
            "artifact": "cavstab",
            "version": __version__,
            "schema_version": SCHEMA_VERSION,
            "command": command,
            "config_file": "config.ini" if config_text is not None else None,
            "config": config_text,
            "seeds": seeds,
            "outputs": sorted(self.files),
            "created_utc": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(self.path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, allow_nan=False, default=_json_default)
            fh.write("\n")
        return manifest


def _json_default(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
