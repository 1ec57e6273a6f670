"""Evaluation metrics and byte-reproducible report export.

Report CSV schema: ``metric,value`` rows for scalars, ``iter,objective,
misfit,gap,seconds`` for histories, ``index,singular_value`` for decay.
Floats are written with 17 significant digits and LF line endings, so two
exports of the same report are byte-identical.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import thin_svd
from .operators import SamplingOperator
from .relaxation import IterationRecord

_RELAX_SOLVERS = ("vr", "vr_exact", "lowrank_only")


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass
class EvalReport:
    rms_obs: float
    rms_int: float
    terminal_feasibility: float
    wall_time: float
    sv_decay: np.ndarray = field(default_factory=lambda: np.zeros(0))
    history: list[IterationRecord] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        decay = np.asarray(self.sv_decay, dtype=float)
        if decay.size and np.any(np.diff(decay) > 1e-12 * max(1.0, decay[0])):
            raise ValueError("singular value decay must be non-increasing")
        self.sv_decay = decay

    def scalars(self) -> dict:
        out = {
            "rms_obs": self.rms_obs,
            "rms_int": self.rms_int,
            "terminal_feasibility": self.terminal_feasibility,
            "wall_time": self.wall_time,
        }
        for k in sorted(self.extra):
            out[k] = self.extra[k]
        return out


def rms(X: np.ndarray, X_true: np.ndarray, index_set: np.ndarray) -> float:
    """Unweighted root-mean-square error over the index set (boolean array)."""
    X = np.asarray(X)
    X_true = np.asarray(X_true)
    sel = np.asarray(index_set, dtype=bool)
    if X.shape != X_true.shape or sel.shape != X.shape:
        raise ValueError(f"shape mismatch: {X.shape}, {X_true.shape}, {sel.shape}")
    n = int(sel.sum())
    if n == 0:
        raise ValueError("rms over an empty index set")
    diff = (X - X_true)[sel]
    return float(np.sqrt(np.mean(diff * diff)))


def terminal_feasibility(X: np.ndarray, b: np.ndarray, sampler: SamplingOperator,
                         sigma: float) -> float:
    """||A(X) - b||_2 - sigma (negative for strictly feasible points)."""
    return float(np.linalg.norm(sampler.apply(X) - b)) - sigma


def sv_decay(matrix: np.ndarray, count: int) -> np.ndarray:
    """Leading singular values, clipped to min(count, min(shape))."""
    matrix = np.asarray(matrix, dtype=float)
    count = min(int(count), min(matrix.shape))
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    _, s, _ = thin_svd(matrix)
    return s[:count]


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def history_csv_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + "_history.csv")


def decay_csv_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + "_decay.csv")


def export_report(report: EvalReport, path, format: str = "csv") -> list[Path]:
    """Write the report; csv produces the scalars file plus _history/_decay
    siblings, json a single file.  Returns the written paths."""
    path = Path(path)
    if format == "json":
        payload = {
            "scalars": report.scalars(),
            "history": [{"iter": r.iteration, "objective": r.objective, "misfit": r.misfit,
                         "gap": r.gap, "seconds": r.seconds} for r in report.history],
            "sv_decay": [float(v) for v in report.sv_decay],
        }
        try:
            with open(path, "w", newline="\n") as fh:
                json.dump(payload, fh, indent=1, sort_keys=True)
                fh.write("\n")
        except OSError as e:
            raise OSError(f"cannot write report to {path}: {e}") from e
        return [path]
    if format != "csv":
        raise ValueError(f"unknown report format {format!r}")
    try:
        scalar_rows = []
        for k, v in report.scalars().items():
            scalar_rows.append([k, v if isinstance(v, str) else _fmt(v)])
        _write_csv(path, ["metric", "value"], scalar_rows)
        _write_csv(history_csv_path(path), ["iter", "objective", "misfit", "gap", "seconds"],
                   [[r.iteration, _fmt(r.objective), _fmt(r.misfit), _fmt(r.gap), _fmt(r.seconds)]
                    for r in report.history])
        _write_csv(decay_csv_path(path), ["index", "singular_value"],
                   [[i + 1, _fmt(v)] for i, v in enumerate(report.sv_decay)])
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e}") from e
    return [path, history_csv_path(path), decay_csv_path(path)]


def validate_report(report: EvalReport) -> None:
    """Re-assert the relaxation-solver objective monotonicity on load."""
    solver = str(report.extra.get("solver", ""))
    if solver not in _RELAX_SOLVERS or not report.history:
        return
    period = int(float(report.extra.get("schedule_period", 0))) or None
    prev = None
    for rec in report.history:
        in_new_segment = period is not None and prev is not None \
            and (rec.iteration - 1) % period == 0
        if prev is not None and not in_new_segment:
            if rec.objective > prev + 1e-9 * max(1.0, abs(prev)):
                raise ValueError(
                    f"objective history not non-increasing at iteration {rec.iteration}")
        prev = rec.objective


def load_report(path, format: str = "csv", validate: bool = True) -> EvalReport:
    path = Path(path)
    if format == "json":
        with open(path) as fh:
            payload = json.load(fh)
        scal = payload["scalars"]
        history = [IterationRecord(int(r["iter"]), float(r["objective"]), float(r["misfit"]),
                                   float(r["gap"]), float(r["seconds"]))
                   for r in payload["history"]]
        decay = np.asarray(payload["sv_decay"], dtype=float)
    elif format == "csv":
        scal = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for k, v in reader:
                try:
                    scal[k] = float(v)
                except ValueError:
                    scal[k] = v
        history = []
        with open(history_csv_path(path), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec in reader:
                history.append(IterationRecord(int(rec[0]), float(rec[1]), float(rec[2]),
                                               float(rec[3]), float(rec[4])))
        decay = []
        with open(decay_csv_path(path), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for rec in reader:
                decay.append(float(rec[1]))
        decay = np.asarray(decay)
    else:
        raise ValueError(f"unknown report format {format!r}")

    core = {k: scal.pop(k, 0.0) for k in ("rms_obs", "rms_int", "terminal_feasibility", "wall_time")}
    report = EvalReport(rms_obs=float(core["rms_obs"]), rms_int=float(core["rms_int"]),
                        terminal_feasibility=float(core["terminal_feasibility"]),
                        wall_time=float(core["wall_time"]), sv_decay=decay,
                        history=history, extra=scal)
    if validate:
        validate_report(report)
    return report


__all__ = [
    "EvalReport", "rms", "terminal_feasibility", "sv_decay", "export_report",
    "load_report", "validate_report", "history_csv_path", "decay_csv_path",
]
