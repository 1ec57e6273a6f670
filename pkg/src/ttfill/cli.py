"""Command-line pipeline: generate synthetic data, solve, compare, svd.

All artifacts are byte-reproducible given the same config and seed except
wall-clock measurements, which live only in timing files (``timing.csv``,
``compare_timing.csv``); the ``seconds``/``wall_time``/``time_s`` fields of
the deterministic artifacts hold zero placeholders.

Exit status: 0 success, 2 validation error, 3 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import metrics, synthetic
from .baselines import fista_solve, lbfgs_solve, smoothing_only_solve
from .config import (ConfigError, RunConfig, fista_config, lbfgs_config, parse_config,
                     relax_config, resolved_config_text)
from .grid import (LAYOUT_BLOCK, ReceiverGrid, ResidualTensor, SamplingMask, SourceSet,
                   compute_source_energy, matricize_block, matricize_receiver_by_source,
                   read_grid_meta, read_tensor_csv, write_grid_meta, write_tensor_csv)
from .operators import MaskedData, SamplingOperator, build_laplacian
from .relaxation import IterationRecord, SolveResult, lowrank_only_solve, vr_solve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

DATA_FILES = ("true_data.csv", "observed_data.csv", "meta.cfg")


class SolverFailure(RuntimeError):
    pass


@dataclass
class Dataset:
    grid: ReceiverGrid
    sources: SourceSet
    truth: ResidualTensor
    mask: SamplingMask
    observed: ResidualTensor
    station_sigmas: np.ndarray
    sigma_budget: float
    true_misfit: float
    nominal_sigma: float


def block_layout(n_s: int) -> tuple[int, int]:
    """Most square block tessellation: largest divisor of n_s at most sqrt(n_s)."""
    best = 1
    for d in range(1, int(np.sqrt(n_s)) + 1):
        if n_s % d == 0:
            best = d
    return best, n_s // best


def build_dataset(cfg: RunConfig) -> Dataset:
    grid = cfg.receiver_grid()
    sources = synthetic.random_sources(grid, cfg.n_s, cfg.resolved_seed("sources"))
    truth = synthetic.generate_field(grid, sources, cfg.field_spec())
    mask = synthetic.subsample_mask(grid, sources, cfg.mask_ratio, cfg.cluster_count,
                                    cfg.resolved_seed("mask"), cfg.dropout)
    b, sigmas = synthetic.add_noise(truth, mask, cfg.noise_spec())
    observed = synthetic.noisy_tensor(truth, mask, b)
    budget = synthetic.misfit_budget(mask.count, cfg.noise.nominal_sigma)
    sig_true = synthetic.true_misfit(b, truth, mask)
    return Dataset(grid, sources, truth, mask, observed, sigmas, budget, sig_true,
                   cfg.noise.nominal_sigma)


def data_hash(data_dir: Path) -> str:
    h = hashlib.sha256()
    for name in DATA_FILES:
        h.update((Path(data_dir) / name).read_bytes())
    return h.hexdigest()


def cmd_generate(cfg: RunConfig, out_dir: Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(cfg)
    write_tensor_csv(out_dir / "true_data.csv", ds.truth, ds.mask, ds.station_sigmas)
    write_tensor_csv(out_dir / "observed_data.csv", ds.observed, ds.mask, ds.station_sigmas)
    write_grid_meta(out_dir / "meta.cfg", ds.grid, ds.sources, extra={
        "seed": str(cfg.seed),
        "n_obs": str(ds.mask.count),
        "nominal_sigma": ds.nominal_sigma,
        "sigma_budget": ds.sigma_budget,
        "true_misfit": ds.true_misfit,
    })
    (out_dir / "resolved_generate.cfg").write_text(resolved_config_text(cfg), newline="\n")
    return out_dir


def load_dataset(data_dir: Path) -> Dataset:
    data_dir = Path(data_dir)
    for name in DATA_FILES:
        if not (data_dir / name).exists():
            raise ConfigError(f"data directory {data_dir} is missing {name}")
    grid, sources, extra = read_grid_meta(data_dir / "meta.cfg")
    true_vals, flags, sigmas = read_tensor_csv(data_dir / "true_data.csv")
    obs_vals, flags_obs, _ = read_tensor_csv(data_dir / "observed_data.csv")
    if not np.array_equal(flags, flags_obs):
        raise ConfigError(f"mask mismatch between tensors in {data_dir}")
    mask = SamplingMask(flags)
    truth = ResidualTensor(grid, sources, true_vals)
    observed = ResidualTensor(grid, sources, obs_vals)
    return Dataset(grid, sources, truth, mask, observed, sigmas,
                   float(extra["sigma_budget"]), float(extra["true_misfit"]),
                   float(extra["nominal_sigma"]))


def matricize_problem(ds: Dataset, matricization: str):
    """Energy-ordered views of the observed and true tensors plus the masked data."""
    ordered = compute_source_energy(ds.observed, ds.mask)
    if matricization == LAYOUT_BLOCK:
        n_bx, n_by = block_layout(ds.sources.n_s)
        view_obs = matricize_block(ds.observed, ordered.order, n_bx, n_by)
        view_true = matricize_block(ds.truth, ordered.order, n_bx, n_by)
    else:
        view_obs = matricize_receiver_by_source(ds.observed, ordered.order)
        view_true = matricize_receiver_by_source(ds.truth, ordered.order)
    sampler = SamplingOperator.from_mask(view_obs, ds.mask)
    b = sampler.apply(view_obs.matrix)
    return view_obs, view_true, MaskedData(b, sampler)


def run_solver(cfg: RunConfig, ds: Dataset):
    """Run the configured solver; returns (view, result, sigma_ref, resolved params)."""
    view_obs, view_true, obs = matricize_problem(ds, cfg.matricization)
    name = cfg.solver_name
    needs_smoother = name in ("vr", "vr_exact", "fista", "lbfgs", "smooth_only")
    smoother = build_laplacian(ds.grid, view_obs) if needs_smoother else None

    if name in ("vr", "vr_exact"):
        rc = relax_config(cfg, ds.sigma_budget)
        result = vr_solve(obs, rc, smoother)
        sigma_ref = rc.sigma
        resolved = asdict(rc)
    elif name == "lowrank_only":
        rc = relax_config(cfg, ds.sigma_budget)
        result = lowrank_only_solve(obs, rc)
        sigma_ref = rc.sigma
        resolved = asdict(rc)
        resolved.pop("gamma", None)
    elif name == "fista":
        fc = fista_config(cfg)
        result = fista_solve(obs, fc, smoother)
        sigma_ref = ds.sigma_budget  # penalized method, reported against the budget
        resolved = asdict(fc)
    elif name == "lbfgs":
        lc = lbfgs_config(cfg)
        result = lbfgs_solve(obs, lc, smoother)
        sigma_ref = ds.sigma_budget
        resolved = asdict(lc)
    elif name == "smooth_only":
        p = dict(cfg.solver_params)
        sigma = p.pop("sigma", "auto")
        sigma = ds.sigma_budget if sigma == "auto" else float(sigma)
        resolved = {"sigma": sigma,
                    "newton_tol": p.pop("newton_tol", 1e-9),
                    "newton_max": p.pop("newton_max", 100),
                    "lambda_init": p.pop("lambda_init", 1.0),
                    "deriv_mode": p.pop("deriv_mode", "analytic")}
        result = smoothing_only_solve(obs, sigma, smoother,
                                      newton_tol=resolved["newton_tol"],
                                      newton_max=resolved["newton_max"],
                                      lambda_init=resolved["lambda_init"],
                                      deriv_mode=resolved["deriv_mode"])
        sigma_ref = sigma
    else:
        raise ConfigError(f"unknown solver {name!r}")
    if "rho_factor" in resolved and resolved["rho_factor"] is None:
        resolved["rho_factor"] = result.extras.get("rho_factor", "auto")
    return view_obs, view_true, obs, result, sigma_ref, resolved


def _build_report(cfg: RunConfig, ds: Dataset, view_obs, result: SolveResult,
                  obs: MaskedData, sigma_ref: float, resolved: dict) -> metrics.EvalReport:
    W_tensor = view_obs.unmap(result.W)
    rms_obs = metrics.rms(W_tensor, ds.truth.values, ds.mask.flags)
    rms_int = metrics.rms(W_tensor, ds.truth.values, ~ds.mask.flags)
    feas = metrics.terminal_feasibility(result.W, obs.b, obs.sampler, sigma_ref)
    decay = metrics.sv_decay(result.W, min(result.W.shape))
    wall = result.history[-1].seconds if result.history else 0.0
    extra = {
        "solver": cfg.solver_name,
        "matricization": cfg.matricization,
        "sigma": float(sigma_ref),
        "n_obs": float(ds.mask.count),
        "iterations": float(result.iterations),
        "converged": float(result.converged),
        "failed": float(result.failed),
        "lambda_final": float(result.lambda_final),
    }
    if "schedule_period" in resolved:
        extra["schedule_period"] = float(resolved["schedule_period"])
    return metrics.EvalReport(rms_obs=rms_obs, rms_int=rms_int, terminal_feasibility=feas,
                              wall_time=wall, sv_decay=decay, history=result.history,
                              extra=extra)


def _redacted(report: metrics.EvalReport) -> metrics.EvalReport:
    hist = [IterationRecord(r.iteration, r.objective, r.misfit, r.gap, 0.0, r.rho)
            for r in report.history]
    return metrics.EvalReport(rms_obs=report.rms_obs, rms_int=report.rms_int,
                              terminal_feasibility=report.terminal_feasibility,
                              wall_time=0.0, sv_decay=report.sv_decay, history=hist,
                              extra=dict(report.extra))


def _write_timing(path: Path, report: metrics.EvalReport) -> None:
    lines = ["iter,seconds", f"0,{report.wall_time!r}"]
    lines += [f"{r.iteration},{r.seconds!r}" for r in report.history]
    Path(path).write_text("\n".join(lines) + "\n", newline="\n")


def _write_factors(out_dir: Path, result: SolveResult) -> None:
    if result.factors is None:
        return
    for name, M in (("factor_L.csv", result.factors.L), ("factor_R.csv", result.factors.R)):
        rows = "\n".join(",".join(format(v, ".17g") for v in row) for row in M)
        (out_dir / name).write_text(rows + "\n", newline="\n")


def cmd_solve(cfg: RunConfig, data_dir: Path, out_dir: Path) -> dict:
    ds = load_dataset(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    view_obs, view_true, obs, result, sigma_ref, resolved = run_solver(cfg, ds)
    report = _build_report(cfg, ds, view_obs, result, obs, sigma_ref, resolved)

    completed = ResidualTensor(ds.grid, ds.sources, view_obs.unmap(result.W))
    write_tensor_csv(out_dir / "completed.csv", completed, ds.mask, ds.station_sigmas)
    _write_factors(out_dir, result)
    metrics.export_report(_redacted(report), out_dir / "report.csv", format="csv")
    metrics.export_report(_redacted(report), out_dir / "report.json", format="json")
    _write_timing(out_dir / "timing.csv", report)
    (out_dir / "resolved_solve.cfg").write_text(
        resolved_config_text(cfg, solver_resolved=resolved), newline="\n")
    digest = data_hash(data_dir)
    (out_dir / "data_hash.txt").write_text(digest + "\n", newline="\n")
    return {
        "algorithm": cfg.solver_name,
        "solver": cfg.solver_name,
        "sigma": sigma_ref,
        "terminal_feasibility": report.terminal_feasibility,
        "time_s": report.wall_time,
        "rms_obs": report.rms_obs,
        "rms_int": report.rms_int,
        "failed": result.failed,
        "data_hash": digest,
    }


def cmd_compare(cfg_paths: list, data_dir: Path, out_dir: Path,
                seed_override=None, assert_vr_best: bool = False) -> list[dict]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for path in cfg_paths:
        cfg = parse_config(path, seed_override)
        summary = cmd_solve(cfg, data_dir, out_dir / "runs" / Path(path).stem)
        summary["algorithm"] = Path(path).stem
        rows.append(summary)
    hashes = {r["data_hash"] for r in rows}
    if len(hashes) > 1:
        raise ConfigError("refusing to compare runs over mismatched data hashes")

    header = "algorithm,terminal_feasibility,time_s,rms_obs,rms_int"
    det_lines = [header]
    time_lines = ["algorithm,time_s"]
    for r in rows:
        det_lines.append(",".join([r["algorithm"], format(r["terminal_feasibility"], ".17g"),
                                   "0", format(r["rms_obs"], ".17g"),
                                   format(r["rms_int"], ".17g")]))
        time_lines.append(f"{r['algorithm']},{r['time_s']!r}")
    (out_dir / "compare.csv").write_text("\n".join(det_lines) + "\n", newline="\n")
    (out_dir / "compare_timing.csv").write_text("\n".join(time_lines) + "\n", newline="\n")

    print(header)
    for r in rows:
        print(f"{r['algorithm']},{r['terminal_feasibility']:.6g},{r['time_s']:.2f},"
              f"{r['rms_obs']:.6g},{r['rms_int']:.6g}")

    if any(r["failed"] for r in rows):
        raise SolverFailure("one or more solver runs failed; see their reports")
    if assert_vr_best:
        vr_rows = [r for r in rows if r["solver"] == "vr" and r["sigma"] > 0]
        if not vr_rows:
            raise ConfigError("--assert-vr-best needs a vr run with sigma > 0")
        best = min(rows, key=lambda r: r["rms_int"])
        if all(r["rms_int"] > best["rms_int"] for r in vr_rows):
            raise SolverFailure(
                f"vr with sigma > 0 is not the best interpolator: best is {best['algorithm']}")
    return rows


def cmd_svd(cfg: RunConfig, input_csv: Path, count: int, out_path: Path) -> np.ndarray:
    values, flags, _ = read_tensor_csv(input_csv)
    nx, ny, n_s = values.shape
    grid = ReceiverGrid(nx=nx, ny=ny, spacing=cfg.spacing_km,
                        origin_x=cfg.origin_x_km, origin_y=cfg.origin_y_km)
    sources = SourceSet(coords=np.zeros((n_s, 2)))
    tensor = ResidualTensor(grid, sources, values)
    mask = SamplingMask(flags)
    ordered = compute_source_energy(tensor, mask)
    if cfg.matricization == LAYOUT_BLOCK:
        n_bx, n_by = block_layout(n_s)
        view = matricize_block(tensor, ordered.order, n_bx, n_by)
    else:
        view = matricize_receiver_by_source(tensor, ordered.order)
    limit = min(view.matrix.shape)
    if count > limit:
        print(f"warning: clipping count {count} to {limit}", file=sys.stderr)
        count = limit
    decay = metrics.sv_decay(view.matrix, count)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["index,singular_value"] + [f"{i + 1},{format(v, '.17g')}"
                                        for i, v in enumerate(decay)]
    out_path.write_text("\n".join(lines) + "\n", newline="\n")
    return decay


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="ttfill",
        description="low-rank + smooth completion of travel-time residual grids")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("solve", help="run one solver on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("compare", help="run several solver configs on one dataset")
    p.add_argument("--config", required=True, nargs="+")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--assert-vr-best", action="store_true")

    p = sub.add_parser("svd", help="singular value decay of a tensor CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "generate":
            cfg = parse_config(args.config, args.seed)
            cmd_generate(cfg, Path(args.out))
        elif args.command == "solve":
            cfg = parse_config(args.config, args.seed)
            summary = cmd_solve(cfg, Path(args.data), Path(args.out))
            if summary["failed"]:
                print("solver reported failure; outputs written", file=sys.stderr)
                return EXIT_SOLVER
        elif args.command == "compare":
            cmd_compare([Path(c) for c in args.config], Path(args.data), Path(args.out),
                        seed_override=args.seed, assert_vr_best=args.assert_vr_best)
        elif args.command == "svd":
            cfg = parse_config(args.config, args.seed)
            cmd_svd(cfg, Path(args.input), args.count, Path(args.out) / "sv_decay.csv")
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as e:
        print(f"solver failure: {e}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
