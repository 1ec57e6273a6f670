"""Declarative run configuration: strict key = value sections.

Unknown sections or keys are rejected so hyperparameter typos cannot pass
silently.  Sub-seeds (sources/field/noise/mask) default to fixed offsets of
the master [run] seed and may be pinned explicitly.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import FistaConfig, LbfgsConfig
from .grid import ReceiverGrid
from .relaxation import RelaxConfig
from .synthetic import FieldSpec, NoiseSpec

SOLVER_NAMES = ("vr", "vr_exact", "fista", "lbfgs", "smooth_only", "lowrank_only")
MATRICIZATIONS = ("block", "receiver_by_source")

_SEED_OFFSETS = {"sources": 404, "field": 101, "noise": 202, "mask": 303}

_RELAX_KEYS = {"gamma", "eta", "rho0", "rho_factor", "schedule_period", "sigma", "rank_k",
               "max_iters", "iterate_tol", "newton_tol", "newton_max", "lambda_init",
               "deriv_mode"}
_SOLVER_KEYS = {
    "vr": _RELAX_KEYS,
    "vr_exact": _RELAX_KEYS - {"sigma"},
    "lowrank_only": _RELAX_KEYS - {"gamma"},
    "fista": {"lambda_fit", "gamma", "step", "max_iters", "iterate_tol"},
    "lbfgs": {"lambda_fit", "gamma", "rank_k", "memory", "max_iters", "grad_tol",
              "iterate_tol", "wolfe_c1", "wolfe_c2"},
    "smooth_only": {"sigma", "newton_tol", "newton_max", "lambda_init", "deriv_mode"},
}

_KNOWN_KEYS = {
    "run": {"seed", "data_dir"},
    "grid": {"nx", "ny", "spacing_km", "origin_x_km", "origin_y_km"},
    "sources": {"n_s", "seed"},
    "field": {"n_anomalies", "amplitude_rank", "amplitude_scale", "seed"},
    "noise": {"sigma_lo", "sigma_hi", "nominal_sigma", "seed"},
    "mask": {"ratio", "cluster_count", "dropout", "seed"},
    "solver": {"name", "matricization"} | set().union(*_SOLVER_KEYS.values()),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 1
    data_dir: str | None = None
    nx: int = 20
    ny: int = 20
    spacing_km: float = 5.0
    origin_x_km: float = 70.0
    origin_y_km: float = 70.0
    n_s: int = 64
    sources_seed: int | None = None
    field: FieldSpec = field(default_factory=FieldSpec)
    field_seed: int | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    noise_seed: int | None = None
    mask_ratio: float = 0.15
    cluster_count: int = 12
    dropout: float = 0.35
    mask_seed: int | None = None
    solver_name: str = "vr"
    matricization: str = "block"
    solver_params: dict = field(default_factory=dict)

    def resolved_seed(self, section: str) -> int:
        explicit = {"sources": self.sources_seed, "field": self.field_seed,
                    "noise": self.noise_seed, "mask": self.mask_seed}[section]
        return explicit if explicit is not None else self.seed + _SEED_OFFSETS[section]

    def receiver_grid(self) -> ReceiverGrid:
        return ReceiverGrid(nx=self.nx, ny=self.ny, spacing=self.spacing_km,
                            origin_x=self.origin_x_km, origin_y=self.origin_y_km)

    def field_spec(self) -> FieldSpec:
        spec = FieldSpec(n_anomalies=self.field.n_anomalies,
                         amplitude_rank=self.field.amplitude_rank,
                         amplitude_scale=self.field.amplitude_scale,
                         seed=self.resolved_seed("field"))
        spec.validate()
        return spec

    def noise_spec(self) -> NoiseSpec:
        spec = NoiseSpec(sigma_lo=self.noise.sigma_lo, sigma_hi=self.noise.sigma_hi,
                         nominal_sigma=self.noise.nominal_sigma,
                         seed=self.resolved_seed("noise"))
        spec.validate()
        return spec


def _get(parser, section, key, cast, default, errors: list):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except ValueError:
        errors.append(f"{section}.{key}: cannot parse {raw!r}")
        return default


def _float_or_auto(raw: str):
    if raw.strip().lower() == "auto":
        return "auto"
    return float(raw)


_SOLVER_CASTS = {
    "gamma": float, "eta": float, "rho0": float, "rho_factor": _float_or_auto,
    "schedule_period": int, "sigma": _float_or_auto, "rank_k": int, "max_iters": int,
    "iterate_tol": float, "newton_tol": float, "newton_max": int, "lambda_init": float,
    "deriv_mode": str, "lambda_fit": float, "step": _float_or_auto, "memory": int,
    "grad_tol": float, "wolfe_c1": float, "wolfe_c2": float,
}


def parse_config(path, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a run config; raises ConfigError naming bad keys."""
    path = Path(path)
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")

    errors: list[str] = []
    for section in parser.sections():
        if section not in _KNOWN_KEYS:
            errors.append(f"unknown section [{section}]")
            continue
        for key in parser[section]:
            if key not in _KNOWN_KEYS[section]:
                errors.append(f"unknown key {section}.{key}")

    cfg = RunConfig()
    cfg.seed = _get(parser, "run", "seed", int, cfg.seed, errors)
    if seed_override is not None:
        cfg.seed = int(seed_override)
    cfg.data_dir = _get(parser, "run", "data_dir", str, None, errors)
    cfg.nx = _get(parser, "grid", "nx", int, cfg.nx, errors)
    cfg.ny = _get(parser, "grid", "ny", int, cfg.ny, errors)
    cfg.spacing_km = _get(parser, "grid", "spacing_km", float, cfg.spacing_km, errors)
    cfg.origin_x_km = _get(parser, "grid", "origin_x_km", float, cfg.origin_x_km, errors)
    cfg.origin_y_km = _get(parser, "grid", "origin_y_km", float, cfg.origin_y_km, errors)
    cfg.n_s = _get(parser, "sources", "n_s", int, cfg.n_s, errors)
    cfg.sources_seed = _get(parser, "sources", "seed", int, None, errors)
    cfg.field = FieldSpec(
        n_anomalies=_get(parser, "field", "n_anomalies", int, cfg.field.n_anomalies, errors),
        amplitude_rank=_get(parser, "field", "amplitude_rank", int, cfg.field.amplitude_rank, errors),
        amplitude_scale=_get(parser, "field", "amplitude_scale", float, cfg.field.amplitude_scale, errors))
    cfg.field_seed = _get(parser, "field", "seed", int, None, errors)
    cfg.noise = NoiseSpec(
        sigma_lo=_get(parser, "noise", "sigma_lo", float, cfg.noise.sigma_lo, errors),
        sigma_hi=_get(parser, "noise", "sigma_hi", float, cfg.noise.sigma_hi, errors),
        nominal_sigma=_get(parser, "noise", "nominal_sigma", float, cfg.noise.nominal_sigma, errors))
    cfg.noise_seed = _get(parser, "noise", "seed", int, None, errors)
    cfg.mask_ratio = _get(parser, "mask", "ratio", float, cfg.mask_ratio, errors)
    cfg.cluster_count = _get(parser, "mask", "cluster_count", int, cfg.cluster_count, errors)
    cfg.dropout = _get(parser, "mask", "dropout", float, cfg.dropout, errors)
    cfg.mask_seed = _get(parser, "mask", "seed", int, None, errors)

    cfg.solver_name = _get(parser, "solver", "name", str, cfg.solver_name, errors)
    cfg.matricization = _get(parser, "solver", "matricization", str, cfg.matricization, errors)
    if cfg.solver_name not in SOLVER_NAMES:
        errors.append(f"solver.name: unknown solver {cfg.solver_name!r} "
                      f"(expected one of {', '.join(SOLVER_NAMES)})")
    if cfg.matricization not in MATRICIZATIONS:
        errors.append(f"solver.matricization: unknown layout {cfg.matricization!r}")

    if cfg.solver_name in _SOLVER_KEYS and parser.has_section("solver"):
        allowed = _SOLVER_KEYS[cfg.solver_name]
        for key in parser["solver"]:
            if key in ("name", "matricization"):
                continue
            if key not in _KNOWN_KEYS["solver"]:
                continue  # already reported as unknown
            if key not in allowed:
                errors.append(f"solver.{key}: not a parameter of solver {cfg.solver_name!r}")
                continue
            cfg.solver_params[key] = _get(parser, "solver", key, _SOLVER_CASTS[key], None, errors)

    if errors:
        raise ConfigError("invalid config " + str(path) + ":\n  " + "\n  ".join(errors))
    return cfg


def relax_config(cfg: RunConfig, sigma_budget: float, svals_hint=None) -> RelaxConfig:
    """Materialize a RelaxConfig for vr / vr_exact / lowrank_only."""
    p = dict(cfg.solver_params)
    if cfg.solver_name == "lowrank_only":
        base = RelaxConfig.table1_lowrank(sigma=0.0)
    else:
        base = RelaxConfig.table1_vr(sigma=0.0)
    if "eta" in p and "rho0" not in p:
        base.rho0 = 1.0 / p.pop("eta")
    p.pop("eta", None)
    if "rho0" in p:
        base.rho0 = p.pop("rho0")
    if "rho_factor" in p:
        rf = p.pop("rho_factor")
        base.rho_factor = None if rf == "auto" else rf
    sigma = p.pop("sigma", "auto")
    if cfg.solver_name == "vr_exact":
        sigma = 0.0
    base.sigma = sigma_budget if sigma == "auto" else float(sigma)
    for key, val in p.items():
        setattr(base, key, val)
    base.validate()
    return base


def fista_config(cfg: RunConfig) -> FistaConfig:
    p = dict(cfg.solver_params)
    base = FistaConfig()
    step = p.pop("step", "auto")
    base.step = 0.0 if step == "auto" else float(step)
    for key, val in p.items():
        setattr(base, key, val)
    base.validate()
    return base


def lbfgs_config(cfg: RunConfig) -> LbfgsConfig:
    base = LbfgsConfig()
    for key, val in cfg.solver_params.items():
        setattr(base, key, val)
    base.validate()
    return base


def resolved_config_text(cfg: RunConfig, solver_resolved: dict | None = None) -> str:
    """Full config with every default materialized, as deterministic INI text."""
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed)}
    if cfg.data_dir:
        parser["run"]["data_dir"] = cfg.data_dir
    parser["grid"] = {"nx": str(cfg.nx), "ny": str(cfg.ny),
                      "spacing_km": repr(cfg.spacing_km),
                      "origin_x_km": repr(cfg.origin_x_km),
                      "origin_y_km": repr(cfg.origin_y_km)}
    parser["sources"] = {"n_s": str(cfg.n_s), "seed": str(cfg.resolved_seed("sources"))}
    parser["field"] = {"n_anomalies": str(cfg.field.n_anomalies),
                       "amplitude_rank": str(cfg.field.amplitude_rank),
                       "amplitude_scale": repr(cfg.field.amplitude_scale),
                       "seed": str(cfg.resolved_seed("field"))}
    parser["noise"] = {"sigma_lo": repr(cfg.noise.sigma_lo),
                       "sigma_hi": repr(cfg.noise.sigma_hi),
                       "nominal_sigma": repr(cfg.noise.nominal_sigma),
                       "seed": str(cfg.resolved_seed("noise"))}
    parser["mask"] = {"ratio": repr(cfg.mask_ratio),
                      "cluster_count": str(cfg.cluster_count),
                      "dropout": repr(cfg.dropout),
                      "seed": str(cfg.resolved_seed("mask"))}
    solver = {"name": cfg.solver_name, "matricization": cfg.matricization}
    for key, val in sorted((solver_resolved or cfg.solver_params).items()):
        solver[key] = val if isinstance(val, str) else repr(val)
    parser["solver"] = solver
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        for key, val in parser[section].items():
            lines.append(f"{key} = {val}")
        lines.append("")
    return "\n".join(lines)


__all__ = ["ConfigError", "RunConfig", "parse_config", "relax_config", "fista_config",
           "lbfgs_config", "resolved_config_text", "SOLVER_NAMES", "MATRICIZATIONS"]
