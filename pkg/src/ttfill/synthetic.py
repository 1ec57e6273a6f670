"""Synthetic residual fields with joint low-rank and smooth structure,
clustered station masks, and heteroscedastic station noise.

The generator replaces the (out of scope) eikonal forward model: residuals
are sums of shared spatial Gaussian anomalies with a low-rank per-source
amplitude matrix, which preserves the two structural premises the solvers
exploit (local smoothness and cross-source redundancy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import ReceiverGrid, ResidualTensor, SamplingMask, SourceSet
from .numerics import make_rng, rng_gaussian, rng_uniform


@dataclass
class FieldSpec:
    """Ground-truth field: shared Gaussian anomalies, low-rank amplitudes.

    ``centers`` (n_anomalies, 2) km and ``widths`` (n_anomalies,) km may be
    given explicitly; None draws them from the seed (centers uniform over the
    grid extent, widths uniform over 0.18..0.40 of the grid span).  Draw
    order: centers, widths, source factor, anomaly factor.
    """

    n_anomalies: int = 12
    centers: np.ndarray | None = None
    widths: np.ndarray | None = None
    amplitude_rank: int = 5
    amplitude_scale: float = 0.35
    seed: int = 0

    def validate(self) -> None:
        if self.n_anomalies < 1:
            raise ValueError(f"need at least one anomaly, got {self.n_anomalies}")
        if self.amplitude_rank < 1 or self.amplitude_rank > self.n_anomalies:
            raise ValueError(
                f"amplitude rank must be in 1..n_anomalies, got {self.amplitude_rank}")
        if self.widths is not None and np.any(np.asarray(self.widths) <= 0):
            raise ValueError("anomaly widths must be positive")
        if self.amplitude_scale < 0:
            raise ValueError(f"amplitude scale must be nonnegative, got {self.amplitude_scale}")


@dataclass
class NoiseSpec:
    """Per-station noise levels sigma ~ U(sigma_lo, sigma_hi) seconds."""

    sigma_lo: float = 0.03
    sigma_hi: float = 0.15
    nominal_sigma: float = 0.06
    seed: int = 0

    def validate(self) -> None:
        if not (0 <= self.sigma_lo <= self.sigma_hi):
            raise ValueError(
                f"need 0 <= sigma_lo <= sigma_hi, got [{self.sigma_lo}, {self.sigma_hi}]")
        if self.nominal_sigma < 0:
            raise ValueError(f"nominal sigma must be nonnegative, got {self.nominal_sigma}")


def random_sources(grid: ReceiverGrid, n_s: int, seed: int) -> SourceSet:
    """Sources scattered uniformly over the receiver-grid extent."""
    rng = make_rng(seed)
    x0, x1 = grid.x_coords()[0], grid.x_coords()[-1]
    y0, y1 = grid.y_coords()[0], grid.y_coords()[-1]
    coords = np.column_stack([rng_uniform(rng, x0, x1, n_s), rng_uniform(rng, y0, y1, n_s)])
    return SourceSet(coords=coords)


def generate_field(grid: ReceiverGrid, sources: SourceSet, spec: FieldSpec) -> ResidualTensor:
    """value(p, q, s) = sum_a C[s, a] exp(-|x_pq - center_a|^2 / (2 width_a^2))
    with C a seeded rank-limited random amplitude matrix."""
    spec.validate()
    rng = make_rng(spec.seed)
    xs = grid.x_coords()
    ys = grid.y_coords()
    span = max(xs[-1] - xs[0], ys[-1] - ys[0])

    if spec.centers is None:
        centers = np.column_stack([
            rng_uniform(rng, xs[0], xs[-1], spec.n_anomalies),
            rng_uniform(rng, ys[0], ys[-1], spec.n_anomalies),
        ])
    else:
        centers = np.asarray(spec.centers, dtype=float)
        if centers.shape != (spec.n_anomalies, 2):
            raise ValueError(f"centers shape {centers.shape} != ({spec.n_anomalies}, 2)")
    if spec.widths is None:
        widths = rng_uniform(rng, 0.18 * span, 0.40 * span, spec.n_anomalies)
    else:
        widths = np.asarray(spec.widths, dtype=float)
        if widths.shape != (spec.n_anomalies,):
            raise ValueError(f"widths shape {widths.shape} != ({spec.n_anomalies},)")

    r = spec.amplitude_rank
    source_factor = rng_gaussian(rng, 0.0, 1.0, (sources.n_s, r))
    anomaly_factor = rng_gaussian(rng, 0.0, 1.0, (spec.n_anomalies, r))
    amplitudes = spec.amplitude_scale * (source_factor @ anomaly_factor.T) / np.sqrt(r)

    X, Y = np.meshgrid(xs, ys, indexing="ij")
    d2 = (X[:, :, None] - centers[None, None, :, 0]) ** 2 \
        + (Y[:, :, None] - centers[None, None, :, 1]) ** 2
    bumps = np.exp(-d2 / (2.0 * widths[None, None, :] ** 2))  # (nx, ny, n_a)
    values = np.einsum("pqa,sa->pqs", bumps, amplitudes)
    return ResidualTensor(grid, sources, values)


def subsample_mask(grid: ReceiverGrid, sources: SourceSet, ratio: float,
                   cluster_count: int = 12, seed: int = 0,
                   dropout: float = 0.35) -> SamplingMask:
    """Clustered station-wise sampling with independent per-source dropout.

    Draws ``cluster_count`` cluster centers uniformly on the grid, keeps the
    round(ratio * nx * ny) gridpoints closest to their nearest center (ties by
    linear index), then removes each (station, source) observation
    independently with probability ``dropout``.
    """
    if not (0 < ratio <= 1):
        raise ValueError(f"sampling ratio must be in (0, 1], got {ratio}")
    if not (0 <= dropout < 1):
        raise ValueError(f"dropout must be in [0, 1), got {dropout}")
    if cluster_count < 1:
        raise ValueError(f"need at least one cluster, got {cluster_count}")
    n_stations = int(round(ratio * grid.nx * grid.ny))
    if n_stations < 1:
        raise ValueError(f"sampling ratio {ratio} yields zero stations")

    rng = make_rng(seed)
    xs = grid.x_coords()
    ys = grid.y_coords()
    centers = np.column_stack([
        rng_uniform(rng, xs[0], xs[-1], cluster_count),
        rng_uniform(rng, ys[0], ys[-1], cluster_count),
    ])
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel()])  # row-major (p, q) linear order
    dist = np.sqrt(((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
    chosen = np.lexsort((np.arange(pts.shape[0]), dist))[:n_stations]
    chosen = np.sort(chosen)

    station_flags = np.zeros(grid.nx * grid.ny, dtype=bool)
    station_flags[chosen] = True
    flags = np.zeros((grid.nx, grid.ny, sources.n_s), dtype=bool)
    flags[station_flags.reshape(grid.nx, grid.ny), :] = True
    if dropout > 0:
        keep = rng_uniform(rng, 0.0, 1.0, (n_stations, sources.n_s)) >= dropout
        flags[station_flags.reshape(grid.nx, grid.ny), :] = keep
    mask = SamplingMask(flags)
    if mask.count < 1:
        raise ValueError("dropout removed every observation; lower it or raise the ratio")
    return mask


def canonical_observation_order(mask: SamplingMask):
    """Indices (p, q, s) of observed entries sorted by (source, rx, ry)."""
    s, p, q = np.nonzero(np.moveaxis(mask.flags, 2, 0))
    return p, q, s


def observed_values(tensor: ResidualTensor, mask: SamplingMask) -> np.ndarray:
    """Observed entries in canonical (source, rx, ry) order."""
    p, q, s = canonical_observation_order(mask)
    return tensor.values[p, q, s]


def add_noise(tensor: ResidualTensor, mask: SamplingMask, spec: NoiseSpec):
    """Heteroscedastic station noise on the observed entries.

    Every station (p, q) draws its deviation once from U(sigma_lo, sigma_hi);
    each observed entry at that station gets independent N(0, sigma_pq^2)
    noise.  Returns (b, station_sigmas) with b in canonical (source, rx, ry)
    order.  Draws cover the full grid/tensor so the stream does not depend on
    the mask.
    """
    spec.validate()
    if mask.shape != tensor.shape:
        raise ValueError(f"mask shape {mask.shape} != tensor shape {tensor.shape}")
    rng = make_rng(spec.seed)
    nx, ny, _ = tensor.shape
    station_sigmas = rng_uniform(rng, spec.sigma_lo, spec.sigma_hi, (nx, ny))
    noise = rng_gaussian(rng, 0.0, 1.0, tensor.shape) * station_sigmas[:, :, None]
    p, q, s = canonical_observation_order(mask)
    b = tensor.values[p, q, s] + noise[p, q, s]
    return b, station_sigmas


def noisy_tensor(tensor: ResidualTensor, mask: SamplingMask, b: np.ndarray) -> ResidualTensor:
    """Observed tensor: b scattered onto the mask, zeros elsewhere."""
    values = np.zeros(tensor.shape)
    p, q, s = canonical_observation_order(mask)
    values[p, q, s] = b
    return ResidualTensor(tensor.grid, tensor.sources, values)


def misfit_budget(n_obs: int, nominal_sigma: float) -> float:
    """Aggregate misfit budget nominal_sigma * sqrt(n_obs)."""
    if n_obs < 1:
        raise ValueError(f"need at least one observation, got {n_obs}")
    return float(nominal_sigma) * float(np.sqrt(n_obs))


def true_misfit(b: np.ndarray, tensor: ResidualTensor, mask: SamplingMask) -> float:
    """||b - A(X_true)||_2, the misfit the noisy data actually carries."""
    return float(np.linalg.norm(b - observed_values(tensor, mask)))


__all__ = [
    "FieldSpec", "NoiseSpec", "random_sources", "generate_field", "subsample_mask",
    "canonical_observation_order", "observed_values", "add_noise", "noisy_tensor",
    "misfit_budget", "true_misfit",
]
