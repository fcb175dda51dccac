"""Error metrics, residual analysis, collision-lookup model and timing helpers."""

from __future__ import annotations

import csv
import math
import statistics
import time
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .voxel_store import Layer, LayerKind, OBSERVED, find_blocks, interpolate_many

THETA_MIN = math.pi / 20
THETA_MAX = math.pi / 2


@dataclass(frozen=True)
class ErrorStats:
    rms: float
    mean: float
    max: float
    count: int
    unknown_fraction: float

    @classmethod
    def from_errors(cls, errors: np.ndarray, n_unknown: int = 0) -> "ErrorStats":
        e = np.asarray(errors, dtype=np.float64).reshape(-1)
        total = e.size + n_unknown
        unknown = n_unknown / total if total else 1.0
        if e.size == 0:
            return cls(0.0, 0.0, 0.0, 0, unknown)
        return cls(float(np.sqrt(np.mean(e * e))), float(e.mean()), float(np.abs(e).max()), int(e.size), unknown)

    def as_dict(self) -> dict:
        return asdict(self)


def surface_error(tsdf_layer: Layer, points, truncation: float) -> ErrorStats:
    """TSDF value interpolated at ground-truth surface points, clamped to the truncation."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values, ok = interpolate_many(tsdf_layer, pts)
    err = np.clip(values[ok], -truncation, truncation)
    return ErrorStats.from_errors(err, int((~ok).sum()))


def esdf_error(esdf_layer: Layer, gt_layer: Layer, mask: Callable[[np.ndarray], np.ndarray] | None = None) -> ErrorStats:
    """Statistics of ``esdf - gt`` over voxels observed in both layers.

    ``mask`` optionally receives the ground-truth distances of those voxels
    and returns which to keep.
    """
    if esdf_layer.kind != LayerKind.ESDF or gt_layer.kind != LayerKind.ESDF:
        raise ValueError("esdf_error compares two ESDF layers")
    if (esdf_layer.voxel_size != gt_layer.voxel_size
            or esdf_layer.voxels_per_side != gt_layer.voxels_per_side):
        raise ValueError("layer geometry differs")
    n = esdf_layer.n_blocks
    gslots = find_blocks(gt_layer.hash_keys, gt_layer.hash_values, esdf_layer.block_index[:n])
    have = np.flatnonzero(gslots >= 0)
    n_obs = int(((esdf_layer.data["flags"][:n] & OBSERVED) != 0).sum())
    if have.size == 0:
        return ErrorStats.from_errors(np.empty(0), n_obs)
    a_flags = esdf_layer.data["flags"][have]
    b_flags = gt_layer.data["flags"][gslots[have]]
    both = ((a_flags & OBSERVED) != 0) & ((b_flags & OBSERVED) != 0)
    a = esdf_layer.data["distance"][have][both]
    b = gt_layer.data["distance"][gslots[have]][both]
    if mask is not None:
        keep = np.asarray(mask(b), dtype=bool)
        a, b = a[keep], b[keep]
    return ErrorStats.from_errors(a - b, n_obs - int(both.sum()))


# ---- projective and grid-distance residuals


def projective_residual(theta, d):
    """Residual of a projective distance measured at incidence angle ``theta``."""
    return d * np.sin(theta) - d


def expected_projective_residual(d: float) -> float:
    """Mean of :func:`projective_residual` for theta uniform on [pi/20, pi/2]."""
    return d * ((math.cos(THETA_MIN) - math.cos(THETA_MAX)) / (THETA_MAX - THETA_MIN) - 1.0)


def quasi_euclidean_residual(phi, d):
    """Residual of the 26-connected path length vs. straight line, ``phi`` in [0, pi/4]."""
    return d - d * np.sin(5 * math.pi / 8 - phi) / math.sin(3 * math.pi / 8)


def expected_quasi_residual(d: float) -> float:
    """Mean of :func:`quasi_euclidean_residual` for phi uniform on [0, pi/4]."""
    s = math.sin(3 * math.pi / 8)
    mean_sin = (math.cos(3 * math.pi / 8) - math.cos(5 * math.pi / 8)) / (math.pi / 4)
    return d * (1.0 - mean_sin / s)


# worst-case relative overestimate of the grid distance, attained at phi = pi/8
QUASI_WORST_CASE = -float(quasi_euclidean_residual(math.pi / 8, 1.0))
# the rounded figure quoted for the same bound in earlier work
QUASI_WORST_CASE_ROUNDED = 0.08

MC_WEIGHTINGS = ("inverse_z2", "equal")


def monte_carlo_merged_error(n_obs: int, n_trials: int = 100_000, truncation: float = 1.0, seed: int = 0,
                             weighting: str = "inverse_z2",
                             quantiles: Sequence[float] = (0.5, 0.9, 0.95, 0.99)) -> dict[float, float]:
    """Quantiles of |merged error| / truncation for ``n_obs`` fused observations.

    Each observation of a voxel at true distance ``truncation`` arrives at an
    angle drawn uniformly from [pi/20, pi/2]. With ``inverse_z2`` weighting the
    sensor sits at a fixed standoff from the surface, so an observation at
    incidence theta has depth proportional to 1/sin(theta) and weight
    sin(theta)^2. ``equal`` uses unit weights.
    """
    if n_obs < 1 or n_trials < 1:
        raise ValueError("n_obs and n_trials must be at least 1")
    if weighting not in MC_WEIGHTINGS:
        raise ValueError(f"weighting must be one of {MC_WEIGHTINGS}")
    rng = np.random.default_rng(seed)
    theta = rng.uniform(THETA_MIN, THETA_MAX, size=(n_trials, n_obs))
    r = projective_residual(theta, truncation)
    w = np.sin(theta) ** 2 if weighting == "inverse_z2" else np.ones_like(theta)
    err = np.abs((w * r).sum(axis=1) / w.sum(axis=1)) / truncation
    return {float(q): float(np.quantile(err, q)) for q in quantiles}


# ---- collision lookup cost


def voxel_measure(v: float, literal: bool = False) -> float:
    """Denominator of the lookup model: voxel volume, or the edge length if ``literal``."""
    return v if literal else v ** 3


def occupancy_lookup_count(r: float, v: float, literal: bool = False) -> int:
    """Voxels inside a sphere of radius ``r``."""
    if r <= 0 or v <= 0:
        raise ValueError("r and v must be positive")
    return math.ceil((4.0 / 3.0) * math.pi * r ** 3 / voxel_measure(v, literal))


def trajectory_lookup_counts(r: float, v: float, l: float, d_max: float,
                             literal: bool = False) -> tuple[int, int, int]:
    """(occupancy lookups, worst-case ESDF lookups, best-case ESDF lookups) for a path of length ``l``."""
    if min(r, v, l, d_max) <= 0:
        raise ValueError("r, v, l and d_max must be positive")
    per_check = math.ceil((9.0 / 8.0) * math.pi * r ** 3 / voxel_measure(v, literal))
    return per_check * math.ceil(l / r), math.ceil(l / r), math.ceil(l / d_max)


# ---- timing


def median_time(fn: Callable[[], object], repeats: int = 3) -> float:
    """Median monotonic wall time of ``fn`` over ``repeats`` calls."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def timing_harness(variants: Mapping[str, Callable[[], Iterable[float]]]) -> list[dict]:
    """Run each variant in turn; each returns its per-step times in seconds."""
    rows = []
    for name, run in variants.items():
        times = list(run())
        rows.append({
            "variant": name,
            "steps": len(times),
            "median_s": statistics.median(times) if times else float("nan"),
            "total_s": float(sum(times)),
        })
    return rows


def write_csv(rows: Sequence[Mapping], path, fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(Path(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in fieldnames})


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x
