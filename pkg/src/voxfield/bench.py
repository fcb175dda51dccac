"""Simulation benchmark: render, integrate, build ESDF variants, compare to ground truth."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import ErrorStats, esdf_error, surface_error
from .esdf import EsdfConfig, FixedBandMode, Metric, PropagationStats, check_invariants, new_esdf_layer, propagate
from .geometry import Transform
from .sim import CameraModel, World, default_world, ground_truth_esdf, render_depth, sample_viewpoints
from .tsdf import Scan, TsdfConfig, integrate_scan
from .voxel_store import Layer, LayerKind


@dataclass(frozen=True)
class Variant:
    name: str
    band: FixedBandMode = FixedBandMode.ONE_VOXEL
    metric: Metric = Metric.QUASI_EUCLIDEAN
    occupancy: bool = False


DEFAULT_VARIANTS = (
    Variant("occupancy", occupancy=True),
    Variant("half_trunc_quasi", FixedBandMode.HALF_TRUNCATION),
    Variant("half_trunc_euclid", FixedBandMode.HALF_TRUNCATION, Metric.EUCLIDEAN),
    Variant("one_voxel_quasi"),
    Variant("one_voxel_euclid", metric=Metric.EUCLIDEAN),
)


@dataclass(frozen=True)
class BenchConfig:
    voxel_sizes: tuple[float, ...] = (0.05, 0.10, 0.20)
    n_viewpoints: int = 50
    seed: int = 0
    min_clearance: float = 1.0
    tsdf: TsdfConfig = TsdfConfig()
    truncation_mult: float = 4.0
    esdf: EsdfConfig = EsdfConfig(d_max=2.0)
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS
    camera: CameraModel = CameraModel()
    check_invariants: bool = False
    max_surface_points: int = 200_000


@dataclass
class BenchResult:
    rows: list[dict] = field(default_factory=list)
    timings: list[dict] = field(default_factory=list)
    invariant_violations: list[str] = field(default_factory=list)
    propagations_checked: int = 0

    def stats(self, voxel_size: float, variant: str) -> dict:
        for r in self.rows:
            if r["voxel_size"] == voxel_size and r["variant"] == variant:
                return r
        raise KeyError((voxel_size, variant))


def render_all(world: World, poses: list[Transform], camera: CameraModel) -> list[Scan]:
    return [render_depth(world, p, camera) for p in poses]


def surface_points(scans: list[Scan], limit: int, seed: int) -> np.ndarray:
    pts = np.concatenate([s.world_points() for s in scans]) if scans else np.empty((0, 3))
    if len(pts) > limit:
        pts = pts[np.sort(np.random.default_rng(seed).choice(len(pts), limit, replace=False))]
    return pts


def run_sim_bench(config: BenchConfig = BenchConfig(), world: World | None = None) -> BenchResult:
    world = world or default_world()
    poses = sample_viewpoints(world, config.n_viewpoints, config.min_clearance, seed=config.seed)
    scans = render_all(world, poses, config.camera)
    gt_points = surface_points(scans, config.max_surface_points, config.seed)
    result = BenchResult()
    for v in config.voxel_sizes:
        tcfg = replace(config.tsdf, truncation=config.truncation_mult * v).resolved(v)
        tsdf = Layer(v, kind=LayerKind.TSDF)
        ecfgs = {var.name: replace(config.esdf, fixed_band_mode=var.band, metric=var.metric,
                                   truncation=tcfg.truncation) for var in config.variants}
        esdfs = {var.name: new_esdf_layer(tsdf, ecfgs[var.name]) for var in config.variants}
        esdf_times: dict[str, list[float]] = {var.name: [] for var in config.variants}
        insert_times = []
        for scan in scans:
            t0 = time.perf_counter()
            integrate_scan(tsdf, scan, tcfg)
            insert_times.append(time.perf_counter() - t0)
            for var in config.variants:
                st: PropagationStats = propagate(tsdf, None, esdfs[var.name], ecfgs[var.name],
                                                 consumer=var.name, occupancy=var.occupancy)
                esdf_times[var.name].append(st.wall_time)
                if config.check_invariants:
                    result.propagations_checked += 1
                    for msg in check_invariants(tsdf, esdfs[var.name], ecfgs[var.name], var.occupancy):
                        result.invariant_violations.append(f"v={v} {var.name}: {msg}")
        surf = surface_error(tsdf, gt_points, tcfg.truncation) if len(gt_points) else ErrorStats.from_errors([], 0)
        gt = ground_truth_esdf(world, v, config.esdf.d_max, like=tsdf)
        for var in config.variants:
            st = esdf_error(esdfs[var.name], gt)
            result.rows.append({"voxel_size": v, "variant": var.name, **st.as_dict(),
                                "surface_rms": surf.rms})
            result.timings.append({"voxel_size": v, "variant": var.name,
                                   "esdf_total_s": float(sum(esdf_times[var.name])),
                                   "esdf_median_s": float(np.median(esdf_times[var.name])) if scans else 0.0,
                                   "insert_total_s": float(sum(insert_times))})
    return result


ROW_FIELDS = ("voxel_size", "variant", "rms", "mean", "max", "count", "unknown_fraction", "surface_rms")
TIMING_FIELDS = ("voxel_size", "variant", "esdf_total_s", "esdf_median_s", "insert_total_s")
