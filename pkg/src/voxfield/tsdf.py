"""Fusing posed scans into a TSDF layer."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from .geometry import Transform
from .voxel_store import (
    EMPTY_KEY,
    KEY_OFFSET,
    Layer,
    LayerKind,
    hash_find,
    hash_insert,
    nb_pack_key,
)


class WeightMode(str, enum.Enum):
    CONSTANT = "constant"
    INVERSE_Z2 = "inverse_z2"
    INVERSE_Z2_DROPOFF = "inverse_z2_dropoff"


class MergeMode(str, enum.Enum):
    SIMPLE = "simple_raycast"
    GROUPED = "grouped_raycast"
    GROUPED_ANTIGRAZE = "grouped_antigraze"


@dataclass(frozen=True)
class TsdfConfig:
    """Integration parameters.

    ``truncation`` and ``dropoff`` default to 4 and 1 voxel sizes; call
    :meth:`resolved` to fill them in for a given layer.
    """

    truncation: float | None = None
    dropoff: float | None = None
    max_weight: float = 1e4
    weight_mode: WeightMode = WeightMode.INVERSE_Z2_DROPOFF
    merge_mode: MergeMode = MergeMode.GROUPED
    max_ray_length: float = 5.0
    min_ray_length: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "weight_mode", WeightMode(self.weight_mode))
        object.__setattr__(self, "merge_mode", MergeMode(self.merge_mode))
        if self.max_weight <= 0:
            raise ValueError("max_weight must be positive")
        if not 0 <= self.min_ray_length < self.max_ray_length:
            raise ValueError("need 0 <= min_ray_length < max_ray_length")
        if self.truncation is not None and self.truncation <= 0:
            raise ValueError("truncation must be positive")
        if self.truncation is not None and self.dropoff is not None:
            if not 0 < self.dropoff < self.truncation:
                raise ValueError("need 0 < dropoff < truncation")

    def resolved(self, voxel_size: float) -> "TsdfConfig":
        trunc = 4.0 * voxel_size if self.truncation is None else self.truncation
        drop = voxel_size if self.dropoff is None else self.dropoff
        if not 0 < drop < trunc:
            raise ValueError("need 0 < dropoff < truncation")
        return replace(self, truncation=trunc, dropoff=drop)


@dataclass
class Scan:
    """Points in the sensor frame plus the sensor-to-world pose."""

    points: np.ndarray
    pose: Transform = field(default_factory=Transform)
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")

    @property
    def origin(self) -> np.ndarray:
        return self.pose.translation

    def __len__(self):
        return len(self.points)

    def world_points(self) -> np.ndarray:
        return self.pose.apply(self.points)


@dataclass
class IntegrationStats:
    updated_voxels: int = 0
    raycasts: int = 0
    points_used: int = 0
    skipped_points: int = 0

    def __iadd__(self, other: "IntegrationStats"):
        self.updated_voxels += other.updated_voxels
        self.raycasts += other.raycasts
        self.points_used += other.points_used
        self.skipped_points += other.skipped_points
        return self


# --------------------------------------------------------------------------
# per-voxel math (reference implementations; the kernels inline the same steps)


def projective_distance(x, p, s) -> float:
    """Distance from voxel center ``x`` to point ``p`` along the ray from ``s``.

    Positive on the sensor side of ``p``; sign(0) counts as positive.
    """
    x, p, s = (np.asarray(a, dtype=np.float64) for a in (x, p, s))
    diff = p - x
    sign = 1.0 if float(np.dot(diff, p - s)) >= 0.0 else -1.0
    return sign * float(np.linalg.norm(diff))


def dropoff_factor(d: float, truncation: float, dropoff: float) -> float:
    if d > -dropoff:
        return 1.0
    if d > -truncation:
        return (d + truncation) / (truncation - dropoff)
    return 0.0


def weight(x, p, s, config: TsdfConfig) -> float:
    if config.truncation is None or config.dropoff is None:
        raise ValueError("weight() needs a resolved config (see TsdfConfig.resolved)")
    z = float(np.linalg.norm(np.asarray(p, dtype=np.float64) - np.asarray(s, dtype=np.float64)))
    if config.weight_mode == WeightMode.CONSTANT:
        return 1.0
    w = 1.0 / (z * z)
    if config.weight_mode == WeightMode.INVERSE_Z2:
        return w
    return w * dropoff_factor(projective_distance(x, p, s), config.truncation, config.dropoff)


def update_voxel(D: float, W: float, d: float, w: float, max_weight: float,
                 truncation: float | None = None) -> tuple[float, float]:
    """Weighted running-mean merge of one observation into a voxel."""
    if W < 0 or w < 0:
        raise ValueError("weights must be non-negative")
    if truncation is not None:
        d = min(max(d, -truncation), truncation)
    if w == 0:
        return D, W
    total = W + w
    return (W * D + w * d) / total, min(total, max_weight)


# --------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _ray_setup(start, end, voxel_size):
    s = start / voxel_size
    e = end / voxel_size
    cur = np.floor(s).astype(np.int64)
    last = np.floor(e).astype(np.int64)
    step = np.zeros(3, np.int64)
    t_max = np.full(3, np.inf)
    t_delta = np.full(3, np.inf)
    for a in range(3):
        d = e[a] - s[a]
        if d > 0:
            step[a] = 1
            t_delta[a] = 1.0 / d
            t_max[a] = (cur[a] + 1 - s[a]) / d
        elif d < 0:
            step[a] = -1
            t_delta[a] = -1.0 / d
            t_max[a] = (cur[a] - s[a]) / d
    n = abs(last[0] - cur[0]) + abs(last[1] - cur[1]) + abs(last[2] - cur[2])
    return cur, last, step, t_max, t_delta, n


@numba.njit(cache=True, inline="always")
def _advance(cur, last, step, t_max, t_delta):
    # axes already at the end voxel are skipped, so rounding or ties at
    # voxel corners cannot step past the segment's last voxel
    a = -1
    for k in range(3):
        if cur[k] != last[k] and (a < 0 or t_max[k] < t_max[a]):
            a = k
    cur[a] += step[a]
    t_max[a] += t_delta[a]


@numba.njit(cache=True)
def _traverse_one(start, end, voxel_size):
    cur, last, step, t_max, t_delta, n = _ray_setup(start, end, voxel_size)
    out = np.empty((n + 1, 3), np.int64)
    for i in range(n + 1):
        out[i] = cur
        if i < n:
            _advance(cur, last, step, t_max, t_delta)
    return out


def traverse_voxels(start, end, voxel_size: float) -> np.ndarray:
    """Voxels pierced by the segment ``start -> end``, in order, as (N, 3) indices."""
    return _traverse_one(np.asarray(start, dtype=np.float64), np.asarray(end, dtype=np.float64), float(voxel_size))


@numba.njit(cache=True)
def _traverse_collect(origin, ends, voxel_size, vps, keys, values, out_keys):
    """Keys of blocks pierced by the rays that are not yet allocated."""
    n_out = 0
    last_key = EMPTY_KEY
    for r in range(ends.shape[0]):
        cur, last, step, t_max, t_delta, n = _ray_setup(origin, ends[r], voxel_size)
        for i in range(n + 1):
            key = nb_pack_key(cur[0] // vps, cur[1] // vps, cur[2] // vps)
            if key != last_key:
                last_key = key
                if hash_find(keys, values, key) < 0:
                    if n_out == out_keys.shape[0]:
                        bigger = np.empty(2 * out_keys.shape[0], np.int64)
                        bigger[:n_out] = out_keys[:n_out]
                        out_keys = bigger
                    if n_out == 0 or out_keys[n_out - 1] != key:
                        out_keys[n_out] = key
                        n_out += 1
            if i < n:
                _advance(cur, last, step, t_max, t_delta)
    return out_keys[:n_out]


@numba.njit(cache=True)
def _integrate_rays(keys, values, dist, wgt, col, stamp, generation, vps, voxel_size,
                    origin, points, base_w, colors, has_color, ends,
                    trunc, eps, wmax, dropoff, antigraze, term_keys, term_vals):
    nvox = vps * vps * vps
    updated = 0
    last_key = EMPTY_KEY
    slot = -1
    for r in range(points.shape[0]):
        p = points[r]
        cur, last, step, t_max, t_delta, n = _ray_setup(origin, ends[r], voxel_size)
        tx = np.int64(np.floor(p[0] / voxel_size))
        ty = np.int64(np.floor(p[1] / voxel_size))
        tz = np.int64(np.floor(p[2] / voxel_size))
        rx = p[0] - origin[0]
        ry = p[1] - origin[1]
        rz = p[2] - origin[2]
        in_front = True
        for i in range(n + 1):
            gx, gy, gz = cur[0], cur[1], cur[2]
            if in_front and gx == tx and gy == ty and gz == tz:
                in_front = False
            skip = False
            if antigraze and in_front:
                if hash_find(term_keys, term_vals, nb_pack_key(gx, gy, gz)) >= 0:
                    skip = True
            if not skip:
                bx = gx // vps
                by = gy // vps
                bz = gz // vps
                key = nb_pack_key(bx, by, bz)
                if key != last_key:
                    last_key = key
                    slot = hash_find(keys, values, key)
                    stamp[slot] = generation
                cx = (gx + 0.5) * voxel_size
                cy = (gy + 0.5) * voxel_size
                cz = (gz + 0.5) * voxel_size
                dx = p[0] - cx
                dy = p[1] - cy
                dz = p[2] - cz
                d = math.sqrt(dx * dx + dy * dy + dz * dz)
                if dx * rx + dy * ry + dz * rz < 0.0:
                    d = -d
                w = base_w[r]
                if dropoff:
                    if d <= -trunc:
                        w = 0.0
                    elif d <= -eps:
                        w = w * (d + trunc) / (trunc - eps)
                if w > 0.0:
                    if d > trunc:
                        d = trunc
                    elif d < -trunc:
                        d = -trunc
                    idx = slot * nvox + (gx - bx * vps) + vps * ((gy - by * vps) + vps * (gz - bz * vps))
                    W = np.float64(wgt[idx])
                    total = W + w
                    dist[idx] = (W * dist[idx] + w * d) / total
                    if has_color:
                        for c in range(3):
                            col[idx, c] = np.uint8(min(255.0, math.floor(
                                (W * col[idx, c] + w * colors[r, c]) / total + 0.5)))
                    wgt[idx] = min(total, wmax)
                    updated += 1
            if i < n:
                _advance(cur, last, step, t_max, t_delta)
    return updated


@numba.njit(cache=True)
def _group_points(points, base_w, colors, has_color, voxel_size):
    """Bucket points by terminal voxel: weighted mean point/color, summed weight."""
    n = points.shape[0]
    cap = 16
    while cap < 2 * n:
        cap *= 2
    keys = np.full(cap, EMPTY_KEY, np.int64)
    vals = np.full(cap, -1, np.int64)
    bucket_of = np.empty(n, np.int64)
    nb = 0
    for i in range(n):
        key = nb_pack_key(np.int64(np.floor(points[i, 0] / voxel_size)),
                          np.int64(np.floor(points[i, 1] / voxel_size)),
                          np.int64(np.floor(points[i, 2] / voxel_size)))
        b = hash_find(keys, vals, key)
        if b < 0:
            b = nb
            hash_insert(keys, vals, key, b)
            nb += 1
        bucket_of[i] = b
    sw = np.zeros(nb)
    sp = np.zeros((nb, 3))
    sc = np.zeros((nb, 3))
    for i in range(n):
        b = bucket_of[i]
        w = base_w[i]
        sw[b] += w
        for a in range(3):
            sp[b, a] += w * points[i, a]
            if has_color:
                sc[b, a] += w * colors[i, a]
    mp = np.empty((nb, 3))
    mc = np.zeros((nb, 3))
    for b in range(nb):
        for a in range(3):
            mp[b, a] = sp[b, a] / sw[b]
            if has_color:
                mc[b, a] = math.floor(sc[b, a] / sw[b] + 0.5)
    return mp, sw, mc, keys, vals


# --------------------------------------------------------------------------
# integration drivers


def _prepare(layer: Layer, scan: Scan, config: TsdfConfig):
    if layer.kind != LayerKind.TSDF:
        raise ValueError("TSDF integration needs a TSDF layer")
    cfg = config.resolved(layer.voxel_size)
    pts = scan.points
    rng = np.linalg.norm(pts, axis=1) if len(pts) else np.empty(0)
    keep = np.isfinite(rng) & (rng >= cfg.min_ray_length) & (rng <= cfg.max_ray_length) & (rng > 0)
    world = scan.pose.apply(pts[keep]) if len(pts) else np.empty((0, 3))
    z = rng[keep]
    if cfg.weight_mode == WeightMode.CONSTANT:
        base = np.ones(len(z))
    else:
        base = 1.0 / (z * z)
    colors = scan.colors[keep].astype(np.float64) if scan.colors is not None else np.zeros((len(z), 3))
    bound = KEY_OFFSET * layer.voxels_per_side * layer.voxel_size
    reach = cfg.max_ray_length + cfg.truncation
    if np.any(np.abs(scan.origin) + reach >= bound):
        raise OverflowError("scan extends beyond the addressable map")
    stats = IntegrationStats(points_used=int(keep.sum()), skipped_points=int((~keep).sum()))
    return cfg, np.ascontiguousarray(world), base, np.ascontiguousarray(colors), scan.colors is not None, stats


def _cast(layer: Layer, cfg: TsdfConfig, origin, points, base_w, colors, has_color,
          antigraze=False, term=None) -> int:
    if len(points) == 0:
        return 0
    origin = np.asarray(origin, dtype=np.float64)
    direction = points - origin
    norm = np.linalg.norm(direction, axis=1, keepdims=True)
    ends = np.ascontiguousarray(points + direction / norm * cfg.truncation)
    vps = layer.voxels_per_side
    missing = _traverse_collect(origin, ends, layer.voxel_size, vps, layer.hash_keys,
                                layer.hash_values, np.empty(64, np.int64))
    if missing.size:
        from .voxel_store import unpack_key

        uniq = np.unique(missing)
        layer.allocate_blocks(np.array([unpack_key(int(k)) for k in uniq], dtype=np.int64))
    if term is None:
        term = (np.full(1, EMPTY_KEY, np.int64), np.full(1, -1, np.int64))
    return int(_integrate_rays(
        layer.hash_keys, layer.hash_values, layer.flat("distance"), layer.flat("weight"),
        layer.flat("color"), layer.block_stamp, layer.generation, vps, layer.voxel_size,
        origin, points, base_w, colors, has_color, ends,
        cfg.truncation, cfg.dropoff, cfg.max_weight,
        cfg.weight_mode == WeightMode.INVERSE_Z2_DROPOFF, antigraze, term[0], term[1]))


def integrate_scan_simple(layer: Layer, scan: Scan, config: TsdfConfig) -> IntegrationStats:
    """One raycast per point, from the sensor origin to ``truncation`` past it."""
    cfg, pts, base, colors, has_color, stats = _prepare(layer, scan, config)
    stats.updated_voxels = _cast(layer, cfg, scan.origin, pts, base, colors, has_color)
    stats.raycasts = len(pts)
    return stats


def _grouped(layer: Layer, scan: Scan, config: TsdfConfig, antigraze: bool) -> IntegrationStats:
    cfg, pts, base, colors, has_color, stats = _prepare(layer, scan, config)
    if len(pts) == 0:
        return stats
    mean_pts, sum_w, mean_c, tkeys, tvals = _group_points(pts, base, colors, has_color, layer.voxel_size)
    stats.raycasts = len(mean_pts)
    stats.updated_voxels = _cast(layer, cfg, scan.origin, mean_pts, sum_w, mean_c, has_color,
                                 antigraze=antigraze, term=(tkeys, tvals))
    return stats


def integrate_scan_grouped(layer: Layer, scan: Scan, config: TsdfConfig) -> IntegrationStats:
    """Bucket points by end voxel and cast one merged ray per bucket."""
    return _grouped(layer, scan, config, antigraze=False)


def integrate_scan_grouped_antigraze(layer: Layer, scan: Scan, config: TsdfConfig) -> IntegrationStats:
    """Grouped integration that never writes free-space updates into another bucket's end voxel."""
    return _grouped(layer, scan, config, antigraze=True)


_DISPATCH = {
    MergeMode.SIMPLE: integrate_scan_simple,
    MergeMode.GROUPED: integrate_scan_grouped,
    MergeMode.GROUPED_ANTIGRAZE: integrate_scan_grouped_antigraze,
}


def integrate_scan(layer: Layer, scan: Scan, config: TsdfConfig) -> IntegrationStats:
    return _DISPATCH[config.merge_mode](layer, scan, config)


class TsdfIntegrator:
    """Holds a layer and config; accumulates stats over scans."""

    def __init__(self, layer: Layer, config: TsdfConfig | None = None):
        self.layer = layer
        self.config = config or TsdfConfig()
        self.stats = IntegrationStats()

    def integrate(self, scan: Scan) -> IntegrationStats:
        st = integrate_scan(self.layer, scan, self.config)
        self.stats += st
        return st
