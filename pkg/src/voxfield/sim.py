"""Analytic worlds, a sphere-traced depth camera and ground-truth ESDFs."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numba
import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import Transform
from .tsdf import Scan
from .voxel_store import FIXED, OBSERVED, Layer, LayerKind, global_indices_from_points

PLANE, SPHERE, BOX = 0, 1, 2


@dataclass(frozen=True)
class Plane:
    normal: tuple[float, float, float]
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("plane normal must be a unit vector")


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("sphere radius must be positive")


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("box half extents must be positive")


@dataclass(frozen=True)
class World:
    primitives: tuple = ()
    bounds: tuple[tuple[float, float, float], tuple[float, float, float]] = ((0.0, 0.0, 0.0), (10.0, 10.0, 10.0))

    def params(self) -> np.ndarray:
        """Primitive table (K, 7): type followed by six parameters."""
        rows = []
        for p in self.primitives:
            if isinstance(p, Plane):
                rows.append([PLANE, *p.normal, p.offset, 0.0, 0.0])
            elif isinstance(p, Sphere):
                rows.append([SPHERE, *p.center, p.radius, 0.0, 0.0])
            else:
                rows.append([BOX, *p.center, *p.half_extents])
        return np.asarray(rows, dtype=np.float64).reshape(-1, 7)


class WorldParseError(ValueError):
    pass


def parse_world(text: str) -> World:
    prims = []
    bounds = ((0.0, 0.0, 0.0), (10.0, 10.0, 10.0))
    arity = {"bounds": 6, "plane": 4, "sphere": 4, "box": 6}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        if kind not in arity:
            raise WorldParseError(f"line {lineno}: unknown primitive {kind!r}")
        try:
            vals = [float(x) for x in rest]
        except ValueError as exc:
            raise WorldParseError(f"line {lineno}: {exc}") from None
        if len(vals) != arity[kind]:
            raise WorldParseError(f"line {lineno}: {kind} takes {arity[kind]} numbers, got {len(vals)}")
        try:
            if kind == "bounds":
                bounds = (tuple(vals[:3]), tuple(vals[3:]))
                if any(lo >= hi for lo, hi in zip(*bounds)):
                    raise ValueError("empty bounds")
            elif kind == "plane":
                prims.append(Plane(tuple(vals[:3]), vals[3]))
            elif kind == "sphere":
                prims.append(Sphere(tuple(vals[:3]), vals[3]))
            else:
                prims.append(Box(tuple(vals[:3]), tuple(vals[3:])))
        except ValueError as exc:
            raise WorldParseError(f"line {lineno}: {exc}") from None
    return World(tuple(prims), bounds)


def load_world(path) -> World:
    return parse_world(Path(path).read_text())


def default_world() -> World:
    return parse_world(resources.files("voxfield").joinpath("data/default_world.txt").read_text())


@numba.njit(cache=True, inline="always")
def _sdf_point(params, x, y, z):
    best = np.inf
    for k in range(params.shape[0]):
        t = params[k, 0]
        if t == PLANE:
            d = params[k, 1] * x + params[k, 2] * y + params[k, 3] * z - params[k, 4]
        elif t == SPHERE:
            dx = x - params[k, 1]
            dy = y - params[k, 2]
            dz = z - params[k, 3]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - params[k, 4]
        else:
            qx = abs(x - params[k, 1]) - params[k, 4]
            qy = abs(y - params[k, 2]) - params[k, 5]
            qz = abs(z - params[k, 3]) - params[k, 6]
            ox = max(qx, 0.0)
            oy = max(qy, 0.0)
            oz = max(qz, 0.0)
            d = np.sqrt(ox * ox + oy * oy + oz * oz) + min(max(qx, max(qy, qz)), 0.0)
        if d < best:
            best = d
    return best


@numba.njit(cache=True)
def _sdf_many(params, pts, out):
    for i in range(pts.shape[0]):
        out[i] = _sdf_point(params, pts[i, 0], pts[i, 1], pts[i, 2])


def world_sdf(world: World, p) -> np.ndarray | float:
    """Signed distance to the union of primitives (scalar for one point)."""
    pts = np.asarray(p, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.ascontiguousarray(pts.reshape(-1, 3))
    out = np.empty(pts.shape[0])
    _sdf_many(world.params(), pts, out)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class CameraModel:
    width: int = 320
    height: int = 240
    fx: float = 160.0
    fy: float = 160.0
    cx: float = 160.0
    cy: float = 120.0
    max_range: float = 5.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0 or self.max_range <= 0:
            raise ValueError("focal lengths and max_range must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def ray_directions(self) -> np.ndarray:
        """Unit rays through pixel centers in the optical frame, row-major (H*W, 3)."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)


@numba.njit(cache=True)
def _trace(params, origin, dirs, max_range, eps, out_t):
    for i in range(dirs.shape[0]):
        t = 0.0
        out_t[i] = -1.0
        for _ in range(10000):
            x = origin[0] + t * dirs[i, 0]
            y = origin[1] + t * dirs[i, 1]
            z = origin[2] + t * dirs[i, 2]
            d = _sdf_point(params, x, y, z)
            if abs(d) < eps:
                if t <= max_range:
                    out_t[i] = t
                break
            if d < 0:
                break  # started inside geometry
            t += d
            if t > max_range:
                break


def render_depth(world: World, pose: Transform, camera: CameraModel = CameraModel(), eps: float = 1e-6) -> Scan:
    """Sphere-trace every pixel; hits are returned in the sensor frame."""
    dirs_s = camera.ray_directions()
    dirs_w = np.ascontiguousarray(dirs_s @ pose.rotation.T)
    t = np.empty(dirs_s.shape[0])
    _trace(world.params(), pose.translation.astype(np.float64), dirs_w, camera.max_range, eps, t)
    hit = t >= 0
    return Scan(dirs_s[hit] * t[hit, None], pose)


class SamplingError(RuntimeError):
    pass


def sample_viewpoints(world: World, n: int, min_clearance: float = 1.0, bounds=None, seed: int = 0,
                      max_attempts: int = 1_000_000) -> list[Transform]:
    """Rejection-sample ``n`` poses in free space with uniform random orientation."""
    if n < 0:
        raise ValueError("n must be non-negative")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in (bounds or world.bounds))
    rng = np.random.default_rng(seed)
    poses = []
    attempts = 0
    params = world.params()
    while len(poses) < n:
        batch = min(4096, max_attempts - attempts)
        if batch <= 0:
            raise SamplingError(f"found {len(poses)} of {n} viewpoints in {max_attempts} attempts")
        cand = rng.uniform(lo, hi, size=(batch, 3))
        d = np.empty(batch)
        _sdf_many(params, cand, d)
        ok = np.flatnonzero(d >= min_clearance)
        take = ok[: n - len(poses)]
        attempts += batch
        rots = Rotation.random(take.size, random_state=rng).as_matrix() if take.size else []
        poses.extend(Transform(R, p) for R, p in zip(rots, cand[take]))
    return poses


def ground_truth_esdf(world: World, voxel_size: float, d_max: float, like: Layer | None = None,
                      voxels_per_side: int = 16) -> Layer:
    """ESDF of the analytic world at voxel centers, clamped to ``d_max``.

    Covers the blocks of ``like`` when given, otherwise the world bounds.
    """
    layer = Layer(voxel_size, voxels_per_side if like is None else like.voxels_per_side, LayerKind.ESDF, d_max=d_max)
    vps = layer.voxels_per_side
    if like is not None:
        blocks = like.allocated_block_indices()
    else:
        lo = global_indices_from_points(np.asarray([world.bounds[0]]), voxel_size)[0] // vps
        hi = global_indices_from_points(np.asarray([world.bounds[1]]), voxel_size)[0] // vps
        axes = [np.arange(a, b + 1) for a, b in zip(lo, hi)]
        blocks = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    slots = layer.allocate_blocks(blocks)
    centers = (layer.voxel_global_indices(slots).reshape(-1, 3) + 0.5) * voxel_size
    d = np.clip(world_sdf(world, centers), -d_max, d_max)
    layer.data["distance"][slots] = d.reshape(len(slots), -1)
    layer.data["flags"][slots] = OBSERVED | FIXED
    return layer
