"""Incremental ESDF maintenance from a TSDF layer.

Updated TSDF voxels feed two wavefronts over the 26-connected voxel grid:
*raise* invalidates distances that depended on a voxel whose value grew,
*lower* relaxes distances outward from the fixed band. All raises are
processed before any lowering.

Voxels in the fixed band copy their TSDF distance and are never touched by
either wavefront. A positive voxel takes ``source + step`` and a negative one
``source - step`` (zero counts as positive). Fixed voxels seed both sides;
beyond the band a voxel is relaxed only from neighbors of its own sign, and
no relaxation may move a voxel to the other side.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass

import numba
import numpy as np

from .voxel_store import (
    FIXED,
    IN_LOWER,
    IN_RAISE,
    OBSERVED,
    TSDF_OBSERVED_WEIGHT,
    Layer,
    LayerKind,
    find_blocks,
    hash_find,
    nb_pack_key,
    neighbor_slot_table,
    split_global_index,
)


class FixedBandMode(str, enum.Enum):
    ONE_VOXEL = "one_voxel"
    HALF_TRUNCATION = "half_truncation"


class Metric(str, enum.Enum):
    QUASI_EUCLIDEAN = "quasi_euclidean"
    EUCLIDEAN = "euclidean"


class QueueMode(str, enum.Enum):
    FIFO = "fifo"
    PRIORITY_SINGLE_INSERT = "priority_single_insert"
    PRIORITY_MULTI_INSERT = "priority_multi_insert"


_QUEUE_CODE = {QueueMode.FIFO: 0, QueueMode.PRIORITY_SINGLE_INSERT: 1, QueueMode.PRIORITY_MULTI_INSERT: 2}


@dataclass(frozen=True)
class EsdfConfig:
    d_max: float = 4.0
    fixed_band_mode: FixedBandMode = FixedBandMode.ONE_VOXEL
    metric: Metric = Metric.QUASI_EUCLIDEAN
    queue_mode: QueueMode = QueueMode.PRIORITY_SINGLE_INSERT
    bucket_width: float | None = None
    # TSDF truncation distance; None means 4 voxels
    truncation: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "fixed_band_mode", FixedBandMode(self.fixed_band_mode))
        object.__setattr__(self, "metric", Metric(self.metric))
        object.__setattr__(self, "queue_mode", QueueMode(self.queue_mode))
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if self.bucket_width is not None and self.bucket_width <= 0:
            raise ValueError("bucket_width must be positive")

    def truncation_for(self, voxel_size: float) -> float:
        return 4.0 * voxel_size if self.truncation is None else self.truncation

    def gamma(self, voxel_size: float) -> float:
        """Fixed-band radius for a layer of this voxel size."""
        trunc = self.truncation_for(voxel_size)
        g = voxel_size if self.fixed_band_mode == FixedBandMode.ONE_VOXEL else trunc / 2.0
        if not 0 < g <= trunc:
            raise ValueError("fixed band radius must lie in (0, truncation]")
        if self.d_max <= g:
            raise ValueError("d_max must exceed the fixed band radius")
        return g


@dataclass
class PropagationStats:
    raised: int = 0
    lowered: int = 0
    relaxations: int = 0
    seeds: int = 0
    wall_time: float = 0.0


def is_fixed(d_tsdf: float, gamma: float) -> bool:
    return -gamma < d_tsdf < gamma


# --------------------------------------------------------------------------
# kernel


def _neighbor_offsets():
    offs = [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)]
    o = np.array(offs, dtype=np.int64)
    return o, np.sqrt((o * o).sum(axis=1)).astype(np.float64)


NEIGHBOR_OFFSETS, NEIGHBOR_NORMS = _neighbor_offsets()


@numba.njit(cache=True)
def _push(pool, st, head, tail, b, vox):
    # st[0]: free list head, st[1]: pool entries used
    e = st[0]
    if e >= 0:
        st[0] = pool[e, 1]
    else:
        if st[1] == pool.shape[0]:
            bigger = np.empty((2 * pool.shape[0], 2), np.int64)
            bigger[: st[1]] = pool[: st[1]]
            pool = bigger
        e = st[1]
        st[1] += 1
    pool[e, 0] = vox
    pool[e, 1] = -1
    if tail[b] >= 0:
        pool[tail[b], 1] = e
    else:
        head[b] = e
    tail[b] = e
    return pool


@numba.njit(cache=True)
def _pop(pool, st, head, tail, b):
    e = head[b]
    vox = pool[e, 0]
    head[b] = pool[e, 1]
    if head[b] < 0:
        tail[b] = -1
    pool[e, 1] = st[0]
    st[0] = e
    return vox


@numba.njit(cache=True, inline="always")
def _neighbor(eid, dx, dy, dz, vps, nvox, table):
    slot = eid // nvox
    lin = eid - slot * nvox
    lx = lin % vps
    ly = (lin // vps) % vps
    lz = lin // (vps * vps)
    nx = lx + dx
    ny = ly + dy
    nz = lz + dz
    ox = 0
    oy = 0
    oz = 0
    if nx < 0:
        ox = -1
    elif nx >= vps:
        ox = 1
    if ny < 0:
        oy = -1
    elif ny >= vps:
        oy = 1
    if nz < 0:
        oz = -1
    elif nz >= vps:
        oz = 1
    ns = table[slot, (ox + 1) + 3 * (oy + 1) + 9 * (oz + 1)]
    if ns < 0:
        return -1
    return ns * nvox + (nx - ox * vps) + vps * ((ny - oy * vps) + vps * (nz - oz * vps))


@numba.njit(cache=True, inline="always")
def _global(eid, vps, nvox, bidx):
    slot = eid // nvox
    lin = eid - slot * nvox
    return (bidx[slot, 0] * vps + lin % vps,
            bidx[slot, 1] * vps + (lin // vps) % vps,
            bidx[slot, 2] * vps + lin // (vps * vps))


@numba.njit(cache=True)
def _lookup(gx, gy, gz, vps, nvox, keys, values):
    bx = gx // vps
    by = gy // vps
    bz = gz // vps
    slot = hash_find(keys, values, nb_pack_key(bx, by, bz))
    if slot < 0:
        return -1
    return slot * nvox + (gx - bx * vps) + vps * ((gy - by * vps) + vps * (gz - bz * vps))


@numba.njit(cache=True)
def _propagate_kernel(t_dist, t_wgt, t_ids, e_ids,
                      keys, values, bidx, table, dist, flags, parent,
                      vps, voxel_size, gamma, d_max, euclid, occupancy, queue_mode, bucket_width,
                      offs, norms, obs_weight):
    nvox = vps * vps * vps
    nb = 1 if queue_mode == 0 else int(np.ceil(d_max / bucket_width)) + 1
    head = np.full(nb + 1, -1, np.int64)
    tail = np.full(nb + 1, -1, np.int64)
    rq = nb  # raise queue lives in the last bucket
    pool = np.empty((1024, 2), np.int64)
    st = np.zeros(3, np.int64)
    st[0] = -1
    st[2] = nb  # lowest possibly non-empty lower bucket
    multi = queue_mode == 2
    n_raised = 0
    n_lowered = 0
    n_relax = 0
    n_seeds = 0
    # blocks holding a seed whose value changed or that left the band
    touched = np.zeros(table.shape[0], np.bool_)

    # ---- seed phase
    for i in range(t_ids.shape[0]):
        w = t_wgt[t_ids[i]]
        if w <= obs_weight:
            continue
        e = e_ids[i]
        dt = np.float64(t_dist[t_ids[i]])
        f = flags[e]
        if occupancy:
            fixed_now = dt < 0.0
            if fixed_now:
                dt = 0.0
            sgn = 1.0
        else:
            fixed_now = -gamma < dt < gamma
            sgn = 1.0 if dt >= 0.0 else -1.0
        observed = (f & OBSERVED) != 0
        was_fixed = (f & FIXED) != 0
        de = dist[e]
        to_raise = False
        to_lower = False
        new_nbrs = False
        if fixed_now:
            n_seeds += 1
            if not observed:
                to_lower = True
            elif was_fixed and de == dt:
                continue
            else:
                if was_fixed:
                    touched[e // nvox] = True
                # a fixed value seeds both sides, so any change can raise one of them
                to_raise = True
                to_lower = True
            dist[e] = dt
            flags[e] = f | OBSERVED | FIXED
            parent[e, 0] = 0
            parent[e, 1] = 0
            parent[e, 2] = 0
        else:
            if not observed:
                dist[e] = sgn * d_max
                flags[e] = f | OBSERVED
                parent[e, 0] = 0
                parent[e, 1] = 0
                parent[e, 2] = 0
                new_nbrs = True
            elif was_fixed:
                touched[e // nvox] = True
                flags[e] = f & ~FIXED
                dist[e] = sgn * d_max
                to_raise = True
            elif (de >= 0.0) != (sgn > 0.0):
                # side flipped outside the band: anything built on the old value is stale
                dist[e] = sgn * d_max
                parent[e, 0] = 0
                parent[e, 1] = 0
                parent[e, 2] = 0
                to_raise = True
        if to_raise and (flags[e] & IN_RAISE) == 0:
            flags[e] |= IN_RAISE
            pool = _push(pool, st, head, tail, rq, e)
        if to_lower and (multi or (flags[e] & IN_LOWER) == 0):
            flags[e] |= IN_LOWER
            b = 0 if queue_mode == 0 else min(int(abs(dist[e]) / bucket_width), nb - 1)
            pool = _push(pool, st, head, tail, b, e)
            if b < st[2]:
                st[2] = b
        if new_nbrs:
            for k in range(26):
                nbr = _neighbor(e, offs[k, 0], offs[k, 1], offs[k, 2], vps, nvox, table)
                if nbr < 0 or (flags[nbr] & OBSERVED) == 0:
                    continue
                if multi or (flags[nbr] & IN_LOWER) == 0:
                    flags[nbr] |= IN_LOWER
                    b = 0 if queue_mode == 0 else min(int(abs(dist[nbr]) / bucket_width), nb - 1)
                    pool = _push(pool, st, head, tail, b, nbr)
                    if b < st[2]:
                        st[2] = b

    while True:
        # ---- raise phase
        while head[rq] >= 0:
            u = _pop(pool, st, head, tail, rq)
            flags[u] &= ~IN_RAISE
            n_raised += 1
            fu = flags[u]
            ux, uy, uz = _global(u, vps, nvox, bidx)
            if (fu & FIXED) != 0:
                sx, sy, sz = ux, uy, uz
            else:
                sx = ux + parent[u, 0]
                sy = uy + parent[u, 1]
                sz = uz + parent[u, 2]
                dist[u] = d_max if dist[u] >= 0.0 else -d_max
                parent[u, 0] = 0
                parent[u, 1] = 0
                parent[u, 2] = 0
            for k in range(26):
                nbr = _neighbor(u, offs[k, 0], offs[k, 1], offs[k, 2], vps, nvox, table)
                if nbr < 0:
                    continue
                fn = flags[nbr]
                if (fn & OBSERVED) == 0:
                    continue
                if (fn & FIXED) == 0:
                    if euclid:
                        if parent[nbr, 0] == 0 and parent[nbr, 1] == 0 and parent[nbr, 2] == 0:
                            child = False
                        else:
                            nx, ny, nz = _global(nbr, vps, nvox, bidx)
                            child = (nx + parent[nbr, 0] == sx and ny + parent[nbr, 1] == sy
                                     and nz + parent[nbr, 2] == sz)
                    else:
                        child = (parent[nbr, 0] == -offs[k, 0] and parent[nbr, 1] == -offs[k, 1]
                                 and parent[nbr, 2] == -offs[k, 2])
                    if child:
                        if (fn & IN_RAISE) == 0:
                            flags[nbr] |= IN_RAISE
                            pool = _push(pool, st, head, tail, rq, nbr)
                        continue
                if multi or (flags[nbr] & IN_LOWER) == 0:
                    flags[nbr] |= IN_LOWER
                    b = 0 if queue_mode == 0 else min(int(abs(dist[nbr]) / bucket_width), nb - 1)
                    pool = _push(pool, st, head, tail, b, nbr)
                    if b < st[2]:
                        st[2] = b

        # ---- lower phase
        while True:
            while st[2] < nb and head[st[2]] < 0:
                st[2] += 1
            if st[2] >= nb:
                break
            u = _pop(pool, st, head, tail, st[2])
            flags[u] &= ~IN_LOWER
            n_lowered += 1
            fu = flags[u]
            if (fu & OBSERVED) == 0:
                continue
            du = dist[u]
            u_fixed = (fu & FIXED) != 0
            if not u_fixed and parent[u, 0] == 0 and parent[u, 1] == 0 and parent[u, 2] == 0:
                continue  # no source distance yet
            positive = du >= 0.0
            seed_d = du
            px = 0
            py = 0
            pz = 0
            if euclid and not u_fixed:
                px = parent[u, 0]
                py = parent[u, 1]
                pz = parent[u, 2]
                ux, uy, uz = _global(u, vps, nvox, bidx)
                sid = _lookup(ux + px, uy + py, uz + pz, vps, nvox, keys, values)
                if sid < 0 or (flags[sid] & FIXED) == 0:
                    continue
                seed_d = dist[sid]
            for k in range(26):
                nbr = _neighbor(u, offs[k, 0], offs[k, 1], offs[k, 2], vps, nvox, table)
                if nbr < 0:
                    continue
                fn = flags[nbr]
                if (fn & OBSERVED) == 0 or (fn & FIXED) != 0:
                    continue
                dn = dist[nbr]
                n_pos = dn >= 0.0
                # only the fixed band seeds the opposite side
                if n_pos != positive and not u_fixed:
                    continue
                if euclid:
                    qx = px - offs[k, 0]
                    qy = py - offs[k, 1]
                    qz = pz - offs[k, 2]
                    step = np.sqrt(np.float64(qx * qx + qy * qy + qz * qz)) * voxel_size
                    base = seed_d
                else:
                    qx = -offs[k, 0]
                    qy = -offs[k, 1]
                    qz = -offs[k, 2]
                    step = norms[k] * voxel_size
                    base = du
                cand = base + step if n_pos else base - step
                if (cand < 0.0) == n_pos:
                    continue  # would move the neighbor to the other side
                # compare after rounding to the stored precision so every
                # accepted update is a strict improvement
                c = np.float32(cand)
                if (n_pos and c < dn) or ((not n_pos) and c > dn):
                    dist[nbr] = c
                    parent[nbr, 0] = qx
                    parent[nbr, 1] = qy
                    parent[nbr, 2] = qz
                    n_relax += 1
                    if multi or (flags[nbr] & IN_LOWER) == 0:
                        flags[nbr] |= IN_LOWER
                        b = 0 if queue_mode == 0 else min(int(abs(c) / bucket_width), nb - 1)
                        pool = _push(pool, st, head, tail, b, nbr)
                        if b < st[2]:
                            st[2] = b

        if not euclid or not touched.any():
            break
        # Dependants of a changed seed are not always connected to it through
        # voxels sharing that seed, so the raise wave can miss them. Sweep
        # every block within reach of a changed seed for inconsistent values.
        reach = int(np.ceil(d_max / (voxel_size * vps))) + 1
        for _ in range(reach):
            grown = touched.copy()
            for slot in np.flatnonzero(touched):
                for j in range(27):
                    if table[slot, j] >= 0:
                        grown[table[slot, j]] = True
            touched = grown
        stale = 0
        for slot in np.flatnonzero(touched):
            for u in range(slot * nvox, (slot + 1) * nvox):
                fu = flags[u]
                if (fu & OBSERVED) == 0 or (fu & FIXED) != 0:
                    continue
                px = parent[u, 0]
                py = parent[u, 1]
                pz = parent[u, 2]
                if px == 0 and py == 0 and pz == 0:
                    continue
                ux, uy, uz = _global(u, vps, nvox, bidx)
                sid = _lookup(ux + px, uy + py, uz + pz, vps, nvox, keys, values)
                ok = sid >= 0 and (flags[sid] & FIXED) != 0
                if ok:
                    step = np.sqrt(np.float64(px * px + py * py + pz * pz)) * voxel_size
                    sd = dist[sid]
                    ok = dist[u] == np.float32(sd + step if dist[u] >= 0.0 else sd - step)
                if not ok and (fu & IN_RAISE) == 0:
                    flags[u] |= IN_RAISE
                    pool = _push(pool, st, head, tail, rq, u)
                    stale += 1
        touched[:] = False
        if stale == 0:
            break
    return n_raised, n_lowered, n_relax, n_seeds


# --------------------------------------------------------------------------
# drivers


def new_esdf_layer(tsdf_layer: Layer, config: EsdfConfig) -> Layer:
    return Layer(tsdf_layer.voxel_size, tsdf_layer.voxels_per_side, LayerKind.ESDF, d_max=config.d_max)


def _check_geometry(tsdf_layer: Layer, esdf_layer: Layer):
    if tsdf_layer.kind != LayerKind.TSDF or esdf_layer.kind != LayerKind.ESDF:
        raise ValueError("expected a TSDF layer and an ESDF layer")
    if (tsdf_layer.voxel_size != esdf_layer.voxel_size
            or tsdf_layer.voxels_per_side != esdf_layer.voxels_per_side):
        raise ValueError("TSDF and ESDF layer geometry differ")


def _work_from_slots(tsdf_layer: Layer, esdf_layer: Layer, t_slots: np.ndarray):
    nvox = tsdf_layer.voxels_per_block
    t_slots = np.asarray(t_slots, dtype=np.int64)
    e_slots = esdf_layer.allocate_blocks(tsdf_layer.block_index[t_slots])
    esdf_layer.mark_updated(e_slots)
    lin = np.arange(nvox, dtype=np.int64)
    t_ids = (t_slots[:, None] * nvox + lin[None, :]).reshape(-1)
    e_ids = (e_slots[:, None] * nvox + lin[None, :]).reshape(-1)
    keep = tsdf_layer.flat("weight")[t_ids] > TSDF_OBSERVED_WEIGHT
    return t_ids[keep], e_ids[keep]


def _work_from_voxels(tsdf_layer: Layer, esdf_layer: Layer, voxels: np.ndarray):
    vps = tsdf_layer.voxels_per_side
    nvox = tsdf_layer.voxels_per_block
    g = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    blocks = np.floor_divide(g, vps)
    local = g - blocks * vps
    lin = local[:, 0] + vps * (local[:, 1] + vps * local[:, 2])
    t_slots = find_blocks(tsdf_layer.hash_keys, tsdf_layer.hash_values, blocks)
    present = t_slots >= 0
    blocks, lin, t_slots = blocks[present], lin[present], t_slots[present]
    e_slots = esdf_layer.allocate_blocks(blocks)
    esdf_layer.mark_updated(e_slots)
    return t_slots * nvox + lin, e_slots * nvox + lin


def _run(tsdf_layer: Layer, esdf_layer: Layer, config: EsdfConfig, t_ids, e_ids,
         occupancy: bool = False) -> PropagationStats:
    start = time.perf_counter()
    v = esdf_layer.voxel_size
    gamma = config.gamma(v)
    bucket = config.bucket_width or v
    table = neighbor_slot_table(esdf_layer.hash_keys, esdf_layer.hash_values,
                                esdf_layer.block_index, esdf_layer.n_blocks)
    raised, lowered, relax, seeds = _propagate_kernel(
        tsdf_layer.flat("distance"), tsdf_layer.flat("weight"),
        np.ascontiguousarray(t_ids, dtype=np.int64), np.ascontiguousarray(e_ids, dtype=np.int64),
        esdf_layer.hash_keys, esdf_layer.hash_values, esdf_layer.block_index, table,
        esdf_layer.flat("distance"), esdf_layer.flat("flags"), esdf_layer.flat("parent"),
        esdf_layer.voxels_per_side, v, gamma, config.d_max,
        config.metric == Metric.EUCLIDEAN, occupancy, _QUEUE_CODE[config.queue_mode], bucket,
        NEIGHBOR_OFFSETS, NEIGHBOR_NORMS, TSDF_OBSERVED_WEIGHT)
    return PropagationStats(int(raised), int(lowered), int(relax), int(seeds),
                            time.perf_counter() - start)


def propagate(tsdf_layer: Layer, updated, esdf_layer: Layer, config: EsdfConfig,
              consumer: str = "esdf", occupancy: bool = False) -> PropagationStats:
    """Bring ``esdf_layer`` up to date with the TSDF voxels in ``updated``.

    ``updated`` is an iterable of block indices (every voxel of each block is
    revisited), an (N, 3) array of global voxel indices, or None to drain the
    TSDF layer's update stamps for ``consumer``. With ``occupancy`` the layer
    is maintained as the occupancy-seeded baseline.
    """
    _check_geometry(tsdf_layer, esdf_layer)
    esdf_layer.d_max = config.d_max
    if updated is None:
        t_ids, e_ids = _work_from_slots(tsdf_layer, esdf_layer, tsdf_layer.drain_updated_slots(consumer))
    elif isinstance(updated, np.ndarray) and updated.ndim == 2:
        t_ids, e_ids = _work_from_voxels(tsdf_layer, esdf_layer, updated)
    else:
        bidx = np.asarray(sorted(tuple(b) for b in updated), dtype=np.int64).reshape(-1, 3)
        slots = find_blocks(tsdf_layer.hash_keys, tsdf_layer.hash_values, bidx)
        t_ids, e_ids = _work_from_slots(tsdf_layer, esdf_layer, slots[slots >= 0])
    return _run(tsdf_layer, esdf_layer, config, t_ids, e_ids, occupancy)


def build_batch(tsdf_layer: Layer, config: EsdfConfig, return_stats: bool = False):
    """Build a fresh ESDF from every observed TSDF voxel."""
    esdf = new_esdf_layer(tsdf_layer, config)
    t_ids, e_ids = _work_from_slots(tsdf_layer, esdf, np.arange(tsdf_layer.n_blocks))
    stats = _run(tsdf_layer, esdf, config, t_ids, e_ids)
    return (esdf, stats) if return_stats else esdf


def build_from_occupancy(tsdf_layer: Layer, config: EsdfConfig, return_stats: bool = False):
    """Baseline ESDF seeded with distance 0 at every observed voxel behind a surface.

    Only non-negative distances are produced.
    """
    esdf = new_esdf_layer(tsdf_layer, config)
    t_ids, e_ids = _work_from_slots(tsdf_layer, esdf, np.arange(tsdf_layer.n_blocks))
    stats = _run(tsdf_layer, esdf, config, t_ids, e_ids, occupancy=True)
    return (esdf, stats) if return_stats else esdf


class EsdfIntegrator:
    """Keeps an ESDF layer in sync with a TSDF layer across scans."""

    def __init__(self, tsdf_layer: Layer, config: EsdfConfig | None = None, esdf_layer: Layer | None = None,
                 consumer: str = "esdf", occupancy: bool = False):
        self.config = config or EsdfConfig()
        self.tsdf_layer = tsdf_layer
        self.esdf_layer = esdf_layer if esdf_layer is not None else new_esdf_layer(tsdf_layer, self.config)
        self.consumer = consumer
        self.occupancy = occupancy

    def update(self) -> PropagationStats:
        return propagate(self.tsdf_layer, None, self.esdf_layer, self.config, consumer=self.consumer,
                         occupancy=self.occupancy)


def check_invariants(tsdf_layer: Layer, esdf_layer: Layer, config: EsdfConfig,
                     occupancy: bool = False) -> list[str]:
    """Describe every violated layer invariant; an empty list means all hold.

    Checked per ESDF voxel: observed iff its TSDF voxel is observed, fixed iff
    the TSDF value lies in the fixed band, fixed voxels hold exactly the TSDF
    value with no parent, and no distance exceeds ``d_max`` in magnitude.
    """
    problems = []
    n = esdf_layer.n_blocks
    tslots = find_blocks(tsdf_layer.hash_keys, tsdf_layer.hash_values, esdf_layer.block_index[:n])
    if (tslots < 0).any():
        problems.append(f"{int((tslots < 0).sum())} ESDF blocks have no TSDF block")
        tslots = np.where(tslots < 0, 0, tslots)
    d = esdf_layer.data["distance"][:n]
    f = esdf_layer.data["flags"][:n]
    par = esdf_layer.data["parent"][:n]
    dt = tsdf_layer.data["distance"][tslots].astype(np.float64)
    t_obs = tsdf_layer.data["weight"][tslots] > TSDF_OBSERVED_WEIGHT
    obs = (f & OBSERVED) != 0
    fixed = (f & FIXED) != 0
    if occupancy:
        band = dt < 0
        expect = np.zeros_like(dt)
    else:
        g = config.gamma(esdf_layer.voxel_size)
        band = (dt > -g) & (dt < g)
        expect = dt
    checks = (
        ("observed flag disagrees with TSDF", obs != t_obs),
        ("fixed flag disagrees with fixed band", obs & (fixed != band)),
        ("fixed voxel differs from TSDF", obs & fixed & (d != expect)),
        ("fixed voxel has a parent", obs & fixed & (par != 0).any(axis=-1)),
        ("|d| exceeds d_max", obs & (np.abs(d) > np.float32(config.d_max))),
        ("queue flag left set", (f & (IN_RAISE | IN_LOWER)) != 0),
    )
    for what, bad in checks:
        k = int(bad.sum())
        if k:
            problems.append(f"{what}: {k} voxels")
    return problems


def esdf_distance(esdf_layer: Layer, g) -> float | None:
    """Distance of an observed ESDF voxel, else None."""
    vox = esdf_layer.get_voxel(g)
    if vox is None or not vox.observed:
        return None
    return vox.distance


__all__ = [
    "EsdfConfig", "EsdfIntegrator", "FixedBandMode", "Metric", "PropagationStats", "QueueMode",
    "build_batch", "build_from_occupancy", "check_invariants", "esdf_distance", "is_fixed", "new_esdf_layer", "propagate",
    "split_global_index",
]
