"""Voxel-hashed layer storage.

A :class:`Layer` owns a hash table from block index to a slot in a pool of
dense voxel arrays. Every block holds ``voxels_per_side**3`` voxels laid out
x-fastest: ``linear = x + vps * (y + vps * z)``. Voxel ``g`` covers
``[g * v, (g + 1) * v)`` and its center is at ``(g + 0.5) * v``.

The hash table and pools are plain numpy arrays so the numba kernels in the
integrators can read and write them directly.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numba
import numpy as np

EMPTY_KEY = np.iinfo(np.int64).min
KEY_BITS = 21
KEY_OFFSET = 1 << (KEY_BITS - 1)
KEY_MASK = (1 << KEY_BITS) - 1

TSDF_OBSERVED_WEIGHT = 1e-4

# ESDF flag bits
OBSERVED = 1
FIXED = 2
IN_RAISE = 4
IN_LOWER = 8


class LayerKind(enum.IntEnum):
    TSDF = 0
    ESDF = 1


# --------------------------------------------------------------------------
# index math


def global_index_from_point(p, voxel_size: float) -> tuple[int, int, int]:
    """Index of the voxel containing ``p``, ``floor(p / v)`` per axis."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    g = np.floor(np.asarray(p, dtype=np.float64) / voxel_size).astype(np.int64)
    return int(g[0]), int(g[1]), int(g[2])


def global_indices_from_points(points: np.ndarray, voxel_size: float) -> np.ndarray:
    return np.floor(np.asarray(points, dtype=np.float64) / voxel_size).astype(np.int64)


def voxel_center(g, voxel_size: float) -> np.ndarray:
    return (np.asarray(g, dtype=np.float64) + 0.5) * voxel_size


def split_global_index(g, vps: int) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Split a global voxel index into (block index, local index).

    Uses floor division so negative indices land in the block below zero.
    """
    if vps < 1:
        raise ValueError("voxels_per_side must be >= 1")
    block = tuple(int(c) // vps for c in g)
    local = tuple(int(c) - b * vps for c, b in zip(g, block))
    return block, local


def join_global_index(block, local, vps: int) -> tuple[int, int, int]:
    return tuple(int(b) * vps + int(l) for b, l in zip(block, local))


def pack_key(x: int, y: int, z: int) -> int:
    for c in (x, y, z):
        if not -KEY_OFFSET <= c < KEY_OFFSET:
            raise OverflowError(f"index component {c} outside the packable range")
    return ((x + KEY_OFFSET) << (2 * KEY_BITS)) | ((y + KEY_OFFSET) << KEY_BITS) | (z + KEY_OFFSET)


def unpack_key(key: int) -> tuple[int, int, int]:
    return (
        ((key >> (2 * KEY_BITS)) & KEY_MASK) - KEY_OFFSET,
        ((key >> KEY_BITS) & KEY_MASK) - KEY_OFFSET,
        (key & KEY_MASK) - KEY_OFFSET,
    )


@numba.njit(cache=True, inline="always")
def nb_pack_key(x, y, z):
    return ((x + KEY_OFFSET) << (2 * KEY_BITS)) | ((y + KEY_OFFSET) << KEY_BITS) | (z + KEY_OFFSET)


@numba.njit(cache=True, inline="always")
def _mix(key):
    # splitmix64 finalizer on the raw bits
    h = np.uint64(key)
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return h


@numba.njit(cache=True)
def hash_find(keys, values, key):
    """Linear-probing lookup; -1 when absent."""
    mask = np.uint64(keys.shape[0] - 1)
    i = _mix(key) & mask
    while True:
        k = keys[i]
        if k == key:
            return values[i]
        if k == EMPTY_KEY:
            return -1
        i = (i + np.uint64(1)) & mask


@numba.njit(cache=True)
def hash_insert(keys, values, key, value):
    mask = np.uint64(keys.shape[0] - 1)
    i = _mix(key) & mask
    while keys[i] != EMPTY_KEY and keys[i] != key:
        i = (i + np.uint64(1)) & mask
    keys[i] = key
    values[i] = value


@numba.njit(cache=True)
def _rebuild_table(block_index, n_blocks, capacity):
    keys = np.full(capacity, EMPTY_KEY, dtype=np.int64)
    values = np.full(capacity, -1, dtype=np.int64)
    for s in range(n_blocks):
        hash_insert(keys, values, nb_pack_key(block_index[s, 0], block_index[s, 1], block_index[s, 2]), s)
    return keys, values


@numba.njit(cache=True)
def find_blocks(keys, values, block_idx):
    out = np.empty(block_idx.shape[0], dtype=np.int64)
    for i in range(block_idx.shape[0]):
        out[i] = hash_find(keys, values, nb_pack_key(block_idx[i, 0], block_idx[i, 1], block_idx[i, 2]))
    return out


@numba.njit(cache=True)
def neighbor_slot_table(keys, values, block_index, n_blocks):
    """Slot of each of the 27 blocks around every block (-1 if absent).

    Column ``(dx+1) + 3*(dy+1) + 9*(dz+1)``.
    """
    table = np.full((n_blocks, 27), -1, dtype=np.int64)
    for s in range(n_blocks):
        bx, by, bz = block_index[s, 0], block_index[s, 1], block_index[s, 2]
        for dz in range(-1, 2):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    table[s, (dx + 1) + 3 * (dy + 1) + 9 * (dz + 1)] = hash_find(
                        keys, values, nb_pack_key(bx + dx, by + dy, bz + dz)
                    )
    return table


# --------------------------------------------------------------------------
# voxels and blocks


@dataclass(frozen=True)
class TsdfVoxel:
    distance: float
    weight: float
    color: tuple[int, int, int] = (0, 0, 0)

    @property
    def observed(self) -> bool:
        return self.weight > TSDF_OBSERVED_WEIGHT


@dataclass(frozen=True)
class EsdfVoxel:
    distance: float
    observed: bool = False
    fixed: bool = False
    parent: tuple[int, int, int] = (0, 0, 0)
    in_raise: bool = False
    in_lower: bool = False


_FIELDS = {
    LayerKind.TSDF: {
        "distance": (np.float32, ()),
        "weight": (np.float32, ()),
        "color": (np.uint8, (3,)),
    },
    LayerKind.ESDF: {
        "distance": (np.float32, ()),
        "flags": (np.uint8, ()),
        "parent": (np.int32, (3,)),
    },
}


class Block:
    """View of one block's voxel arrays inside its layer's pool."""

    def __init__(self, layer: "Layer", slot: int):
        self.layer = layer
        self.slot = slot

    @property
    def index(self) -> tuple[int, int, int]:
        return tuple(int(c) for c in self.layer.block_index[self.slot])

    def __getattr__(self, name):
        # field views: block.distance, block.weight, block.flags, ...
        layer = self.__dict__.get("layer")
        if layer is not None and name in layer.data:
            return layer.data[name][self.slot]
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, Block) and other.layer is self.layer and other.slot == self.slot

    def __hash__(self):
        return hash((id(self.layer), self.slot))

    def __repr__(self):
        return f"Block(index={self.index}, slot={self.slot})"


class Layer:
    """Dynamically growing voxel-hashed map of fixed-size blocks."""

    def __init__(self, voxel_size: float, voxels_per_side: int = 16, kind: LayerKind = LayerKind.TSDF,
                 d_max: float = 4.0):
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        if voxels_per_side < 1:
            raise ValueError("voxels_per_side must be >= 1")
        self.voxel_size = float(voxel_size)
        self.voxels_per_side = int(voxels_per_side)
        self.kind = LayerKind(kind)
        # default distance for freshly allocated ESDF voxels
        self.d_max = float(d_max)
        self.n_blocks = 0
        self._keys = np.full(64, EMPTY_KEY, dtype=np.int64)
        self._values = np.full(64, -1, dtype=np.int64)
        self.block_index = np.zeros((8, 3), dtype=np.int64)
        self.data: dict[str, np.ndarray] = {}
        for name, (dtype, extra) in _FIELDS[self.kind].items():
            self.data[name] = np.zeros((8, self.voxels_per_block) + extra, dtype=dtype)
        # per-block generation stamps; consumers drain by comparing against their last stamp
        self.block_stamp = np.zeros(8, dtype=np.int64)
        self.generation = 1
        self._consumer_marks: dict[str, int] = {}

    # ---- geometry

    @property
    def voxels_per_block(self) -> int:
        return self.voxels_per_side ** 3

    @property
    def block_size(self) -> float:
        return self.voxel_size * self.voxels_per_side

    @property
    def hash_keys(self) -> np.ndarray:
        return self._keys

    @property
    def hash_values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return self.n_blocks

    def __repr__(self):
        return (f"Layer(kind={self.kind.name}, voxel_size={self.voxel_size}, "
                f"voxels_per_side={self.voxels_per_side}, blocks={self.n_blocks})")

    def flat(self, name: str) -> np.ndarray:
        """Field array with block and voxel axes merged (a view)."""
        arr = self.data[name]
        return arr.reshape((arr.shape[0] * arr.shape[1],) + arr.shape[2:])

    # ---- allocation

    def _grow_pool(self, needed: int) -> None:
        cap = self.block_index.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 2 * cap)
        bi = np.zeros((new_cap, 3), dtype=np.int64)
        bi[: self.n_blocks] = self.block_index[: self.n_blocks]
        self.block_index = bi
        stamp = np.zeros(new_cap, dtype=np.int64)
        stamp[: self.n_blocks] = self.block_stamp[: self.n_blocks]
        self.block_stamp = stamp
        for name, arr in self.data.items():
            new = np.zeros((new_cap,) + arr.shape[1:], dtype=arr.dtype)
            new[: self.n_blocks] = arr[: self.n_blocks]
            self.data[name] = new

    def _grow_table(self, n_needed: int) -> None:
        cap = self._keys.shape[0]
        if 2 * n_needed <= cap:
            return
        while 2 * n_needed > cap:
            cap *= 2
        self._keys, self._values = _rebuild_table(self.block_index, self.n_blocks, cap)

    def _init_slot(self, slot: int) -> None:
        if self.kind == LayerKind.TSDF:
            self.data["distance"][slot] = 0.0
            self.data["weight"][slot] = 0.0
            self.data["color"][slot] = 0
        else:
            self.data["distance"][slot] = self.d_max
            self.data["flags"][slot] = 0
            self.data["parent"][slot] = 0

    def find_slot(self, bidx) -> int:
        return int(hash_find(self._keys, self._values, pack_key(*bidx)))

    def get_block(self, bidx) -> Block | None:
        slot = self.find_slot(bidx)
        return None if slot < 0 else Block(self, slot)

    def has_block(self, bidx) -> bool:
        return self.find_slot(bidx) >= 0

    def get_or_allocate_block(self, bidx) -> Block:
        return Block(self, self.allocate_blocks(np.asarray([bidx], dtype=np.int64))[0])

    def allocate_blocks(self, bidx: np.ndarray) -> np.ndarray:
        """Allocate any missing blocks in ``bidx`` (N, 3); returns their slots.

        Newly allocated blocks are stamped as updated.
        """
        bidx = np.asarray(bidx, dtype=np.int64).reshape(-1, 3)
        if bidx.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        for c in (bidx.min(), bidx.max()):
            if not -KEY_OFFSET <= c < KEY_OFFSET:
                raise OverflowError(f"block index component {c} outside the packable range")
        slots = find_blocks(self._keys, self._values, bidx)
        missing = np.flatnonzero(slots < 0)
        if missing.size:
            new = np.unique(bidx[missing], axis=0)
            start = self.n_blocks
            self._grow_pool(start + new.shape[0])
            self.block_index[start : start + new.shape[0]] = new
            self.n_blocks = start + new.shape[0]
            self._grow_table(self.n_blocks)
            for s in range(start, self.n_blocks):
                hash_insert(self._keys, self._values, pack_key(*self.block_index[s]), s)
                self._init_slot(s)
            self.block_stamp[start : self.n_blocks] = self.generation
            slots = find_blocks(self._keys, self._values, bidx)
        return slots

    def blocks(self) -> Iterable[Block]:
        for s in range(self.n_blocks):
            yield Block(self, s)

    def allocated_block_indices(self) -> np.ndarray:
        return self.block_index[: self.n_blocks].copy()

    # ---- update tracking

    def mark_updated(self, slots) -> None:
        self.block_stamp[np.asarray(slots, dtype=np.int64)] = self.generation

    def next_generation(self) -> int:
        """Start a new stamp generation; returns the stamp for new updates."""
        self.generation += 1
        return self.generation

    def updated_blocks(self, consumer: str = "default") -> set[tuple[int, int, int]]:
        """Blocks touched since ``consumer`` last drained (not clearing)."""
        mark = self._consumer_marks.get(consumer, 0)
        sel = np.flatnonzero(self.block_stamp[: self.n_blocks] > mark)
        return {tuple(int(c) for c in self.block_index[s]) for s in sel}

    def updated_slots(self, consumer: str = "default") -> np.ndarray:
        mark = self._consumer_marks.get(consumer, 0)
        return np.flatnonzero(self.block_stamp[: self.n_blocks] > mark)

    def drain_updated(self, consumer: str = "default") -> set[tuple[int, int, int]]:
        out = self.updated_blocks(consumer)
        self._consumer_marks[consumer] = self.generation
        self.next_generation()
        return out

    def drain_updated_slots(self, consumer: str = "default") -> np.ndarray:
        out = self.updated_slots(consumer)
        self._consumer_marks[consumer] = self.generation
        self.next_generation()
        return out

    # ---- voxel access

    def _locate(self, g) -> tuple[int, int]:
        vps = self.voxels_per_side
        block, local = split_global_index(g, vps)
        slot = self.find_slot(block)
        if slot < 0:
            return -1, -1
        return slot, local[0] + vps * (local[1] + vps * local[2])

    def get_voxel(self, g) -> TsdfVoxel | EsdfVoxel | None:
        slot, lin = self._locate(g)
        if slot < 0:
            return None
        d = self.data
        if self.kind == LayerKind.TSDF:
            c = d["color"][slot, lin]
            return TsdfVoxel(float(d["distance"][slot, lin]), float(d["weight"][slot, lin]),
                             (int(c[0]), int(c[1]), int(c[2])))
        f = int(d["flags"][slot, lin])
        p = d["parent"][slot, lin]
        return EsdfVoxel(float(d["distance"][slot, lin]), bool(f & OBSERVED), bool(f & FIXED),
                         (int(p[0]), int(p[1]), int(p[2])), bool(f & IN_RAISE), bool(f & IN_LOWER))

    def set_voxel(self, g, voxel: TsdfVoxel | EsdfVoxel) -> None:
        """Write a voxel, allocating its block. Marks the block updated."""
        block, _ = split_global_index(g, self.voxels_per_side)
        self.get_or_allocate_block(block)
        slot, lin = self._locate(g)
        d = self.data
        if self.kind == LayerKind.TSDF:
            d["distance"][slot, lin] = voxel.distance
            d["weight"][slot, lin] = voxel.weight
            d["color"][slot, lin] = voxel.color
        else:
            flags = ((OBSERVED if voxel.observed else 0) | (FIXED if voxel.fixed else 0)
                     | (IN_RAISE if voxel.in_raise else 0) | (IN_LOWER if voxel.in_lower else 0))
            d["distance"][slot, lin] = voxel.distance
            d["flags"][slot, lin] = flags
            d["parent"][slot, lin] = voxel.parent
        self.block_stamp[slot] = self.generation

    def observed_mask(self) -> np.ndarray:
        """(n_blocks, voxels_per_block) boolean mask of observed voxels."""
        n = self.n_blocks
        if self.kind == LayerKind.TSDF:
            return self.data["weight"][:n] > TSDF_OBSERVED_WEIGHT
        return (self.data["flags"][:n] & OBSERVED) != 0

    def voxel_global_indices(self, slots=None) -> np.ndarray:
        """Global indices of every voxel in ``slots``, shape (len(slots), N, 3)."""
        if slots is None:
            slots = np.arange(self.n_blocks)
        vps = self.voxels_per_side
        lin = np.arange(self.voxels_per_block)
        local = np.stack([lin % vps, (lin // vps) % vps, lin // (vps * vps)], axis=1)
        return self.block_index[np.asarray(slots)][:, None, :] * vps + local[None, :, :]

    def copy(self) -> "Layer":
        other = Layer(self.voxel_size, self.voxels_per_side, self.kind, self.d_max)
        other.n_blocks = self.n_blocks
        other._keys = self._keys.copy()
        other._values = self._values.copy()
        other.block_index = self.block_index.copy()
        other.block_stamp = self.block_stamp.copy()
        other.data = {k: v.copy() for k, v in self.data.items()}
        other.generation = self.generation
        other._consumer_marks = dict(self._consumer_marks)
        return other


# --------------------------------------------------------------------------
# trilinear interpolation


@numba.njit(cache=True)
def _interp_kernel(keys, values, block_index, dist, valid, vps, voxel_size, points, out, ok):
    nvox = vps * vps * vps
    for i in range(points.shape[0]):
        fx = points[i, 0] / voxel_size - 0.5
        fy = points[i, 1] / voxel_size - 0.5
        fz = points[i, 2] / voxel_size - 0.5
        bx = np.int64(np.floor(fx))
        by = np.int64(np.floor(fy))
        bz = np.int64(np.floor(fz))
        tx = fx - bx
        ty = fy - by
        tz = fz - bz
        acc = 0.0
        good = True
        for c in range(8):
            cx = c & 1
            cy = (c >> 1) & 1
            cz = (c >> 2) & 1
            gx = bx + cx
            gy = by + cy
            gz = bz + cz
            kx = gx // vps
            ky = gy // vps
            kz = gz // vps
            slot = hash_find(keys, values, nb_pack_key(kx, ky, kz))
            if slot < 0:
                good = False
                break
            lin = (gx - kx * vps) + vps * ((gy - ky * vps) + vps * (gz - kz * vps))
            idx = slot * nvox + lin
            if not valid[idx]:
                good = False
                break
            w = (tx if cx else 1.0 - tx) * (ty if cy else 1.0 - ty) * (tz if cz else 1.0 - tz)
            acc += w * dist[idx]
        ok[i] = good
        out[i] = acc if good else np.nan


def interpolate_many(layer: Layer, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear interpolation at many points; returns (values, known mask)."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    out = np.empty(pts.shape[0], dtype=np.float64)
    ok = np.zeros(pts.shape[0], dtype=np.bool_)
    if layer.n_blocks == 0 or pts.shape[0] == 0:
        out[:] = np.nan
        return out, ok
    dist = layer.flat("distance")
    valid = layer.observed_mask().reshape(-1)
    if valid.shape[0] < dist.shape[0]:
        valid = np.concatenate([valid, np.zeros(dist.shape[0] - valid.shape[0], dtype=bool)])
    _interp_kernel(layer.hash_keys, layer.hash_values, layer.block_index, dist, valid,
                   layer.voxels_per_side, layer.voxel_size, pts, out, ok)
    return out, ok


def interpolate_distance(layer: Layer, p) -> float | None:
    """Trilinear distance at ``p`` from the 8 surrounding voxel centers.

    None when any of the 8 voxels is unallocated or unobserved.
    """
    val, ok = interpolate_many(layer, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return float(val[0]) if ok[0] else None


# --------------------------------------------------------------------------
# binary layer files

MAGIC = b"VXBLX\0"
VERSION = 1
_HEADER = struct.Struct("<6sIdIBQ")

TSDF_RECORD = np.dtype([("distance", "<f4"), ("weight", "<f4"), ("color", "u1", (3,)), ("pad", "u1")])
ESDF_RECORD = np.dtype([("distance", "<f4"), ("flags", "u1"), ("parent", "i1", (3,))])


class LayerParseError(ValueError):
    """Malformed layer file header."""


class LayerLengthError(LayerParseError):
    """Layer file ended before its declared payload."""


def _record_dtype(kind: LayerKind) -> np.dtype:
    return TSDF_RECORD if kind == LayerKind.TSDF else ESDF_RECORD


def serialize_layer(layer: Layer, sink: BinaryIO) -> None:
    """Write ``layer`` in the VXBLX v1 format, blocks sorted by index.

    ESDF distances are written as float32 and parents as int8; a parent
    offset outside [-128, 127] raises ``OverflowError``.
    """
    sink.write(_HEADER.pack(MAGIC, VERSION, layer.voxel_size, layer.voxels_per_side,
                            int(layer.kind), layer.n_blocks))
    n = layer.n_blocks
    if n == 0:
        return
    order = np.lexsort(layer.block_index[:n, ::-1].T)
    rec = np.zeros((n, layer.voxels_per_block), dtype=_record_dtype(layer.kind))
    if layer.kind == LayerKind.TSDF:
        rec["distance"] = layer.data["distance"][:n]
        rec["weight"] = layer.data["weight"][:n]
        rec["color"] = layer.data["color"][:n]
    else:
        parent = layer.data["parent"][:n]
        if parent.size and (parent.min() < -128 or parent.max() > 127):
            raise OverflowError("ESDF parent offset does not fit the int8 file field")
        rec["distance"] = layer.data["distance"][:n]
        rec["flags"] = layer.data["flags"][:n]
        rec["parent"] = parent
    head = layer.block_index[:n].astype("<i8")
    for s in order:
        sink.write(head[s].tobytes())
        sink.write(rec[s].tobytes())


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    buf = source.read(n)
    if len(buf) != n:
        raise LayerLengthError(f"truncated layer file: expected {n} bytes of {what}, got {len(buf)}")
    return buf


def deserialize_layer(source: BinaryIO) -> Layer:
    head = source.read(_HEADER.size)
    if len(head) < 6 or head[:6] != MAGIC:
        raise LayerParseError("not a layer file (bad magic)")
    if len(head) != _HEADER.size:
        raise LayerLengthError("truncated layer header")
    magic, version, voxel_size, vps, kind, count = _HEADER.unpack(head)
    if version != VERSION:
        raise LayerParseError(f"unsupported layer file version {version}")
    if kind not in (0, 1):
        raise LayerParseError(f"unknown layer kind {kind}")
    if not voxel_size > 0 or vps < 1:
        raise LayerParseError("invalid layer geometry in header")
    layer = Layer(voxel_size, vps, LayerKind(kind))
    if count == 0:
        return layer
    dtype = _record_dtype(layer.kind)
    nvox = layer.voxels_per_block
    block_bytes = 24 + dtype.itemsize * nvox
    payload = _read_exact(source, block_bytes * count, f"{count} blocks")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(count, block_bytes)
    bidx = raw[:, :24].copy().view("<i8").reshape(count, 3).astype(np.int64)
    rec = raw[:, 24:].copy().view(dtype).reshape(count, nvox)
    slots = layer.allocate_blocks(bidx)
    if layer.n_blocks != count:
        raise LayerParseError("duplicate block index in layer file")
    if layer.kind == LayerKind.TSDF:
        layer.data["distance"][slots] = rec["distance"]
        layer.data["weight"][slots] = rec["weight"]
        layer.data["color"][slots] = rec["color"]
    else:
        layer.data["distance"][slots] = rec["distance"]
        layer.data["flags"][slots] = rec["flags"]
        layer.data["parent"][slots] = rec["parent"].astype(np.int32)
    return layer


def save_layer(layer: Layer, path) -> None:
    with open(path, "wb") as fh:
        serialize_layer(layer, fh)


def load_layer(path) -> Layer:
    with open(path, "rb") as fh:
        return deserialize_layer(fh)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < 6 or head[:6] != MAGIC:
        raise LayerParseError("not a layer file (bad magic)")
    if len(head) != _HEADER.size:
        raise LayerLengthError("truncated layer header")
    _, version, voxel_size, vps, kind, count = _HEADER.unpack(head)
    if kind not in (0, 1):
        raise LayerParseError(f"unknown layer kind {kind}")
    return {"version": version, "voxel_size": voxel_size, "voxels_per_side": vps,
            "kind": LayerKind(kind).name, "block_count": count}
