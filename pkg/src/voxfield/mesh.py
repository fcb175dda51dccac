"""Marching-cubes surface extraction from a TSDF layer.

Cubes join eight neighboring voxel centers; a cube belongs to the block that
holds its minimum corner. Only cubes with all eight corners observed emit
triangles. The case table is generated at import: on every cube face the
inside (negative) corners are cut off by segments, and those segments chain
into closed loops around the cube which are fan-triangulated. Ambiguous faces
always separate their inside corners, so adjacent cubes agree and the surface
is closed across cube boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .voxel_store import TSDF_OBSERVED_WEIGHT, Layer, LayerKind, find_blocks, neighbor_slot_table

CORNER_OFFSETS = np.array([(c & 1, (c >> 1) & 1, (c >> 2) & 1) for c in range(8)], dtype=np.int64)


def _build_edges():
    edges = []
    for axis in range(3):
        for c in range(8):
            if not c & (1 << axis):
                edges.append((c, c | (1 << axis)))
    return np.array(edges, dtype=np.int64)


EDGE_CORNERS = _build_edges()

# Faces as corner cycles, counter-clockwise seen from outside the cube.
_FACES = (
    (0, 4, 6, 2),  # x = 0
    (1, 3, 7, 5),  # x = 1
    (0, 1, 5, 4),  # y = 0
    (2, 6, 7, 3),  # y = 1
    (0, 2, 3, 1),  # z = 0
    (4, 5, 7, 6),  # z = 1
)


def _edge_id(a: int, b: int) -> int:
    for i, (p, q) in enumerate(EDGE_CORNERS):
        if (p, q) in ((a, b), (b, a)):
            return i
    raise KeyError((a, b))


def _case_triangles(case: int) -> list[tuple[int, int, int]]:
    inside = [(case >> c) & 1 == 1 for c in range(8)]
    nxt = {}
    for face in _FACES:
        cyc = [(face[i], face[(i + 1) % 4]) for i in range(4)]
        enters = [i for i, (a, b) in enumerate(cyc) if not inside[a] and inside[b]]
        for i in enters:
            j = (i + 1) % 4
            while not (inside[cyc[j][0]] and not inside[cyc[j][1]]):
                j = (j + 1) % 4
            nxt[_edge_id(*cyc[i])] = _edge_id(*cyc[j])
    tris = []
    while nxt:
        start = min(nxt)
        loop = [start]
        cur = nxt.pop(start)
        while cur != start:
            loop.append(cur)
            cur = nxt.pop(cur)
        for k in range(1, len(loop) - 1):
            tris.append((loop[0], loop[k], loop[k + 1]))
    return tris


def _build_table():
    cases = [_case_triangles(c) for c in range(256)]
    width = 3 * max(len(t) for t in cases)
    table = np.full((256, width), -1, dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for c, tris in enumerate(cases):
        flat = [e for t in tris for e in t]
        table[c, : len(flat)] = flat
        counts[c] = len(tris)
    return table, counts


TRI_TABLE, TRI_COUNT = _build_table()


@dataclass
class Mesh:
    """Triangle soup: three consecutive vertices per triangle."""

    vertices: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    normals: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    colors: np.ndarray = field(default_factory=lambda: np.empty((0, 3), dtype=np.uint8))

    @property
    def n_triangles(self) -> int:
        return self.vertices.shape[0] // 3

    @property
    def triangles(self) -> np.ndarray:
        return self.vertices.reshape(-1, 3, 3)

    @property
    def faces(self) -> np.ndarray:
        return np.arange(self.vertices.shape[0], dtype=np.int64).reshape(-1, 3)

    @staticmethod
    def concatenate(meshes) -> "Mesh":
        meshes = list(meshes)
        if not meshes:
            return Mesh()
        return Mesh(np.concatenate([m.vertices for m in meshes]),
                    np.concatenate([m.normals for m in meshes]),
                    np.concatenate([m.colors for m in meshes]))


@numba.njit(cache=True)
def _corner_ids(slot, lx, ly, lz, vps, nvox, table, out):
    for c in range(8):
        x = lx + (c & 1)
        y = ly + ((c >> 1) & 1)
        z = lz + ((c >> 2) & 1)
        ox = 1 if x >= vps else 0
        oy = 1 if y >= vps else 0
        oz = 1 if z >= vps else 0
        ns = table[slot, (ox + 1) + 3 * (oy + 1) + 9 * (oz + 1)]
        if ns < 0:
            return False
        out[c] = ns * nvox + (x - ox * vps) + vps * ((y - oy * vps) + vps * (z - oz * vps))
    return True


@numba.njit(cache=True)
def _extract_kernel(slots, bidx, table, dist, wgt, col, vps, voxel_size, obs,
                    tri_table, tri_count, edge_corners):
    nvox = vps * vps * vps
    ids = np.empty(8, np.int64)
    vals = np.empty(8, np.float64)
    per_slot = np.zeros(slots.shape[0], np.int64)
    # pass 1: count
    for si in range(slots.shape[0]):
        s = slots[si]
        for lin in range(nvox):
            lx = lin % vps
            ly = (lin // vps) % vps
            lz = lin // (vps * vps)
            if not _corner_ids(s, lx, ly, lz, vps, nvox, table, ids):
                continue
            case = 0
            ok = True
            for c in range(8):
                if wgt[ids[c]] <= obs:
                    ok = False
                    break
                if dist[ids[c]] < 0:
                    case |= 1 << c
            if ok:
                per_slot[si] += tri_count[case]
    total = per_slot.sum()
    verts = np.empty((3 * total, 3), np.float64)
    norms = np.empty((3 * total, 3), np.float64)
    cols = np.empty((3 * total, 3), np.uint8)
    k = 0
    for si in range(slots.shape[0]):
        s = slots[si]
        for lin in range(nvox):
            lx = lin % vps
            ly = (lin // vps) % vps
            lz = lin // (vps * vps)
            if not _corner_ids(s, lx, ly, lz, vps, nvox, table, ids):
                continue
            case = 0
            ok = True
            for c in range(8):
                if wgt[ids[c]] <= obs:
                    ok = False
                    break
                vals[c] = dist[ids[c]]
                if vals[c] < 0:
                    case |= 1 << c
            if not ok or tri_count[case] == 0:
                continue
            gx = bidx[s, 0] * vps + lx
            gy = bidx[s, 1] * vps + ly
            gz = bidx[s, 2] * vps + lz
            for t in range(3 * tri_count[case]):
                e = tri_table[case, t]
                a = edge_corners[e, 0]
                b = edge_corners[e, 1]
                ta = vals[a] / (vals[a] - vals[b])
                ax = (gx + (a & 1) + 0.5) * voxel_size
                ay = (gy + ((a >> 1) & 1) + 0.5) * voxel_size
                az = (gz + ((a >> 2) & 1) + 0.5) * voxel_size
                bx = (gx + (b & 1) + 0.5) * voxel_size
                by = (gy + ((b >> 1) & 1) + 0.5) * voxel_size
                bz = (gz + ((b >> 2) & 1) + 0.5) * voxel_size
                verts[k, 0] = ax + ta * (bx - ax)
                verts[k, 1] = ay + ta * (by - ay)
                verts[k, 2] = az + ta * (bz - az)
                # gradient of the trilinear interpolant at the vertex
                u = (verts[k, 0] / voxel_size - 0.5) - gx
                v = (verts[k, 1] / voxel_size - 0.5) - gy
                w = (verts[k, 2] / voxel_size - 0.5) - gz
                nx = 0.0
                ny = 0.0
                nz = 0.0
                for c in range(8):
                    cx = c & 1
                    cy = (c >> 1) & 1
                    cz = (c >> 2) & 1
                    fx = u if cx else 1.0 - u
                    fy = v if cy else 1.0 - v
                    fz = w if cz else 1.0 - w
                    sx = 1.0 if cx else -1.0
                    sy = 1.0 if cy else -1.0
                    sz = 1.0 if cz else -1.0
                    nx += vals[c] * sx * fy * fz
                    ny += vals[c] * fx * sy * fz
                    nz += vals[c] * fx * fy * sz
                norms[k, 0] = nx
                norms[k, 1] = ny
                norms[k, 2] = nz
                for ch in range(3):
                    ca = np.float64(col[ids[a], ch])
                    cb = np.float64(col[ids[b], ch])
                    cols[k, ch] = np.uint8(min(255.0, max(0.0, np.floor(ca + ta * (cb - ca) + 0.5))))
                k += 1
    return verts, norms, cols, per_slot


def _face_normals(verts: np.ndarray) -> np.ndarray:
    tri = verts.reshape(-1, 3, 3)
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return np.repeat(n, 3, axis=0)


def _finish_normals(verts: np.ndarray, normals: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(normals, axis=1)
    bad = length < 1e-12
    if bad.any():
        normals[bad] = _face_normals(verts)[bad]
        length = np.linalg.norm(normals, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = normals / length[:, None]
    out[~np.isfinite(out)] = 0.0
    return out


def extract_blocks(layer: Layer, slots) -> dict[tuple[int, int, int], Mesh]:
    """Per-block meshes for the TSDF blocks in ``slots``."""
    if layer.kind != LayerKind.TSDF:
        raise ValueError("mesh extraction needs a TSDF layer")
    slots = np.asarray(slots, dtype=np.int64).reshape(-1)
    if slots.size == 0 or layer.n_blocks == 0:
        return {}
    table = neighbor_slot_table(layer.hash_keys, layer.hash_values, layer.block_index, layer.n_blocks)
    verts, norms, cols, per_slot = _extract_kernel(
        slots, layer.block_index, table, layer.flat("distance"), layer.flat("weight"), layer.flat("color"),
        layer.voxels_per_side, layer.voxel_size, TSDF_OBSERVED_WEIGHT, TRI_TABLE, TRI_COUNT, EDGE_CORNERS)
    norms = _finish_normals(verts, norms)
    out = {}
    bounds = np.concatenate([[0], np.cumsum(per_slot * 3)])
    for i, s in enumerate(slots):
        lo, hi = bounds[i], bounds[i + 1]
        out[tuple(int(c) for c in layer.block_index[s])] = Mesh(verts[lo:hi], norms[lo:hi], cols[lo:hi])
    return out


def extract_mesh(layer: Layer) -> Mesh:
    """Mesh of the whole layer, blocks in allocation order."""
    return Mesh.concatenate(extract_blocks(layer, np.arange(layer.n_blocks)).values())


class MeshLayer:
    """Per-block meshes kept in sync with a TSDF layer."""

    def __init__(self, tsdf_layer: Layer, consumer: str = "mesh"):
        self.tsdf_layer = tsdf_layer
        self.consumer = consumer
        self.blocks: dict[tuple[int, int, int], Mesh] = {}

    def update(self) -> set[tuple[int, int, int]]:
        """Re-extract blocks touched since the last update; returns their indices."""
        layer = self.tsdf_layer
        changed = layer.drain_updated_slots(self.consumer)
        if changed.size == 0:
            return set()
        # a block's cubes reach into its +x/+y/+z neighbors
        src = layer.block_index[changed]
        cand = (src[:, None, :] - CORNER_OFFSETS[None, :, :]).reshape(-1, 3)
        cand = np.unique(cand, axis=0)
        slots = find_blocks(layer.hash_keys, layer.hash_values, cand)
        slots = np.sort(slots[slots >= 0])
        fresh = extract_blocks(layer, slots)
        self.blocks.update(fresh)
        return set(fresh)

    def mesh(self) -> Mesh:
        return Mesh.concatenate(self.blocks[k] for k in sorted(self.blocks))


def write_ply(mesh: Mesh, path, binary: bool = True) -> None:
    """Write a triangle-soup PLY with normals and colors."""
    n_v = mesh.vertices.shape[0]
    header = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        f"element vertex {n_v}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vrec = np.empty(n_v, dtype=[("p", "<f4", 3), ("n", "<f4", 3), ("c", "u1", 3)])
            vrec["p"] = mesh.vertices
            vrec["n"] = mesh.normals
            vrec["c"] = mesh.colors
            fh.write(vrec.tobytes())
            frec = np.empty(mesh.n_triangles, dtype=[("k", "u1"), ("i", "<i4", 3)])
            frec["k"] = 3
            frec["i"] = mesh.faces
            fh.write(frec.tobytes())
        else:
            for p, n, c in zip(mesh.vertices, mesh.normals, mesh.colors):
                fh.write(("%.9g %.9g %.9g %.6g %.6g %.6g %d %d %d\n" % (*p, *n, *c)).encode("ascii"))
            for f in mesh.faces:
                fh.write(f"3 {f[0]} {f[1]} {f[2]}\n".encode("ascii"))


def read_ply(path) -> Mesh:
    """Read a PLY written by :func:`write_ply` (or any float xyz triangle PLY).

    Faces are expanded into a triangle soup.
    """
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt = None
        elements: list[list] = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("truncated PLY header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append([tok[1], int(tok[2]), []])
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        body = fh.read()
    types = {"float": "f4", "float32": "f4", "double": "f8", "uchar": "u1", "uint8": "u1", "char": "i1",
             "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4", "short": "i2", "ushort": "u2"}
    data: dict[str, np.ndarray | list] = {}
    if fmt == "ascii":
        lines = body.decode("ascii").split("\n")
        pos = 0
        for name, count, props in elements:
            rows = [lines[pos + i].split() for i in range(count)]
            pos += count
            data[name] = (rows, props)
    else:
        end = "<" if fmt == "binary_little_endian" else ">"
        off = 0
        for name, count, props in elements:
            if any(p[0] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[0] == "list":
                            cnt = np.frombuffer(body, end + types[p[1]], 1, off)[0]
                            off += np.dtype(types[p[1]]).itemsize
                            vals = np.frombuffer(body, end + types[p[2]], int(cnt), off)
                            off += vals.nbytes
                            row.extend([int(cnt), *vals.tolist()])
                        else:
                            row.append(np.frombuffer(body, end + types[p[0]], 1, off)[0])
                            off += np.dtype(types[p[0]]).itemsize
                    rows.append(row)
                data[name] = (rows, props)
            else:
                dt = np.dtype([(p[1], end + types[p[0]]) for p in props])
                arr = np.frombuffer(body, dt, count, off)
                off += arr.nbytes
                data[name] = (arr, props)
    vrows, vprops = data["vertex"]
    names = [p[-1] for p in vprops]

    def col(key):
        if isinstance(vrows, np.ndarray):
            return vrows[key].astype(np.float64)
        i = names.index(key)
        return np.array([float(r[i]) for r in vrows])

    pts = np.stack([col("x"), col("y"), col("z")], axis=1)
    nrm = np.stack([col(k) for k in ("nx", "ny", "nz")], axis=1) if "nx" in names else np.zeros_like(pts)
    clr = (np.stack([col(k) for k in ("red", "green", "blue")], axis=1).astype(np.uint8)
           if "red" in names else np.zeros(pts.shape, np.uint8))
    idx = []
    if "face" in data:
        for row in data["face"][0]:
            cnt = int(row[0])
            poly = [int(x) for x in row[1 : 1 + cnt]]
            for k in range(1, cnt - 1):
                idx.extend([poly[0], poly[k], poly[k + 1]])
    idx = np.asarray(idx, dtype=np.int64)
    return Mesh(pts[idx], nrm[idx], clr[idx])
