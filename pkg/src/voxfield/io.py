"""Reading scans and trajectories from disk."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import Transform
from .tsdf import Scan


class InputError(ValueError):
    pass


def read_point_cloud(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Points (N, 3) and colors (N, 3) or None from a PLY point cloud."""
    path = Path(path)
    try:
        return read_ply_vertices(path)
    except (ValueError, KeyError, IndexError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot parse PLY ({exc})") from None


def read_ply_vertices(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError("not a PLY file")
        fmt, props, count, other = None, [], None, False
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                if count is not None:
                    other = True
                if tok[1] == "vertex":
                    count, other = int(tok[2]), False
            elif tok[0] == "property" and count is not None and not other:
                if tok[1] == "list":
                    raise ValueError("list property on vertices")
                props.append((tok[2], tok[1]))
            elif tok[0] == "end_header":
                break
        if count is None:
            raise ValueError("no vertex element")
        names = [p[0] for p in props]
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(count)]
            if any(len(r) < len(props) for r in rows):
                raise ValueError("short vertex row")
            table = np.array([[float(x) for x in r[: len(props)]] for r in rows]).reshape(count, len(props))
            col = {n: table[:, i] for i, n in enumerate(names)}
        else:
            types = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
                     "char": "i1", "int": "i4", "int32": "i4", "uint": "u4", "short": "i2", "ushort": "u2"}
            end = "<" if fmt == "binary_little_endian" else ">"
            dt = np.dtype([(n, end + types[t]) for n, t in props])
            buf = fh.read(dt.itemsize * count)
            if len(buf) < dt.itemsize * count:
                raise ValueError("truncated vertex data")
            arr = np.frombuffer(buf, dt, count)
            col = {n: arr[n].astype(np.float64) for n in names}
    pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    colors = None
    if all(k in col for k in ("red", "green", "blue")):
        colors = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
    return pts, colors


def write_point_cloud(path, points, colors=None) -> None:
    """Binary little-endian PLY point cloud."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts.T
    if colors is not None:
        c = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
        rec["red"], rec["green"], rec["blue"] = c.T
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    head += [f"property {'float' if t == '<f4' else 'uchar'} {n}" for n, t in fields]
    head.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(head) + "\n").encode("ascii"))
        fh.write(rec.tobytes())


def read_trajectory(path) -> list[Transform]:
    """Poses from a TUM-format file: ``timestamp tx ty tz qx qy qz qw`` per line."""
    poses = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InputError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            _, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        except ValueError:
            raise InputError(f"{path}:{lineno}: non-numeric field") from None
        if abs(np.linalg.norm([qx, qy, qz, qw]) - 1.0) > 1e-3:
            raise InputError(f"{path}:{lineno}: quaternion is not unit length")
        poses.append(Transform.from_quaternion((tx, ty, tz), qx, qy, qz, qw))
    return poses


def load_scans(scan_dir, trajectory_path) -> list[Scan]:
    """Pair every ``*.ply`` in ``scan_dir`` (sorted by name) with a trajectory pose."""
    files = sorted(Path(scan_dir).glob("*.ply"))
    if not files:
        raise InputError(f"no scans found in {scan_dir}")
    poses = read_trajectory(trajectory_path)
    if len(poses) != len(files):
        raise InputError(f"trajectory has {len(poses)} poses but {len(files)} scans were found")
    scans = []
    for f, pose in zip(files, poses):
        pts, colors = read_point_cloud(f)
        scans.append(Scan(pts, pose, colors))
    return scans
