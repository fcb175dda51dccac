"""Command-line front end."""

from __future__ import annotations

import argparse
import contextlib
import json
import math
import os
import statistics
import sys
import tempfile
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    QUASI_WORST_CASE,
    QUASI_WORST_CASE_ROUNDED,
    expected_projective_residual,
    expected_quasi_residual,
    monte_carlo_merged_error,
    projective_residual,
    quasi_euclidean_residual,
    trajectory_lookup_counts,
    write_csv,
)
from .bench import ROW_FIELDS, TIMING_FIELDS, BenchConfig, run_sim_bench
from .esdf import EsdfConfig, build_batch
from .io import InputError, load_scans
from .mesh import extract_mesh, write_ply
from .sim import WorldParseError, default_world, load_world
from .tsdf import TsdfConfig, integrate_scan
from .voxel_store import OBSERVED, Layer, LayerKind, LayerParseError, load_layer, read_header, save_layer

WEIGHT_CHOICES = {"const": "constant", "z2": "inverse_z2", "z2-dropoff": "inverse_z2_dropoff"}
MERGE_CHOICES = {"simple": "simple_raycast", "grouped": "grouped_raycast", "antigraze": "grouped_antigraze"}
BAND_CHOICES = {"one-voxel": "one_voxel", "half-trunc": "half_truncation"}
METRIC_CHOICES = {"quasi": "quasi_euclidean", "euclid": "euclidean"}
QUEUE_CHOICES = {"fifo": "fifo", "prio-single": "priority_single_insert", "prio-multi": "priority_multi_insert"}


class CliError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    voxel_size: float = 0.1
    truncation_mult: float = 4.0
    weight: str = "z2-dropoff"
    merge: str = "grouped"
    esdf_band: str = "one-voxel"
    metric: str = "quasi"
    queue: str = "prio-single"
    d_max: float = 4.0
    seed: int = 0

    def validate(self) -> "RunConfig":
        for name, table in (("weight", WEIGHT_CHOICES), ("merge", MERGE_CHOICES), ("esdf_band", BAND_CHOICES),
                            ("metric", METRIC_CHOICES), ("queue", QUEUE_CHOICES)):
            if getattr(self, name) not in table:
                raise CliError(f"--{name.replace('_', '-')}: invalid choice {getattr(self, name)!r}")
        if self.voxel_size <= 0:
            raise CliError("--voxel-size must be positive")
        if self.truncation_mult <= 0:
            raise CliError("--truncation-mult must be positive")
        if self.d_max <= 0:
            raise CliError("--d-max must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise CliError("--seed must be an unsigned 64-bit integer")
        band_radius = self.voxel_size if self.esdf_band == "one-voxel" else self.truncation_mult * self.voxel_size / 2
        if self.d_max <= band_radius:
            raise CliError(f"--d-max {self.d_max} must exceed the fixed band radius set by --esdf-band "
                           f"{self.esdf_band} and --voxel-size {self.voxel_size}")
        if self.truncation_mult <= 1 and self.weight == "z2-dropoff":
            raise CliError("--weight z2-dropoff needs --truncation-mult above 1 (drop-off starts one voxel behind)")
        return self

    @property
    def truncation(self) -> float:
        return self.truncation_mult * self.voxel_size

    def tsdf(self) -> TsdfConfig:
        return TsdfConfig(truncation=self.truncation, weight_mode=WEIGHT_CHOICES[self.weight],
                          merge_mode=MERGE_CHOICES[self.merge]).resolved(self.voxel_size)

    def esdf(self) -> EsdfConfig:
        return EsdfConfig(d_max=self.d_max, fixed_band_mode=BAND_CHOICES[self.esdf_band],
                          metric=METRIC_CHOICES[self.metric], queue_mode=QUEUE_CHOICES[self.queue],
                          truncation=self.truncation)


CONFIG_KEYS = tuple(f.name for f in fields(RunConfig))


def effective_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, overridden by the config file, overridden by flags."""
    values: dict = {}
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config file {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise CliError(f"config file {args.config} must hold a JSON object")
        unknown = set(loaded) - set(CONFIG_KEYS)
        if unknown:
            raise CliError(f"config file {args.config}: unknown keys {sorted(unknown)}")
        values.update(loaded)
    for key in CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = flag
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise CliError(str(exc)) from None
    cfg = cfg.validate()
    print("effective config: " + json.dumps({k: getattr(cfg, k) for k in CONFIG_KEYS}, sort_keys=True),
          file=sys.stderr)
    return cfg


@contextlib.contextmanager
def atomic_output(path):
    """Yield a temporary path that replaces ``path`` only if the block succeeds."""
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir():
        raise CliError(f"output directory {parent} does not exist")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# ---- commands


def cmd_integrate(args) -> int:
    cfg = effective_config(args)
    if not args.out:
        raise CliError("--out is required")
    scans = load_scans(args.scans, args.trajectory)
    tcfg = cfg.tsdf()
    layer = Layer(cfg.voxel_size, kind=LayerKind.TSDF)
    times = []
    for scan in scans:
        t0 = time.perf_counter()
        integrate_scan(layer, scan, tcfg)
        times.append(time.perf_counter() - t0)
    outputs = [(args.out, layer)]
    if args.esdf_out:
        outputs.append((args.esdf_out, build_batch(layer, cfg.esdf())))
    with contextlib.ExitStack() as stack:
        tmps = [(stack.enter_context(atomic_output(p)), lay) for p, lay in outputs]
        for tmp, lay in tmps:
            save_layer(lay, tmp)
    print(f"integrated {len(scans)} scans into {layer.n_blocks} blocks; per-scan seconds "
          f"median {statistics.median(times):.4f} max {max(times):.4f} total {sum(times):.3f}")
    return 0


def _load(path, kind: LayerKind) -> Layer:
    try:
        layer = load_layer(path)
    except FileNotFoundError:
        raise CliError(f"no such layer file: {path}") from None
    if layer.kind != kind:
        raise CliError(f"{path} holds a {layer.kind.name} layer but this command needs {kind.name}")
    return layer


def cmd_mesh(args) -> int:
    layer = _load(args.layer, LayerKind.TSDF)
    mesh = extract_mesh(layer)
    with atomic_output(args.out) as tmp:
        write_ply(mesh, tmp, binary=not args.ascii)
    print(f"wrote {mesh.n_triangles} triangles to {args.out}")
    return 0


def _coord(x) -> str:
    return format(float(x), ".10g")


def cmd_slice(args) -> int:
    layer = _load(args.layer, LayerKind.ESDF)
    axis = "xyz".index(args.axis)
    v = layer.voxel_size
    plane = math.floor(args.coordinate / v)
    n = layer.n_blocks
    g = layer.voxel_global_indices(np.arange(n))
    sel = (g[..., axis] == plane) & ((layer.data["flags"][:n] & OBSERVED) != 0)
    other = [a for a in range(3) if a != axis]
    lines = []
    if n:
        all_g = g.reshape(-1, 3)
        lo = all_g[:, other].min(axis=0)
        hi = all_g[:, other].max(axis=0)
        grid = np.full((hi[1] - lo[1] + 1, hi[0] - lo[0] + 1), np.nan)
        pts = g[sel]
        grid[pts[:, other[1]] - lo[1], pts[:, other[0]] - lo[0]] = layer.data["distance"][:n][sel]
        a0 = "xyz"[other[0]]
        header = [f"{'xyz'[other[1]]}\\{a0}"] + [_coord((i + 0.5) * v) for i in range(lo[0], hi[0] + 1)]
        lines.append(",".join(header))
        for r in range(grid.shape[0]):
            cells = ["nan" if np.isnan(x) else repr(float(x)) for x in grid[r]]
            lines.append(",".join([_coord((lo[1] + r + 0.5) * v)] + cells))
    with atomic_output(args.out) as tmp:
        Path(tmp).write_text("\n".join(lines) + ("\n" if lines else ""))
    print(f"wrote slice {args.axis}={(plane + 0.5) * v} to {args.out}")
    return 0


def cmd_sim_bench(args) -> int:
    cfg = effective_config(args)
    if not args.out:
        raise CliError("--out is required")
    world = load_world(args.world) if args.world else default_world()
    sizes = tuple(float(x) for x in args.voxel_sizes.split(",")) if args.voxel_sizes else (cfg.voxel_size,)
    tcfg = TsdfConfig(weight_mode=WEIGHT_CHOICES[cfg.weight], merge_mode=MERGE_CHOICES[cfg.merge])
    ecfg = EsdfConfig(d_max=cfg.d_max, queue_mode=QUEUE_CHOICES[cfg.queue])
    bench = BenchConfig(voxel_sizes=sizes, n_viewpoints=args.viewpoints, seed=cfg.seed, tsdf=tcfg,
                        esdf=ecfg, truncation_mult=cfg.truncation_mult)
    result = run_sim_bench(bench, world)
    timing_path = Path(args.timings) if args.timings else Path(args.out).with_suffix(".timings.csv")
    with atomic_output(args.out) as tmp_rows, atomic_output(timing_path) as tmp_times:
        write_csv(result.rows, tmp_rows, ROW_FIELDS)
        write_csv(result.timings, tmp_times, TIMING_FIELDS)
    for row in result.rows:
        print(f"v={row['voxel_size']:<5} {row['variant']:<18} rms={row['rms']:.4f} count={row['count']}")
    return 0


def cmd_error_analysis(args) -> int:
    out = Path(args.out)
    if not out.is_dir():
        raise CliError(f"output directory {out} does not exist")
    if not os.access(out, os.W_OK):
        raise CliError(f"output directory {out} is not writable")
    seed = args.seed if args.seed is not None else 0
    weighting = "equal" if args.equal_weights else "inverse_z2"
    theta = np.linspace(math.pi / 20, math.pi / 2, 46)
    phi = np.linspace(0.0, math.pi / 4, 46)
    quantiles = (0.5, 0.9, 0.95, 0.99)
    mc_rows = []
    for n in (1, 2, 3, 5, 10, 20, 50, 100):
        q = monte_carlo_merged_error(n, args.trials, 1.0, seed, weighting, quantiles)
        mc_rows.append({"n_obs": n, **{f"p{int(k * 100)}": q[k] for k in quantiles}})
    files = {
        "projective_residual.csv": (
            [f"# expected_projective_residual_per_d,{expected_projective_residual(1.0)!r}"],
            "theta_rad,residual_per_d", [f"{_coord(t)},{float(projective_residual(t, 1.0))!r}" for t in theta]),
        "quasi_euclidean_residual.csv": (
            [f"# expected_quasi_residual_per_d,{expected_quasi_residual(1.0)!r}",
             f"# worst_case_residual_per_d,{-QUASI_WORST_CASE!r}",
             f"# worst_case_rounded_earlier,{-QUASI_WORST_CASE_ROUNDED!r}"],
            "phi_rad,residual_per_d", [f"{_coord(p)},{float(quasi_euclidean_residual(p, 1.0))!r}" for p in phi]),
        "monte_carlo.csv": (
            [f"# weighting,{weighting}", f"# trials,{args.trials}", f"# seed,{seed}"],
            "n_obs," + ",".join(f"p{int(k * 100)}" for k in quantiles),
            [",".join([str(r["n_obs"])] + [repr(r[f"p{int(k * 100)}"]) for k in quantiles]) for r in mc_rows]),
    }
    with contextlib.ExitStack() as stack:
        for name, (comments, header, rows) in files.items():
            tmp = stack.enter_context(atomic_output(out / name))
            tmp.write_text("\n".join(comments + [header] + rows) + "\n")
    print(f"expected projective residual {expected_projective_residual(1.0):.4f} d; "
          f"quasi-Euclidean residual at pi/8 {-QUASI_WORST_CASE:.4f} d; "
          f"expected quasi-Euclidean residual {expected_quasi_residual(1.0):.4f} d")
    return 0


def _range(text: str) -> np.ndarray:
    parts = [float(x) for x in text.split(":")]
    if len(parts) == 1:
        return np.asarray(parts)
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise CliError(f"bad range {text!r}; use start:stop:step or a single value")
    n = int(round((parts[1] - parts[0]) / parts[2])) + 1
    return np.round(parts[0] + parts[2] * np.arange(n), 12)


def cmd_collision_model(args) -> int:
    if not args.out:
        raise CliError("--out is required")
    rows = []
    for r in _range(args.radius):
        for v in _range(args.voxel_size_range):
            for l in _range(args.length):
                for dm in _range(args.d_max_range):
                    n_o, n_max, n_min = trajectory_lookup_counts(float(r), float(v), float(l), float(dm),
                                                                 literal=args.literal)
                    rows.append({"r": float(r), "v": float(v), "l": float(l), "d_max": float(dm),
                                 "n_occupancy": n_o, "n_esdf_max": n_max, "n_esdf_min": n_min})
    with atomic_output(args.out) as tmp:
        write_csv(rows, tmp, ("r", "v", "l", "d_max", "n_occupancy", "n_esdf_max", "n_esdf_min"))
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def cmd_info(args) -> int:
    try:
        hdr = read_header(args.layer)
    except FileNotFoundError:
        raise CliError(f"no such layer file: {args.layer}") from None
    for k, v in hdr.items():
        print(f"{k}: {v}")
    return 0


# ---- parser


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("map parameters (override --config, which overrides defaults)")
    g.add_argument("--config", help="JSON file with any of: " + ", ".join(CONFIG_KEYS))
    g.add_argument("--voxel-size", type=float)
    g.add_argument("--truncation-mult", type=float, help="truncation in voxels (default 4)")
    g.add_argument("--weight", choices=list(WEIGHT_CHOICES))
    g.add_argument("--merge", choices=list(MERGE_CHOICES))
    g.add_argument("--esdf-band", choices=list(BAND_CHOICES))
    g.add_argument("--metric", choices=list(METRIC_CHOICES))
    g.add_argument("--queue", choices=list(QUEUE_CHOICES))
    g.add_argument("--d-max", type=float)
    g.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxfield", description="Incremental TSDF/ESDF voxel mapping.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("integrate", help="fuse PLY scans with a TUM trajectory into a TSDF layer")
    p.add_argument("scans", help="directory of *.ply scans, sorted by name")
    p.add_argument("trajectory", help="TUM trajectory, one pose per scan")
    p.add_argument("--out", help="TSDF layer file")
    p.add_argument("--esdf-out", help="also write a batch-built ESDF layer")
    _add_run_flags(p)
    p.set_defaults(func=cmd_integrate)

    p = sub.add_parser("mesh", help="marching-cubes mesh of a TSDF layer")
    p.add_argument("layer")
    p.add_argument("--out", required=True)
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("slice", help="CSV grid of ESDF distances on an axis-aligned plane")
    p.add_argument("layer")
    p.add_argument("--axis", choices=["x", "y", "z"], required=True)
    p.add_argument("--coordinate", type=float, required=True, help="plane position in meters")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = sub.add_parser("sim-bench", help="ESDF variant errors and timings on the analytic world")
    p.add_argument("--world", help="world description file (default: built-in world)")
    p.add_argument("--viewpoints", type=int, default=50)
    p.add_argument("--voxel-sizes", help="comma-separated list; default: --voxel-size")
    p.add_argument("--out", help="report CSV")
    p.add_argument("--timings", help="timing CSV (default: the report path with suffix .timings.csv)")
    _add_run_flags(p)
    p.set_defaults(func=cmd_sim_bench)

    p = sub.add_parser("error-analysis", help="residual and Monte Carlo tables")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--equal-weights", action="store_true", help="unit observation weights in the Monte Carlo")
    p.set_defaults(func=cmd_error_analysis)

    p = sub.add_parser("collision-model", help="lookup counts for occupancy vs ESDF collision checks")
    p.add_argument("--radius", default="0.1:1.0:0.1", help="robot radius range start:stop:step")
    p.add_argument("--voxel-size-range", default="0.05:0.5:0.05")
    p.add_argument("--length", default="10")
    p.add_argument("--d-max-range", default="2")
    p.add_argument("--literal", action="store_true", help="divide by the edge length instead of the voxel volume")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_collision_model)

    p = sub.add_parser("info", help="print a layer file header")
    p.add_argument("layer")
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, InputError, LayerParseError, WorldParseError, OverflowError) as exc:
        print(f"voxfield {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"voxfield {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
