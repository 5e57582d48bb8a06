"""Command-line entry point: oracle, train, extract, eval, bench, fixtures.

Every subcommand reads its settings from an optional JSON ``--config`` file
and then from flags, flags winning. Artifact-producing runs write a
``manifest.json`` (or ``<output>.manifest.json``) beside their outputs.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import fixtures as fx
from .extract import (DEFAULT_RESOLUTION, GATE_FACTOR, SEAM_SLACK, TAU_FLIP, assign_pseudo_signs,
                      evaluate_lattice, marching_cubes, write_lattice)
from .geometry import (DEFAULT_SIGMAS, DEFAULT_UNIFORM_FRACTION, PAD, Bvh, GeometryError, PointCloud,
                       nearest_point_on_mesh, normalize_to_unit_cube, sample_queries, sample_surface)
from .meshio import read_cloud, read_mesh, write_cloud, write_field_dump, write_mesh
from .metrics import CD_POINTS, EMD_POINTS, FSCORE_THRESHOLDS, ReconReport, evaluate
from .model import ModelConfig, VectorFieldModel, udf_direction
from .train import NumericalError, TrainConfig, config_dict, train, write_log

log = logging.getLogger("nvfield")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------- settings

@dataclass
class OracleSettings:
    n: int = 10000
    seed: int = 0
    noise_sigmas: tuple = DEFAULT_SIGMAS
    uniform_fraction: float = DEFAULT_UNIFORM_FRACTION


@dataclass
class TrainSettings:
    meshes: tuple = ("fixture:sphere",)
    out_dir: str = "run"
    normalize: str = "auto"  # "auto" rescales only meshes that leave the unit cube


@dataclass
class ExtractSettings:
    resolution: int = DEFAULT_RESOLUTION
    chunk: int = 16384
    tau: float = TAU_FLIP
    gate_factor: float = GATE_FACTOR
    seam_slack: float = SEAM_SLACK
    consistent_only: bool = True
    lattice_dump: str = ""


@dataclass
class EvalSettings:
    seed: int = 0
    n_cd: int = CD_POINTS
    n_emd: int = EMD_POINTS


@dataclass
class BenchSettings:
    n: int = 200_000
    runs: int = 1
    seed: int = 0
    chunk: int = 16384
    fd_step: float = 1e-3
    cloud: str = ""


def _field_type(f: dataclasses.Field, default):
    if isinstance(default, bool):
        return bool
    if isinstance(default, tuple):
        return tuple
    return type(default)


def _add_settings(parser, cls, skip=()):
    """One flag per dataclass field, defaulting to None so explicit values can be told apart."""
    group = parser.add_argument_group(f"{cls.__name__} fields")
    for f in fields(cls):
        if f.name in skip:
            continue
        default = getattr(cls(), f.name)
        flag = "--" + f.name.replace("_", "-")
        kind = _field_type(f, default)
        shown = list(default) if isinstance(default, tuple) else default
        help_text = f"(default: {shown!r})"
        if kind is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                               default=None, help=help_text)
        elif kind is tuple:
            elem = type(default[0]) if default else str
            group.add_argument(flag, dest=f.name, nargs="*", type=elem, default=None, help=help_text)
        else:
            group.add_argument(flag, dest=f.name, type=kind, default=None, help=help_text)


def _resolve(cls, file_cfg: dict, args, skip=()):
    """Dataclass defaults, then JSON values, then flags."""
    names = {f.name for f in fields(cls)}
    values = {k: v for k, v in file_cfg.items() if k in names and k not in skip}
    for name in names - set(skip):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for f in fields(cls):
        if f.name in values and isinstance(getattr(cls(), f.name), tuple):
            values[f.name] = tuple(values[f.name])
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {cls.__name__} settings: {exc}") from None


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise GeometryError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return cfg


# ----------------------------------------------------------------- manifest

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {"nvfield": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        return float(x)
    return x


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    seed: int = 0
    versions: dict = field(default_factory=_versions)
    results: dict = field(default_factory=dict)
    timestamp: str = ""

    def write(self, path) -> None:
        self.timestamp = datetime.datetime.now(datetime.timezone.utc).isoformat()
        Path(path).write_text(json.dumps(_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n")


def _hash_inputs(paths) -> dict:
    return {str(p): _sha256(p) for p in paths if p and not str(p).startswith("fixture:")}


def _manifest_path(out) -> Path:
    out = Path(out)
    return out.with_name(out.name + ".manifest.json")


# ----------------------------------------------------------------- helpers

def _load_mesh(source: str, normalize: str = "never"):
    if source.startswith("fixture:"):
        try:
            return fx.fixture(source.split(":", 1)[1])
        except KeyError as exc:
            raise GeometryError(str(exc)) from None
    mesh = read_mesh(source)
    if normalize == "always" or (normalize == "auto" and np.abs(mesh.vertices).max() > 0.5):
        mesh = normalize_to_unit_cube(mesh)[0]
    return mesh


def _load_points(source: str) -> np.ndarray:
    if source.endswith(".npy"):
        return np.load(source).astype(np.float64).reshape(-1, 3)
    return read_cloud(source).points


def _parent_dir(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


# ----------------------------------------------------------------- commands

def cmd_oracle(args) -> int:
    s = _resolve(OracleSettings, _load_config(args.config), args)
    if s.n < 0:
        raise UsageError("n must be non-negative")
    mesh = _load_mesh(args.mesh)
    if len(mesh) == 0:
        raise GeometryError(f"{args.mesh}: mesh has no triangles")
    if s.n:
        src = sample_surface(mesh, s.n, s.seed)
        q = sample_queries(src, s.n, s.noise_sigmas, s.uniform_fraction, s.seed + 1)
        disp = nearest_point_on_mesh(mesh, Bvh(mesh), q).displacement
    else:
        q = disp = np.zeros((0, 3))
    _parent_dir(args.out)
    write_field_dump(args.out, q, disp)
    RunManifest("oracle", asdict(s), _hash_inputs([args.mesh]), [args.out], s.seed,
                results={"records": len(q)}).write(_manifest_path(args.out))
    print(f"wrote {len(q)} records to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_config(args.config)
    run = _resolve(TrainSettings, raw, args)
    tcfg = _resolve(TrainConfig, raw, args)
    mcfg = _resolve(ModelConfig, raw, args)
    if args.threads == 1:
        tcfg.strict_deterministic = True
    # one seed drives both data sampling and initialization
    mcfg.seed = tcfg.seed
    if run.normalize not in ("auto", "always", "never"):
        raise UsageError("normalize must be auto, always or never")
    if not run.meshes:
        raise UsageError("train needs at least one mesh")
    try:
        mcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    meshes = [_load_mesh(m, run.normalize) for m in run.meshes]
    for source, m in zip(run.meshes, meshes):
        if len(m) == 0:
            raise GeometryError(f"{source}: mesh has no triangles")

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .train import prepare_mesh

    data = [prepare_mesh(m, tcfg, i) for i, m in enumerate(meshes)]
    model = VectorFieldModel(mcfg)
    try:
        model, records = train(model, meshes, tcfg, data=data)
    except NumericalError as exc:
        print(f"numerical failure: {exc}; last record: {exc.record}", file=sys.stderr)
        return EXIT_NUMERIC
    ckpt = out / "model.nvfm"
    model.save(ckpt, extra={"train": config_dict(tcfg)})
    write_log(records, out / "train_log.csv")
    outputs = [str(ckpt), str(out / "train_log.csv")]
    for i, md in enumerate(data):
        name = "cloud.ply" if len(data) == 1 else f"cloud_{i}.ply"
        write_cloud(PointCloud(md.cloud), out / name)
        outputs.append(str(out / name))
    last = records[-1] if records else None
    results = {"epochs": len(records)}
    if last is not None:
        results.update(displacement_loss=last.displacement_loss, total_loss=last.total_loss,
                       perplexity=last.perplexity)
    config = {"run": asdict(run), "train": config_dict(tcfg), "model": asdict(mcfg)}
    RunManifest("train", config, _hash_inputs(run.meshes), outputs, tcfg.seed,
                results=results).write(out / "manifest.json")
    print(f"trained {len(records)} epochs; checkpoint {ckpt}")
    return EXIT_OK


def cmd_extract(args) -> int:
    s = _resolve(ExtractSettings, _load_config(args.config), args)
    if s.resolution < 8:
        raise UsageError("resolution must be at least 8")
    try:
        model = VectorFieldModel.load(args.checkpoint)
    except (ValueError, OSError) as exc:
        raise GeometryError(f"cannot load checkpoint: {exc}") from None
    if model.config.kind != "nvf":
        raise GeometryError("extraction needs an nvf checkpoint")
    points = _load_points(args.cloud)
    fc = model.encode(points)
    model.counter.reset()
    t0 = time.perf_counter()
    lattice = evaluate_lattice(model, fc, s.resolution, s.chunk)
    if not np.isfinite(lattice.displacement).all():
        print("non-finite field values on the lattice", file=sys.stderr)
        return EXIT_NUMERIC
    signs = assign_pseudo_signs(lattice, s.tau, s.gate_factor)
    mesh = marching_cubes(lattice, signs, s.consistent_only, s.seam_slack)
    elapsed = time.perf_counter() - t0
    _parent_dir(args.out)
    write_mesh(mesh, args.out)
    outputs = [args.out]
    if s.lattice_dump:
        write_lattice(lattice, s.lattice_dump)
        outputs.append(s.lattice_dump)
    results = {"vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
               "boundary_edges": len(mesh.boundary_edges()), "sign_conflicts": signs.conflicts,
               "forwards": model.counter.forwards, "gradient_ops": model.counter.gradient_ops,
               "seconds": round(elapsed, 3)}
    RunManifest("extract", asdict(s), _hash_inputs([args.checkpoint, args.cloud]), outputs,
                model.config.seed, results=results).write(_manifest_path(args.out))
    print(f"extracted {len(mesh.triangles)} triangles to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    s = _resolve(EvalSettings, _load_config(args.config), args)
    if len(args.meshes) % 2:
        raise UsageError("eval takes RECON GT pairs")
    pairs = list(zip(args.meshes[0::2], args.meshes[1::2]))
    reports = []
    for recon, gt in pairs:
        a, b = _load_mesh(recon), _load_mesh(gt)
        if len(a) == 0 or len(b) == 0:
            raise GeometryError(f"cannot evaluate empty mesh in pair {recon}, {gt}")
        reports.append((Path(recon).stem if not recon.startswith("fixture:") else recon,
                        evaluate(a, b, s.seed, s.n_cd, s.n_emd)))
    rows = [r.row(name) for name, r in reports]
    mean = ReconReport(
        float(np.mean([r.cd for _, r in reports])), float(np.mean([r.emd for _, r in reports])),
        {t: float(np.mean([r.f1[t] for _, r in reports])) for t in FSCORE_THRESHOLDS},
        s.n_cd, s.n_emd, s.seed,
    )
    rows.append(mean.row("mean"))
    _parent_dir(args.out)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ReconReport.COLUMNS)
        w.writerows(rows)
    RunManifest("eval", asdict(s), _hash_inputs(args.meshes), [args.out], s.seed,
                results={"pairs": len(pairs)}).write(_manifest_path(args.out))
    for row in [ReconReport.COLUMNS] + rows:
        print(",".join(str(c) for c in row))
    return EXIT_OK


def bench(model: VectorFieldModel, points, n: int, runs: int = 1, seed: int = 0,
          chunk: int = 16384, fd_step: float = 1e-3) -> dict:
    """Time distance+direction queries: NVF forwards vs a same-size UDF with FD directions."""
    baseline = VectorFieldModel(model.config, kind="udf")
    fc_nvf = model.encode(points)
    fc_udf = baseline.encode(points)
    q = np.random.default_rng(seed).uniform(-PAD, PAD, size=(n, 3))
    report = {"n": n, "runs": []}
    for _ in range(runs):
        model.counter.reset()
        baseline.counter.reset()
        t0 = time.perf_counter()
        model.distance_direction(fc_nvf, q, chunk)
        t_nvf = time.perf_counter() - t0
        t0 = time.perf_counter()
        baseline.udf_distance(fc_udf, q, chunk)
        udf_direction(baseline, fc_udf, q, fd_step, chunk=chunk)
        t_udf = time.perf_counter() - t0
        report["runs"].append({
            "nvf_seconds": t_nvf, "baseline_seconds": t_udf,
            "wall_clock_ratio": t_udf / t_nvf if t_nvf > 0 else float("inf"),
        })
    report["nvf_forwards"] = model.counter.forwards
    report["nvf_gradient_ops"] = model.counter.gradient_ops
    # the baseline probes are forwards too; the counter keeps them apart
    report["baseline_forwards"] = baseline.counter.forwards
    report["baseline_fd_probes"] = baseline.counter.fd_probes
    report["op_ratio"] = baseline.counter.forwards / model.counter.forwards if model.counter.forwards else None
    report["min_wall_clock_ratio"] = min(r["wall_clock_ratio"] for r in report["runs"]) if runs else None
    return report


def cmd_bench(args) -> int:
    s = _resolve(BenchSettings, _load_config(args.config), args)
    if s.n < 1 or s.runs < 1:
        raise UsageError("n and runs must be positive")
    try:
        model = VectorFieldModel.load(args.checkpoint)
    except (ValueError, OSError) as exc:
        raise GeometryError(f"cannot load checkpoint: {exc}") from None
    if model.config.kind != "nvf":
        raise GeometryError("bench needs an nvf checkpoint")
    if s.cloud:
        points = _load_points(s.cloud)
    else:
        points = sample_surface(fx.icosphere(), 2048, s.seed).points
    report = bench(model, points, s.n, s.runs, s.seed, s.chunk, s.fd_step)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        _parent_dir(args.out)
        Path(args.out).write_text(text + "\n")
        RunManifest("bench", asdict(s), _hash_inputs([args.checkpoint, s.cloud]), [args.out], s.seed,
                    results={"min_wall_clock_ratio": report["min_wall_clock_ratio"]}
                    ).write(_manifest_path(args.out))
    print(text)
    return EXIT_OK


def cmd_fixtures(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for name in fx.FIXTURES:
        path = out / f"{name}.{args.format}"
        write_mesh(fx.fixture(name), path)
        outputs.append(str(path))
    RunManifest("fixtures", {"format": args.format}, {}, outputs, 0).write(out / "manifest.json")
    print("\n".join(outputs))
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="BLAS/OpenMP thread cap; 1 guarantees determinism")
    common.add_argument("--config", default=None, help="JSON settings file (flags win)")

    p = _Parser(prog="nvfield", description="Neural vector field reconstruction toolkit.")
    p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread cap; 1 guarantees determinism")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"nvfield {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    sp = sub.add_parser("oracle", parents=[common], help="exact ground-truth displacement dump")
    sp.add_argument("mesh", help="OBJ/PLY path or fixture:NAME")
    sp.add_argument("--out", required=True, help="output NVF1 dump")
    _add_settings(sp, OracleSettings)
    sp.set_defaults(func=cmd_oracle)

    sp = sub.add_parser("train", parents=[common], help="fit a model; writes checkpoint, CSV log, cloud")
    _add_settings(sp, TrainSettings)
    _add_settings(sp, TrainConfig)
    _add_settings(sp, ModelConfig, skip=("seed",))
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("extract", parents=[common], help="differentiation-free mesh extraction")
    sp.add_argument("checkpoint")
    sp.add_argument("cloud", help="input cloud (PLY/OBJ vertices or .npy)")
    sp.add_argument("--out", required=True, help="output mesh (.obj or .ply)")
    _add_settings(sp, ExtractSettings)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("eval", parents=[common], help="CD / EMD / F-score report as CSV")
    sp.add_argument("meshes", nargs="+", metavar="RECON GT", help="one or more RECON GT pairs")
    sp.add_argument("--out", required=True, help="output CSV")
    _add_settings(sp, EvalSettings)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", parents=[common], help="NVF vs UDF-baseline inference timing")
    sp.add_argument("checkpoint")
    sp.add_argument("--out", default="", help="optional JSON report path")
    _add_settings(sp, BenchSettings)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("fixtures", parents=[common], help="write the analytic fixture meshes")
    sp.add_argument("out_dir")
    sp.add_argument("--format", choices=("obj", "ply"), default="obj")
    sp.set_defaults(func=cmd_fixtures)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        parser.error("--threads must be positive")
    from threadpoolctl import threadpool_limits

    try:
        if threads is not None:
            with threadpool_limits(threads):
                return args.func(args)
        return args.func(args)
    except UsageError as exc:
        print(f"nvfield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"nvfield {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"nvfield {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (GeometryError, FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"nvfield {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, OSError) as exc:
        print(f"nvfield {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
