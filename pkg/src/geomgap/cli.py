"""Command-line entry point: ``geomgap <subcommand> ...``.

Exit status is 0 on success, 1 on a runtime failure and 2 on a
configuration or input error.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ValidationError

from . import __version__, genlab, gnn
from .geograph import PointCloudParseError, build_graph, load_point_cloud, write_point_cloud
from .manifold import circle, flat_torus, sphere
from .spectral import certify_filter, eigendecompose

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
MANIFEST = "manifest.json"


class ConfigError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def checksum(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _validation_message(path: Path, exc: ValidationError) -> str:
    lines = [f"{path}: invalid configuration"]
    for err in exc.errors():
        key = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"  key {key}: {err['msg']}")
    return "\n".join(lines)


def load_config(path, model: type[BaseModel], seed: int | None = None) -> BaseModel:
    """Parse a JSON config into ``model``; ``seed`` overrides ``eval.seed``."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if seed is not None:
        raw.setdefault("eval", {})
        if not isinstance(raw["eval"], dict):
            raise ConfigError(f"{path}: key eval must be an object")
        raw["eval"]["seed"] = seed
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_validation_message(path, exc)) from None


class OutputDir:
    """Stage every file in a sibling temp directory and swap it in on commit."""

    def __init__(self, target, overwrite: bool):
        self.target = Path(target)
        if self.target.exists() and (not self.target.is_dir() or any(self.target.iterdir())) and not overwrite:
            raise ConfigError(f"{self.target}: output exists; pass --overwrite to replace it")
        self.target.parent.mkdir(parents=True, exist_ok=True)
        self.stage = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.", dir=self.target.parent))
        self.outputs: list[str] = []

    def path(self, name: str) -> Path:
        if name != MANIFEST and name not in self.outputs:
            self.outputs.append(name)
        return self.stage / name

    def commit(self) -> None:
        trash = None
        if self.target.exists():
            trash = Path(tempfile.mkdtemp(prefix=f".{self.target.name}.old.", dir=self.target.parent))
            self.target.rename(trash / "old")
        self.stage.rename(self.target)
        if trash is not None:
            shutil.rmtree(trash)

    def abort(self) -> None:
        shutil.rmtree(self.stage, ignore_errors=True)


def _write_manifest(out: OutputDir, command: str, config: dict, seed, started: str, planned,
                    finished: str | None = None, status: str = "running") -> None:
    doc = {
        "tool": "geomgap",
        "version": __version__,
        "command": command,
        "config": config,
        "config_checksum": checksum(config),
        "master_seed": seed,
        "started": started,
        "finished": finished,
        "status": status,
        "outputs": list(planned),
    }
    out.path(MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _run_experiment(args, command: str, model: type[BaseModel], run) -> int:
    cfg = load_config(args.config, model, args.seed)
    out = OutputDir(args.out, args.overwrite)
    doc = cfg.model_dump(mode="json")
    started = _now()
    planned = ["records.csv"] + (["gaps.svg"] if args.svg else [])
    _write_manifest(out, command, doc, cfg.eval.seed, started, planned)
    try:
        records, extra = run(cfg, out)
        genlab.write_records_csv(records, out.path("records.csv"))
        if args.svg:
            genlab.plot_gaps(records, out.path("gaps.svg"))
    except BaseException:
        out.abort()
        raise
    failed = [r for r in records if r.status != "ok"]
    status = "ok" if not failed else f"{len(failed)} failed records"
    _write_manifest(out, command, doc, cfg.eval.seed, started, out.outputs, _now(), status)
    out.commit()
    print(f"wrote {len(records)} records to {out.target / 'records.csv'}")
    for line in extra:
        print(line)
    if failed:
        print(f"{len(failed)} records failed; see the status column", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gap_node(args) -> int:
    def run(cfg: genlab.ExperimentConfig, out: OutputDir):
        if cfg.mismatch.kind == "cross_manifold":
            return [r for r, _ in genlab.ood_gap(cfg, workers=args.workers)], []
        return genlab.sweep(cfg, workers=args.workers), []

    return _run_experiment(args, "gap-node", genlab.ExperimentConfig, run)


def cmd_sweep(args) -> int:
    def run(cfg: genlab.ExperimentConfig, out: OutputDir):
        records = genlab.sweep(cfg, workers=args.workers)
        summary = genlab.cell_summary(records)
        with open(out.path("summary.csv"), "w") as fh:
            cols = list(summary[0]) if summary else []
            fh.write(",".join(cols) + "\n")
            for row in summary:
                fh.write(",".join(genlab._fmt(row[c]) for c in cols) + "\n")
        extra = []
        try:
            fit = genlab.bound_shape_fit(records, cfg.manifold.build().dim, cfg.eval.delta,
                                         cfg.graph.c, cfg.graph.scale)
        except genlab.BoundFitError as exc:
            extra.append(f"bound fit skipped: {exc}")
        else:
            out.path("bound_fit.txt").write_text(genlab.format_bound_fit(fit))
            extra.append(f"bound fit r2 = {fit.r2:.4f}")
        return records, extra

    return _run_experiment(args, "sweep", genlab.ExperimentConfig, run)


def cmd_gap_graph(args) -> int:
    base = Path(args.config).resolve().parent

    def run(cfg: genlab.GraphExperimentConfig, out: OutputDir):
        for spec in cfg.classes:
            if spec.path is None:
                continue
            p = Path(spec.path)
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise ConfigError(f"class file not found: {p}")
            try:
                cloud = load_point_cloud(p, spec.format)
            except PointCloudParseError as exc:
                raise ConfigError(str(exc)) from None
            if cloud.n < cfg.n_points:
                raise ConfigError(f"{p}: {cloud.n} points, fewer than n_points={cfg.n_points}")
        return genlab.graph_level_gap(cfg, workers=args.workers, base_dir=base), []

    return _run_experiment(args, "gap-graph", genlab.GraphExperimentConfig, run)


def cmd_certify(args) -> int:
    if args.lambda_min <= 0 or args.lambda_max <= args.lambda_min or args.steps < 2:
        raise ConfigError("lambda range must satisfy 0 < lambda-min < lambda-max with at least 2 steps")
    try:
        model = gnn.load_checkpoint(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"{args.checkpoint}: cannot read checkpoint ({exc.strerror})") from None
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise ConfigError(f"{args.checkpoint}: corrupt checkpoint ({exc})") from None
    grid = (args.lambda_min, args.lambda_max, args.steps)
    rows = []
    for layer, o, i, taps in model.filters():
        cert = certify_filter(taps, args.d, grid)
        rows.append({"layer": layer, "out": o, "in": i, **cert.to_dict()})
    if args.json:
        print(json.dumps({"d": args.d, "grid": list(grid), "filters": rows}, indent=1))
    else:
        print(f"{'layer':>5} {'out':>4} {'in':>4} {'c_h':>12} {'c_l':>12}")
        for r in rows:
            print(f"{r['layer']:>5} {r['out']:>4} {r['in']:>4} {r['c_h']:>12.6g} {r['c_l']:>12.6g}")
        print(f"max c_l = {max(r['c_l'] for r in rows):.6g}")
    return EXIT_OK


_MANIFOLDS = {"circle": circle, "sphere": sphere, "flat_torus": flat_torus}


def cmd_converge(args) -> int:
    if not args.n:
        raise ConfigError("--n needs at least one graph size")
    if any(n < 10 for n in args.n):
        raise ConfigError("graph sizes must be at least 10")
    m = _MANIFOLDS[args.manifold]()
    seeds = list(range(args.seeds))
    rows = genlab.convergence_errors(m, args.n, seeds, args.clusters)
    lo, hi = args.weyl_range
    slope, r2 = genlab.weyl_slope(m, max(args.n), (lo, hi), seed=0)
    report = {"manifold": args.manifold, "rows": rows,
              "weyl": {"n": max(args.n), "range": [lo, hi], "slope": slope, "r2": r2, "expected": 2 / m.dim}}
    if args.json:
        print(json.dumps(report, indent=1))
    else:
        print(f"{'N':>6} {'max ratio error':>16}")
        for r in rows:
            print(f"{r['n']:>6} {r['max_error']:>16.5f}")
        print(f"weyl slope over i in [{lo}, {hi}] at N={max(args.n)}: {slope:.4f} "
              f"(expected {2 / m.dim:g}, R^2 {r2:.4f})")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if len(args.widths) < 2 or min(args.widths) < 1:
        raise ConfigError("--widths needs an input width and at least one layer width, all positive")
    rng = np.random.default_rng(args.seed)
    pts = rng.normal(size=(args.nodes, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    graph = build_graph(pts, 0.8, 2)
    op = eigendecompose(graph.laplacian)
    model = gnn.init_model(args.widths, args.taps, 1, args.nonlinearity, seed=rng)
    x = rng.normal(size=(args.nodes, args.widths[0]))
    y = rng.normal(size=(args.nodes, 1)) if args.task == "node" else rng.normal(size=(1, 1))
    err = gnn.gradcheck(model, op, x, y, args.task, "huber")
    print(f"max relative gradient error = {err:.3e}")
    return EXIT_OK if err <= args.tol else EXIT_RUNTIME


def cmd_ingest(args) -> int:
    try:
        cloud = load_point_cloud(args.input, args.format)
    except OSError as exc:
        raise ConfigError(f"{args.input}: cannot read ({exc.strerror})") from None
    except PointCloudParseError as exc:
        raise ConfigError(str(exc)) from None
    out = OutputDir(args.out, args.overwrite)
    started = _now()
    doc = {"input": str(args.input), "format": args.format, "n": cloud.n, "ambient_dim": int(cloud.points.shape[1])}
    _write_manifest(out, "ingest", doc, None, started, ["points.csv"])
    write_point_cloud(cloud, out.path("points.csv"), "csv", header=True)
    _write_manifest(out, "ingest", doc, None, started, out.outputs, _now(), "ok")
    out.commit()
    print(f"ingested {cloud.n} points in R^{cloud.points.shape[1]} to {out.target / 'points.csv'}")
    return EXIT_OK


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (overrides eval.seed)")
    p.add_argument("--workers", type=int, help="worker processes (default: GENLAB_WORKERS or 1)")
    p.add_argument("--svg", action="store_true", help="also write gaps.svg")
    p.add_argument("--overwrite", action="store_true", help="replace an existing output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geomgap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, fn, text in [
        ("gap-node", cmd_gap_node, "node-level generalization gap under a mismatch channel"),
        ("sweep", cmd_sweep, "factorial sweep with per-cell summary and bound-shape fit"),
        ("gap-graph", cmd_gap_graph, "graph-classification gap under coordinate jitter"),
    ]:
        p = sub.add_parser(name, help=text)
        _experiment_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("certify", help="integral-Lipschitz certificate of every filter in a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--d", type=int, default=1, help="intrinsic dimension")
    p.add_argument("--lambda-min", type=float, default=1e-3)
    p.add_argument("--lambda-max", type=float, default=50.0)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("converge", help="graph eigenvalue ratios against the continuum, and a Weyl slope")
    p.add_argument("--manifold", choices=sorted(_MANIFOLDS), default="circle")
    p.add_argument("--n", type=int, nargs="*", default=[500, 1000, 2000])
    p.add_argument("--seeds", type=int, default=5, help="number of sample draws per size")
    p.add_argument("--clusters", type=int, default=3, help="nontrivial eigenvalue clusters to compare")
    p.add_argument("--weyl-range", type=int, nargs=2, default=[10, 60], metavar=("LO", "HI"))
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_converge)

    p = sub.add_parser("gradcheck", help="analytic vs central-difference gradients on a random graph")
    p.add_argument("--widths", type=int, nargs="+", default=[1, 8, 8])
    p.add_argument("--taps", type=int, default=5)
    p.add_argument("--task", choices=["node", "graph"], default="node")
    p.add_argument("--nonlinearity", choices=list(gnn.NONLINEARITIES), default="relu")
    p.add_argument("--nodes", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ingest", help="parse an OFF or XYZ-CSV point cloud and store it as CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=["off", "csv"])
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
