"""Generalization-gap experiments: risk estimators, sweeps, bound fits, graph-level and OOD harnesses.

Every random draw in a trial comes from ``SeedSequence(entropy=master,
spawn_key=(trial, stream, ...))`` so trials are independent of execution
order.  Within a trial all cells share training clouds and evaluation
clouds (common random numbers), which keeps cell-to-cell comparisons paired.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from functools import lru_cache
from itertools import product
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.optimize import nnls
from scipy.stats import spearmanr

from . import gnn
from .geograph import (
    build_graph,
    default_epsilon,
    gaussian_jitter,
    limit_scale,
    load_point_cloud,
    perturb_edges,
    perturb_features,
    subsample,
)
from .manifold import (
    DeformationMap,
    ManifoldModel,
    TeacherSpec,
    circle,
    deform_to_gamma,
    flat_torus,
    lipschitz_target,
    sample_points,
    sphere,
    synth_bandlimited,
    eigenvalues as manifold_eigenvalues,
)
from .spectral import eigendecompose, propagator, spectral_distance, weyl_check

__all__ = [
    "CSV_COLUMNS",
    "CSV_SCHEMA_VERSION",
    "ManifoldSpec",
    "ExperimentConfig",
    "GraphExperimentConfig",
    "GapRecord",
    "BoundFit",
    "BoundFitError",
    "DisconnectedGraphWarning",
    "ClassCollisionWarning",
    "Cell",
    "empirical_risk",
    "statistical_risk_mc",
    "measure_gap",
    "sweep",
    "cell_summary",
    "bound_shape_fit",
    "format_bound_fit",
    "graph_level_gap",
    "ood_gap",
    "eigen_perturbation_scaling",
    "convergence_errors",
    "config_fingerprint",
    "resolve_workers",
    "write_records_csv",
    "read_records_csv",
    "plot_gaps",
    "spearman",
]

CSV_SCHEMA_VERSION = 1
CSV_COLUMNS = (
    "config_fingerprint", "n", "gamma", "c_l", "depth", "width", "seed",
    "empirical_risk", "statistical_risk", "stderr", "gap",
)

# stream ids inside a trial's seed tree
_TRAIN_POINTS, _INIT, _EVAL, _PERTURB, _TEST_GRAPHS = 0, 1, 2, 3, 4


class DisconnectedGraphWarning(RuntimeWarning):
    pass


class ClassCollisionWarning(UserWarning):
    pass


class BoundFitError(ValueError):
    def __init__(self, message: str, rank: int, condition: float):
        super().__init__(f"{message} (rank {rank}, condition number {condition:.3g})")
        self.rank = rank
        self.condition = condition


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ManifoldSpec(_Strict):
    kind: Literal["circle", "sphere", "flat_torus"]
    radius: float = Field(1.0, gt=0)
    sides: tuple[float, float] = (2 * math.pi, 2 * math.pi)
    tilt: float = Field(0.0, ge=0, lt=1)

    def build(self) -> ManifoldModel:
        if self.kind == "circle":
            return circle(self.radius, self.tilt)
        if self.kind == "sphere":
            return sphere(self.radius, self.tilt)
        return flat_torus(*self.sides, tilt=self.tilt)


class SignalSpec(_Strict):
    coefficients: dict[int, float]
    cutoff: float | None = None

    @field_validator("coefficients")
    @classmethod
    def _nonempty(cls, v):
        if not v or min(v) < 1:
            raise ValueError("need at least one coefficient with eigen index >= 1")
        return v


class TargetSpec(_Strict):
    taps: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0, 1.0)
    operator_scale: float | Literal["limit"] = "limit"
    c_g: float = Field(50.0, gt=0)
    threshold: float | None = None


class MismatchSpec(_Strict):
    """``gammas`` are certified deformation sizes, perturbed fractions, or jitter levels."""

    kind: Literal["deformation", "feature", "edge", "jitter", "cross_manifold"] = "deformation"
    gammas: list[float] = [0.0]
    field: Literal["rotation"] | list[tuple[int, float]] = [(2, 1.0), (4, 0.5)]
    targets: list[ManifoldSpec] = []

    @field_validator("gammas")
    @classmethod
    def _gammas(cls, v):
        if not v or any(g < 0 for g in v):
            raise ValueError("gammas must be a nonempty list of nonnegative values")
        return v

    @model_validator(mode="after")
    def _check(self):
        if self.kind in ("feature", "edge") and any(g > 1 for g in self.gammas):
            raise ValueError("feature and edge fractions must lie in [0, 1]")
        if self.kind == "cross_manifold" and not self.targets:
            raise ValueError("cross_manifold mismatch needs at least one target manifold")
        return self


class GraphSpec(_Strict):
    n: list[int]
    epsilon: float | None = Field(None, gt=0)
    c: float = Field(1.0, gt=0)
    scale: float = Field(1.0, gt=0)

    @field_validator("n")
    @classmethod
    def _sizes(cls, v):
        if not v or any(n < 2 for n in v):
            raise ValueError("n must be a nonempty list of sizes >= 2")
        return v


class ModelSpec(_Strict):
    depth: list[int] = [2]
    width: list[int] = [4]
    n_taps: int = Field(5, ge=1)
    nonlinearity: Literal["relu", "abs", "identity"] = "relu"
    c_l: list[float | None] = [None]
    penalty_weight: float = Field(10.0, ge=0)
    grid: tuple[float, float, int] = (1e-2, 20.0, 200)

    @model_validator(mode="after")
    def _check(self):
        if not self.depth or min(self.depth) < 1:
            raise ValueError("depth must be a nonempty list of values >= 1")
        if not self.width or min(self.width) < 1:
            raise ValueError("width must be a nonempty list of values >= 1")
        if not self.c_l or any(c is not None and c <= 0 for c in self.c_l):
            raise ValueError("c_l entries must be positive or null")
        return self


class TrainSpec(_Strict):
    lr: float = Field(0.01, ge=0)
    epochs: int = Field(400, ge=1)
    loss: Literal["l1", "huber", "cross_entropy"] = "huber"
    huber_delta: float = Field(0.1, gt=0)

    def build(self, seed: int = 0) -> gnn.TrainConfig:
        return gnn.TrainConfig(lr=self.lr, epochs=self.epochs, loss=self.loss,
                               huber_delta=self.huber_delta, seed=seed)


class EvalSpec(_Strict):
    n_eval: int = Field(..., ge=500)
    replicates: int = Field(8, ge=8)
    delta: float = Field(0.1, gt=0, lt=1)
    trials: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class ExperimentConfig(_Strict):
    """Node-level teacher-student experiment; list-valued knobs span a factorial sweep."""

    manifold: ManifoldSpec
    signal: SignalSpec
    target: TargetSpec = TargetSpec()
    mismatch: MismatchSpec = MismatchSpec()
    graph: GraphSpec
    model: ModelSpec = ModelSpec()
    train: TrainSpec = TrainSpec()
    eval: EvalSpec

    @model_validator(mode="after")
    def _check(self):
        if self.eval.n_eval < 4 * max(self.graph.n):
            raise ValueError(f"eval.n_eval={self.eval.n_eval} must be at least 4 * max(graph.n)")
        return self


class ClassSpec(_Strict):
    name: str | None = None
    manifold: ManifoldSpec | None = None
    path: str | None = None
    format: Literal["off", "csv"] | None = None
    dim: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.manifold is None) == (self.path is None):
            raise ValueError("a class needs exactly one of 'manifold' or 'path'")
        if self.path is not None and self.dim is None:
            raise ValueError("file-backed classes must declare their intrinsic 'dim'")
        return self

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        return self.manifold.kind if self.manifold is not None else Path(self.path).stem


class GraphModelSpec(_Strict):
    depth: int = Field(2, ge=1)
    width: int = Field(8, ge=1)
    n_taps: int = Field(5, ge=1)
    nonlinearity: Literal["relu", "abs", "identity"] = "relu"
    c_l: float | None = Field(None, gt=0)
    penalty_weight: float = Field(10.0, ge=0)
    grid: tuple[float, float, int] = (1e-2, 20.0, 200)


class GraphEvalSpec(_Strict):
    test_graphs_per_class: int = Field(20, ge=1)
    delta: float = Field(0.1, gt=0, lt=1)
    trials: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class GraphExperimentConfig(_Strict):
    """Graph classification across manifold (or point-cloud file) classes under coordinate jitter."""

    classes: list[ClassSpec]
    n_points: int = Field(40, ge=4)
    graphs_per_class: int = Field(20, ge=1)
    jitter: list[float] = [0.0]
    epsilon: float | None = Field(None, gt=0)
    model: GraphModelSpec = GraphModelSpec()
    train: TrainSpec = TrainSpec(lr=0.01, epochs=150)
    eval: GraphEvalSpec = GraphEvalSpec()

    @field_validator("classes")
    @classmethod
    def _classes(cls, v):
        if not v:
            raise ValueError("need at least one class")
        return v

    @field_validator("jitter")
    @classmethod
    def _jitter(cls, v):
        if not v or any(g < 0 for g in v):
            raise ValueError("jitter must be a nonempty list of nonnegative levels")
        return v


def config_fingerprint(config: BaseModel) -> str:
    """First 16 hex digits of the SHA-256 of the canonical JSON form."""
    text = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass
class GapRecord:
    config_fingerprint: str
    n: int
    gamma: float
    c_l: float
    depth: int
    width: int
    seed: int
    empirical_risk: float
    statistical_risk: float
    stderr: float
    gap: float
    trial: int = 0
    c_l_certified: float = math.nan
    gamma_certified: float = math.nan
    mode: str = "node"
    group: str = ""
    train_accuracy: float = math.nan
    test_accuracy: float = math.nan
    proxy: float = math.nan
    disconnected: int = 0
    status: str = "ok"
    lipschitz_loss: int = 1
    # reserved for a max-over-checkpoints surrogate of the sup over filters
    gap_max_checkpoint: float = math.nan

    def __post_init__(self):
        if self.status == "ok":
            if not math.isfinite(self.empirical_risk) or not math.isfinite(self.statistical_risk):
                raise ValueError("risks must be finite for a successful record")
            if self.gap != abs(self.statistical_risk - self.empirical_risk):
                raise ValueError("gap must equal |statistical_risk - empirical_risk|")
            if not (self.stderr >= 0 or math.isnan(self.stderr)):
                raise ValueError("stderr must be nonnegative")

    @property
    def cell(self) -> tuple:
        return (self.mode, self.group, self.n, self.gamma, self.c_l, self.depth, self.width)

    @property
    def sort_key(self) -> tuple:
        return (*self.cell, self.trial)


def _record(fp, cell, trial, seed, emp, stat, stderr, **extra) -> GapRecord:
    return GapRecord(fp, cell.n, cell.gamma, cell.c_l_key, cell.depth, cell.width, seed,
                     float(emp), float(stat), float(stderr), abs(float(stat) - float(emp)),
                     trial=trial, **extra)


def _failed(fp, cell, trial, seed, exc: Exception) -> GapRecord:
    nan = math.nan
    return GapRecord(fp, cell.n, cell.gamma, cell.c_l_key, cell.depth, cell.width, seed,
                     nan, nan, nan, nan, trial=trial, status=f"failed: {type(exc).__name__}: {exc}")


# ---------------------------------------------------------------------------
# Risks
# ---------------------------------------------------------------------------


def _as_op(graph_or_op):
    if hasattr(graph_or_op, "laplacian"):
        return propagator(graph_or_op.laplacian)
    return graph_or_op


def empirical_risk(model: gnn.GnnModel, graph, x, y, loss: str = "huber", delta: float = 0.1,
                   task: str = "node") -> float:
    """Mean per-node loss of the model on a graph (or a prepared propagator)."""
    op = _as_op(graph)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[0] != op.n or (task == "node" and y.shape[0] != op.n):
        raise ValueError("signal and target lengths must match the graph")
    out, _ = gnn.forward(model, op, x, task)
    return gnn.loss(loss, out, y, delta)[0]


def _seed_list(seed, replicates: int) -> list:
    if isinstance(seed, (list, tuple)):
        return list(seed)
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(replicates)


def _epsilon(n: int, d: int, epsilon: float | None, delta: float, c: float, scale: float) -> float:
    return epsilon if epsilon is not None else default_epsilon(n, d, delta, c, scale)


def _eval_inputs(m: ManifoldModel, tau, f, g, n_eval, seed, d, eps, channel):
    """Propagator, input and target on one fresh (mismatched) evaluation cloud."""
    rng = np.random.default_rng(seed)
    p = sample_points(m, n_eval, rng)
    q = p if tau is None else tau(p)
    x = f(q)[:, None]
    y = g(q)[:, None]
    graph_pts = q
    kind, level = channel if channel else (None, 0.0)
    if kind == "jitter" and level > 0:
        graph_pts = gaussian_jitter(q, level, rng).points
    graph = build_graph(graph_pts, eps, d)
    if kind == "edge" and level > 0:
        graph = perturb_edges(graph, level, rng)
    if kind == "feature" and level > 0:
        x = perturb_features(x, level, rng)
    return propagator(graph.laplacian), x, y, not graph.connected


def _score_node(model, inputs, loss, huber_delta) -> float:
    op, x, y, _ = inputs
    out, _ = gnn.forward(model, op, x)
    return gnn.loss(loss, out, y, huber_delta)[0]


def statistical_risk_mc(model: gnn.GnnModel, manifold: ManifoldModel, tau: DeformationMap | None, f, g,
                        loss: str = "huber", n_eval: int = 2000, seed=0, *, replicates: int = 8,
                        epsilon: float | None = None, delta: float = 0.1, c: float = 1.0, scale: float = 1.0,
                        huber_delta: float = 0.1, channel: tuple[str, float] | None = None):
    """Monte-Carlo risk of the trained taps on fresh graphs over the mismatched manifold.

    Each replicate samples ``n_eval`` points, moves them by ``tau``, builds the
    evaluation graph on the moved points and scores ``f(tau p)`` against
    ``g(tau p)``.  ``seed`` may be a list of per-replicate seeds, in which case
    its length sets the replicate count.  Returns ``(mean, stderr)``; the
    standard error is NaN for a single replicate.
    """
    if n_eval < 500:
        raise ValueError("n_eval must be at least 500")
    seeds = _seed_list(seed, replicates)
    if not seeds:
        raise ValueError("need at least one replicate")
    d = manifold.dim
    eps = _epsilon(n_eval, d, epsilon, delta, c, scale)
    vals, cut = [], 0
    for s in seeds:
        inputs = _eval_inputs(manifold, tau, f, g, n_eval, s, d, eps, channel)
        vals.append(_score_node(model, inputs, loss, huber_delta))
        cut += inputs[3]
    if cut:
        warnings.warn(f"{cut} of {len(seeds)} evaluation graphs were disconnected", DisconnectedGraphWarning)
    vals = np.array(vals)
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("non-finite replicate risk; variance is unbounded")
    stderr = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
    return float(vals.mean()), stderr


# ---------------------------------------------------------------------------
# Node-level experiments
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    n: int
    gamma: float
    c_l: float | None
    depth: int
    width: int

    @property
    def c_l_key(self) -> float:
        return math.inf if self.c_l is None else float(self.c_l)

    @property
    def model_key(self) -> tuple:
        return (self.n, self.c_l_key, self.depth, self.width)


def cells(config: ExperimentConfig) -> list[Cell]:
    mm = config.model
    return [Cell(n, g, c, dp, w) for n, g, c, dp, w in
            product(config.graph.n, config.mismatch.gammas, mm.c_l, mm.depth, mm.width)]


def _seedseq(master: int, *key: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=master, spawn_key=key)


def trial_seed(master: int, trial: int) -> int:
    """Stable 63-bit integer naming a trial's seed tree in result tables."""
    return int(_seedseq(master, trial).generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass
class _Problem:
    m: ManifoldModel
    f: object
    g: object
    d: int


def _problem(config: ExperimentConfig, manifold: ManifoldSpec | None = None) -> _Problem:
    m = (manifold or config.manifold).build()
    f = synth_bandlimited(m, config.signal.coefficients, config.signal.cutoff)
    t = config.target
    scale = limit_scale(m.dim) if t.operator_scale == "limit" else float(t.operator_scale)
    target = lipschitz_target(m, t.c_g, f, TeacherSpec(tuple(t.taps), scale, t.threshold))
    return _Problem(m, f, target, m.dim)


@lru_cache(maxsize=64)
def _deformation_cached(manifold: ManifoldSpec, field_key, gamma: float) -> DeformationMap:
    return deform_to_gamma(manifold.build(), field_key, gamma)


def _deformation(config: ExperimentConfig, gamma: float) -> DeformationMap | None:
    if config.mismatch.kind != "deformation":
        return None
    fld = config.mismatch.field
    key = fld if fld == "rotation" else tuple((int(i), float(w)) for i, w in fld)
    return _deformation_cached(config.manifold, key, float(gamma))


def _budget(model: ModelSpec, c_l: float | None, d: int) -> gnn.LipschitzBudget | None:
    if c_l is None:
        return None
    return gnn.LipschitzBudget(float(c_l), d, tuple(model.grid), model.penalty_weight)


def _train_one(config: ExperimentConfig, prob: _Problem, key: tuple, trial: int):
    n, c_l, depth, width = key
    master = config.eval.seed
    pts = sample_points(prob.m, n, np.random.default_rng(_seedseq(master, trial, _TRAIN_POINTS)))
    eps = _epsilon(n, prob.d, config.graph.epsilon, config.eval.delta, config.graph.c, config.graph.scale)
    graph = build_graph(pts, eps, prob.d)
    op = eigendecompose(graph.laplacian)
    x = prob.f(pts)[:, None]
    y = prob.g(pts)[:, None]
    budget = _budget(config.model, None if math.isinf(c_l) else c_l, prob.d)
    model = gnn.init_model([1] + [width] * depth, config.model.n_taps, 1, config.model.nonlinearity,
                           seed=_seedseq(master, trial, _INIT), budget=budget)
    model, _ = gnn.train(model, gnn.Sample(op, x, y), config.train.build())
    emp = empirical_risk(model, op, x, y, config.train.loss, config.train.huber_delta)
    cert = model.certificate(prob.d)["max_c_l"]
    return model, emp, cert


def _run_trial(config: ExperimentConfig, selected: Sequence[Cell], trial: int) -> list[GapRecord]:
    """All requested cells for one trial; models are trained once and shared across gammas."""
    fp = config_fingerprint(config)
    master = config.eval.seed
    seed = trial_seed(master, trial)
    prob = _problem(config)
    trained, errors = {}, {}
    for key in sorted({c.model_key for c in selected}):
        try:
            trained[key] = _train_one(config, prob, key, trial)
        except Exception as exc:  # recorded, the sweep carries on
            errors[key] = exc
    records = []
    ev = config.eval
    eps = _epsilon(ev.n_eval, prob.d, config.graph.epsilon, ev.delta, config.graph.c, config.graph.scale)
    kind = config.mismatch.kind
    for gamma in sorted({c.gamma for c in selected}):
        here = [c for c in selected if c.gamma == gamma]
        try:
            tau = _deformation(config, gamma)
        except Exception as exc:
            records += [_failed(fp, c, trial, seed, exc) for c in here]
            continue
        channel = None if kind == "deformation" else (kind, gamma)
        vals = {c: [] for c in here if c.model_key in trained}
        cut = 0
        for r in range(ev.replicates if vals else 0):
            inputs = _eval_inputs(prob.m, tau, prob.f, prob.g, ev.n_eval, _seedseq(master, trial, _EVAL, r),
                                  prob.d, eps, channel)
            cut += inputs[3]
            for c in vals:
                vals[c].append(_score_node(trained[c.model_key][0], inputs, config.train.loss,
                                           config.train.huber_delta))
        for c in here:
            if c.model_key in errors:
                records.append(_failed(fp, c, trial, seed, errors[c.model_key]))
                continue
            v = np.array(vals[c])
            if not np.all(np.isfinite(v)):
                records.append(_failed(fp, c, trial, seed, FloatingPointError("non-finite replicate risk")))
                continue
            _, emp, cert = trained[c.model_key]
            records.append(_record(fp, c, trial, seed, emp, v.mean(), v.std(ddof=1) / math.sqrt(len(v)),
                                   c_l_certified=cert,
                                   gamma_certified=tau.gamma if tau is not None else gamma,
                                   disconnected=cut,
                                   lipschitz_loss=int(config.train.loss in gnn.LIPSCHITZ_LOSSES)))
    return records


def measure_gap(config: ExperimentConfig, trial: int = 0, cell: Cell | None = None) -> GapRecord:
    """Train on a fresh graph and record the gap for one cell (the config's only cell by default)."""
    if cell is None:
        all_cells = cells(config)
        if len(all_cells) != 1:
            raise ValueError("config spans several cells; pass one explicitly")
        cell = all_cells[0]
    rec = _run_trial(config, [cell], trial)[0]
    if rec.status != "ok":
        raise RuntimeError(rec.status)
    return rec


def resolve_workers(workers: int | None = None) -> int:
    """Explicit count, else ``GENLAB_WORKERS``, else 1."""
    if workers is None:
        env = os.environ.get("GENLAB_WORKERS")
        workers = int(env) if env else 1
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return workers


def _map_trials(fn, config, trials: Sequence[int], workers: int | None, *args) -> list[GapRecord]:
    workers = min(resolve_workers(workers), max(len(trials), 1))
    if workers == 1:
        chunks = [fn(config, *args, t) for t in trials]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(fn, *zip(*[(config, *args, t) for t in trials])))
    out = [r for chunk in chunks for r in chunk]
    out.sort(key=lambda r: r.sort_key)
    return out


def sweep(config: ExperimentConfig, trials: int | Sequence[int] | None = None,
          workers: int | None = None) -> list[GapRecord]:
    """Full factorial over N, gamma, C_L, depth and width times trials, canonically sorted."""
    if config.mismatch.kind == "cross_manifold":
        raise ValueError("cross_manifold configs run through ood_gap")
    if trials is None:
        trials = config.eval.trials
    trial_ids = list(range(trials)) if isinstance(trials, int) else list(trials)
    if not trial_ids:
        raise ValueError("need at least one trial")
    return _map_trials(_run_trial, config, trial_ids, workers, cells(config))


def cell_summary(records: Sequence[GapRecord]) -> list[dict]:
    """Per-cell mean and sample standard deviation of the gap over successful trials."""
    groups: dict[tuple, list[GapRecord]] = {}
    for r in records:
        groups.setdefault(r.cell, []).append(r)
    rows = []
    for key in sorted(groups):
        ok = [r.gap for r in groups[key] if r.status == "ok"]
        mode, group, n, gamma, c_l, depth, width = key
        rows.append({
            "mode": mode, "group": group, "n": n, "gamma": gamma, "c_l": c_l, "depth": depth, "width": width,
            "trials": len(ok), "failed": len(groups[key]) - len(ok),
            "mean_gap": float(np.mean(ok)) if ok else math.nan,
            "std_gap": float(np.std(ok, ddof=1)) if len(ok) > 1 else math.nan,
        })
    return rows


# ---------------------------------------------------------------------------
# Bound-shape fit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoundFit:
    coefficients: tuple[float, float, float, float]
    r2: float
    d: int
    delta: float
    condition: float
    cells: int
    c: float = 1.0
    scale: float = 1.0

    def design(self, n, gamma) -> np.ndarray:
        return bound_design(np.atleast_1d(n), np.atleast_1d(gamma), self.d, self.delta, self.c, self.scale)

    def predict(self, n, gamma) -> np.ndarray:
        return self.design(n, gamma) @ np.array(self.coefficients)


TERM_NAMES = ("eps/sqrt(N)", "sqrt(log(1/delta))/N", "(log N/N)^(1/d)", "gamma")


def bound_design(n, gamma, d: int, delta: float = 0.1, c: float = 1.0, scale: float = 1.0) -> np.ndarray:
    n = np.asarray(n, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    eps = np.array([default_epsilon(int(v), d, delta, c, scale) for v in n])
    return np.column_stack([
        eps / np.sqrt(n),
        np.full_like(n, math.sqrt(math.log(1 / delta))) / n,
        (np.log(n) / n) ** (1.0 / d),
        gamma,
    ])


def bound_shape_fit(records, d: int, delta: float = 0.1, c: float = 1.0, scale: float = 1.0) -> BoundFit:
    """Nonnegative least squares of per-(N, gamma) mean gaps on the four bound terms.

    ``records`` may be :class:`GapRecord` objects or ``(n, gamma, gap)``
    triples.  Raises :class:`BoundFitError` for fewer than 8 cells or a
    rank-deficient design.
    """
    groups: dict[tuple, list[float]] = {}
    for r in records:
        if isinstance(r, GapRecord):
            if r.status != "ok":
                continue
            key, gap = (r.n, r.gamma), r.gap
        else:
            n, g, gap = r
            key = (n, g)
        groups.setdefault(key, []).append(float(gap))
    keys = sorted(groups)
    A = bound_design([k[0] for k in keys], [k[1] for k in keys], d, delta, c, scale)
    y = np.array([np.mean(groups[k]) for k in keys])
    colnorm = np.linalg.norm(A, axis=0)
    scaled = A / np.where(colnorm > 0, colnorm, 1.0)
    sv = np.linalg.svd(scaled, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else math.inf
    rank = int(np.linalg.matrix_rank(scaled))
    if len(keys) < 8:
        raise BoundFitError(f"need at least 8 distinct (N, gamma) cells, got {len(keys)}", rank, cond)
    if rank < A.shape[1]:
        raise BoundFitError("design matrix is rank deficient", rank, cond)
    coef_scaled, _ = nnls(scaled, y)
    coef = coef_scaled / colnorm
    resid = y - A @ coef
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else (1.0 if np.allclose(resid, 0) else 0.0)
    return BoundFit(tuple(float(v) for v in coef), r2, d, delta, cond, len(keys), c, scale)


def format_bound_fit(fit: BoundFit) -> str:
    lines = [
        "bound-shape fit (nonnegative least squares)",
        f"d = {fit.d}",
        f"delta = {fit.delta}",
        f"cells = {fit.cells}",
    ]
    for name, val in zip(TERM_NAMES, fit.coefficients):
        lines.append(f"coef[{name}] = {val:.6g}")
    lines += [f"r2 = {fit.r2:.6f}", f"condition = {fit.condition:.6g}"]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Graph-level experiments
# ---------------------------------------------------------------------------


def _class_sources(config: GraphExperimentConfig, base_dir: Path | None):
    sources = []
    for spec in config.classes:
        if spec.manifold is not None:
            m = spec.manifold.build()
            sources.append(("manifold", m, m.dim, m.ambient_dim))
        else:
            path = Path(spec.path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            cloud = load_point_cloud(path, spec.format)
            if cloud.n < config.n_points:
                raise ValueError(f"{path}: {cloud.n} points, fewer than n_points={config.n_points}")
            sources.append(("cloud", cloud, spec.dim, cloud.points.shape[1]))
    return sources


def _draw_cloud(source, n: int, rng, ambient: int) -> np.ndarray:
    kind, obj, _, _ = source
    pts = sample_points(obj, n, rng) if kind == "manifold" else subsample(obj, n, rng).points
    if pts.shape[1] < ambient:
        pts = np.hstack([pts, np.zeros((n, ambient - pts.shape[1]))])
    return pts


def _graph_sample(points: np.ndarray, d: int, epsilon: float | None, delta: float, y) -> gnn.Sample:
    eps = _epsilon(len(points), d, epsilon, delta, 1.0, 1.0)
    graph = build_graph(points, eps, d)
    return gnn.Sample(eigendecompose(graph.laplacian), points, np.atleast_2d(y), "graph")


def _graph_targets(k: int):
    """Scalar +-1 labels with huber for two classes, one-hot rows with cross-entropy otherwise."""
    if k <= 2:
        return [np.array([[1.0]]), np.array([[-1.0]])][:k], "huber"
    return [np.eye(k)[[i]] for i in range(k)], "cross_entropy"


def _correct(out: np.ndarray, y: np.ndarray) -> bool:
    if y.shape[1] == 1:
        return bool(np.sign(out[0, 0]) == np.sign(y[0, 0]))
    return int(np.argmax(out[0])) == int(np.argmax(y[0]))


def _score(model, samples, loss_kind, huber_delta):
    losses, hits = [], []
    for s in samples:
        out, _ = gnn.forward(model, s.op, s.x, "graph")
        losses.append(gnn.loss(loss_kind, out, s.y, huber_delta)[0])
        hits.append(_correct(out, s.y))
    return float(np.mean(losses)), float(np.std(losses, ddof=1) / math.sqrt(len(losses))) if len(losses) > 1 else math.nan, float(np.mean(hits))


def _graph_trial(config: GraphExperimentConfig, base_dir, trial: int) -> list[GapRecord]:
    fp = config_fingerprint(config)
    master = config.eval.seed
    seed = trial_seed(master, trial)
    sources = _class_sources(config, base_dir)
    ambient = max(s[3] for s in sources)
    targets, loss_kind = _graph_targets(len(sources))
    ms = config.model
    d_max = max(s[2] for s in sources)
    budget = None if ms.c_l is None else gnn.LipschitzBudget(ms.c_l, d_max, tuple(ms.grid), ms.penalty_weight)
    cfg = gnn.TrainConfig(lr=config.train.lr, epochs=config.train.epochs, loss=loss_kind,
                          huber_delta=config.train.huber_delta)

    train_rng = np.random.default_rng(_seedseq(master, trial, _TRAIN_POINTS))
    train_sets = []
    for src, y in zip(sources, targets):
        train_sets.append([_graph_sample(_draw_cloud(src, config.n_points, train_rng, ambient), src[2],
                                         config.epsilon, config.eval.delta, y)
                           for _ in range(config.graphs_per_class)])
    model = gnn.init_model([ambient] + [ms.width] * ms.depth, ms.n_taps, targets[0].shape[1], ms.nonlinearity,
                           seed=_seedseq(master, trial, _INIT), budget=budget)
    model, _ = gnn.train(model, [s for group in train_sets for s in group], cfg)
    cert = model.certificate(d_max)["max_c_l"]
    train_scores = [_score(model, group, loss_kind, cfg.huber_delta) for group in train_sets]

    records = []
    for gamma in sorted(config.jitter):
        rng = np.random.default_rng(_seedseq(master, trial, _TEST_GRAPHS))
        jrng = np.random.default_rng(_seedseq(master, trial, _PERTURB))
        test_scores = []
        for src, y in zip(sources, targets):
            group = []
            for _ in range(config.eval.test_graphs_per_class):
                pts = _draw_cloud(src, config.n_points, rng, ambient)
                if gamma > 0:
                    pts = gaussian_jitter(pts, gamma, jrng).points
                group.append(_graph_sample(pts, src[2], config.epsilon, config.eval.delta, y))
            test_scores.append(_score(model, group, loss_kind, cfg.huber_delta))
        cell = Cell(config.n_points, gamma, ms.c_l, ms.depth, ms.width)
        common = dict(c_l_certified=cert, gamma_certified=gamma, mode="graph",
                      lipschitz_loss=int(loss_kind in gnn.LIPSCHITZ_LOSSES))
        for spec, (emp, _, tr_acc), (stat, se, te_acc) in zip(config.classes, train_scores, test_scores):
            records.append(_record(fp, cell, trial, seed, emp, stat, se, group=f"class:{spec.label}",
                                   train_accuracy=tr_acc, test_accuracy=te_acc, **common))
        emp = float(sum(s[0] for s in train_scores))
        stat = float(sum(s[0] for s in test_scores))
        ses = [s[1] for s in test_scores]
        se = math.sqrt(sum(v * v for v in ses)) if all(math.isfinite(v) for v in ses) else math.nan
        records.append(_record(fp, cell, trial, seed, emp, stat, se, group="aggregate",
                               train_accuracy=float(np.mean([s[2] for s in train_scores])),
                               test_accuracy=float(np.mean([s[2] for s in test_scores])), **common))
    return records


def graph_level_gap(config: GraphExperimentConfig, trials: int | Sequence[int] | None = None,
                    workers: int | None = None, base_dir: str | Path | None = None) -> list[GapRecord]:
    """Per-class and aggregate (class-summed) risks of a pooled graph classifier under coordinate jitter.

    File-backed class paths are resolved against ``base_dir`` when relative.
    """
    specs = [s.model_dump() for s in config.classes]
    if 0.0 in config.jitter and len(specs) != len({json.dumps(s, sort_keys=True, default=str) for s in
                                                   [{k: v for k, v in s.items() if k != "name"} for s in specs]}):
        warnings.warn("two classes share the same generative model; labels cannot be separated",
                      ClassCollisionWarning)
    if trials is None:
        trials = config.eval.trials
    trial_ids = list(range(trials)) if isinstance(trials, int) else list(trials)
    base = None if base_dir is None else Path(base_dir)
    _class_sources(config, base)  # fail fast on unreadable class files
    return _map_trials(_graph_trial, config, trial_ids, workers, base)


# ---------------------------------------------------------------------------
# Out-of-distribution extension
# ---------------------------------------------------------------------------


def _ood_trial(config: ExperimentConfig, trial: int) -> list[GapRecord]:
    fp = config_fingerprint(config)
    master = config.eval.seed
    seed = trial_seed(master, trial)
    src = _problem(config)
    ev = config.eval
    gspec = config.graph
    records = []
    for key in sorted({c.model_key for c in cells(config)}):
        model, emp, cert = _train_one(config, src, key, trial)
        n = key[0]
        train_rng = _seedseq(master, trial, _TRAIN_POINTS)
        base_pts = sample_points(src.m, n, np.random.default_rng(train_rng))
        eps_n = _epsilon(n, src.d, gspec.epsilon, ev.delta, gspec.c, gspec.scale)
        base_vals = eigendecompose(build_graph(base_pts, eps_n, src.d).laplacian).eigenvalues
        for j, target in enumerate(config.mismatch.targets):
            tgt = _problem(config, target)
            if tgt.d != src.d:
                raise ValueError("source and target manifolds must share their dimension")
            tgt_pts = sample_points(tgt.m, n, np.random.default_rng(train_rng))
            tgt_vals = eigendecompose(build_graph(tgt_pts, eps_n, tgt.d).laplacian).eigenvalues
            proxy = spectral_distance(base_vals, tgt_vals, min(20, n))
            eps = _epsilon(ev.n_eval, tgt.d, gspec.epsilon, ev.delta, gspec.c, gspec.scale)
            vals = [_score_node(model, _eval_inputs(tgt.m, None, tgt.f, tgt.g, ev.n_eval,
                                                    _seedseq(master, trial, _EVAL, r), tgt.d, eps, None),
                                config.train.loss, config.train.huber_delta) for r in range(ev.replicates)]
            v = np.array(vals)
            cell = Cell(n, math.nan, None if math.isinf(key[1]) else key[1], key[2], key[3])
            records.append(_record(fp, cell, trial, seed, emp, v.mean(), v.std(ddof=1) / math.sqrt(len(v)),
                                   c_l_certified=cert, mode="ood", group=f"target:{j}", proxy=proxy,
                                   lipschitz_loss=int(config.train.loss in gnn.LIPSCHITZ_LOSSES)))
    return records


def ood_gap(config: ExperimentConfig, trials: int | Sequence[int] | None = None,
            workers: int | None = None) -> list[tuple[GapRecord, float]]:
    """Train on the source manifold, evaluate on every target; each record carries its spectral proxy.

    The proxy is the largest gap between the first 20 eigenvalues of
    training-size graphs on source and target built from the same draws.
    """
    if config.mismatch.kind != "cross_manifold":
        raise ValueError("ood_gap needs a cross_manifold mismatch")
    if trials is None:
        trials = config.eval.trials
    trial_ids = list(range(trials)) if isinstance(trials, int) else list(trials)
    recs = _map_trials(_ood_trial, config, trial_ids, workers)
    return [(r, r.proxy) for r in recs]


# ---------------------------------------------------------------------------
# Spectral diagnostics used by the CLI and the acceptance suite
# ---------------------------------------------------------------------------


def _clusters(m: ManifoldModel, count: int) -> list[list[int]]:
    """0-based index groups of equal continuum eigenvalues, excluding the constant mode."""
    vals = manifold_eigenvalues(m, count)
    groups: list[list[int]] = []
    for i in range(1, count):
        if groups and math.isclose(vals[i], vals[groups[-1][0]], rel_tol=1e-9):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def convergence_errors(m: ManifoldModel, ns: Sequence[int], seeds: Sequence[int], clusters: int = 3,
                       delta: float = 0.1) -> list[dict]:
    """Relative error of graph eigenvalue-cluster ratios against the continuum ratios.

    Graph eigenvalues are grouped by the continuum multiplicity pattern; the
    mean of each group is divided by the first nontrivial group's mean and
    compared with the continuum ratio.  Errors are averaged over seeds and
    the worst cluster is reported per N.
    """
    if not ns:
        raise ValueError("need at least one graph size")
    if not seeds:
        raise ValueError("need at least one seed")
    probe = 1 + clusters
    groups = _clusters(m, 64)
    while len(groups) < probe:
        probe_count = groups[-1][-1] + 64
        groups = _clusters(m, probe_count)
    groups = groups[:probe]
    count = groups[-1][-1] + 1
    exact = manifold_eigenvalues(m, count)
    want = np.array([exact[g[0]] for g in groups])
    want = want[1:] / want[0]
    rows = []
    for n in ns:
        errs = []
        for s in seeds:
            pts = sample_points(m, n, np.random.default_rng(s))
            g = build_graph(pts, default_epsilon(n, m.dim, delta), m.dim)
            lam = eigendecompose(g.laplacian, count).eigenvalues
            means = np.array([lam[gr].mean() for gr in groups])
            errs.append(np.abs(means[1:] / means[0] - want) / want)
        errs = np.mean(errs, axis=0)
        rows.append({"n": int(n), "max_error": float(errs.max()), "errors": [float(e) for e in errs]})
    return rows


def weyl_slope(m: ManifoldModel, n: int, i_range: tuple[int, int], seed=0, delta: float = 0.1):
    pts = sample_points(m, n, np.random.default_rng(seed))
    g = build_graph(pts, default_epsilon(n, m.dim, delta), m.dim)
    lam = eigendecompose(g.laplacian, i_range[1] + 1).eigenvalues
    return weyl_check(lam, m.dim, i_range)


def eigen_perturbation_scaling(m: ManifoldModel, field, gammas: Sequence[float], n: int = 1000,
                               count: int = 20, seed=0, delta: float = 0.1):
    """Median ``|lam_i - lam'_i|`` over the first ``count`` eigenvalues for each certified gamma.

    Original and deformed graphs use the same draw and the same epsilon.
    Returns ``(certified gammas, medians, linear-fit R^2)``.
    """
    pts = sample_points(m, n, np.random.default_rng(seed))
    eps = default_epsilon(n, m.dim, delta)
    base = eigendecompose(build_graph(pts, eps, m.dim).laplacian, count).eigenvalues
    certified, medians = [], []
    for gamma in gammas:
        tau = deform_to_gamma(m, field, gamma)
        moved = eigendecompose(build_graph(tau(pts), eps, m.dim).laplacian, count).eigenvalues
        certified.append(tau.gamma)
        medians.append(float(np.median(np.abs(base - moved))))
    x, y = np.array(certified), np.array(medians)
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - slope * x - icpt) ** 2)) / ss_tot if ss_tot > 0 else 0.0
    return x, y, r2


def spearman(x, y) -> float:
    return float(spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

_EXTRA_COLUMNS = tuple(f.name for f in fields(GapRecord) if f.name not in CSV_COLUMNS)


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def write_records_csv(records: Sequence[GapRecord], path, extra: bool = True) -> None:
    """Fixed columns first, then the auxiliary fields; a schema comment leads the file."""
    cols = CSV_COLUMNS + (_EXTRA_COLUMNS if extra else ())
    buf = io.StringIO()
    buf.write(f"# schema_version={CSV_SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in cols])
    Path(path).write_text(buf.getvalue())


def read_records_csv(path) -> list[GapRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("# schema_version="):
        raise ValueError(f"{path}: missing schema header")
    version = int(lines[0].split("=", 1)[1])
    if version != CSV_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema version {version}")
    types = {f.name: f.type for f in fields(GapRecord)}
    out = []
    for row in csv.DictReader(lines[1:]):
        kw = {}
        for k, v in row.items():
            t = types[k]
            kw[k] = int(v) if t == "int" else float(v) if t == "float" else v
        out.append(GapRecord(**kw))
    return out


def plot_gaps(records: Sequence[GapRecord], path) -> None:
    """Mean gap against log N, one line per gamma."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "geomgap"
    rows = [r for r in cell_summary(records) if r["trials"]]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for gamma in sorted({r["gamma"] for r in rows}):
        pts = sorted((r["n"], r["mean_gap"]) for r in rows if r["gamma"] == gamma and r["group"] in ("", "aggregate"))
        if pts:
            ax.plot(*zip(*pts), marker="o", label=f"gamma={gamma:g}")
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("mean gap")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
