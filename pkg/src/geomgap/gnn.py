"""Heat-kernel graph neural networks with a hand-written backward pass.

Each layer computes ``sigma(sum_i sum_k h[o, i, k] exp(-k L) x_i)`` per output
channel ``o``.  On a full eigenbasis the filter bank is applied in the
spectral domain; on a :class:`~geomgap.spectral.SparseHeat` propagator the
heat-semigroup stack is formed explicitly.  Both give the same operator.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .spectral import SparseHeat, SpectralBasis, certify_filter, lambda_grid

__all__ = [
    "LipschitzBudget",
    "GnnModel",
    "TrainConfig",
    "Sample",
    "StaleCacheError",
    "TrainingDivergedError",
    "NONLINEARITIES",
    "LOSSES",
    "LIPSCHITZ_LOSSES",
    "DEFAULT_WIDTHS",
    "init_model",
    "forward",
    "backward",
    "loss",
    "lipschitz_penalty",
    "train",
    "gradcheck",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_SCHEMA",
]

CHECKPOINT_SCHEMA = 1
NONLINEARITIES = ("relu", "abs", "identity")
LOSSES = ("l1", "huber", "cross_entropy")
# losses that are normalized Lipschitz with l(y, y) = 0; cross-entropy is neither
LIPSCHITZ_LOSSES = frozenset({"l1", "huber"})
DEFAULT_WIDTHS = (3, 64, 32)


class StaleCacheError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training risk became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class LipschitzBudget:
    c_l: float
    d: int
    grid: tuple[float, float, int] = (1e-2, 20.0, 200)
    weight: float = 1.0


@dataclass
class GnnModel:
    taps: list[np.ndarray]
    readout_w: np.ndarray
    readout_b: np.ndarray
    nonlinearity: str = "relu"
    budget: LipschitzBudget | None = None
    version: int = 0

    def __post_init__(self):
        if self.nonlinearity not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        for a, b in zip(self.taps, self.taps[1:]):
            if b.shape[1] != a.shape[0]:
                raise ValueError("layer widths do not chain")
        if self.taps and self.readout_w.shape[0] != self.taps[-1].shape[0]:
            raise ValueError("readout input width does not match the last layer")
        if not all(np.all(np.isfinite(t)) for t in self.params()):
            raise ValueError("parameters must be finite")

    @property
    def widths(self) -> list[int]:
        return [self.taps[0].shape[1]] + [t.shape[0] for t in self.taps]

    @property
    def depth(self) -> int:
        """Number of filter layers; the readout is not counted."""
        return len(self.taps)

    @property
    def n_taps(self) -> int:
        return self.taps[0].shape[2]

    def params(self) -> list[np.ndarray]:
        return [*self.taps, self.readout_w, self.readout_b]

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        n = len(self.taps)
        self.taps = [np.array(p, dtype=float) for p in params[:n]]
        self.readout_w = np.array(params[n], dtype=float)
        self.readout_b = np.array(params[n + 1], dtype=float)
        self.version += 1

    def copy(self) -> "GnnModel":
        return GnnModel([t.copy() for t in self.taps], self.readout_w.copy(), self.readout_b.copy(),
                        self.nonlinearity, self.budget, self.version)

    def filters(self):
        """Yield ``(layer, out, in, taps)`` for every scalar filter."""
        for l, H in enumerate(self.taps):
            for o in range(H.shape[0]):
                for i in range(H.shape[1]):
                    yield l, o, i, H[o, i]

    def certificate(self, d: int, grid=(1e-3, 50.0, 2000)) -> dict:
        certs = [certify_filter(h, d, grid) for _, _, _, h in self.filters()]
        return {
            "d": d,
            "grid": list(grid),
            "max_c_h": max(c.c_h for c in certs),
            "max_c_l": max(c.c_l for c in certs),
            "filters": [c.to_dict() | {"layer": l, "out": o, "in": i}
                        for c, (l, o, i, _) in zip(certs, self.filters())],
        }


def init_model(widths: Sequence[int], n_taps: int = 5, out_dim: int = 1, nonlinearity: str = "relu",
               seed=0, budget: LipschitzBudget | None = None) -> GnnModel:
    """Uniform ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` initialization for taps and readout."""
    if len(widths) < 2:
        raise ValueError("need at least an input and one layer width")
    rng = np.random.default_rng(seed)
    taps = []
    for f_in, f_out in zip(widths, widths[1:]):
        bound = 1.0 / math.sqrt(f_in * n_taps)
        taps.append(rng.uniform(-bound, bound, size=(f_out, f_in, n_taps)))
    bound = 1.0 / math.sqrt(widths[-1])
    w = rng.uniform(-bound, bound, size=(widths[-1], out_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return GnnModel(taps, w, b, nonlinearity, budget)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _act(kind, y):
    if kind == "relu":
        return np.maximum(y, 0.0)
    if kind == "abs":
        return np.abs(y)
    return y


def _act_grad(kind, y):
    if kind == "relu":
        return (y > 0).astype(float)
    if kind == "abs":
        return np.sign(y)
    return np.ones_like(y)


def _bank_forward(op, H, X):
    """Apply the filter bank ``H`` (F_out, F_in, K) to ``X`` (n, F_in)."""
    K = H.shape[2]
    if isinstance(op, SpectralBasis):
        if not op.full:
            raise ValueError("a truncated basis cannot represent the identity tap; use a full basis")
        V = op.eigenvectors
        E = np.exp(-np.multiply.outer(op.eigenvalues, np.arange(K)))  # (n, K)
        Xh = V.T @ X
        R = np.einsum("jk,oik->joi", E, H)
        Yh = np.einsum("joi,ji->jo", R, Xh)
        return V @ Yh, ("spectral", E, Xh, R)
    if isinstance(op, SparseHeat):
        Z = op.stack(X, K)
        return np.einsum("kni,oik->no", Z, H), ("sparse", Z)
    raise TypeError(f"unsupported propagator {type(op).__name__}")


def _bank_backward(op, H, ctx, G, need_input_grad=True):
    if ctx[0] == "spectral":
        _, E, Xh, R = ctx
        V = op.eigenvectors
        Gh = V.T @ G
        dH = np.einsum("joi,jk->oik", Gh[:, :, None] * Xh[:, None, :], E)
        dX = V @ np.einsum("joi,jo->ji", R, Gh) if need_input_grad else None
        return dH, dX
    _, Z = ctx
    dH = np.einsum("no,kni->oik", G, Z)
    dX = None
    if need_input_grad:
        dX = sum(op.apply(k, G @ H[:, :, k]) for k in range(H.shape[2]))
    return dH, dX


def forward(model: GnnModel, op, x: np.ndarray, task: str = "node"):
    """Return ``(output, cache)``; node task gives (n, out), graph task (1, out)."""
    if task not in ("node", "graph"):
        raise ValueError("task must be 'node' or 'graph'")
    X = np.asarray(x, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != model.widths[0]:
        raise ValueError(f"input has {X.shape[1]} channels, model expects {model.widths[0]}")
    if X.shape[0] != op.n:
        raise ValueError("signal length does not match the graph")
    layers = []
    for H in model.taps:
        Y, ctx = _bank_forward(op, H, X)
        layers.append((ctx, Y))
        X = _act(model.nonlinearity, Y)
    if task == "graph":
        pooled = X.mean(axis=0, keepdims=True)
        out = pooled @ model.readout_w + model.readout_b
    else:
        pooled = X
        out = X @ model.readout_w + model.readout_b
    cache = {"version": model.version, "model": id(model), "op": op, "layers": layers,
             "last": pooled, "task": task, "n": op.n}
    return out, cache


def backward(model: GnnModel, cache: dict, upstream: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(upstream * output)`` with respect to ``model.params()``."""
    if cache.get("model") != id(model) or cache.get("version") != model.version:
        raise StaleCacheError("cache was produced by a different model state")
    G = np.asarray(upstream, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    dW = cache["last"].T @ G
    db = G.sum(axis=0)
    dA = G @ model.readout_w.T
    if cache["task"] == "graph":
        dA = np.broadcast_to(dA / cache["n"], (cache["n"], dA.shape[1]))
    op = cache["op"]
    dtaps = [None] * len(model.taps)
    for l in range(len(model.taps) - 1, -1, -1):
        ctx, Y = cache["layers"][l]
        dY = dA * _act_grad(model.nonlinearity, Y)
        dH, dX = _bank_backward(op, model.taps[l], ctx, dY, need_input_grad=l > 0)
        dtaps[l] = dH
        dA = dX
    return [*dtaps, dW, db]


# ---------------------------------------------------------------------------
# Losses and penalty
# ---------------------------------------------------------------------------


def loss(kind: str, prediction: np.ndarray, target: np.ndarray, delta: float = 0.1):
    """Mean over rows of the per-row loss, and its gradient with respect to ``prediction``.

    ``huber`` is the smooth-L1 form ``r^2/(2 delta)`` / ``|r| - delta/2``,
    which keeps slope at most one.  ``cross_entropy`` takes logits and
    probability rows (or, for a single column, a sigmoid logit and a
    probability).
    """
    p = np.asarray(prediction, dtype=float)
    t = np.asarray(target, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if t.ndim == 1:
        t = t[:, None]
    if p.shape != t.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target {t.shape}")
    n = p.shape[0]
    if kind == "l1":
        r = p - t
        return float(np.abs(r).sum() / n), np.sign(r) / n
    if kind == "huber":
        r = p - t
        a = np.abs(r)
        quad = a <= delta
        val = np.where(quad, r * r / (2 * delta), a - delta / 2)
        grad = np.where(quad, r / delta, np.sign(r))
        return float(val.sum() / n), grad / n
    if kind == "cross_entropy":
        if np.any(t < 0) or np.any(t > 1) or (t.shape[1] > 1 and not np.allclose(t.sum(axis=1), 1.0)):
            raise ValueError("cross-entropy targets must be probability rows")
        if t.shape[1] == 1:
            z = p
            val = np.logaddexp(0.0, z) - t * z
            prob = 0.5 * (1 + np.tanh(0.5 * z))
            return float(val.sum() / n), (prob - t) / n
        z = p - p.max(axis=1, keepdims=True)
        logsm = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        val = -(t * logsm).sum()
        return float(val / n), (np.exp(logsm) - t) / n
    raise ValueError(f"unknown loss {kind!r}")


def lipschitz_penalty(model: GnnModel, budget: LipschitzBudget | None = None):
    """``weight * sum_filters sum_grid max(0, lam^(d+1) |h'(lam)| - C_L)^2`` and its gradient."""
    budget = budget or model.budget
    zero = [np.zeros_like(p) for p in model.params()]
    if budget is None:
        return 0.0, zero
    lam = lambda_grid(*budget.grid)
    K = model.n_taps
    scale = lam ** (budget.d + 1)
    D = -np.arange(K)[None, :] * np.exp(-np.outer(lam, np.arange(K)))  # dh/dlam per tap
    total = 0.0
    for l, H in enumerate(model.taps):
        deriv = np.einsum("gk,oik->goi", D, H)
        excess = scale[:, None, None] * np.abs(deriv) - budget.c_l
        active = np.maximum(excess, 0.0)
        total += float(np.sum(active**2))
        coef = 2 * active * scale[:, None, None] * np.sign(deriv)
        zero[l] = budget.weight * np.einsum("goi,gk->oik", coef, D)
    return budget.weight * total, zero


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.005
    epochs: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int | None = None
    seed: int = 0
    loss: str = "huber"
    huber_delta: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be nonnegative")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")


@dataclass
class Sample:
    op: object
    x: np.ndarray
    y: np.ndarray
    task: str = "node"


def _sample_loss(model, s: Sample, cfg: TrainConfig, with_grad=True):
    out, cache = forward(model, s.op, s.x, s.task)
    val, g = loss(cfg.loss, out, s.y, cfg.huber_delta)
    if not with_grad:
        return val, None
    return val, backward(model, cache, g)


def train(model: GnnModel, data: Sequence[Sample] | Sample, config: TrainConfig):
    """Adam on the mean sample loss plus the model's Lipschitz penalty.

    Returns ``(trained copy, per-epoch training risk)``; the risk recorded for
    an epoch is the mean loss seen during that epoch's updates.
    """
    if isinstance(data, Sample):
        data = [data]
    model = model.copy()
    rng = np.random.default_rng(config.seed)
    params = [p.copy() for p in model.params()]
    m1 = [np.zeros_like(p) for p in params]
    m2 = [np.zeros_like(p) for p in params]
    bs = config.batch_size or len(data)
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(data)) if bs < len(data) else np.arange(len(data))
        seen = 0.0
        for start in range(0, len(data), bs):
            batch = [data[i] for i in order[start:start + bs]]
            grads = [np.zeros_like(p) for p in params]
            for s in batch:
                val, g = _sample_loss(model, s, config)
                seen += val
                for acc, gi in zip(grads, g):
                    acc += gi / len(batch)
            _, pg = lipschitz_penalty(model)
            step += 1
            if config.lr == 0:
                continue
            for j, (p, g) in enumerate(zip(params, grads)):
                g = g + pg[j]
                m1[j] = config.beta1 * m1[j] + (1 - config.beta1) * g
                m2[j] = config.beta2 * m2[j] + (1 - config.beta2) * g * g
                mh = m1[j] / (1 - config.beta1**step)
                vh = m2[j] / (1 - config.beta2**step)
                p -= config.lr * mh / (np.sqrt(vh) + config.eps)
            model.set_params(params)
        risk = seen / len(data)
        if not math.isfinite(risk) or not all(np.all(np.isfinite(p)) for p in params):
            raise TrainingDivergedError(epoch)
        curve.append(risk)
    return model, np.array(curve)


def gradcheck(model: GnnModel, op, x, y, task="node", loss_kind="huber", step=1e-6,
              include_penalty=False) -> float:
    """Normwise relative error between analytic and central-difference gradients.

    Returns ``max|g_a - g_fd| / max(max|g_a|, max|g_fd|)`` over all parameters.
    """
    cfg = TrainConfig(loss=loss_kind)

    def objective(mdl):
        out, _ = forward(mdl, op, x, task)
        val = loss(loss_kind, out, y, cfg.huber_delta)[0]
        if include_penalty:
            val += lipschitz_penalty(mdl)[0]
        return val

    out, cache = forward(model, op, x, task)
    _, g = loss(loss_kind, out, y, cfg.huber_delta)
    analytic = backward(model, cache, g)
    if include_penalty:
        analytic = [a + b for a, b in zip(analytic, lipschitz_penalty(model)[1])]
    params = [p.copy() for p in model.params()]
    probe = model.copy()
    worst, scale = 0.0, 0.0
    for j, p in enumerate(params):
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + step
            probe.set_params(params)
            fp = objective(probe)
            p[idx] = orig - step
            probe.set_params(params)
            fm = objective(probe)
            p[idx] = orig
            fd[idx] = (fp - fm) / (2 * step)
        probe.set_params(params)
        worst = max(worst, float(np.max(np.abs(fd - analytic[j]))))
        scale = max(scale, float(np.max(np.abs(fd))), float(np.max(np.abs(analytic[j]))))
    return worst / scale if scale > 0 else worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: GnnModel, path, d: int | None = None, grid=(1e-3, 50.0, 2000)) -> None:
    doc = {
        "schema_version": CHECKPOINT_SCHEMA,
        "widths": model.widths,
        "n_taps": model.n_taps,
        "nonlinearity": model.nonlinearity,
        "taps": [t.tolist() for t in model.taps],
        "readout": {"weight": model.readout_w.tolist(), "bias": model.readout_b.tolist()},
        "budget": None if model.budget is None else {
            "c_l": model.budget.c_l, "d": model.budget.d, "grid": list(model.budget.grid),
            "weight": model.budget.weight},
    }
    if d is not None:
        doc["certification"] = model.certificate(d, grid)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def load_checkpoint(path) -> GnnModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != CHECKPOINT_SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
    taps = [np.array(t, dtype=float) for t in doc["taps"]]
    if any(t.ndim != 3 for t in taps):
        raise ValueError("taps must be (out, in, K) arrays")
    budget = doc.get("budget")
    if budget is not None:
        budget = LipschitzBudget(budget["c_l"], budget["d"], tuple(budget["grid"]), budget["weight"])
    return GnnModel(taps, np.array(doc["readout"]["weight"], dtype=float),
                    np.array(doc["readout"]["bias"], dtype=float), doc["nonlinearity"], budget)
