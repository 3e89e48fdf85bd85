"""Epsilon-graphs on point clouds, discrete perturbations and point-cloud files."""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.special import gamma as gamma_fn

__all__ = [
    "PointCloud",
    "GeometricGraph",
    "PointCloudParseError",
    "unit_ball_volume",
    "limit_scale",
    "edge_weight",
    "build_graph",
    "build_graph_bruteforce",
    "default_epsilon",
    "perturb_features",
    "perturb_edges",
    "gaussian_jitter",
    "load_point_cloud",
    "write_point_cloud",
    "subsample",
]


class PointCloudParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, path=None):
        where = f"{path}:" if path else ""
        prefix = f"{where}line {line}: " if line is not None else where
        super().__init__(prefix + message)
        self.line = line
        self.path = path


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    source: str = "array"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise ValueError("points must be an (n, M) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)

    def __len__(self):
        return self.n


def unit_ball_volume(d: int) -> float:
    return math.pi ** (d / 2) / gamma_fn(d / 2 + 1)


def edge_weight(n: int, epsilon: float, d: int) -> float:
    return unit_ball_volume(d) / ((d + 2) * n * epsilon ** (d + 2))


def limit_scale(d: int) -> float:
    """Factor between the graph-Laplacian limit and ``-(rho/2) Laplacian``.

    With indicator weights ``alpha_d / ((d+2) N eps^(d+2))`` the second-moment
    integral contributes another ``alpha_d / (d+2)``, so graph eigenvalues
    approach ``(alpha_d/(d+2))**2`` times the weighted-operator eigenvalues.
    """
    return (unit_ball_volume(d) / (d + 2)) ** 2


@dataclass(frozen=True, eq=False)
class GeometricGraph:
    cloud: PointCloud
    epsilon: float
    d: int
    weights: sp.csr_matrix
    laplacian: sp.csr_matrix
    n_components: int
    n_isolated: int

    @property
    def n(self) -> int:
        return self.cloud.n

    @property
    def n_edges(self) -> int:
        return int(sp.triu(self.weights, k=1).nnz)

    @property
    def connected(self) -> bool:
        return self.n_components == 1

    @property
    def has_isolated(self) -> bool:
        return self.n_isolated > 0


def _assemble(cloud: PointCloud, epsilon: float, d: int, rows: np.ndarray, cols: np.ndarray,
              w: float | np.ndarray) -> GeometricGraph:
    n = cloud.n
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    vals = np.broadcast_to(np.asarray(w, dtype=float), rows.shape)
    if np.ndim(w):
        vals = np.asarray(w, dtype=float)[order]
    upper = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    W = (upper + upper.T).tocsr()
    W.sort_indices()
    deg = np.asarray(W.sum(axis=1)).ravel()
    L = (sp.diags(deg) - W).tocsr()
    L.sort_indices()
    ncomp, _ = connected_components(W, directed=False)
    isolated = int(np.sum(np.diff(W.indptr) == 0))
    return GeometricGraph(cloud, float(epsilon), int(d), W, L, int(ncomp), isolated)


def _as_cloud(cloud) -> PointCloud:
    return cloud if isinstance(cloud, PointCloud) else PointCloud(np.asarray(cloud, dtype=float))


def build_graph(cloud, epsilon: float, d: int) -> GeometricGraph:
    """Indicator-kernel epsilon-graph with the closed ball ``0 < |xi - xj| <= eps``.

    Neighbour candidates come from a k-d tree; distances are then recomputed
    with the same expression as :func:`build_graph_bruteforce` so both agree
    bit-for-bit on the boundary.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if d < 1:
        raise ValueError("d must be >= 1")
    cloud = _as_cloud(cloud)
    pts = cloud.points
    pairs = cKDTree(pts).query_pairs(r=epsilon * (1 + 1e-9), output_type="ndarray")
    if len(pairs):
        i, j = pairs[:, 0], pairs[:, 1]
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        dist = np.sqrt(np.sum((pts[lo] - pts[hi]) ** 2, axis=1))
        keep = (dist <= epsilon) & (dist > 0)
        lo, hi = lo[keep], hi[keep]
    else:
        lo = hi = np.zeros(0, dtype=np.int64)
    return _assemble(cloud, epsilon, d, lo.astype(np.int64), hi.astype(np.int64),
                     edge_weight(cloud.n, epsilon, d))


def build_graph_bruteforce(cloud, epsilon: float, d: int) -> GeometricGraph:
    """O(N^2) reference construction used as the correctness oracle."""
    cloud = _as_cloud(cloud)
    pts = cloud.points
    n = len(pts)
    rows, cols = [], []
    for a in range(n):
        dist = np.sqrt(np.sum((pts[a] - pts[a + 1:]) ** 2, axis=1))
        hit = np.nonzero((dist <= epsilon) & (dist > 0))[0] + a + 1
        rows.extend([a] * len(hit))
        cols.extend(hit.tolist())
    return _assemble(cloud, epsilon, d, np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64),
                     edge_weight(n, epsilon, d))


def default_epsilon(n: int, d: int, delta: float = 0.1, c: float = 1.0, scale: float = 1.0) -> float:
    """``scale * (log(c/delta)/n) ** (1/(d+4))``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if n < 2:
        raise ValueError("n must be >= 2")
    if c <= 0:
        raise ValueError("c must be positive")
    return scale * (math.log(c / delta) / n) ** (1.0 / (d + 4))


def perturb_features(x: np.ndarray, fraction: float, seed) -> np.ndarray:
    """Zero ``floor(fraction * F)`` randomly chosen feature channels on every node."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    x = np.asarray(x, dtype=float)
    out = x.copy()
    F = x.shape[1] if x.ndim == 2 else 1
    count = math.floor(fraction * F)
    if count:
        chans = np.random.default_rng(seed).choice(F, size=count, replace=False)
        if x.ndim == 2:
            out[:, chans] = 0.0
        else:
            out[:] = 0.0
    return out


def perturb_edges(g: GeometricGraph, fraction: float, seed) -> GeometricGraph:
    """Remove ``floor(fraction * E)`` undirected edges uniformly at random."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    upper = sp.triu(g.weights, k=1).tocoo()
    E = upper.nnz
    drop = math.floor(fraction * E)
    keep = np.ones(E, dtype=bool)
    if drop:
        keep[np.random.default_rng(seed).choice(E, size=drop, replace=False)] = False
    return _assemble(g.cloud, g.epsilon, g.d, upper.row[keep].astype(np.int64),
                     upper.col[keep].astype(np.int64), upper.data[keep])


def gaussian_jitter(cloud, gamma: float, seed) -> PointCloud:
    """Shift every coordinate by an independent ``Normal(mean=gamma, variance=2*gamma)`` draw."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    cloud = _as_cloud(cloud)
    if gamma == 0:
        return PointCloud(cloud.points.copy(), cloud.source)
    noise = np.random.default_rng(seed).normal(gamma, math.sqrt(2 * gamma), size=cloud.points.shape)
    return PointCloud(cloud.points + noise, f"jitter({cloud.source}, gamma={gamma})")


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def _infer_format(path) -> str:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".off":
        return "OFF"
    if ext in (".csv", ".xyz"):
        return "XYZ-CSV"
    raise ValueError(f"cannot infer point-cloud format from {path!r}")


def _parse_floats(tokens, lineno, path, want=None):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        raise PointCloudParseError(f"non-numeric value in {' '.join(tokens)!r}", lineno, path) from None
    if not all(math.isfinite(v) for v in vals):
        raise PointCloudParseError("non-finite coordinate", lineno, path)
    if want is not None and len(vals) < want:
        raise PointCloudParseError(f"expected {want} values, found {len(vals)}", lineno, path)
    return vals


def _read_off(text: str, path) -> np.ndarray:
    lines = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln]
    if not lines or not lines[0][1].startswith("OFF"):
        raise PointCloudParseError("missing 'OFF' header", lines[0][0] if lines else 1, path)
    lineno, head = lines[0]
    rest = head[3:].strip()
    pos = 1
    if rest:
        counts_line, counts = lineno, rest.split()
    else:
        if len(lines) < 2:
            raise PointCloudParseError("missing counts line", lineno + 1, path)
        counts_line, counts_text = lines[1]
        counts = counts_text.split()
        pos = 2
    if len(counts) != 3:
        raise PointCloudParseError("counts line must hold 'V F E'", counts_line, path)
    try:
        nv, nf, ne = (int(c) for c in counts)
    except ValueError:
        raise PointCloudParseError("counts must be integers", counts_line, path) from None
    if nv < 0 or nf < 0 or ne < 0:
        raise PointCloudParseError("counts must be nonnegative", counts_line, path)
    verts = lines[pos:pos + nv]
    if len(verts) < nv:
        last = lines[-1][0] if lines else 1
        raise PointCloudParseError(f"expected {nv} vertex lines, found {len(verts)}", last + 1, path)
    out = np.empty((nv, 3))
    for k, (ln, txt) in enumerate(verts):
        tokens = txt.split()
        if len(tokens) != 3:
            raise PointCloudParseError(f"vertex line needs 3 coordinates, found {len(tokens)}", ln, path)
        out[k] = _parse_floats(tokens, ln, path, 3)
    return out


def _read_csv(text: str, path) -> np.ndarray:
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise PointCloudParseError(f"expected 3 comma-separated values, found {len(row)}", lineno, path)
        if lineno == 1 and not rows:
            try:
                [float(c) for c in row]
            except ValueError:
                continue  # header
        rows.append(_parse_floats([c.strip() for c in row], lineno, path, 3))
    return np.array(rows, dtype=float).reshape(-1, 3)


def load_point_cloud(path, fmt: str | None = None) -> PointCloud:
    """Read an ASCII OFF file (vertices only) or an x,y,z CSV file."""
    fmt = (fmt or _infer_format(path)).upper()
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    if fmt == "OFF":
        pts = _read_off(text, path)
    elif fmt in ("XYZ-CSV", "CSV"):
        pts = _read_csv(text, path)
    else:
        raise ValueError(f"unknown point-cloud format {fmt!r}")
    return PointCloud(pts, f"file({path})")


def write_point_cloud(cloud, path, fmt: str | None = None, header: bool = False) -> None:
    """Write coordinates with shortest round-trip float formatting."""
    pts = _as_cloud(cloud).points
    if pts.shape[1] != 3:
        raise ValueError("file formats hold 3-D points")
    fmt = (fmt or _infer_format(path)).upper()
    if fmt == "OFF":
        lines = ["OFF", f"{len(pts)} 0 0"] + [" ".join(repr(float(c)) for c in p) for p in pts]
    else:
        lines = (["x,y,z"] if header else []) + [",".join(repr(float(c)) for c in p) for p in pts]
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def subsample(cloud, n: int, seed) -> PointCloud:
    """Draw ``n`` points uniformly without replacement."""
    cloud = _as_cloud(cloud)
    if n > cloud.n:
        raise ValueError(f"cannot draw {n} points from a cloud of {cloud.n}")
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = np.random.default_rng(seed).choice(cloud.n, size=n, replace=False)
    return PointCloud(cloud.points[idx], f"subsample({cloud.source}, {n})")
