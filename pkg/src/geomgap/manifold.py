"""Analytic manifolds with closed-form spectra, samplers, signals and deformations.

Every manifold carries a probability density ``rho`` with respect to its volume
measure.  The weighted operator ``-(1/2 rho) div(rho^2 grad f)`` reduces to
``-(rho/2) Laplacian`` for a constant density, so the eigenvalues returned by
:func:`eigenpair` are the classical Laplace-Beltrami values scaled by ``rho/2``.
Eigenfunctions are normalized in ``L2(mu)`` with ``mu`` the sampling measure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy.special import lpmv

__all__ = [
    "ManifoldModel",
    "EigenPair",
    "BandlimitedSignal",
    "TeacherSpec",
    "DeformationMap",
    "DeformationError",
    "LipschitzCertificationError",
    "circle",
    "sphere",
    "flat_torus",
    "sample_points",
    "eigenpair",
    "eigenvalues",
    "synth_bandlimited",
    "lipschitz_target",
    "deform",
    "deform_to_gamma",
    "certify_deformation",
    "pushforward_signal",
    "project_coefficients",
]

KINDS = ("circle", "sphere", "flat_torus")


class DeformationError(RuntimeError):
    pass


class LipschitzCertificationError(ValueError):
    def __init__(self, message, pair=None, ratio=None):
        super().__init__(message)
        self.pair = pair
        self.ratio = ratio


# ---------------------------------------------------------------------------
# Manifold descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifoldModel:
    """Circle, sphere or flat torus with an optional density tilt.

    The density is ``rho(x) = (1 + tilt * u(x)) / vol`` where ``u`` is a fixed
    mean-zero function bounded by one (``cos(theta)`` on the circle, ``z/r`` on
    the sphere, ``cos(2 pi u / a)`` on the torus).
    """

    kind: str
    radius: float = 1.0
    sides: tuple[float, float] = (2 * math.pi, 2 * math.pi)
    tilt: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unsupported manifold kind {self.kind!r}")
        if self.radius <= 0 or min(self.sides) <= 0:
            raise ValueError("geometric parameters must be positive")
        if not -1.0 < self.tilt < 1.0:
            raise ValueError("density tilt must lie in (-1, 1)")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "circle" else 2

    @property
    def ambient_dim(self) -> int:
        return {"circle": 2, "sphere": 3, "flat_torus": 4}[self.kind]

    @property
    def volume(self) -> float:
        if self.kind == "circle":
            return 2 * math.pi * self.radius
        if self.kind == "sphere":
            return 4 * math.pi * self.radius**2
        return self.sides[0] * self.sides[1]

    @property
    def uniform(self) -> bool:
        return self.tilt == 0.0

    @property
    def rho_min(self) -> float:
        return (1 - abs(self.tilt)) / self.volume

    @property
    def rho_max(self) -> float:
        return (1 + abs(self.tilt)) / self.volume

    # -- charts ------------------------------------------------------------

    def coords(self, points: np.ndarray) -> np.ndarray:
        """Intrinsic coordinates: angle, (polar, azimuth) or (u, v)."""
        p = np.asarray(points, dtype=float)
        if self.kind == "circle":
            return np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * math.pi)[:, None]
        if self.kind == "sphere":
            r = np.linalg.norm(p, axis=1)
            polar = np.arccos(np.clip(p[:, 2] / r, -1.0, 1.0))
            azimuth = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * math.pi)
            return np.column_stack([polar, azimuth])
        a, b = self.sides
        u = np.mod(np.arctan2(p[:, 1], p[:, 0]), 2 * math.pi) * a / (2 * math.pi)
        v = np.mod(np.arctan2(p[:, 3], p[:, 2]), 2 * math.pi) * b / (2 * math.pi)
        return np.column_stack([u, v])

    def embed(self, coords: np.ndarray) -> np.ndarray:
        c = np.atleast_2d(np.asarray(coords, dtype=float))
        if self.kind == "circle":
            t = c[:, 0]
            return self.radius * np.column_stack([np.cos(t), np.sin(t)])
        if self.kind == "sphere":
            th, ph = c[:, 0], c[:, 1]
            s = np.sin(th)
            return self.radius * np.column_stack([s * np.cos(ph), s * np.sin(ph), np.cos(th)])
        a, b = self.sides
        ta, tb = 2 * math.pi * c[:, 0] / a, 2 * math.pi * c[:, 1] / b
        ra, rb = a / (2 * math.pi), b / (2 * math.pi)
        return np.column_stack([ra * np.cos(ta), ra * np.sin(ta), rb * np.cos(tb), rb * np.sin(tb)])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Nearest-point projection of ambient points onto the manifold."""
        p = np.asarray(points, dtype=float)
        if self.kind in ("circle", "sphere"):
            return self.radius * p / np.linalg.norm(p, axis=1, keepdims=True)
        return self.embed(self.coords(p))

    def residual(self, points: np.ndarray) -> float:
        p = np.asarray(points, dtype=float)
        return float(np.max(np.abs(self.project(p) - p))) if len(p) else 0.0

    def tilt_profile(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if self.kind == "circle":
            return p[:, 0] / np.linalg.norm(p, axis=1)
        if self.kind == "sphere":
            return p[:, 2] / np.linalg.norm(p, axis=1)
        return np.cos(2 * math.pi * self.coords(p)[:, 0] / self.sides[0])

    def density(self, points: np.ndarray) -> np.ndarray:
        return (1 + self.tilt * self.tilt_profile(points)) / self.volume

    # -- Riemannian helpers --------------------------------------------------

    def tangent_basis(self, points: np.ndarray) -> np.ndarray:
        """Orthonormal tangent frames, shape (n, ambient_dim, dim)."""
        p = np.asarray(points, dtype=float)
        n = len(p)
        if self.kind == "circle":
            t = p / np.linalg.norm(p, axis=1, keepdims=True)
            return np.stack([-t[:, 1], t[:, 0]], axis=1)[:, :, None]
        if self.kind == "sphere":
            x = p / np.linalg.norm(p, axis=1, keepdims=True)
            ref = np.zeros_like(x)
            use_z = np.abs(x[:, 2]) < 0.9
            ref[use_z, 2] = 1.0
            ref[~use_z, 0] = 1.0
            e1 = ref - np.sum(ref * x, axis=1, keepdims=True) * x
            e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
            e2 = np.cross(x, e1)
            return np.stack([e1, e2], axis=2)
        c = self.coords(p)
        a, b = self.sides
        ta, tb = 2 * math.pi * c[:, 0] / a, 2 * math.pi * c[:, 1] / b
        basis = np.zeros((n, 4, 2))
        basis[:, 0, 0], basis[:, 1, 0] = -np.sin(ta), np.cos(ta)
        basis[:, 2, 1], basis[:, 3, 1] = -np.sin(tb), np.cos(tb)
        return basis

    def exp(self, points: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Exponential map: follow the geodesic from each point along its tangent vector."""
        p = np.asarray(points, dtype=float)
        v = np.asarray(vectors, dtype=float)
        if self.kind == "flat_torus":
            basis = self.tangent_basis(p)
            step = np.einsum("nad,na->nd", basis, v)
            return self.embed(self.coords(p) + step)
        r = self.radius
        speed = np.linalg.norm(v, axis=1)
        angle = speed / r
        x = p / np.linalg.norm(p, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            direction = np.where(speed[:, None] > 0, v / speed[:, None], 0.0)
        out = r * (np.cos(angle)[:, None] * x + np.sin(angle)[:, None] * direction)
        return self.project(out)

    def log(self, base: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`exp` within the injectivity radius."""
        b = np.asarray(base, dtype=float)
        q = np.asarray(points, dtype=float)
        if self.kind == "flat_torus":
            a_, b_ = self.sides
            diff = self.coords(q) - self.coords(b)
            diff[:, 0] = (diff[:, 0] + a_ / 2) % a_ - a_ / 2
            diff[:, 1] = (diff[:, 1] + b_ / 2) % b_ - b_ / 2
            return np.einsum("nad,nd->na", self.tangent_basis(b), diff)
        r = self.radius
        x = b / np.linalg.norm(b, axis=1, keepdims=True)
        y = q / np.linalg.norm(q, axis=1, keepdims=True)
        cos = np.clip(np.sum(x * y, axis=1), -1.0, 1.0)
        w = y - cos[:, None] * x
        wn = np.linalg.norm(w, axis=1)
        angle = np.arctan2(wn, cos)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(wn[:, None] > 0, w / wn[:, None], 0.0) * (r * angle)[:, None]
        return out

    def geodesic_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        if self.kind == "flat_torus":
            return np.linalg.norm(self.log(a, b), axis=1)
        x = a / np.linalg.norm(a, axis=1, keepdims=True)
        y = b / np.linalg.norm(b, axis=1, keepdims=True)
        cross = np.linalg.norm(
            y - np.sum(x * y, axis=1, keepdims=True) * x, axis=1
        )
        return self.radius * np.arctan2(cross, np.sum(x * y, axis=1))

    def transport_back(self, base: np.ndarray, moved: np.ndarray, vectors: np.ndarray) -> np.ndarray:
        """Parallel-transport tangent vectors at ``moved`` back to ``base`` along the geodesic."""
        if self.kind != "sphere":
            # flat: the coordinate frame is parallel, so transport keeps frame coordinates
            coeffs = np.einsum("nad,na->nd", self.tangent_basis(moved), vectors)
            return np.einsum("nad,nd->na", self.tangent_basis(base), coeffs)
        x = base / np.linalg.norm(base, axis=1, keepdims=True)
        logv = self.log(base, moved)
        ln = np.linalg.norm(logv, axis=1)
        angle = ln / self.radius
        out = np.array(vectors, dtype=float)
        nz = ln > 0
        if np.any(nz):
            u = logv[nz] / ln[nz, None]
            a = angle[nz]
            u_y = -np.sin(a)[:, None] * x[nz] + np.cos(a)[:, None] * u
            comp = np.sum(out[nz] * u_y, axis=1)
            out[nz] = out[nz] - comp[:, None] * u_y + comp[:, None] * u
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "radius": self.radius, "sides": list(self.sides), "tilt": self.tilt}


def circle(radius: float = 1.0, tilt: float = 0.0) -> ManifoldModel:
    return ManifoldModel("circle", radius=radius, tilt=tilt)


def sphere(radius: float = 1.0, tilt: float = 0.0) -> ManifoldModel:
    return ManifoldModel("sphere", radius=radius, tilt=tilt)


def flat_torus(a: float = 2 * math.pi, b: float = 2 * math.pi, tilt: float = 0.0) -> ManifoldModel:
    return ManifoldModel("flat_torus", sides=(a, b), tilt=tilt)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _uniform_coords(m: ManifoldModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if m.kind == "circle":
        return rng.uniform(0.0, 2 * math.pi, size=(n, 1))
    if m.kind == "sphere":
        z = rng.uniform(-1.0, 1.0, size=n)
        ph = rng.uniform(0.0, 2 * math.pi, size=n)
        return np.column_stack([np.arccos(z), ph])
    a, b = m.sides
    return np.column_stack([rng.uniform(0.0, a, size=n), rng.uniform(0.0, b, size=n)])


def sample_points(m: ManifoldModel, n: int, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. points from the density of ``m``.

    Tilted densities use rejection sampling against the uniform measure.
    ``seed`` may be an int, a ``SeedSequence`` or a ``Generator``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if m.uniform:
        return m.embed(_uniform_coords(m, n, rng))
    bound = 1 + abs(m.tilt)
    chunks, have = [], 0
    while have < n:
        batch = max(64, int(1.3 * (n - have) * bound))
        pts = m.embed(_uniform_coords(m, batch, rng))
        accept = rng.uniform(0.0, bound, size=batch) < 1 + m.tilt * m.tilt_profile(pts)
        chunks.append(pts[accept])
        have += int(accept.sum())
    return np.concatenate(chunks)[:n]


# ---------------------------------------------------------------------------
# Spectrum
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EigenPair:
    index: int
    eigenvalue: float
    label: tuple
    manifold: ManifoldModel

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return _eval_eigenfunction(self.manifold, self.label, np.asarray(points, dtype=float))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        """Ambient tangent gradient of the eigenfunction at each point."""
        return _grad_eigenfunction(self.manifold, self.label, np.asarray(points, dtype=float))


@lru_cache(maxsize=None)
def _labels(kind: str, sides: tuple[float, float], count: int) -> tuple:
    """(Laplace-Beltrami eigenvalue at unit scale, label) pairs in canonical order."""
    out = []
    if kind == "circle":
        out.append((0.0, ("const",)))
        k = 1
        while len(out) < count:
            out.append((float(k * k), ("cos", k)))
            out.append((float(k * k), ("sin", k)))
            k += 1
    elif kind == "sphere":
        ell = 0
        while len(out) < count:
            lam = float(ell * (ell + 1))
            out.append((lam, ("Y", ell, 0)))
            for mm in range(1, ell + 1):
                out.append((lam, ("Y", ell, mm)))
                out.append((lam, ("Y", ell, -mm)))
            ell += 1
    else:
        a, b = sides
        reach = 1
        while True:
            cands = sorted(
                (4 * math.pi**2 * (j * j / a**2 + k * k / b**2), j, k)
                for j in range(reach + 1)
                for k in range(-reach, reach + 1)
                if j > 0 or k > 0
            )
            # any mode outside the box has eigenvalue at least `outside`
            outside = 4 * math.pi**2 * (reach + 1) ** 2 / max(a, b) ** 2
            kept = [c for c in cands if c[0] < outside]
            if 2 * len(kept) + 1 >= count:
                break
            reach += 1
        out.append((0.0, ("const",)))
        for lam, j, k in kept:
            out.append((lam, ("cos", j, k)))
            out.append((lam, ("sin", j, k)))
    return tuple(out[:count])


def _eval_eigenfunction(m: ManifoldModel, label: tuple, p: np.ndarray) -> np.ndarray:
    if label[0] == "const":
        return np.ones(len(p))
    c = m.coords(p)
    if m.kind == "circle":
        k = label[1]
        trig = np.cos if label[0] == "cos" else np.sin
        return math.sqrt(2) * trig(k * c[:, 0])
    if m.kind == "sphere":
        _, ell, mm = label
        x = np.cos(c[:, 0])
        am = abs(mm)
        if am == 0:
            return math.sqrt(2 * ell + 1) * lpmv(0, ell, x)
        norm = math.sqrt(2 * (2 * ell + 1) * math.factorial(ell - am) / math.factorial(ell + am))
        trig = np.cos if mm > 0 else np.sin
        return norm * lpmv(am, ell, x) * trig(am * c[:, 1])
    kind, j, k = label
    a, b = m.sides
    phase = 2 * math.pi * (j * c[:, 0] / a + k * c[:, 1] / b)
    trig = np.cos if kind == "cos" else np.sin
    return math.sqrt(2) * trig(phase)


def _grad_eigenfunction(m: ManifoldModel, label: tuple, p: np.ndarray) -> np.ndarray:
    if label[0] == "const":
        return np.zeros_like(p)
    basis = m.tangent_basis(p)
    if m.kind == "circle":
        k = label[1]
        th = m.coords(p)[:, 0]
        d = -k * np.sin(k * th) if label[0] == "cos" else k * np.cos(k * th)
        return math.sqrt(2) * (d / m.radius)[:, None] * basis[:, :, 0]
    if m.kind == "flat_torus":
        kind, j, k = label
        a, b = m.sides
        c = m.coords(p)
        phase = 2 * math.pi * (j * c[:, 0] / a + k * c[:, 1] / b)
        d = -np.sin(phase) if kind == "cos" else np.cos(phase)
        du = math.sqrt(2) * d * 2 * math.pi * j / a
        dv = math.sqrt(2) * d * 2 * math.pi * k / b
        return du[:, None] * basis[:, :, 0] + dv[:, None] * basis[:, :, 1]
    # sphere: central differences along geodesics in an orthonormal frame
    h = 1e-5 * m.radius
    grad = np.zeros_like(p)
    for j in range(2):
        e = basis[:, :, j]
        fp = _eval_eigenfunction(m, label, m.exp(p, h * e))
        fm = _eval_eigenfunction(m, label, m.exp(p, -h * e))
        grad += ((fp - fm) / (2 * h))[:, None] * e
    return grad


def eigenpair(m: ManifoldModel, i: int) -> EigenPair:
    """The ``i``-th (1-based) eigenpair of the weighted operator under uniform density."""
    if i < 1:
        raise ValueError("eigen-index is 1-based")
    if not m.uniform:
        raise NotImplementedError("closed-form eigenpairs exist only for uniform density")
    lam_lb, label = _labels(m.kind, tuple(m.sides), i)[i - 1]
    if m.kind in ("circle", "sphere"):
        lam_lb /= m.radius**2
    rho = 1.0 / m.volume
    return EigenPair(index=i, eigenvalue=0.5 * rho * lam_lb, label=label, manifold=m)


def eigenvalues(m: ManifoldModel, count: int) -> np.ndarray:
    return np.array([eigenpair(m, i).eigenvalue for i in range(1, count + 1)])


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandlimitedSignal:
    """Finite eigen-expansion ``sum_i c_i phi_i`` on a uniform-density manifold."""

    manifold: ManifoldModel
    coefficients: Mapping[int, float]
    cutoff: float

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        out = np.zeros(len(p))
        for i, c in sorted(self.coefficients.items()):
            if c != 0.0:
                out += c * eigenpair(self.manifold, i)(p)
        return out

    def gradient(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        out = np.zeros_like(p)
        for i, c in sorted(self.coefficients.items()):
            if c != 0.0:
                out += c * eigenpair(self.manifold, i).gradient(p)
        return out

    def norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.coefficients.values()))


def synth_bandlimited(m: ManifoldModel, coeffs: Mapping[int, float], cutoff: float | None = None) -> BandlimitedSignal:
    coeffs = {int(i): float(c) for i, c in coeffs.items()}
    if cutoff is None:
        nz = [i for i, c in coeffs.items() if c != 0.0]
        cutoff = max((eigenpair(m, i).eigenvalue for i in nz), default=0.0)
    for i, c in coeffs.items():
        if c != 0.0 and eigenpair(m, i).eigenvalue > cutoff:
            raise ValueError(
                f"coefficient {i} has eigenvalue {eigenpair(m, i).eigenvalue:.6g} above cutoff {cutoff:.6g}"
            )
    return BandlimitedSignal(m, coeffs, float(cutoff))


def project_coefficients(f: Callable[[np.ndarray], np.ndarray], m: ManifoldModel, indices: Iterable[int],
                         n: int, seed) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo estimates of ``<f, phi_i>`` and their standard errors."""
    pts = sample_points(m, n, seed)
    fx = f(pts)
    est, err = [], []
    for i in indices:
        prod = fx * eigenpair(m, i)(pts)
        est.append(prod.mean())
        err.append(prod.std(ddof=1) / math.sqrt(n))
    return np.array(est), np.array(err)


@dataclass(frozen=True)
class TeacherSpec:
    """Teacher filter ``g = g_hat(scale * L) f`` with optional sign thresholding.

    ``operator_scale`` lets the teacher act on the spectrum that sampled
    graphs converge to rather than the continuum normalization.
    """

    taps: tuple[float, ...] = (1.0,)
    operator_scale: float = 1.0
    threshold: float | None = None


@dataclass(frozen=True)
class LipschitzTarget:
    signal: BandlimitedSignal
    c_g: float
    certified: float
    threshold: float | None = None

    def score(self, points: np.ndarray) -> np.ndarray:
        return self.signal(points)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        s = self.signal(points)
        if self.threshold is None:
            return s
        return np.where(s > self.threshold, 1.0, -1.0)


def lipschitz_target(m: ManifoldModel, c_g: float, f: BandlimitedSignal,
                     spec: TeacherSpec = TeacherSpec(), n_pairs: int = 4000, seed=0) -> LipschitzTarget:
    """Apply a teacher filter to ``f`` and certify the Lipschitz constant of the result.

    The certificate is the larger of the maximal sampled difference quotient
    over random close pairs (geodesic distance) and the maximal gradient norm
    on the same sample.  Raises :class:`LipschitzCertificationError` naming
    the offending pair if either exceeds ``c_g``.
    """
    if c_g <= 0:
        raise ValueError("c_g must be positive")
    taps = np.asarray(spec.taps, dtype=float)
    coeffs = {}
    for i, c in f.coefficients.items():
        lam = spec.operator_scale * eigenpair(m, i).eigenvalue
        coeffs[i] = c * float(np.sum(taps * np.exp(-np.arange(len(taps)) * lam)))
    g = BandlimitedSignal(m, coeffs, f.cutoff)

    rng = np.random.default_rng(seed)
    a = sample_points(m, n_pairs, rng)
    # short geodesic steps probe the local constant; long pairs catch nothing new for smooth g
    steps = rng.normal(size=a.shape)
    basis = m.tangent_basis(a)
    tang = np.einsum("nad,nd->na", basis, np.einsum("nad,na->nd", basis, steps))
    tang *= (rng.uniform(1e-3, 0.3, size=n_pairs) / np.maximum(np.linalg.norm(tang, axis=1), 1e-300))[:, None]
    b = m.exp(a, tang)
    dist = m.geodesic_distance(a, b)
    ok = dist > 0
    ratios = np.zeros(n_pairs)
    ratios[ok] = np.abs(g(a[ok]) - g(b[ok])) / dist[ok]
    worst = int(np.argmax(ratios))
    grad_sup = float(np.max(np.linalg.norm(g.gradient(a), axis=1))) if n_pairs else 0.0
    certified = max(float(ratios[worst]), grad_sup)
    if ratios[worst] > c_g:
        raise LipschitzCertificationError(
            f"sampled ratio {ratios[worst]:.6g} exceeds c_g={c_g}", pair=(a[worst], b[worst]), ratio=float(ratios[worst])
        )
    if grad_sup > c_g:
        j = int(np.argmax(np.linalg.norm(g.gradient(a), axis=1)))
        raise LipschitzCertificationError(
            f"gradient norm {grad_sup:.6g} exceeds c_g={c_g}", pair=(a[j], a[j]), ratio=grad_sup
        )
    return LipschitzTarget(g, float(c_g), certified, spec.threshold)


# ---------------------------------------------------------------------------
# Deformations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeformationMap:
    """``tau(x) = exp_x(amplitude * v(x))`` for a smooth tangent field ``v``.

    ``field`` is either ``"rotation"`` (a Killing field) or a sequence of
    ``(eigen_index, weight)`` pairs whose eigenfunction gradients are summed.
    """

    base: ManifoldModel
    field: tuple = ()
    amplitude: float = 0.0
    nominal_gamma: float | None = None
    certified_gamma_dist: float | None = None
    certified_gamma_jac: float | None = None

    def vector_field(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        m = self.base
        if self.field == "rotation":
            if m.kind == "circle":
                return m.tangent_basis(p)[:, :, 0]
            if m.kind == "sphere":
                x = p / np.linalg.norm(p, axis=1, keepdims=True)
                return np.cross(np.array([0.0, 0.0, 1.0]), x) * m.radius
            return m.tangent_basis(p)[:, :, 0]
        v = np.zeros_like(p)
        for idx, w in self.field:
            v += w * eigenpair(m, int(idx)).gradient(p)
        return v

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        if self.amplitude == 0.0:
            return p.copy()
        return self.base.exp(p, self.amplitude * self.vector_field(p))

    @property
    def gamma(self) -> float:
        """Certified mismatch size ``max(dist bound, Jacobian bound)``."""
        if self.certified_gamma_dist is None:
            return float("nan")
        return max(self.certified_gamma_dist, self.certified_gamma_jac)


def _field_key(field) -> tuple | str:
    if field == "rotation":
        return "rotation"
    return tuple((int(i), float(w)) for i, w in field)


def deform(m: ManifoldModel, field, amplitude: float) -> DeformationMap:
    if amplitude < 0:
        raise ValueError("amplitude must be nonnegative")
    return DeformationMap(m, _field_key(field), float(amplitude))


def _measure(tau: DeformationMap, pts: np.ndarray, h: float) -> tuple[float, float]:
    m = tau.base
    moved = tau(pts)
    dist = float(np.max(m.geodesic_distance(pts, moved)))
    basis = m.tangent_basis(pts)
    jac = np.zeros((len(pts), m.dim, m.dim))
    for j in range(m.dim):
        e = basis[:, :, j]
        fp = tau(m.exp(pts, h * e))
        fm = tau(m.exp(pts, -h * e))
        col = (m.log(moved, fp) - m.log(moved, fm)) / (2 * h)
        col = m.transport_back(pts, moved, col)
        jac[:, :, j] = np.einsum("nad,na->nd", basis, col)
    dev = jac - np.eye(m.dim)[None]
    return dist, float(np.max(np.sqrt(np.sum(dev**2, axis=(1, 2)))))


def certify_deformation(tau: DeformationMap, n_check: int = 2000, seed=0) -> tuple[float, float]:
    """Measured sup of geodesic displacement and of ``||J - I||_F`` over ``n_check`` points."""
    if tau.amplitude == 0.0:
        return 0.0, 0.0
    m = tau.base
    pts = m.embed(_uniform_coords(m, n_check, np.random.default_rng(seed)))
    return _measure(tau, pts, h=1e-5 * (m.radius if m.kind != "flat_torus" else 1.0))


def deform_to_gamma(m: ManifoldModel, field, gamma: float, n_check: int = 2000, seed=0,
                    safety: float = 0.98, max_iter: int = 60) -> DeformationMap:
    """Scale the field amplitude by bisection so both certified bounds stay below ``gamma``.

    The target is ``safety * gamma`` so that a re-check on fresh points keeps
    the bounds under the nominal budget.
    """
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    if gamma == 0.0:
        return DeformationMap(m, _field_key(field), 0.0, 0.0, 0.0, 0.0)
    target = safety * gamma

    def worst(a):
        d, j = certify_deformation(deform(m, field, a), n_check, seed)
        return max(d, j)

    probe = worst(1.0)
    if not np.isfinite(probe) or probe <= 0.0:
        raise DeformationError("deformation field is degenerate; bisection cannot converge")
    lo, hi = 0.0, target / probe
    while worst(hi) <= target:
        lo, hi = hi, 2 * hi
        if hi > 1e6:
            raise DeformationError("bisection did not bracket the gamma budget")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if worst(mid) <= target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-10 * hi:
            break
    else:
        raise DeformationError("bisection did not converge")
    d, j = certify_deformation(deform(m, field, lo), n_check, seed)
    return DeformationMap(m, _field_key(field), lo, float(gamma), d, j)


def pushforward_signal(f: Callable[[np.ndarray], np.ndarray], tau: DeformationMap) -> Callable[[np.ndarray], np.ndarray]:
    def composed(points):
        return f(tau(points))

    return composed
