"""Eigendecomposition, heat semigroup, filter responses and spectral diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh
from scipy.special import ive

__all__ = [
    "SpectralBasis",
    "SparseHeat",
    "FilterCertificate",
    "DENSE_CAP",
    "eigendecompose",
    "heat_apply",
    "spectral_filter",
    "tap_sum_filter",
    "matexp_oracle",
    "freq_response",
    "freq_response_deriv",
    "certify_filter",
    "weyl_check",
    "eigen_perturbation_check",
    "spectral_distance",
    "propagator",
]

DENSE_CAP = 3000


@dataclass(frozen=True, eq=False)
class SpectralBasis:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n(self) -> int:
        return self.eigenvectors.shape[0]

    @property
    def m(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def full(self) -> bool:
        return self.m == self.n


class SparseHeat:
    """Heat semigroup on a sparse Laplacian through one shared Chebyshev recurrence.

    On ``[0, b]`` with ``b`` a Gershgorin bound, ``exp(-k lam)`` expands as
    ``sum_j c_kj T_j(2 lam/b - 1)`` with ``c_kj = (2 - [j=0]) (-1)^j ive(j, k b/2)``.
    Every tap in :meth:`stack` reuses the same ``T_j(L) X`` vectors.  Used
    where a dense eigendecomposition would be too expensive.
    """

    def __init__(self, laplacian, tol: float = 1e-15):
        self.laplacian = sp.csr_matrix(laplacian, dtype=float)
        self.n = self.laplacian.shape[0]
        self.tol = tol
        self.bound = max(float(2 * np.max(self.laplacian.diagonal(), initial=0.0)), 1e-12)

    def _coefficients(self, K: int) -> np.ndarray:
        a_max = (K - 1) * self.bound / 2
        J = int(a_max + 10 * math.sqrt(a_max + 1) + 20)
        while True:
            j = np.arange(J + 1)
            coef = np.array([ive(j, k * self.bound / 2) for k in range(K)])
            coef[:, 1:] *= 2 * (-1.0) ** j[1:]
            if np.max(np.abs(coef[:, -5:])) < self.tol:
                break
            J *= 2
        tail = np.max(np.abs(coef), axis=0)
        last = int(np.nonzero(tail >= self.tol)[0].max()) if np.any(tail >= self.tol) else 0
        return coef[:, : last + 1]

    def stack(self, x: np.ndarray, K: int) -> np.ndarray:
        """``[exp(-k L) x for k in range(K)]`` as a (K, n, ...) array."""
        x = np.asarray(x, dtype=float)
        out = np.empty((K,) + x.shape)
        out[0] = x
        if K == 1:
            return out
        coef = self._coefficients(K)[1:]
        scale = 2.0 / self.bound

        def t_op(v):
            return scale * (self.laplacian @ v) - v

        prev, cur = x, t_op(x)
        acc = coef[:, :1].reshape((K - 1,) + (1,) * x.ndim) * prev
        if coef.shape[1] > 1:
            acc = acc + coef[:, 1:2].reshape((K - 1,) + (1,) * x.ndim) * cur
        for j in range(2, coef.shape[1]):
            prev, cur = cur, 2 * t_op(cur) - prev
            acc += coef[:, j:j + 1].reshape((K - 1,) + (1,) * x.ndim) * cur
        out[1:] = acc
        return out

    def apply(self, k: int, x: np.ndarray) -> np.ndarray:
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0:
            return np.asarray(x, dtype=float).copy()
        return self.stack(x, k + 1)[k]


def _sign_fix(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def eigendecompose(L, mode="full", dense_cap: int = DENSE_CAP) -> SpectralBasis:
    """Ascending eigenpairs of a symmetric Laplacian.

    ``mode`` is ``"full"`` or an integer ``m`` for the ``m`` lowest pairs.
    Each eigenvector is signed so that its largest-magnitude entry is positive.
    """
    n = L.shape[0]
    if mode == "full":
        if n > dense_cap:
            raise ValueError(f"n={n} exceeds the dense cap {dense_cap}; use a truncated mode (lowest m)")
        dense = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
        lam, V = np.linalg.eigh(dense)
    else:
        m = int(mode)
        if not 1 <= m <= n:
            raise ValueError("m must lie in [1, n]")
        if m >= n - 1 or n <= 200:
            dense = L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float)
            lam, V = np.linalg.eigh(dense)
            lam, V = lam[:m], V[:, :m]
        else:
            A = sp.csc_matrix(L, dtype=float)
            scale = max(abs(A).sum(axis=1).max(), 1e-300)
            v0 = np.ones(n) / math.sqrt(n)
            lam, V = eigsh(A, k=m, sigma=-1e-3 * scale, which="LM", v0=v0)
            order = np.argsort(lam)
            lam, V = lam[order], V[:, order]
    return SpectralBasis(np.asarray(lam), _sign_fix(np.asarray(V)))


def heat_apply(basis: SpectralBasis, k: int, x: np.ndarray) -> np.ndarray:
    """``V exp(-k Lambda) V^T x``; a truncated basis projects onto its span."""
    if k < 0:
        raise ValueError("k must be >= 0")
    x = np.asarray(x, dtype=float)
    if k == 0 and basis.full:
        return x.copy()
    V = basis.eigenvectors
    decay = np.exp(-k * basis.eigenvalues)
    coef = V.T @ x
    coef = decay[:, None] * coef if coef.ndim == 2 else decay * coef
    return V @ coef


def freq_response(taps, lam):
    """``h_hat(lam) = sum_k h_k exp(-k lam)``."""
    taps = np.asarray(taps, dtype=float)
    lam = np.asarray(lam, dtype=float)
    ks = np.arange(len(taps))
    return np.tensordot(np.exp(-np.multiply.outer(lam, ks)), taps, axes=([-1], [0]))


def freq_response_deriv(taps, lam):
    taps = np.asarray(taps, dtype=float)
    lam = np.asarray(lam, dtype=float)
    ks = np.arange(len(taps))
    return np.tensordot(-ks * np.exp(-np.multiply.outer(lam, ks)), taps, axes=([-1], [0]))


def spectral_filter(basis: SpectralBasis, taps, x: np.ndarray) -> np.ndarray:
    """Filter in the eigenbasis: ``V h_hat(Lambda) V^T x``."""
    resp = freq_response(taps, basis.eigenvalues)
    coef = basis.eigenvectors.T @ np.asarray(x, dtype=float)
    coef = resp[:, None] * coef if coef.ndim == 2 else resp * coef
    return basis.eigenvectors @ coef


def tap_sum_filter(basis: SpectralBasis, taps, x: np.ndarray) -> np.ndarray:
    """Filter as a weighted sum of heat-semigroup outputs ``sum_k h_k exp(-k L) x``."""
    out = np.zeros_like(np.asarray(x, dtype=float))
    for k, h in enumerate(np.asarray(taps, dtype=float)):
        out = out + h * heat_apply(basis, k, x)
    return out


def matexp_oracle(L, x, k: float, tol: float = 1e-12, max_terms: int = 200) -> np.ndarray:
    """``exp(-k L) x`` by scaling and squaring with a truncated Taylor series.

    Independent of any eigendecomposition; intended as a cross-check.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    A = -k * (L.toarray() if sp.issparse(L) else np.asarray(L, dtype=float))
    x = np.asarray(x, dtype=float)
    if k == 0:
        return x.copy()
    norm = np.abs(A).sum(axis=0).max()
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    B = A / 2.0**s
    n = A.shape[0]
    E = np.eye(n)
    term = np.eye(n)
    for j in range(1, max_terms + 1):
        term = term @ B / j
        E = E + term
        # squaring amplifies the truncation error roughly 2^s-fold
        if np.abs(term).max() <= tol / 2.0**s:
            break
    else:
        raise RuntimeError("Taylor series did not converge within the term cap")
    for _ in range(s):
        E = E @ E
    return E @ x


@dataclass(frozen=True)
class FilterCertificate:
    c_h: float
    c_l: float
    lambda_min: float
    lambda_max: float
    steps: int
    d: int

    def to_dict(self) -> dict:
        return {"c_h": self.c_h, "c_l": self.c_l, "lambda_min": self.lambda_min,
                "lambda_max": self.lambda_max, "steps": self.steps, "d": self.d}


def lambda_grid(lambda_min: float, lambda_max: float, steps: int) -> np.ndarray:
    if lambda_min <= 0:
        raise ValueError("lambda_min must be positive")
    if lambda_max < lambda_min or steps < 1:
        raise ValueError("invalid lambda grid")
    return np.geomspace(lambda_min, lambda_max, steps) if steps > 1 else np.array([lambda_min])


def certify_filter(taps, d: int, grid=(1e-3, 50.0, 2000)) -> FilterCertificate:
    """Realized constants ``max lam^d |h_hat|`` and ``max lam^(d+1) |h_hat'|`` over a log grid."""
    lo, hi, steps = grid
    lam = lambda_grid(lo, hi, int(steps))
    c_h = float(np.max(lam**d * np.abs(freq_response(taps, lam))))
    c_l = float(np.max(lam ** (d + 1) * np.abs(freq_response_deriv(taps, lam))))
    return FilterCertificate(c_h, c_l, float(lo), float(hi), int(steps), int(d))


def weyl_check(eigenvalues_or_basis, d: int, i_range: tuple[int, int]) -> tuple[float, float]:
    """Least-squares slope of ``log lam_i`` against ``log i`` (1-based, inclusive range) and R^2."""
    lam = getattr(eigenvalues_or_basis, "eigenvalues", eigenvalues_or_basis)
    lam = np.asarray(lam, dtype=float)
    lo, hi = i_range
    if lo < 1 or hi > len(lam) or hi <= lo:
        raise ValueError("index range outside the available spectrum")
    idx = np.arange(lo, hi + 1)
    vals = lam[lo - 1:hi]
    if np.any(vals <= 0):
        raise ValueError("nonpositive eigenvalues in range")
    x, y = np.log(idx), np.log(vals)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), r2


def eigen_perturbation_check(base, pert, gamma: float, m: int) -> np.ndarray:
    """Ratios ``|lam_i - lam'_i| / (gamma |lam_i| + gamma)`` for the first ``m`` eigenvalues."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    a = np.asarray(getattr(base, "eigenvalues", base), dtype=float)
    b = np.asarray(getattr(pert, "eigenvalues", pert), dtype=float)
    if len(a) < m or len(b) < m:
        raise ValueError("both spectra need at least m eigenvalues")
    a, b = a[:m], b[:m]
    return np.abs(a - b) / (gamma * np.abs(a) + gamma)


def spectral_distance(b1, b2, m: int) -> float:
    """``max_{i<=m} |lam1_i - lam2_i|``; a lower bound for the operator distance on the shared band."""
    a = np.asarray(getattr(b1, "eigenvalues", b1), dtype=float)
    b = np.asarray(getattr(b2, "eigenvalues", b2), dtype=float)
    if m > len(a) or m > len(b):
        raise ValueError("m exceeds a basis size")
    return float(np.max(np.abs(a[:m] - b[:m]))) if m else 0.0


def propagator(laplacian, dense_max: int = 1200):
    """Full eigenbasis for small graphs, sparse heat semigroup above ``dense_max`` nodes."""
    if laplacian.shape[0] <= dense_max:
        return eigendecompose(laplacian, "full", dense_cap=max(dense_max, DENSE_CAP))
    return SparseHeat(laplacian)
