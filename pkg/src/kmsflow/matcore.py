"""Dense complex matrix kernel.

Hermitian eigendecomposition, spectral matrix functions, logarithmic
means, minimal-norm least squares and seeded samplers.  Everything here
is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonHermitian, NonPositiveInput, NonSquare, NotPositive

HERM_TOL = 1e-12
POS_TOL = 1e-12
LOGMEAN_SERIES_CUTOFF = 1e-6
PINV_RCOND = 1e-10
DENSITY_FLOOR = 1e-6


@dataclass(frozen=True)
class HermEig:
    values: np.ndarray   # ascending, real
    vectors: np.ndarray  # unitary, columns are eigenvectors

    def rebuild(self) -> np.ndarray:
        V = self.vectors
        return (V * self.values) @ V.conj().T


def _check_square(A):
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NonSquare(f"expected a square matrix, got shape {A.shape}")
    return A


def herm_residual(A) -> float:
    A = np.asarray(A)
    return float(np.linalg.norm(A - A.conj().T))


def is_hermitian(A, tol=HERM_TOL) -> bool:
    A = np.asarray(A)
    return herm_residual(A) <= tol * (1.0 + np.linalg.norm(A))


def herm_eig(A) -> HermEig:
    """Eigendecomposition of a Hermitian matrix, eigenvalues ascending."""
    A = _check_square(A).astype(complex)
    res = herm_residual(A)
    if res > HERM_TOL * (1.0 + np.linalg.norm(A)):
        raise NonHermitian("matrix is not Hermitian", residual=res)
    A = 0.5 * (A + A.conj().T)
    w, V = np.linalg.eigh(A)
    # fix the phase of each column so runs are reproducible
    for j in range(V.shape[1]):
        i = int(np.argmax(np.abs(V[:, j]) > 1e-8))
        ph = V[i, j] / abs(V[i, j])
        V[:, j] = V[:, j] / ph
    return HermEig(w.real.copy(), V)


def mat_fn(A, f: str, s: float | None = None) -> np.ndarray:
    """Apply f in {'log', 'exp', 'power'} spectrally to a Hermitian matrix."""
    e = herm_eig(A)
    w = e.values
    if f == "exp":
        g = np.exp(w)
    elif f == "log":
        if w.min() <= POS_TOL:
            raise NotPositive("log of a matrix with eigenvalue <= tolerance", residual=float(w.min()))
        g = np.log(w)
    elif f == "power":
        if s is None:
            raise ValueError("power needs an exponent")
        if s == 1:
            return np.asarray(A, dtype=complex).copy()
        if s < 0 or not float(s).is_integer():
            if w.min() <= POS_TOL:
                raise NotPositive("negative or fractional power of a non-positive matrix",
                                  residual=float(w.min()))
        g = np.power(w.astype(complex) if w.min() < 0 else w, s)
    else:
        raise ValueError(f"unknown matrix function {f!r}")
    V = e.vectors
    return (V * g) @ V.conj().T


def logm(A):
    return mat_fn(A, "log")


def expm_h(A):
    return mat_fn(A, "exp")


def powm(A, s):
    return mat_fn(A, "power", s)


def log_mean(a: float, b: float) -> float:
    """Logarithmic mean, equal to the integral of a^s b^(1-s) over [0, 1]."""
    if a <= 0 or b <= 0:
        raise NonPositiveInput(f"log_mean needs positive arguments, got {a}, {b}")
    d = math.log(b / a)
    if abs(d) < LOGMEAN_SERIES_CUTOFF:
        return a * (1.0 + d / 2.0 + d * d / 12.0)
    return (a - b) / (math.log(a) - math.log(b))


def log_mean_array(p, q):
    """Vectorized log_mean with the same near-diagonal series."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(p <= 0) or np.any(q <= 0):
        raise NonPositiveInput("log_mean needs positive arguments")
    p, q = np.broadcast_arrays(p, q)
    d = np.log(q) - np.log(p)
    out = np.empty(p.shape)
    small = np.abs(d) < LOGMEAN_SERIES_CUTOFF
    out[small] = p[small] * (1.0 + d[small] / 2.0 + d[small] ** 2 / 12.0)
    big = ~small
    out[big] = (q[big] - p[big]) / d[big]
    return out


def pinv_apply(L, b, rcond: float = PINV_RCOND):
    """Minimal-norm least-squares solution of L x = b and the residual norm."""
    L = np.asarray(L)
    b = np.asarray(b)
    U, sv, Vh = np.linalg.svd(L, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        x = np.zeros(L.shape[1], dtype=np.result_type(L, b))
        return x, float(np.linalg.norm(b))
    keep = sv > rcond * sv[0]
    c = (U[:, keep].conj().T @ b) / sv[keep]
    x = Vh[keep].conj().T @ c
    return x, float(np.linalg.norm(L @ x - b))


class Rng:
    """Seeded sample stream.  Same seed, same samples."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & ((1 << 64) - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.counter = 0

    @property
    def gen(self) -> np.random.Generator:
        return self._gen

    def normal(self, size):
        self.counter += 1
        return self._gen.normal(size=size)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        self.counter += 1
        return self._gen.uniform(lo, hi, size=size)

    def cnormal(self, shape):
        return self.normal(shape) + 1j * self.normal(shape)


def sample(rng: Rng, kind: str, n: int, scale: float = 1.0) -> np.ndarray:
    """Draw a 'hermitian', 'density' or 'unitary' n x n matrix."""
    if kind == "hermitian":
        G = rng.cnormal((n, n))
        A = 0.5 * (G + G.conj().T)
        nrm = np.linalg.norm(A, 2)
        return A * (scale / nrm) if nrm > 0 else A
    if kind == "density":
        if n == 1:
            return np.ones((1, 1), dtype=complex)
        A = sample(rng, "hermitian", n, scale=scale * 2.0)
        e = herm_eig(A)
        w = np.exp(e.values)
        # mix in the floor so the trace stays exactly n
        w = w / w.sum() * n * (1.0 - DENSITY_FLOOR) + DENSITY_FLOOR
        V = e.vectors
        D = (V * w) @ V.conj().T
        return 0.5 * (D + D.conj().T)
    if kind == "unitary":
        Z = rng.cnormal((n, n))
        Q, R = np.linalg.qr(Z)
        ph = np.diag(R) / np.abs(np.diag(R))
        return Q * ph
    raise ValueError(f"unknown sample kind {kind!r}")
