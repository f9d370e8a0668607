"""Deterministic dense linear algebra and seeded randomness.

All routines work on 64-bit float numpy arrays and are pure functions of
their inputs, so they are safe to call from multiple threads.  The
eigendecomposition is a cyclic Jacobi iteration implemented here rather
than delegated to LAPACK, which keeps results bit-identical across
platforms and lets us pin the tie-break and sign conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    NotPositiveSemidefiniteError,
    NumericFailureError,
)

_MASK64 = (1 << 64) - 1

# Internal stream used for deterministic starting vectors (power iteration).
_START_VECTOR_KEY = 0x150B0BE5


def as_matrix(m, name="matrix"):
    """Coerce to a finite 2-D float64 array, raising on bad input."""
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {a.shape}")
    if a.size and not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"{name} contains non-finite entries")
    return a


def _require_symmetric(a, name):
    if a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got {a.shape}")
    amax = float(np.max(np.abs(a))) if a.size else 0.0
    if amax > 0.0:
        asym = float(np.max(np.abs(a - a.T)))
        if asym > 1e-10 * amax:
            raise InvalidArgumentError(
                f"{name} is asymmetric: max |a - a.T| = {asym:g} "
                f"exceeds 1e-10 relative tolerance"
            )
    return 0.5 * (a + a.T)


@dataclass(frozen=True)
class EigenDecomposition:
    """Spectrum of a symmetric matrix, eigenvalues sorted descending.

    ``eigenvectors`` holds unit-norm eigenvectors as columns, matching
    the eigenvalue order.  Sign convention: the largest-magnitude entry
    of every eigenvector is positive.  Equal eigenvalues keep the stable
    order in which the Jacobi sweep produced them.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self):
        g = self.eigenvectors
        return (g * self.eigenvalues) @ g.T


def sym_eigendecompose(m, *, max_sweeps=60):
    """Full eigendecomposition of a symmetric matrix via cyclic Jacobi.

    Raises InvalidArgumentError for non-square or asymmetric input and
    NumericFailureError (with the sweep count) if the off-diagonal mass
    has not vanished after ``max_sweeps`` sweeps.
    """
    a = _require_symmetric(as_matrix(m), "matrix")
    n = a.shape[0]
    v = np.eye(n)
    if n == 0:
        return EigenDecomposition(np.empty(0), v)

    fro = float(np.linalg.norm(a))
    if fro == 0.0:
        return EigenDecomposition(np.zeros(n), v)
    tol = 1e-14 * fro
    # Pivots below this leave the total off-diagonal mass under tol even
    # if every one of them is skipped.
    small = tol / (n * n)

    converged = False
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= small:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e12:
                    t = 1.0 / (2.0 * tau)
                else:
                    t = math.copysign(1.0, tau) / (abs(tau) + math.hypot(1.0, tau))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                # Symmetry-preserving rotation in the (p, q) plane: rows
                # mirror columns exactly and the 2x2 block uses the exact
                # annihilation formulas.
                app, aqq = a[p, p], a[q, q]
                kp = c * a[:, p] - s * a[:, q]
                kq = s * a[:, p] + c * a[:, q]
                a[:, p] = kp
                a[p, :] = kp
                a[:, q] = kq
                a[q, :] = kq
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        converged = off <= tol
    if not converged:
        raise NumericFailureError(
            f"Jacobi eigendecomposition did not converge in {max_sweeps} sweeps "
            f"(off-diagonal norm {off:g})",
            iterations=max_sweeps,
        )

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    # Sign convention: largest-magnitude entry of each column positive.
    lead = np.argmax(np.abs(vecs), axis=0)
    flip = vecs[lead, np.arange(n)] < 0.0
    vecs[:, flip] *= -1.0
    return EigenDecomposition(vals, vecs)


@dataclass(frozen=True)
class JitterPolicy:
    """Diagonal-jitter escalation for nearly-PSD Cholesky inputs.

    The first attempt uses no jitter; each retry scales
    ``initial_relative * mean(diag)`` by another factor of ``growth``.
    """

    initial_relative: float = 1e-9
    growth: float = 10.0
    max_attempts: int = 6


@dataclass(frozen=True)
class CholeskyResult:
    lower: np.ndarray
    jitter: float


def _cholesky_lower(a):
    """Column Cholesky; returns None when a pivot is non-positive."""
    n = a.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    # Diagonal matrices (e.g. white-noise Gram) factor elementwise.
    if np.count_nonzero(a) == np.count_nonzero(np.diag(a)) and np.all(
        a == np.diag(np.diag(a))
    ):
        d = np.diag(a)
        if np.any(d < 0.0):
            return None
        return np.diag(np.sqrt(d))
    lower = np.zeros_like(a)
    for j in range(n):
        d = a[j, j] - lower[j, :j] @ lower[j, :j]
        if not (d > 0.0) or not np.isfinite(d):
            return None
        ljj = math.sqrt(d)
        lower[j, j] = ljj
        if j + 1 < n:
            lower[j + 1 :, j] = (a[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / ljj
    return lower


def cholesky_psd(m, policy=JitterPolicy()):
    """Lower-triangular factor of a (nearly) PSD symmetric matrix.

    Returns a CholeskyResult reporting the jitter actually added to the
    diagonal.  Raises NotPositiveSemidefiniteError after the policy's
    attempts are exhausted.
    """
    a = _require_symmetric(as_matrix(m), "matrix")
    n = a.shape[0]
    mean_diag = float(np.mean(np.diag(a))) if n else 0.0
    base = policy.initial_relative * (mean_diag if mean_diag > 0.0 else 1.0)
    jitters = [0.0] + [base * policy.growth**k for k in range(policy.max_attempts)]
    for jit in jitters:
        lower = _cholesky_lower(a + jit * np.eye(n) if jit else a)
        if lower is not None:
            return CholeskyResult(lower, jit)
    raise NotPositiveSemidefiniteError(
        f"matrix is not positive semidefinite within jitter policy "
        f"(max jitter tried {jitters[-1]:g})"
    )


@dataclass(frozen=True)
class PCAResult:
    """Principal axes of mean-centered rows.

    ``components`` holds eigenvectors of the sample covariance as
    columns; ``explained_ratio`` sums to 1 for non-degenerate input, and
    its partial sums give the variance fraction captured by the leading
    components.
    """

    components: np.ndarray
    eigenvalues: np.ndarray
    explained_ratio: np.ndarray


def pca(a):
    """PCA of an n-by-D data matrix (rows are observations)."""
    x = as_matrix(a, "data")
    n = x.shape[0]
    if n < 2:
        raise InvalidArgumentError(f"pca needs at least 2 rows, got {n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eig = sym_eigendecompose(cov)
    vals = np.maximum(eig.eigenvalues, 0.0)
    total = float(vals.sum())
    ratio = vals / total if total > 0.0 else np.zeros_like(vals)
    return PCAResult(eig.eigenvectors, vals, ratio)


def spectral_norm(m, *, max_iter=500, delta_tol=1e-12):
    """Largest singular value via power iteration on the Gram matrix.

    Iterates on the smaller of M.T @ M and M @ M.T with a deterministic
    start vector; stops early once successive estimates differ by less
    than ``delta_tol`` relative.
    """
    a = as_matrix(m)
    if a.size == 0 or not np.any(a):
        return 0.0
    gram = a.T @ a if a.shape[1] <= a.shape[0] else a @ a.T
    d = gram.shape[0]
    start = RngStream(_START_VECTOR_KEY, 0).gaussians(d)
    nrm = np.linalg.norm(start)
    vvec = start / nrm if nrm > 0 else np.ones(d) / math.sqrt(d)
    est = 0.0
    for _ in range(max_iter):
        w = gram @ vvec
        wnorm = float(np.linalg.norm(w))
        if wnorm == 0.0:
            return 0.0
        vvec = w / wnorm
        new_est = math.sqrt(float(vvec @ (gram @ vvec)))
        if abs(new_est - est) <= delta_tol * max(1.0, new_est):
            return new_est
        est = new_est
    return est


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Wraps a Philox 4x64 generator whose 128-bit key is exactly the
    (seed, stream_id) pair, so the same key reproduces the same sequence
    on every platform and worker count.  Gaussians come from numpy's
    ziggurat sampler on that stream.  A stream is single-owner: parallel
    work must use distinct stream ids, never share one instance.
    """

    def __init__(self, seed, stream_id=0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed & _MASK64, self.stream_id & _MASK64], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    @property
    def generator(self):
        """The underlying numpy Generator (advances this stream)."""
        return self._gen

    def child(self, stream_id):
        """Fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)

    def gaussian(self):
        return float(self._gen.standard_normal())

    def gaussians(self, *shape):
        return self._gen.standard_normal(shape if len(shape) > 1 else shape[0])

    def uniform(self):
        return float(self._gen.random())

    def uniforms(self, *shape):
        return self._gen.random(shape if len(shape) > 1 else shape[0])

    def uniform_choice(self, k):
        """Uniform index in [0, k)."""
        if k < 1:
            raise InvalidArgumentError(f"uniform_choice needs k >= 1, got {k}")
        return int(self._gen.integers(0, k))


def rng_stream(seed, stream_id=0):
    """Construct an RngStream (functional spelling of the constructor)."""
    return RngStream(seed, stream_id)
