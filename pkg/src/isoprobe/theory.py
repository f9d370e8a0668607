"""Machine checks of the model's structural guarantees.

Covers the logit shift attack (training loss and predictive distributions
are invariant to a constant logit shift while any thresholded readout of
the logits is zeroed), the finite-difference verification of the
attention Jacobian bound, the closed-form rank-m score matrix that
minimizes the reconstruction objective, the small-score-matrix attention
approximation, and the partition-function isotropy ratio.

Attention here is deliberately the unmasked map used in the bound
statements; the trained model applies the same map causally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    CheckFailureError,
    InvalidArgumentError,
    NumericFailureError,
    RankDeficiencyError,
)
from .model import attention_weights, self_attention, softmax, window_forward
from .numerics import RngStream, as_matrix, spectral_norm, sym_eigendecompose


@dataclass(frozen=True)
class PartitionValue:
    log_value: float
    value: float


def partition_function(encoding, embed):
    """Z = sum_i exp(<encoding, embed_i>), computed with max-subtraction."""
    e = np.asarray(encoding, dtype=np.float64)
    table = as_matrix(embed, "embed")
    if not np.all(np.isfinite(e)):
        raise InvalidArgumentError("encoding contains non-finite entries")
    logits = table @ e
    m = float(logits.max())
    log_z = m + math.log(float(np.sum(np.exp(logits - m))))
    if not math.isfinite(log_z):
        raise NumericFailureError("partition function overflowed after stabilization")
    value = math.exp(log_z) if log_z < 709.0 else math.inf
    if not math.isfinite(value):
        raise NumericFailureError(
            f"partition function linear value overflows float64 (log Z = {log_z:g})"
        )
    return PartitionValue(log_z, value)


@dataclass(frozen=True)
class IsotropyPartition:
    """min/max partition-function ratio over the eigenvector probe set."""

    value: float
    degenerate: bool
    log_z_min: float
    log_z_max: float


def isotropy_partition(rows):
    """Partition-function stability ratio I in (0, 1].

    Probes are the +/- unit eigenvectors of rows.T @ rows; using both signs
    makes the ratio invariant under orthogonal rotation of the rows.
    """
    x = as_matrix(rows, "rows")
    if x.shape[0] < 2:
        raise InvalidArgumentError("isotropy needs at least 2 embedding rows")
    if not np.any(x):
        return IsotropyPartition(1.0, True, math.log(x.shape[0]), math.log(x.shape[0]))
    corr = x.T @ x
    eig = sym_eigendecompose(corr)
    log_zs = []
    for gamma in eig.eigenvectors.T:
        for sign in (1.0, -1.0):
            logits = x @ (sign * gamma)
            m = float(logits.max())
            log_zs.append(m + math.log(float(np.sum(np.exp(logits - m)))))
    lo, hi = min(log_zs), max(log_zs)
    return IsotropyPartition(math.exp(lo - hi), False, lo, hi)


@dataclass(frozen=True)
class DownstreamHead:
    """Thresholded linear readout of the logits: sum_i a_i relu(z_i - b_i)."""

    coefficients: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.coefficients, dtype=np.float64)
        b = np.asarray(self.thresholds, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise InvalidArgumentError("head coefficients/thresholds must be equal-length vectors")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise InvalidArgumentError("head parameters must be finite")
        object.__setattr__(self, "coefficients", a)
        object.__setattr__(self, "thresholds", b)


def sample_heads(count, vocab_size, stream):
    """Random verification heads with standard-normal entries."""
    return [
        DownstreamHead(stream.gaussians(vocab_size), stream.gaussians(vocab_size))
        for _ in range(count)
    ]


def downstream_value(logits, head):
    """Exact head value plus the active index set {i : z_i > b_i}."""
    z = np.asarray(logits, dtype=np.float64)
    active = np.flatnonzero(z > head.thresholds)
    value = float(np.sum(head.coefficients[active] * (z[active] - head.thresholds[active])))
    return value, active


def _mean_nll(logits, targets):
    total = 0.0
    for row, target in zip(logits, targets):
        z = row - row.max()
        total += float(np.log(np.sum(np.exp(z))) - z[int(target)])
    return total / len(targets)


@dataclass(frozen=True)
class ShiftAttackRecord:
    """Outcome of the constant-shift logit attack for one head."""

    tau: float
    shifted_logits: np.ndarray
    max_tv_distance: float
    loss_before: float
    loss_after: float
    max_downstream_abs: float
    relu_margin: float  # max_j shifted z_j - b_j; < 0 forces the readout to 0
    passed: bool


def shift_attack(logits, targets, head):
    """Shift all logits so every head unit is inactive yet softmax and
    loss never move.

    tau = min_j b_j - max logits - 1, applied uniformly to every
    position's logit vector.
    """
    z = as_matrix(np.atleast_2d(logits), "logits")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (z.shape[0],):
        raise InvalidArgumentError("need one target per logit row")
    tau = float(head.thresholds.min() - z.max() - 1.0)
    shifted = z + tau
    max_tv = 0.0
    max_down = 0.0
    for row, srow in zip(z, shifted):
        tv = 0.5 * float(np.sum(np.abs(softmax(row) - softmax(srow))))
        max_tv = max(max_tv, tv)
        value, _ = downstream_value(srow, head)
        max_down = max(max_down, abs(value))
    loss_before = _mean_nll(z, targets)
    loss_after = _mean_nll(shifted, targets)
    relu_margin = float((shifted - head.thresholds[None, :]).max())
    passed = (
        max_tv <= 1e-12
        and abs(loss_after - loss_before) <= 1e-12
        and max_down == 0.0
        and relu_margin < 0.0
    )
    return ShiftAttackRecord(
        tau=tau,
        shifted_logits=shifted,
        max_tv_distance=max_tv,
        loss_before=loss_before,
        loss_after=loss_after,
        max_downstream_abs=max_down,
        relu_margin=relu_margin,
        passed=passed,
    )


def collect_window_logits(params, windows):
    """Stack next-token logit rows and targets over whole windows."""
    rows, targets = [], []
    for window in windows:
        ids = np.asarray(window, dtype=np.int64)
        _, logits = window_forward(ids, params)
        rows.append(logits[:-1])
        targets.append(ids[1:])
    return np.vstack(rows), np.concatenate(targets)


def fd_jacobian(fn, x0, h):
    """Central-difference Jacobian of an (n, D) -> (n, D) map, flattened
    row-major on both sides."""
    x0 = np.asarray(x0, dtype=np.float64)
    n, d = x0.shape
    jac = np.empty((n * d, n * d))
    for j in range(n):
        for e in range(d):
            plus = x0.copy()
            plus[j, e] += h
            minus = x0.copy()
            minus[j, e] -= h
            jac[:, j * d + e] = (fn(plus) - fn(minus)).ravel() / (2.0 * h)
    return jac


def jacobian_fd(rows, score_matrix, h=None):
    """Finite-difference Jacobian of unmasked attention at rows."""
    x = as_matrix(rows, "rows")
    if h is None:
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        h = 1e-6 * (1.0 + peak)
    return fd_jacobian(lambda v: self_attention(v, score_matrix, causal=False), x, h)


@dataclass(frozen=True)
class BoundReport:
    """Attention-Jacobian norm bound versus its measured value.

    ``bound_value`` is the proven form (main term + residual + row
    count); ``main_text_bound`` omits the additive row count and is
    reported for comparison only.
    """

    bound_value: float
    main_term: float
    residual_delta: float
    n_term: float
    main_text_bound: float
    measured: float
    attention: np.ndarray
    margin: float
    main_text_violated: bool


def attention_jacobian_bound(rows, score_matrix, *, fd_step=None):
    """Evaluate the spectral-norm bound on the attention Jacobian and
    measure the actual norm by central differences."""
    x = as_matrix(rows, "rows")
    score_matrix = as_matrix(score_matrix, "lambda")
    n = x.shape[0]
    weights = attention_weights(x, score_matrix, causal=False)
    lam2 = spectral_norm(score_matrix)
    centers = weights @ x  # row i holds sum_j p_ij psi_j
    resid = x - centers
    resid_sq = np.sum(resid * resid, axis=1)
    main = lam2 * float(np.sum((np.diag(weights) + 0.5) * resid_sq))
    # |psi_j - center_i|^2 for every (i, j)
    dists = (
        np.sum(x * x, axis=1)[None, :]
        - 2.0 * centers @ x.T
        + np.sum(centers * centers, axis=1)[:, None]
    )
    cross = float(np.sum(weights * dists) - np.sum(np.diag(weights) * resid_sq))
    delta = lam2 * cross + 0.5 * lam2 * float(np.sum(x * x))
    bound = main + delta + n
    measured = spectral_norm(jacobian_fd(x, score_matrix, fd_step))
    return BoundReport(
        bound_value=bound,
        main_term=main,
        residual_delta=delta,
        n_term=float(n),
        main_text_bound=main + delta,
        measured=measured,
        attention=weights,
        margin=bound - measured,
        main_text_violated=measured > main + delta,
    )


@dataclass(frozen=True)
class ScoreMatrixSolution:
    """Closed-form rank-m minimizer of the reconstruction objective."""

    matrix: np.ndarray
    objective_value: float
    trailing_eigsum: float
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int


def center_rows(rows):
    x = as_matrix(rows, "rows")
    return x - x.mean(axis=0)


def reconstruction_objective(centered_rows, score_matrix):
    """sum_i |psi_i - (rows.T @ rows) @ score_matrix @ psi_i|^2 on centered rows."""
    x = np.asarray(centered_rows, dtype=np.float64)
    corr = x.T @ x
    resid = x - x @ (corr @ score_matrix).T
    return float(np.sum(resid * resid))


def optimal_score_matrix_solution(rows, rank):
    """Closed-form optimum score_matrix* = sum_{i<=m} (1/eig_i) v_i v_i^T.

    Rows are centered first; requires the top m eigenvalues of the
    correlation matrix to be strictly positive.  The objective at the
    optimum must equal the trailing eigenvalue sum, which is asserted.
    """
    x = center_rows(rows)
    d = x.shape[1]
    m = int(rank)
    if not 1 <= m <= d:
        raise InvalidArgumentError(f"rank m must be in [1, {d}], got {m}")
    corr = x.T @ x
    eig = sym_eigendecompose(corr)
    vals, vecs = eig.eigenvalues, eig.eigenvectors
    if vals[0] <= 0.0 or vals[m - 1] <= 1e-12 * vals[0]:
        raise RankDeficiencyError(
            f"correlation matrix lacks {m} strictly positive eigenvalues "
            f"(lambda_1 = {vals[0]:g}, lambda_m = {vals[m - 1]:g})"
        )
    best_matrix = (vecs[:, :m] / vals[:m]) @ vecs[:, :m].T
    objective = reconstruction_objective(x, best_matrix)
    trailing = float(np.sum(vals[m:]))
    tol = max(1e-8 * trailing, 1e-12 * float(np.sum(vals)), 1e-10)
    if abs(objective - trailing) > tol:
        raise CheckFailureError(
            f"optimal objective {objective:g} does not match trailing "
            f"eigenvalue sum {trailing:g}"
        )
    return ScoreMatrixSolution(
        matrix=best_matrix,
        objective_value=objective,
        trailing_eigsum=trailing,
        eigenvalues=vals,
        eigenvectors=vecs,
        rank=m,
    )


def _project_rank_m_symmetric(score_matrix, rank):
    # The descent oracle deliberately uses LAPACK so it shares nothing
    # with the Jacobi path under test.
    sym = 0.5 * (score_matrix + score_matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    order = np.argsort(-np.abs(vals))[:rank]
    keep = vecs[:, order]
    return (keep * vals[order]) @ keep.T


def rank_m_descent(rows, rank, *, starts=20, iters=300, stream=None):
    """Projected gradient descent over rank-m symmetric score matrices.

    Independent competitor search for the closed-form optimum; returns
    the best objective value found across random restarts.
    """
    x = center_rows(rows)
    d = x.shape[1]
    m = int(rank)
    if stream is None:
        stream = RngStream(0, 0)
    corr = x.T @ x
    top = float(np.linalg.eigvalsh(corr)[-1])
    if top <= 0.0:
        raise RankDeficiencyError("correlation matrix is zero")
    step = 0.45 / top**3
    best = math.inf
    for _ in range(starts):
        w = stream.gaussians(d, m) if m > 0 else np.zeros((d, 1))
        score_matrix = w @ w.T
        score_matrix *= 1.0 / (top * max(float(np.linalg.norm(score_matrix)), 1e-12))
        score_matrix = _project_rank_m_symmetric(score_matrix, m)
        prev = reconstruction_objective(x, score_matrix)
        for _ in range(iters):
            grad = -2.0 * corr @ (np.eye(d) - corr @ score_matrix) @ corr
            score_matrix = _project_rank_m_symmetric(score_matrix - step * grad, m)
            value = reconstruction_objective(x, score_matrix)
            if prev - value < 1e-14 * max(prev, 1.0):
                prev = value
                break
            prev = value
        best = min(best, prev)
    return best


@dataclass(frozen=True)
class ApproxSweepRow:
    rho: float
    max_prob_error: float
    substitution_error: float


def small_score_approximation(rows, direction, rhos=(1e-3, 1e-2, 1e-1, 1.0), *, center=True):
    """Error table for the first-order attention-weight approximation
    p_ij ~ 1/n + psi_i.T score_matrix psi_j / n across score-matrix norms.

    Also reports how far sum_i |psi_i - rows.T p_i|^2 sits from the
    substituted objective sum_i |psi_i - (rows.T rows) score_matrix psi_i|^2.
    """
    x = center_rows(rows) if center else as_matrix(rows, "rows")
    base = as_matrix(direction, "direction")
    base_norm = float(np.linalg.norm(base))
    if base_norm == 0.0:
        raise InvalidArgumentError("direction matrix must be nonzero")
    n = x.shape[0]
    corr = x.T @ x
    rows = []
    for rho in rhos:
        score_matrix = base * (rho / base_norm)
        weights = attention_weights(x, score_matrix, causal=False)
        scores = x @ score_matrix @ x.T
        approx = 1.0 / n + scores / n
        max_err = float(np.max(np.abs(weights - approx)))
        resid = x - weights @ x
        lhs = float(np.sum(resid * resid))
        sub = x - x @ (corr @ score_matrix).T
        rhs = float(np.sum(sub * sub))
        rows.append(ApproxSweepRow(float(rho), max_err, abs(lhs - rhs)))
    return rows
