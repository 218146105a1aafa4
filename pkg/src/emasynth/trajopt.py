"""Maximum likelihood parameter generation (MLPG).

Recovers a smooth static trajectory from predicted [static | delta |
delta-delta] means by weighted least squares: per output dimension d,
minimize (W c - mu)' P (W c - mu), where W stacks the three regression
windows and P holds the inverse per-stream variances.  The normal matrix
W' P W is symmetric positive definite and banded (bandwidth 2 for the
default windows), so each dimension is a banded Cholesky solve.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse
from scipy.linalg import solveh_banded

from .errors import DomainError
from .features import DEFAULT_WINDOWS, WindowSet


def _stream_operator(T: int, win: tuple) -> scipy.sparse.csr_matrix:
    """T x T operator applying one window along time with edge replication.

    Out-of-range taps fold onto the boundary columns, which reproduces
    first/last-frame replication exactly.
    """
    c = len(win) // 2
    rows, cols, vals = [], [], []
    for t in range(T):
        for j, w in enumerate(win):
            if w == 0.0:
                continue
            rows.append(t)
            cols.append(min(max(t + j - c, 0), T - 1))
            vals.append(float(w))
    op = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(T, T))
    return op.tocsr()


def build_window_matrix(T: int, windows: WindowSet = DEFAULT_WINDOWS) -> scipy.sparse.csr_matrix:
    """Sparse 3T x T window matrix with rows interleaved per frame.

    Rows 3t, 3t+1, 3t+2 hold the static/delta/delta-delta windows centered
    at column t; W @ c reproduces the stacked features of c exactly.
    """
    if T < 1:
        raise DomainError(f"T must be >= 1, got {T}")
    streams = [_stream_operator(T, win) for _, win in windows.items()]
    interleave = scipy.sparse.lil_matrix((3 * T, T))
    for s, op in enumerate(streams):
        dense_rows = op.tocoo()
        for r, cidx, v in zip(dense_rows.row, dense_rows.col, dense_rows.data):
            interleave[3 * r + s, cidx] += v
    return interleave.tocsr()


def _banded_upper(mat: scipy.sparse.spmatrix, bandwidth: int) -> np.ndarray:
    """Extract the upper-banded form used by scipy.linalg.solveh_banded."""
    T = mat.shape[0]
    ab = np.zeros((bandwidth + 1, T))
    for k in range(bandwidth + 1):
        ab[bandwidth - k, k:] = mat.diagonal(k)
    return ab


def mlpg(
    means: np.ndarray,
    variances: np.ndarray,
    windows: WindowSet = DEFAULT_WINDOWS,
) -> np.ndarray:
    """Solve the MLPG problem for every output dimension.

    Parameters
    ----------
    means : (T, 3D) array
        Predicted feature means, column blocks [static | delta | delta-delta].
    variances : (3D,) array
        Positive per-dimension variances (global diagonal model).  np.inf is
        allowed for delta/delta-delta entries and acts as weight zero.
    windows : WindowSet
        Must match the windows used to build the training targets.

    Returns
    -------
    (T, D) array of static trajectories.
    """
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if means.ndim != 2 or means.shape[1] % 3 != 0:
        raise DomainError(f"means must be (T, 3D), got shape {means.shape}")
    T, threeD = means.shape
    D = threeD // 3
    if variances.shape != (threeD,):
        raise DomainError(
            f"variances must have shape ({threeD},), got {variances.shape}"
        )
    if np.any(variances <= 0) or np.any(np.isnan(variances)):
        raise DomainError("variances must be strictly positive")

    precisions = np.where(np.isinf(variances), 0.0, 1.0 / variances)
    if np.any(precisions[:D] <= 0):
        raise DomainError("static-stream variances must be finite")

    streams = [_stream_operator(T, win) for _, win in windows.items()]
    half = windows.half_width
    bandwidth = min(2 * half, T - 1)
    grams = [_banded_upper(op.T @ op, bandwidth) for op in streams]

    # W_s' mu_s for all dimensions at once, per stream.
    adjoint_means = [
        streams[s].T @ means[:, s * D:(s + 1) * D] for s in range(3)
    ]

    out = np.empty((T, D))
    for d in range(D):
        prec = precisions[[d, D + d, 2 * D + d]]
        ab = prec[0] * grams[0] + prec[1] * grams[1] + prec[2] * grams[2]
        rhs = (
            prec[0] * adjoint_means[0][:, d]
            + prec[1] * adjoint_means[1][:, d]
            + prec[2] * adjoint_means[2][:, d]
        )
        out[:, d] = solveh_banded(ab, rhs, lower=False)
    return out


def mlpg_objective(
    trajectory: np.ndarray,
    means: np.ndarray,
    variances: np.ndarray,
    windows: WindowSet = DEFAULT_WINDOWS,
) -> float:
    """Weighted squared error of a candidate static trajectory.

    Evaluates (W c - mu)' P (W c - mu) summed over dimensions; used by the
    optimality tests.
    """
    trajectory = np.asarray(trajectory, dtype=float)
    means = np.asarray(means, dtype=float)
    variances = np.asarray(variances, dtype=float)
    T, D = trajectory.shape
    precisions = np.where(np.isinf(variances), 0.0, 1.0 / variances)
    streams = [_stream_operator(T, win) for _, win in windows.items()]
    total = 0.0
    for s in range(3):
        resid = streams[s] @ trajectory - means[:, s * D:(s + 1) * D]
        total += float(np.sum(resid**2 * precisions[s * D:(s + 1) * D]))
    return total
