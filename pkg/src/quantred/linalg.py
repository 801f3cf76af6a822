"""Dense linear-algebra helpers shared by the ridge solves."""

from __future__ import annotations

import numpy as np
import scipy.linalg


class SingularSystemError(Exception):
    """A ridge system matrix is singular or indefinite."""


def spd_factor(matrix: np.ndarray):
    """Cholesky-factor a symmetric positive definite system matrix.

    One factorization is reused across many right-hand sides; the explicit
    inverse is never formed. Raises SingularSystemError when the matrix is
    not positive definite, which for our ridge systems means the
    regularization strength is zero while the moment matrix is rank
    deficient.
    """
    try:
        return scipy.linalg.cho_factor(matrix, lower=True, check_finite=False)
    except scipy.linalg.LinAlgError as exc:
        raise SingularSystemError(
            "ridge system matrix is not positive definite; "
            "use a regularization strength > 0"
        ) from exc


def solve_spd(factor, rhs: np.ndarray) -> np.ndarray:
    """Solve A x = rhs given a factor from spd_factor."""
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def solve_rows(factor, rows: np.ndarray) -> np.ndarray:
    """Solve X A = rows for X, with A the symmetric factored matrix.

    `rows` holds one right-hand side per row, so a whole weight matrix can
    be corrected with a single factorization.
    """
    return scipy.linalg.cho_solve(factor, rows.T, check_finite=False).T
