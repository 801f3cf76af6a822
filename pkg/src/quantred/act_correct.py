"""Closed-form ridge update absorbing activation quantization error.

Quantizing activations perturbs a linear layer's output by W dx per
sample. The minimizer of

    (1/N) sum_n ||dW xbar_n + W dx_n||^2 + lambda1 ||dW||_F^2

over the weight update dW is

    dW* = -W E[dx xbar^T] (E[xbar xbar^T] + lambda1 I)^{-1}

with both expectations taken as 1/N sums over the calibration batch. The
updated weights W + dW* then feed weight quantization, whose channel
scales are calibrated after this step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import solve_rows, spd_factor
from .moments import InsufficientSamplesError, error_cross_moment


@dataclass(frozen=True)
class ActivationCorrection:
    delta_w: np.ndarray
    updated_w: np.ndarray


def solve_activation_correction(
    w: np.ndarray, a_fp: np.ndarray, a_q: np.ndarray, lambda1: float
) -> ActivationCorrection:
    """Solve for the optimal weight update given a paired calibration batch.

    The system matrix is factored once and shared across all output
    channels (one right-hand side per row of W). Raises
    SingularSystemError when lambda1 = 0 leaves the system rank deficient.
    """
    w = np.asarray(w, dtype=np.float64)
    a_fp = np.asarray(a_fp, dtype=np.float64)
    a_q = np.asarray(a_q, dtype=np.float64)
    if w.ndim != 2 or a_fp.ndim != 2 or a_fp.shape != a_q.shape:
        raise ValueError("expected 2-D w and a paired (N, D_in) batch")
    if w.shape[1] != a_fp.shape[1]:
        raise ValueError(
            f"w D_in {w.shape[1]} does not match batch D_in {a_fp.shape[1]}"
        )
    n = a_fp.shape[0]
    if n < 2:
        raise InsufficientSamplesError(f"need at least 2 samples, got {n}")
    if lambda1 < 0:
        raise ValueError("lambda1 must be >= 0")

    cross = error_cross_moment(a_fp, a_q)
    second = a_q.T @ a_q / n
    system = second + lambda1 * np.eye(w.shape[1])
    factor = spd_factor(system)
    delta_w = -solve_rows(factor, w @ cross)
    return ActivationCorrection(delta_w=delta_w, updated_w=w + delta_w)


def activation_correction_objective(
    w: np.ndarray,
    delta_w: np.ndarray,
    a_fp: np.ndarray,
    a_q: np.ndarray,
    lambda1: float,
) -> float:
    """Empirical value of the regularized correction objective at delta_w."""
    w = np.asarray(w, dtype=np.float64)
    delta_w = np.asarray(delta_w, dtype=np.float64)
    a_fp = np.asarray(a_fp, dtype=np.float64)
    a_q = np.asarray(a_q, dtype=np.float64)
    n = a_fp.shape[0]
    resid = delta_w @ a_q.T + w @ (a_q - a_fp).T
    return float(np.sum(resid * resid) / n + lambda1 * np.sum(delta_w * delta_w))
