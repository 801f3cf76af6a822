"""Uniform affine and log-sqrt2 quantizers with MSE grid calibration.

Uniform codes are clip(round(x / s) + z, 0, 2^b - 1) with dequantization
s * (codes - z); rounding is always half-to-even. The log-sqrt2 quantizer
covers post-softmax activations: codes are clip(round(-2 * log2(x / s)),
0, 2^b - 1) and dequantize to s * 2^floor(-q / 2) * ((sqrt(2) - 1) * odd(q)
+ 1), so even codes land on powers of two and odd codes halfway between
them in log space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SQRT2 = float(np.sqrt(2.0))

# scale candidates alpha * s_maxabs, alpha = 0.500 .. 1.200 step 0.005
ALPHA_GRID = np.arange(100, 241, dtype=np.float64) / 200.0

FAMILIES = ("uniform", "log_sqrt2")
GRANULARITIES = ("per_tensor", "per_channel")


@dataclass(frozen=True)
class UniformParams:
    scale: float
    zero_point: int
    bits: int
    degenerate: bool = False


@dataclass(frozen=True)
class LogSqrt2Params:
    scale: float
    bits: int
    degenerate: bool = False


@dataclass(frozen=True)
class QuantScheme:
    """Calibrated quantizer family plus one params entry per granule."""

    family: str
    granularity: str
    bits: int
    params: tuple

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.family == "log_sqrt2" and self.granularity == "per_channel":
            raise ValueError("log_sqrt2 is only used per tensor")
        if self.granularity == "per_tensor" and len(self.params) != 1:
            raise ValueError("per_tensor scheme must hold exactly one params entry")


def uniform_codes(x: np.ndarray, params: UniformParams, rounding: str = "nearest") -> np.ndarray:
    """Integer codes of x. rounding selects nearest (half-to-even), floor, or ceil."""
    x = np.asarray(x, dtype=np.float64)
    t = x / params.scale
    if rounding == "nearest":
        t = np.rint(t)
    elif rounding == "floor":
        t = np.floor(t)
    elif rounding == "ceil":
        t = np.ceil(t)
    else:
        raise ValueError(f"unknown rounding {rounding!r}")
    qmax = (1 << params.bits) - 1
    return np.clip(t.astype(np.int64) + params.zero_point, 0, qmax)


def dequantize_uniform(codes: np.ndarray, params: UniformParams) -> np.ndarray:
    return params.scale * (np.asarray(codes, dtype=np.int64) - params.zero_point).astype(np.float64)


def quantize_uniform(x: np.ndarray, params: UniformParams):
    """Return (codes, dequantized values) on the lattice {s * (q - z)}."""
    codes = uniform_codes(x, params)
    return codes, dequantize_uniform(codes, params)


def _log_floor_value(params: LogSqrt2Params) -> float:
    # smallest representable magnitude, the image of the largest code
    return params.scale * 2.0 ** (-((1 << params.bits) - 1) / 2.0)


def log_sqrt2_codes(x: np.ndarray, params: LogSqrt2Params) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size and float(x.min()) < 0.0:
        raise ValueError("log_sqrt2 quantizer requires nonnegative inputs")
    # zero and underflowing inputs clamp to the smallest representable value
    xe = np.maximum(x, _log_floor_value(params))
    qmax = (1 << params.bits) - 1
    codes = np.rint(-2.0 * np.log2(xe / params.scale)).astype(np.int64)
    return np.clip(codes, 0, qmax)


def dequantize_log_sqrt2(codes: np.ndarray, params: LogSqrt2Params) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    exponent = np.floor_divide(-codes, 2)
    odd = (codes % 2).astype(np.float64)
    return params.scale * np.ldexp(1.0, exponent) * ((SQRT2 - 1.0) * odd + 1.0)


def quantize_log_sqrt2(x: np.ndarray, params: LogSqrt2Params):
    codes = log_sqrt2_codes(x, params)
    return codes, dequantize_log_sqrt2(codes, params)


def _grid_search(x, bits, s_base, quant_fn):
    # ties go to the larger scale: ascending grid with <= replacement
    best_scale = None
    best_mse = None
    best_extra = None
    for alpha in ALPHA_GRID:
        scale = float(alpha * s_base)
        mse, extra = quant_fn(x, scale)
        if best_mse is None or mse <= best_mse:
            best_mse, best_scale, best_extra = mse, scale, extra
    return best_scale, best_extra


def calibrate_uniform(values: np.ndarray, bits: int) -> UniformParams:
    """Grid-search the uniform scale/zero-point minimizing reconstruction MSE."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if bits < 2:
        raise ValueError("bit width must be >= 2")
    if values.size == 0:
        return UniformParams(scale=1.0, zero_point=0, bits=bits, degenerate=True)
    lo = float(values.min())
    hi = float(values.max())
    if hi == lo:
        return UniformParams(scale=1.0, zero_point=0, bits=bits, degenerate=True)
    qmax = (1 << bits) - 1
    s_base = (hi - lo) / qmax

    def eval_scale(x, scale):
        z = int(np.clip(np.rint(-lo / scale), 0, qmax))
        p = UniformParams(scale=scale, zero_point=z, bits=bits)
        _, deq = quantize_uniform(x, p)
        return float(np.mean((x - deq) ** 2)), z

    scale, z = _grid_search(values, bits, s_base, eval_scale)
    return UniformParams(scale=scale, zero_point=z, bits=bits)


def calibrate_log_sqrt2(values: np.ndarray, bits: int) -> LogSqrt2Params:
    values = np.asarray(values, dtype=np.float64).ravel()
    if bits < 2:
        raise ValueError("bit width must be >= 2")
    if values.size and float(values.min()) < 0.0:
        raise ValueError("log_sqrt2 calibration requires nonnegative inputs")
    hi = float(values.max()) if values.size else 0.0
    if hi <= 0.0:
        return LogSqrt2Params(scale=1.0, bits=bits, degenerate=True)

    def eval_scale(x, scale):
        p = LogSqrt2Params(scale=scale, bits=bits)
        _, deq = quantize_log_sqrt2(x, p)
        return float(np.mean((x - deq) ** 2)), None

    scale, _ = _grid_search(values, bits, hi, eval_scale)
    return LogSqrt2Params(scale=scale, bits=bits)


def calibrate_scale(x: np.ndarray, family: str, bits: int, granularity: str) -> QuantScheme:
    """Calibrate a scheme: per-tensor over all elements, per-channel over rows."""
    x = np.asarray(x, dtype=np.float64)
    if granularity == "per_tensor":
        if family == "uniform":
            params = (calibrate_uniform(x, bits),)
        elif family == "log_sqrt2":
            params = (calibrate_log_sqrt2(x, bits),)
        else:
            raise ValueError(f"unknown family {family!r}")
    elif granularity == "per_channel":
        if family != "uniform":
            raise ValueError("per_channel calibration is uniform only")
        if x.ndim != 2:
            raise ValueError("per_channel calibration expects a 2-D weight matrix")
        params = tuple(calibrate_uniform(row, bits) for row in x)
    else:
        raise ValueError(f"unknown granularity {granularity!r}")
    return QuantScheme(family=family, granularity=granularity, bits=bits, params=params)


def quantize_with_scheme(x: np.ndarray, scheme: QuantScheme):
    """Quantize x under a calibrated scheme; returns (codes, dequantized)."""
    x = np.asarray(x, dtype=np.float64)
    if scheme.granularity == "per_tensor":
        p = scheme.params[0]
        if scheme.family == "uniform":
            return quantize_uniform(x, p)
        return quantize_log_sqrt2(x, p)
    if x.ndim != 2 or x.shape[0] != len(scheme.params):
        raise ValueError(
            f"per_channel scheme with {len(scheme.params)} channels cannot "
            f"quantize shape {x.shape}"
        )
    codes = np.empty(x.shape, dtype=np.int64)
    deq = np.empty(x.shape, dtype=np.float64)
    for i, p in enumerate(scheme.params):
        codes[i], deq[i] = quantize_uniform(x[i], p)
    return codes, deq
