"""Per-layer quantization pipeline and the run/ablate/sweep entry points.

A run composes up to three stages on top of plain calibrated quantization:
activation-error correction of the full-precision weights ("aqer"),
rounding refinement inside the progressive weight loop ("wqer_rounding"),
and ridge correction of the unquantized remainder ("wqer_ridge").
Disabling a stage bypasses it exactly; with no stages the output is plain
round-to-nearest on the calibrated lattices.

report.json, traces.csv, and the code tensors are deterministic for a
given config and seed, byte for byte, regardless of --jobs. Wall times go
to a separate timings.json; the run configuration echo goes to
run_config.json. Neither is part of the deterministic output contract.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .act_correct import solve_activation_correction
from .linalg import SingularSystemError
from .moments import InsufficientSamplesError
from .oracle import layer_mse
from .quantizers import (
    LogSqrt2Params,
    QuantScheme,
    UniformParams,
    calibrate_scale,
    quantize_with_scheme,
)
from .tensorfile import LayerManifestEntry, TensorFile, read_tensor, write_tensor
from .weight_quant import ChannelResult, WeightQuantConfig, quantize_layer_weights

STAGE_AQER = "aqer"
STAGE_ROUNDING = "wqer_rounding"
STAGE_RIDGE = "wqer_ridge"
ALL_STAGES = (STAGE_AQER, STAGE_ROUNDING, STAGE_RIDGE)

TRACE_COLUMNS = (
    "layer_id",
    "channel",
    "iteration",
    "slice_size",
    "proxy_before",
    "proxy_after",
    "mse",
)

ABLATION_GRID = (
    ("baseline", frozenset()),
    ("aqer", frozenset({STAGE_AQER})),
    ("rounding", frozenset({STAGE_ROUNDING})),
    ("ridge", frozenset({STAGE_RIDGE})),
    ("rounding+ridge", frozenset({STAGE_ROUNDING, STAGE_RIDGE})),
    ("aqer+rounding", frozenset({STAGE_AQER, STAGE_ROUNDING})),
    ("aqer+ridge", frozenset({STAGE_AQER, STAGE_RIDGE})),
    ("aqer+rounding+ridge", frozenset(ALL_STAGES)),
)

SWEEP_PARAMS = ("lambda", "k", "n_images")


class ConfigError(Exception):
    """Invalid run configuration."""


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters and switches for one pipeline run."""

    lambda1: float = 1e4
    lambda2: float = 1e4
    k: int = 1
    max_iter: int = 100
    bits_w: int | None = None
    bits_a: int | None = None
    stages: frozenset = frozenset(ALL_STAGES)
    seed: int = 0
    jobs: int = 1
    recalibrate: bool = False

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("regularization strengths must be >= 0")
        if self.k < 0:
            raise ConfigError("k must be >= 0")
        if self.max_iter < 0:
            raise ConfigError("max_iter must be >= 0")
        for bits in (self.bits_w, self.bits_a):
            if bits is not None and bits < 2:
                raise ConfigError("bit widths must be >= 2")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        unknown = set(self.stages) - set(ALL_STAGES)
        if unknown:
            raise ConfigError(f"unknown stages {sorted(unknown)}")
        object.__setattr__(self, "stages", frozenset(self.stages))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    @staticmethod
    def parse_stages(text: str) -> frozenset:
        text = text.strip()
        if text == "all":
            return frozenset(ALL_STAGES)
        if text in ("none", ""):
            return frozenset()
        tokens = [t.strip() for t in text.split(",") if t.strip()]
        unknown = set(tokens) - set(ALL_STAGES)
        if unknown:
            raise ConfigError(
                f"unknown stages {sorted(unknown)}; valid: {', '.join(ALL_STAGES)}"
            )
        return frozenset(tokens)

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        fields = {f.name for f in dataclasses.fields(RunConfig)}
        unknown = set(doc) - fields
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        doc = dict(doc)
        if "stages" in doc:
            stages = doc["stages"]
            if isinstance(stages, str):
                doc["stages"] = RunConfig.parse_stages(stages)
            elif isinstance(stages, (list, tuple)):
                doc["stages"] = RunConfig.parse_stages(",".join(stages))
            else:
                raise ConfigError("stages must be a string or list")
        try:
            return RunConfig(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["stages"] = sorted(self.stages)
        return doc


@dataclass(frozen=True)
class LayerResult:
    """In-memory outcome of quantizing one layer."""

    layer_id: str
    n_samples: int
    bits_w: int
    bits_a: int
    act_scheme: QuantScheme
    weight_scheme: QuantScheme
    codes: np.ndarray
    w_bar: np.ndarray
    a_q: np.ndarray
    mse: dict
    reduction: dict
    channels: tuple[ChannelResult, ...]
    timings: dict


def _ratio(before: float, after: float) -> float:
    if before <= 0.0:
        return 0.0
    return 1.0 - after / before


def quantize_layer(
    w: np.ndarray,
    a_fp: np.ndarray,
    act_family: str,
    bits_w: int,
    bits_a: int,
    cfg: RunConfig,
    layer_id: str = "layer",
    eval_batch: np.ndarray | None = None,
) -> LayerResult:
    """Calibrate and quantize one linear layer under the configured stages.

    All arithmetic is float64 regardless of the on-disk dtype. The
    baseline MSE is always computed against plain round-to-nearest on
    scales calibrated from the original weights; stage MSEs are appended
    as stages run. Weight scales are recalibrated after the activation
    correction step when it is enabled, since the update shifts rows.

    `eval_batch` switches MSE evaluation to a separate activation batch
    (quantized with the calibration-fitted parameters); by default the
    calibration batch itself is evaluated.
    """
    w = np.asarray(w, dtype=np.float64)
    a_fp = np.asarray(a_fp, dtype=np.float64)
    if w.ndim != 2 or a_fp.ndim != 2 or w.shape[1] != a_fp.shape[1]:
        raise ValueError(
            f"incompatible shapes: weights {w.shape}, activations {a_fp.shape}"
        )
    timings = {}
    t0 = time.perf_counter()
    act_scheme = calibrate_scale(a_fp, act_family, bits_a, "per_tensor")
    _, a_q = quantize_with_scheme(a_fp, act_scheme)
    base_scheme = calibrate_scale(w, "uniform", bits_w, "per_channel")
    base_codes, base_w_bar = quantize_with_scheme(w, base_scheme)
    timings["calibrate"] = time.perf_counter() - t0

    if eval_batch is None:
        eval_fp, eval_q = a_fp, a_q
    else:
        eval_fp = np.asarray(eval_batch, dtype=np.float64)
        if eval_fp.ndim != 2 or eval_fp.shape[1] != w.shape[1]:
            raise ValueError(
                f"incompatible eval batch shape {eval_fp.shape} for weights {w.shape}"
            )
        _, eval_q = quantize_with_scheme(eval_fp, act_scheme)

    mse = {"baseline": layer_mse(w, eval_fp, base_w_bar, eval_q)}
    reduction = {}
    aqer_on = STAGE_AQER in cfg.stages
    rounding_on = STAGE_ROUNDING in cfg.stages
    ridge_on = STAGE_RIDGE in cfg.stages

    current = w
    weight_scheme = base_scheme
    codes, w_bar = base_codes, base_w_bar
    if aqer_on:
        t0 = time.perf_counter()
        correction = solve_activation_correction(w, a_fp, a_q, cfg.lambda1)
        current = correction.updated_w
        weight_scheme = calibrate_scale(current, "uniform", bits_w, "per_channel")
        codes, w_bar = quantize_with_scheme(current, weight_scheme)
        mse["after_aqer"] = layer_mse(w, eval_fp, w_bar, eval_q)
        reduction["aqer"] = _ratio(mse["baseline"], mse["after_aqer"])
        timings["aqer"] = time.perf_counter() - t0

    channels: tuple[ChannelResult, ...] = ()
    if rounding_on or ridge_on:
        t0 = time.perf_counter()
        wq_cfg = WeightQuantConfig(
            k=cfg.k,
            max_iter=cfg.max_iter,
            lambda2=cfg.lambda2,
            rounding=rounding_on,
            ridge=ridge_on,
            recalibrate=cfg.recalibrate,
        )
        wres = quantize_layer_weights(
            current, weight_scheme.params, a_q, wq_cfg, jobs=cfg.jobs
        )
        codes, w_bar = wres.codes, wres.w_bar
        channels = wres.channels
        mse["after_wqer"] = layer_mse(w, eval_fp, w_bar, eval_q)
        prev = mse["after_aqer"] if aqer_on else mse["baseline"]
        reduction["wqer"] = _ratio(prev, mse["after_wqer"])
        timings["wqer"] = time.perf_counter() - t0

    if "after_wqer" in mse:
        mse["final"] = mse["after_wqer"]
    elif "after_aqer" in mse:
        mse["final"] = mse["after_aqer"]
    else:
        mse["final"] = mse["baseline"]
    reduction["cumulative"] = _ratio(mse["baseline"], mse["final"])

    return LayerResult(
        layer_id=layer_id,
        n_samples=a_fp.shape[0],
        bits_w=bits_w,
        bits_a=bits_a,
        act_scheme=act_scheme,
        weight_scheme=weight_scheme,
        codes=codes,
        w_bar=w_bar,
        a_q=a_q,
        mse=mse,
        reduction=reduction,
        channels=channels,
        timings=timings,
    )


def _params_dict(p) -> dict:
    if isinstance(p, UniformParams):
        return {
            "scale": float(p.scale),
            "zero_point": int(p.zero_point),
            "degenerate": bool(p.degenerate),
        }
    if isinstance(p, LogSqrt2Params):
        return {"scale": float(p.scale), "degenerate": bool(p.degenerate)}
    raise TypeError(f"unknown params {type(p)!r}")


def layer_report_entry(result: LayerResult, codes_path: str | None) -> dict:
    return {
        "layer_id": result.layer_id,
        "n_samples": int(result.n_samples),
        "bits_w": int(result.bits_w),
        "bits_a": int(result.bits_a),
        "act_quant": {
            "family": result.act_scheme.family,
            "bits": int(result.act_scheme.bits),
            **_params_dict(result.act_scheme.params[0]),
        },
        "weight_quant": {
            "family": "uniform",
            "granularity": "per_channel",
            "bits": int(result.bits_w),
            "channels": [_params_dict(p) for p in result.weight_scheme.params],
        },
        "mse": {key: float(value) for key, value in sorted(result.mse.items())},
        "reduction": {
            key: float(value) for key, value in sorted(result.reduction.items())
        },
        "codes_path": codes_path,
        "error": None,
    }


def trace_rows(result: LayerResult) -> list[tuple]:
    rows = []
    for channel_idx, channel in enumerate(result.channels):
        for row in channel.trace:
            rows.append(
                (
                    result.layer_id,
                    channel_idx,
                    row.iteration,
                    row.slice_size,
                    row.proxy_before,
                    row.proxy_after,
                    row.mse,
                )
            )
    return rows


def _dump_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_traces(path: Path, rows: list[tuple]) -> None:
    lines = [",".join(TRACE_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join(repr(v) if isinstance(v, float) else str(v) for v in row)
        )
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ManifestRunResult:
    report_path: Path
    entries: list[dict]
    failures: int


NUMERICAL_ERRORS = (
    SingularSystemError,
    InsufficientSamplesError,
    FloatingPointError,
    ValueError,
)


def _load_layer(entry: LayerManifestEntry, cfg: RunConfig):
    w = np.asarray(read_tensor(entry.weight_path).data, dtype=np.float64)
    a_fp = np.asarray(read_tensor(entry.calib_path).data, dtype=np.float64)
    bits_w = cfg.bits_w if cfg.bits_w is not None else entry.bits_w
    bits_a = cfg.bits_a if cfg.bits_a is not None else entry.bits_a
    return w, a_fp, bits_w, bits_a


def run_manifest(
    entries: list[LayerManifestEntry], cfg: RunConfig, out_dir: str | Path
) -> ManifestRunResult:
    """Quantize every manifest layer, writing the run artifacts.

    A layer that fails numerically is recorded in the report with its
    error message and does not stop the other layers.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_entries = []
    all_traces = []
    timings = {}
    failures = 0
    for entry in entries:
        t0 = time.perf_counter()
        try:
            w, a_fp, bits_w, bits_a = _load_layer(entry, cfg)
            result = quantize_layer(
                w, a_fp, entry.act_quant, bits_w, bits_a, cfg, layer_id=entry.layer_id
            )
        except NUMERICAL_ERRORS as exc:
            failures += 1
            report_entries.append(
                {"layer_id": entry.layer_id, "error": f"{type(exc).__name__}: {exc}"}
            )
            continue
        codes_name = f"{entry.layer_id}_codes.npy"
        write_tensor(
            out_dir / codes_name,
            TensorFile.from_array(result.codes.astype(np.int32), "int32"),
        )
        report_entries.append(layer_report_entry(result, codes_name))
        all_traces.extend(trace_rows(result))
        result.timings["total"] = time.perf_counter() - t0
        timings[entry.layer_id] = {
            key: float(value) for key, value in sorted(result.timings.items())
        }

    report_path = out_dir / "report.json"
    _dump_json(report_path, {"layers": report_entries})
    _write_traces(out_dir / "traces.csv", all_traces)
    _dump_json(out_dir / "timings.json", {"layers": timings})
    _dump_json(out_dir / "run_config.json", cfg.to_dict())
    return ManifestRunResult(
        report_path=report_path, entries=report_entries, failures=failures
    )


def load_layers(entries: list[LayerManifestEntry], cfg: RunConfig):
    """Materialize manifest layers as float64 arrays for ablation/sweep runs."""
    layers = []
    for entry in entries:
        w, a_fp, bits_w, bits_a = _load_layer(entry, cfg)
        layers.append((entry.layer_id, w, a_fp, entry.act_quant, bits_w, bits_a))
    return layers


def run_ablation(layers, cfg: RunConfig) -> list[dict]:
    """All eight stage combinations over the given layers.

    Returns one row per (combination, layer) with the final MSE and the
    reduction against that layer's plain round-to-nearest baseline.
    """
    rows = []
    for combo_name, stages in ABLATION_GRID:
        combo_cfg = cfg.replace(stages=stages)
        for layer_id, w, a_fp, act_family, bits_w, bits_a in layers:
            result = quantize_layer(
                w, a_fp, act_family, bits_w, bits_a, combo_cfg, layer_id=layer_id
            )
            rows.append(
                {
                    "combination": combo_name,
                    "aqer": int(STAGE_AQER in stages),
                    "rounding": int(STAGE_ROUNDING in stages),
                    "ridge": int(STAGE_RIDGE in stages),
                    "layer_id": layer_id,
                    "mse_baseline": result.mse["baseline"],
                    "mse_final": result.mse["final"],
                    "reduction_vs_baseline": result.reduction["cumulative"],
                }
            )
    return rows


def run_sweep(param: str, values, layers, cfg: RunConfig) -> list[dict]:
    """One row per swept value, averaged over layers.

    `lambda` couples lambda1 = lambda2; `k` sets the flip budget (k = 0 is
    bit-identical to disabling the rounding stage); `n_images` calibrates
    on the first v rows only while always evaluating MSE on the full
    batch, so rows are comparable across calibration sizes.
    """
    if param not in SWEEP_PARAMS:
        raise ConfigError(f"unknown sweep param {param!r}; valid: {SWEEP_PARAMS}")
    rows = []
    for value in values:
        if param == "lambda":
            run_cfg = cfg.replace(lambda1=float(value), lambda2=float(value))
        elif param == "k":
            run_cfg = cfg.replace(k=int(value))
        else:
            run_cfg = cfg
        baselines = []
        finals = []
        reductions = []
        for layer_id, w, a_fp, act_family, bits_w, bits_a in layers:
            batch = a_fp
            eval_batch = None
            if param == "n_images":
                count = int(value)
                if count < 2:
                    raise ConfigError("n_images must be >= 2")
                batch = a_fp[:count]
                eval_batch = a_fp
            result = quantize_layer(
                w,
                batch,
                act_family,
                bits_w,
                bits_a,
                run_cfg,
                layer_id=layer_id,
                eval_batch=eval_batch,
            )
            baselines.append(result.mse["baseline"])
            finals.append(result.mse["final"])
            reductions.append(result.reduction["cumulative"])
        rows.append(
            {
                "param": param,
                "value": float(value),
                "layers": len(layers),
                "mse_baseline_mean": float(np.mean(baselines)),
                "mse_final_mean": float(np.mean(finals)),
                "reduction_mean": float(np.mean(reductions)),
            }
        )
    return rows


def write_csv(path: str | Path, rows: list[dict], columns: tuple[str, ...]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(repr(value) if isinstance(value, float) else str(value))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


ABLATION_COLUMNS = (
    "combination",
    "aqer",
    "rounding",
    "ridge",
    "layer_id",
    "mse_baseline",
    "mse_final",
    "reduction_vs_baseline",
)

SWEEP_COLUMNS = (
    "param",
    "value",
    "layers",
    "mse_baseline_mean",
    "mse_final_mean",
    "reduction_mean",
)
