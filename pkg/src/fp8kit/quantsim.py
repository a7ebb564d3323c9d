"""Fake quantization of tensors (quantize -> dequantize in binary32) and error reporting."""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from fp8kit.calibrate import (
    CalibrationMethod, calibrate, calibrate_best_of,
)
from fp8kit.convert import OverflowMode, RoundingMode, StochasticRng
from fp8kit.formats import E4M3, E5M2, Fp8Format, Fp8Tensor
from fp8kit.scaling import (
    Granularity, ScaleFactor, ScaleSet,
    amax_per_slice, dequantize_array, emulate_bias_cast_array, quantize_scaled_array,
)

REPORT_CHUNK_SIZE = 65536

STATS_PERCENTILES = (50.0, 90.0, 99.0, 99.9, 99.99, 100.0)

INT8_MAX = 127


class ScaleSourceKind(Enum):
    EXPLICIT = "explicit"
    AUTO = "auto"
    NONE = "none"


@dataclass(frozen=True)
class ScaleSource:
    kind: ScaleSourceKind
    scale_set: Optional[ScaleSet] = None
    methods: Tuple[CalibrationMethod, ...] = ()
    granularity: Granularity = Granularity.per_tensor()

    @classmethod
    def explicit(cls, scale_set: ScaleSet) -> "ScaleSource":
        return cls(ScaleSourceKind.EXPLICIT, scale_set=scale_set)

    @classmethod
    def auto(cls, methods: Union[CalibrationMethod, Sequence[CalibrationMethod]],
             granularity: Granularity = Granularity.per_tensor()) -> "ScaleSource":
        """Calibrate on the tensor itself; several methods means best-of."""
        if isinstance(methods, CalibrationMethod):
            methods = (methods,)
        methods = tuple(methods)
        if not methods:
            raise ValueError("Auto scale source needs at least one calibration method")
        return cls(ScaleSourceKind.AUTO, methods=methods, granularity=granularity)

    @classmethod
    def none(cls) -> "ScaleSource":
        return cls(ScaleSourceKind.NONE)

    def __str__(self) -> str:
        if self.kind is ScaleSourceKind.AUTO:
            return f"auto:{'|'.join(str(m) for m in self.methods)}@{self.granularity}"
        return self.kind.value


@dataclass(frozen=True)
class QuantConfig:
    format: Fp8Format = E4M3
    rounding: RoundingMode = RoundingMode.NEAREST_EVEN
    overflow: OverflowMode = OverflowMode.SATURATE
    scale_source: ScaleSource = field(default_factory=ScaleSource.none)
    seed: int = 0
    report_chunk_size: int = REPORT_CHUNK_SIZE


@dataclass
class QuantReport:
    element_count: int
    mse: float
    max_abs_err: float
    sqnr_db: float
    overflow_count: int
    underflow_to_zero_count: int
    special_in_count: int
    scale_set_used: ScaleSet

    def to_dict(self) -> Dict:
        return {
            'element_count': self.element_count,
            'mse': self.mse,
            'max_abs_err': self.max_abs_err,
            'sqnr_db': _json_float(self.sqnr_db),
            'overflow_count': self.overflow_count,
            'underflow_to_zero_count': self.underflow_to_zero_count,
            'special_in_count': self.special_in_count,
            'scale_set_used': self.scale_set_used.to_dict(),
        }


class TensorRole(Enum):
    WEIGHT = "weight"
    ACTIVATION = "activation"
    GRADIENT = "gradient"


class SweepMetric(Enum):
    MSE = "mse"
    MAX_ABS_ERR = "max-abs-err"


def _json_float(value: float):
    """Floats JSON cannot carry become strings."""
    if math.isnan(value):
        return 'nan'
    if math.isinf(value):
        return 'inf' if value > 0 else '-inf'
    return value


def _check_tensor(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float32)
    if t.ndim < 1:
        raise ValueError("Tensors must have rank >= 1")
    return t


def _chunked_fsum(values: np.ndarray, chunk_size: int) -> float:
    """float64 sums per fixed-size chunk, combined with fsum in chunk order."""
    partials = [float(np.sum(values[i:i + chunk_size], dtype=np.float64))
                for i in range(0, values.size, chunk_size)]
    return math.fsum(partials)


def _sqnr_db(signal: float, noise: float) -> float:
    if noise == 0:
        return math.inf
    if signal == 0:
        return -math.inf
    return 10.0 * math.log10(signal / noise)


def error_stats(x: np.ndarray, q: np.ndarray,
                chunk_size: int = REPORT_CHUNK_SIZE) -> Dict[str, float]:
    """mse / max_abs_err / sqnr_db over elements where both x and q are finite."""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    q = np.asarray(q, dtype=np.float32).reshape(-1)
    used = np.isfinite(x) & np.isfinite(q)
    x64 = x[used].astype(np.float64)
    err = x64 - q[used].astype(np.float64)
    n = int(x64.size)
    noise = _chunked_fsum(err * err, chunk_size)
    signal = _chunked_fsum(x64 * x64, chunk_size)
    return {
        'count': n,
        'mse': noise / n if n else 0.0,
        'max_abs_err': float(np.max(np.abs(err))) if n else 0.0,
        'sqnr_db': _sqnr_db(signal, noise),
        'signal_power': signal / n if n else 0.0,
    }


def resolve_scale_set(t: np.ndarray, cfg: QuantConfig) -> ScaleSet:
    source = cfg.scale_source
    if source.kind is ScaleSourceKind.NONE:
        return ScaleSet.identity()
    if source.kind is ScaleSourceKind.EXPLICIT:
        source.scale_set.validate_for(t.shape)
        return source.scale_set
    if len(source.methods) == 1:
        result = calibrate(t, cfg.format, source.methods[0], source.granularity)
    else:
        result = calibrate_best_of(t, cfg.format, source.methods, source.granularity)
    return result.scale_set


def quantize_to_fp8(t, cfg: QuantConfig) -> Tuple[Fp8Tensor, ScaleSet]:
    """Scale and cast a tensor to raw FP8 patterns."""
    t = _check_tensor(t)
    scale_set = resolve_scale_set(t, cfg)
    rng = StochasticRng(cfg.seed) if cfg.rounding is RoundingMode.STOCHASTIC else None
    bits = quantize_scaled_array(t, scale_set.broadcast(t.shape), cfg.format,
                                 cfg.rounding, cfg.overflow, rng)
    return Fp8Tensor(bits, cfg.format), scale_set


def fake_quantize(t, cfg: QuantConfig) -> Tuple[np.ndarray, QuantReport]:
    """Quantize then dequantize t; returns the binary32 result and a QuantReport.

    NaN/Inf inputs follow the conversion rules and are left out of the error
    statistics, as are elements a non-saturating overflow turned non-finite.
    """
    t = _check_tensor(t)
    fp8, scale_set = quantize_to_fp8(t, cfg)
    out = dequantize_array(fp8.bits, cfg.format, scale_set.reciprocal_broadcast(t.shape))

    finite_in = np.isfinite(t)
    with np.errstate(over='ignore', invalid='ignore'):
        scaled = np.abs(t * scale_set.broadcast(t.shape)).astype(np.float64)
    stats = error_stats(t, out, cfg.report_chunk_size)
    report = QuantReport(
        element_count=int(t.size),
        mse=stats['mse'],
        max_abs_err=stats['max_abs_err'],
        sqnr_db=stats['sqnr_db'],
        overflow_count=int(np.count_nonzero(finite_in & (scaled >= cfg.format.overflow_threshold))),
        underflow_to_zero_count=int(np.count_nonzero(finite_in & (t != 0) & (out == 0))),
        special_in_count=int(np.count_nonzero(~finite_in)),
        scale_set_used=scale_set,
    )
    if report.overflow_count:
        logging.info(f"{report.overflow_count} of {t.size} elements overflowed {cfg.format.name}")
    logging.debug(f"fake_quantize {cfg.format.name} scale={cfg.scale_source}: mse={report.mse:.6g}")
    return out, report


def default_config_for_role(role: TensorRole) -> QuantConfig:
    """E4M3 for weights and activations, E5M2 for gradients.

    Weights use per-channel (axis 0) max calibration, activations per-tensor
    best-of(max, percentile, mse).
    """
    if role is TensorRole.WEIGHT:
        return QuantConfig(E4M3, scale_source=ScaleSource.auto(
            CalibrationMethod.max(), Granularity.per_channel(0)))
    if role is TensorRole.ACTIVATION:
        return QuantConfig(E4M3, scale_source=ScaleSource.auto(
            (CalibrationMethod.max(), CalibrationMethod.percentile_of(), CalibrationMethod.mse())))
    return QuantConfig(E5M2, scale_source=ScaleSource.auto(CalibrationMethod.max()))


def quantize_pair_gemm_io(weights, acts,
                          cfg_w: Optional[QuantConfig] = None,
                          cfg_a: Optional[QuantConfig] = None
                          ) -> Tuple[np.ndarray, np.ndarray, Dict[str, QuantReport]]:
    """Fake-quantize the two inputs of a GEMM with the weight/activation conventions."""
    cfg_w = cfg_w or default_config_for_role(TensorRole.WEIGHT)
    cfg_a = cfg_a or default_config_for_role(TensorRole.ACTIVATION)
    wq, w_report = fake_quantize(weights, cfg_w)
    aq, a_report = fake_quantize(acts, cfg_a)
    return wq, aq, {'weights': w_report, 'activations': a_report}


def _sweep_value(stats: Dict[str, float], metric: SweepMetric) -> float:
    return stats['mse'] if metric is SweepMetric.MSE else stats['max_abs_err']


def bias_sweep(t, fmt: Fp8Format, bias_range: Tuple[int, int],
               metric: SweepMetric = SweepMetric.MSE,
               rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
               overflow: OverflowMode = OverflowMode.SATURATE,
               seed: int = 0) -> List[Tuple[int, float]]:
    """Error metric of casting t to fmt with each exponent bias in [lo, hi], no other scaling."""
    lo, hi = bias_range
    if lo > hi:
        raise ValueError(f"Empty bias range [{lo}, {hi}]")
    t = _check_tensor(t)
    results = []
    for bias in range(lo, hi + 1):
        rng = StochasticRng(seed) if rounding is RoundingMode.STOCHASTIC else None
        q = emulate_bias_cast_array(t, fmt, bias, rounding, overflow, rng)
        results.append((bias, _sweep_value(error_stats(t, q), metric)))
    logging.debug(f"Bias sweep {fmt.name} [{lo}, {hi}]: {results}")
    return results


def normalized_mse(x, q) -> float:
    """MSE divided by mean signal power (0 for an all-zero signal)."""
    stats = error_stats(x, q)
    return stats['mse'] / stats['signal_power'] if stats['signal_power'] else 0.0


def bias_sweep_many(tensors: Sequence, fmt: Fp8Format,
                    bias_range: Tuple[int, int]) -> List[Tuple[int, float]]:
    """Sum over tensors of normalized MSE when all share one exponent bias."""
    lo, hi = bias_range
    if lo > hi:
        raise ValueError(f"Empty bias range [{lo}, {hi}]")
    tensors = [_check_tensor(t) for t in tensors]
    return [
        (bias, math.fsum(normalized_mse(t, emulate_bias_cast_array(t, fmt, bias)) for t in tensors))
        for bias in range(lo, hi + 1)
    ]


def calibrated_metric_many(tensors: Sequence, fmt: Fp8Format,
                           method: Optional[CalibrationMethod] = None) -> float:
    """Sum over tensors of normalized MSE when each gets its own calibrated scale."""
    cfg_source = ScaleSource.auto(method or CalibrationMethod.max())
    cfg = QuantConfig(fmt, scale_source=cfg_source)
    return math.fsum(normalized_mse(t, fake_quantize(t, cfg)[0]) for t in tensors)


def fake_quantize_int8(t, granularity: Granularity = Granularity.per_tensor()
                       ) -> Tuple[np.ndarray, QuantReport]:
    """Symmetric max-calibrated int8 fake quantization (round half to even, clamp to +-127)."""
    t = _check_tensor(t)
    amax = amax_per_slice(t, granularity)
    scales = [ScaleFactor(float(np.float32(INT8_MAX) / np.float32(a))) if a > 0 else ScaleFactor(1.0)
              for a in amax]
    if granularity.is_per_channel:
        scale_set = ScaleSet.per_channel(granularity.axis, scales)
    else:
        scale_set = ScaleSet.per_tensor(scales[0])

    with np.errstate(over='ignore', invalid='ignore'):
        scaled = t * scale_set.broadcast(t.shape)
        levels = np.clip(np.rint(scaled), -INT8_MAX, INT8_MAX)
        out = (levels * scale_set.reciprocal_broadcast(t.shape)).astype(np.float32)

    finite_in = np.isfinite(t)
    stats = error_stats(t, out)
    report = QuantReport(
        element_count=int(t.size),
        mse=stats['mse'],
        max_abs_err=stats['max_abs_err'],
        sqnr_db=stats['sqnr_db'],
        overflow_count=int(np.count_nonzero(finite_in & (np.abs(scaled) > INT8_MAX + 0.5))),
        underflow_to_zero_count=int(np.count_nonzero(finite_in & (t != 0) & (out == 0))),
        special_in_count=int(np.count_nonzero(~finite_in)),
        scale_set_used=scale_set,
    )
    return out, report


def compare_with_int8(t, fmt: Fp8Format = E4M3,
                      granularity: Granularity = Granularity.per_tensor()) -> Dict[str, QuantReport]:
    """Max-calibrated FP8 and int8 fake quantization of the same tensor."""
    cfg = QuantConfig(fmt, scale_source=ScaleSource.auto(CalibrationMethod.max(), granularity))
    _, fp8_report = fake_quantize(t, cfg)
    _, int8_report = fake_quantize_int8(t, granularity)
    return {fmt.name: fp8_report, 'int8': int8_report}


def tensor_stats(t) -> Dict:
    """amax, magnitude percentiles, log2-magnitude histogram and special counts."""
    t = _check_tensor(t).reshape(-1)
    finite = t[np.isfinite(t)]
    magnitudes = np.abs(finite).astype(np.float64)
    nonzero = magnitudes[magnitudes > 0]

    histogram: Dict[str, int] = {}
    if nonzero.size:
        exponents, counts = np.unique(np.floor(np.log2(nonzero)).astype(np.int64), return_counts=True)
        histogram = {str(int(e)): int(c) for e, c in zip(exponents, counts)}

    percentiles = {}
    if magnitudes.size:
        for p in STATS_PERCENTILES:
            percentiles[f"p{p:g}"] = float(np.percentile(magnitudes, p, method='linear'))

    return {
        'element_count': int(t.size),
        'amax': float(magnitudes.max()) if magnitudes.size else 0.0,
        'percentiles': percentiles,
        'log2_histogram': histogram,
        'nan_count': int(np.count_nonzero(np.isnan(t))),
        'pos_inf_count': int(np.count_nonzero(t == np.inf)),
        'neg_inf_count': int(np.count_nonzero(t == -np.inf)),
        'zero_count': int(np.count_nonzero(t == 0)),
    }
