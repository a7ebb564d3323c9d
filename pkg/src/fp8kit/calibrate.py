"""Scale-factor calibration from tensor statistics: max, percentile and MSE search."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fp8kit.convert import OverflowMode, RoundingMode
from fp8kit.formats import Fp8Format
from fp8kit.scaling import (
    Granularity, ScaleConstraint, ScaleFactor, ScaleSet,
    channel_slices, dequantize_array, exact_scale_for_value, quantize_scaled_array, scale_for_amax,
)

DEFAULT_PERCENTILE = 99.99
DEFAULT_MSE_STEPS = 24
DEFAULT_MSE_STEP_EXPONENT = 0.25


class CalibrationKind(Enum):
    MAX = "max"
    PERCENTILE = "percentile"
    MSE = "mse"


@dataclass(frozen=True)
class CalibrationMethod:
    kind: CalibrationKind
    percentile: Optional[float] = None

    def __post_init__(self):
        if self.kind is CalibrationKind.PERCENTILE:
            if self.percentile is None or not 0 < self.percentile <= 100:
                raise ValueError(f"Percentile must be in (0, 100], got {self.percentile}")

    @classmethod
    def max(cls) -> "CalibrationMethod":
        return cls(CalibrationKind.MAX)

    @classmethod
    def percentile_of(cls, p: float = DEFAULT_PERCENTILE) -> "CalibrationMethod":
        return cls(CalibrationKind.PERCENTILE, float(p))

    @classmethod
    def mse(cls) -> "CalibrationMethod":
        return cls(CalibrationKind.MSE)

    @classmethod
    def parse(cls, name: str, percentile: float = DEFAULT_PERCENTILE) -> "CalibrationMethod":
        if name == 'percentile':
            return cls.percentile_of(percentile)
        try:
            return cls(CalibrationKind(name))
        except ValueError:
            raise ValueError(f"Unknown calibration method '{name}'") from None

    def __str__(self) -> str:
        if self.kind is CalibrationKind.PERCENTILE:
            return f"percentile({self.percentile:g})"
        return self.kind.value


class EmptySlice(ValueError):
    """A tensor (or channel slice) has no finite elements to calibrate on."""

    def __init__(self, index: int, granularity: Granularity):
        self.index = index
        self.granularity = granularity
        where = 'tensor' if not granularity.is_per_channel else f"channel {index} (axis {granularity.axis})"
        super().__init__(f"No finite elements in {where}")


@dataclass
class CalibrationResult:
    scale_set: ScaleSet
    clipped_fraction: float
    method: CalibrationMethod
    mse: float
    search_trace: Optional[List[List[Tuple[float, float]]]] = None

    def to_dict(self, include_trace: bool = False) -> Dict:
        out = {
            'method': str(self.method),
            'clipped_fraction': self.clipped_fraction,
            'mse': self.mse,
            'scale_set': self.scale_set.to_dict(),
        }
        if include_trace:
            out['search_trace'] = (
                [[{'scale': s, 'objective': o} for s, o in trace] for trace in self.search_trace]
                if self.search_trace is not None else None
            )
        return out


def mse_objective(x: np.ndarray, s: ScaleFactor, fmt: Fp8Format) -> float:
    """Sum of (x - dequantize(quantize_scaled(x, s)))**2 over x, accumulated in float64.

    Uses round-to-nearest-even with saturation; x must be finite.
    """
    x = np.asarray(x, dtype=np.float32)
    bits = quantize_scaled_array(x, np.float32(s.value), fmt,
                                 RoundingMode.NEAREST_EVEN, OverflowMode.SATURATE)
    q = dequantize_array(bits, fmt, s.reciprocal)
    err = x.astype(np.float64) - q.astype(np.float64)
    return math.fsum(err * err)


def _finite(slice_: np.ndarray) -> np.ndarray:
    return slice_[np.isfinite(slice_)]


def _percentile_amax(magnitudes: np.ndarray, p: float) -> float:
    if p == 100:
        return float(magnitudes.max())
    return float(np.percentile(magnitudes.astype(np.float64), p, method='linear'))


def _search_mse(x: np.ndarray, base: ScaleFactor, fmt: Fp8Format, constraint: ScaleConstraint,
                steps: int, step_exponent: float) -> Tuple[ScaleFactor, List[Tuple[float, float]]]:
    if constraint is ScaleConstraint.POWER_OF_TWO:
        step_exponent = max(1.0, round(step_exponent))

    trace = []
    best, best_objective = base, math.inf
    for k in range(steps + 1):
        value = float(np.float32(base.value * 2.0 ** (k * step_exponent)))
        if not math.isfinite(value):
            break
        candidate = ScaleFactor(value, constraint)
        objective = mse_objective(x, candidate, fmt)
        trace.append((candidate.value, objective))
        # Candidates grow with k, so <= breaks ties toward the larger scale.
        if objective <= best_objective:
            best, best_objective = candidate, objective
    return best, trace


def calibrate(t: np.ndarray, fmt: Fp8Format, method: CalibrationMethod,
              granularity: Granularity = Granularity.per_tensor(),
              constraint: ScaleConstraint = ScaleConstraint.FREE,
              mse_steps: int = DEFAULT_MSE_STEPS,
              mse_step_exponent: float = DEFAULT_MSE_STEP_EXPONENT) -> CalibrationResult:
    """Choose a ScaleSet for t with the given method and granularity."""
    t = np.asarray(t, dtype=np.float32)
    slices = channel_slices(t, granularity)

    scales: List[ScaleFactor] = []
    traces: List[List[Tuple[float, float]]] = []
    for index, slice_ in enumerate(slices):
        x = _finite(slice_)
        if x.size == 0:
            raise EmptySlice(index, granularity)
        magnitudes = np.abs(x)
        amax = float(magnitudes.max())
        # A constant slice gets a scale that reproduces its value exactly.
        if magnitudes.min() == amax:
            base = exact_scale_for_value(amax, fmt, constraint)
        elif method.kind is CalibrationKind.PERCENTILE:
            base = scale_for_amax(_percentile_amax(magnitudes, method.percentile), fmt, constraint)
        else:
            base = scale_for_amax(amax, fmt, constraint)

        if method.kind is not CalibrationKind.MSE:
            scales.append(base)
        else:
            scale, trace = _search_mse(x, base, fmt, constraint, mse_steps, mse_step_exponent)
            scales.append(scale)
            traces.append(trace)

    if granularity.is_per_channel:
        scale_set = ScaleSet.per_channel(granularity.axis, scales)
    else:
        scale_set = ScaleSet.per_tensor(scales[0])

    result = CalibrationResult(
        scale_set=scale_set,
        clipped_fraction=clipped_fraction(t, scale_set, fmt),
        method=method,
        mse=quantization_mse(t, scale_set, fmt),
        search_trace=traces if method.kind is CalibrationKind.MSE else None,
    )
    logging.debug(f"Calibrated {fmt.name} {granularity} with {method}: "
                  f"mse={result.mse:.6g}, clipped={result.clipped_fraction:.4g}")
    return result


def clipped_fraction(t: np.ndarray, scale_set: ScaleSet, fmt: Fp8Format) -> float:
    """Fraction of finite elements whose scaled magnitude exceeds max_normal."""
    t = np.asarray(t, dtype=np.float32)
    finite = np.isfinite(t)
    n_finite = int(np.count_nonzero(finite))
    if n_finite == 0:
        return 0.0
    with np.errstate(over='ignore', invalid='ignore'):
        scaled = np.abs(t * scale_set.broadcast(t.shape)).astype(np.float64)
    return int(np.count_nonzero(finite & (scaled > fmt.max_normal))) / n_finite


def quantization_mse(t: np.ndarray, scale_set: ScaleSet, fmt: Fp8Format) -> float:
    """Mean squared fake-quantization error over finite elements (RNE, saturating)."""
    t = np.asarray(t, dtype=np.float32)
    bits = quantize_scaled_array(t, scale_set.broadcast(t.shape), fmt)
    q = dequantize_array(bits, fmt, scale_set.reciprocal_broadcast(t.shape))
    finite = np.isfinite(t)
    n_finite = int(np.count_nonzero(finite))
    if n_finite == 0:
        return 0.0
    err = t[finite].astype(np.float64) - q[finite].astype(np.float64)
    return math.fsum(err * err) / n_finite


def calibrate_best_of(t: np.ndarray, fmt: Fp8Format, methods: Sequence[CalibrationMethod],
                      granularity: Granularity = Granularity.per_tensor(),
                      **kwargs) -> CalibrationResult:
    """Run each method and keep the one with the lowest tensor MSE (first wins on ties)."""
    if not methods:
        raise ValueError("calibrate_best_of needs at least one method")
    best = None
    for method in methods:
        result = calibrate(t, fmt, method, granularity, **kwargs)
        if best is None or result.mse < best.mse:
            best = result
    logging.info(f"Best-of calibration picked {best.method} (mse={best.mse:.6g})")
    return best
