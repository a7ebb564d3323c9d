"""Scale factors: selection from amax, application before casting, and exponent-bias emulation."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from fp8kit.convert import OverflowMode, RoundingMode, StochasticRng, convert_array, convert_to_fp8
from fp8kit.formats import Fp8Format, Fp8Value, decode, decode_array

# Exponent biases emulate_bias_cast accepts.
BIAS_WINDOW = range(-8, 32)

# Clamp range for scales that would leave binary32.
_MIN_SCALE_EXP = -126
_MAX_SCALE_EXP = 127

# How far, in binary32 ulps, a Free scale may move to round-trip exactly.
_NUDGE_ULPS = 4


class ScaleConstraint(Enum):
    FREE = "free"
    POWER_OF_TWO = "power-of-two"


@dataclass(frozen=True)
class ScaleFactor:
    value: float
    constraint: ScaleConstraint = ScaleConstraint.FREE

    def __post_init__(self):
        if not (math.isfinite(self.value) and self.value > 0):
            raise ValueError(f"Scale factor must be finite and positive, got {self.value}")
        if self.constraint is ScaleConstraint.POWER_OF_TWO and math.frexp(self.value)[0] != 0.5:
            raise ValueError(f"Scale factor {self.value} is not a power of two")

    @property
    def reciprocal(self) -> np.float32:
        """1/s rounded to binary32 once."""
        return np.float32(1.0) / np.float32(self.value)


@dataclass(frozen=True)
class Granularity:
    """PerTensor (axis is None) or PerChannel(axis)."""

    axis: Optional[int] = None

    @classmethod
    def per_tensor(cls) -> "Granularity":
        return cls(None)

    @classmethod
    def per_channel(cls, axis: int = 0) -> "Granularity":
        if axis < 0:
            raise ValueError(f"Channel axis must be non-negative, got {axis}")
        return cls(axis)

    @classmethod
    def parse(cls, text: str) -> "Granularity":
        """Parse "tensor" or "channel:<axis>"."""
        if text == 'tensor':
            return cls.per_tensor()
        if text.startswith('channel:'):
            try:
                return cls.per_channel(int(text.split(':', 1)[1]))
            except ValueError:
                pass
        raise ValueError(f"Bad granularity '{text}' (expected 'tensor' or 'channel:<axis>')")

    @property
    def is_per_channel(self) -> bool:
        return self.axis is not None

    def __str__(self) -> str:
        return 'tensor' if self.axis is None else f'channel:{self.axis}'


def channel_slices(t: np.ndarray, granularity: Granularity) -> np.ndarray:
    """View a tensor as a 2-D (slices, elements) array for the given granularity."""
    t = np.asarray(t)
    if not granularity.is_per_channel:
        return t.reshape(1, -1)
    if granularity.axis >= t.ndim:
        raise ValueError(f"Channel axis {granularity.axis} out of range for rank {t.ndim}")
    return np.moveaxis(t, granularity.axis, 0).reshape(t.shape[granularity.axis], -1)


def amax_per_slice(t: np.ndarray, granularity: Granularity) -> np.ndarray:
    """Max |x| over finite elements of each slice (0.0 for slices with none)."""
    slices = channel_slices(t, granularity)
    magnitudes = np.where(np.isfinite(slices), np.abs(slices), 0.0)
    if magnitudes.shape[1] == 0:
        return np.zeros(magnitudes.shape[0], dtype=np.float64)
    return magnitudes.max(axis=1).astype(np.float64)


@dataclass(frozen=True)
class ScaleSet:
    granularity: Granularity
    scales: Tuple[ScaleFactor, ...]

    def __post_init__(self):
        if not self.scales:
            raise ValueError("A ScaleSet needs at least one scale")
        if not self.granularity.is_per_channel and len(self.scales) != 1:
            raise ValueError(f"Per-tensor ScaleSet needs exactly one scale, got {len(self.scales)}")

    @classmethod
    def per_tensor(cls, scale: ScaleFactor) -> "ScaleSet":
        return cls(Granularity.per_tensor(), (scale,))

    @classmethod
    def per_channel(cls, axis: int, scales: Sequence[ScaleFactor]) -> "ScaleSet":
        return cls(Granularity.per_channel(axis), tuple(scales))

    @classmethod
    def identity(cls) -> "ScaleSet":
        return cls.per_tensor(ScaleFactor(1.0, ScaleConstraint.POWER_OF_TWO))

    def values(self) -> np.ndarray:
        return np.array([s.value for s in self.scales], dtype=np.float32)

    def reciprocals(self) -> np.ndarray:
        return np.array([s.reciprocal for s in self.scales], dtype=np.float32)

    def validate_for(self, shape: Tuple[int, ...]):
        if not self.granularity.is_per_channel:
            return
        axis = self.granularity.axis
        if axis >= len(shape):
            raise ValueError(f"Channel axis {axis} out of range for shape {tuple(shape)}")
        if shape[axis] != len(self.scales):
            raise ValueError(
                f"ScaleSet has {len(self.scales)} scales but axis {axis} has extent {shape[axis]}"
            )

    def _broadcast(self, per_slice: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        self.validate_for(shape)
        if not self.granularity.is_per_channel:
            return per_slice.reshape(())
        view = [1] * len(shape)
        view[self.granularity.axis] = -1
        return per_slice.reshape(view)

    def broadcast(self, shape: Tuple[int, ...]) -> np.ndarray:
        """Scale values shaped to multiply a tensor of the given shape."""
        return self._broadcast(self.values(), shape)

    def reciprocal_broadcast(self, shape: Tuple[int, ...]) -> np.ndarray:
        return self._broadcast(self.reciprocals(), shape)

    def to_dict(self) -> Dict:
        per_channel = self.granularity.is_per_channel
        return {
            'granularity': 'channel' if per_channel else 'tensor',
            'axis': self.granularity.axis,
            'scale': None if per_channel else self.scales[0].value,
            'per_channel_scales': [s.value for s in self.scales] if per_channel else None,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ScaleSet":
        if data.get('granularity') == 'channel':
            return cls.per_channel(int(data['axis']),
                                   [ScaleFactor(float(v)) for v in data['per_channel_scales']])
        return cls.per_tensor(ScaleFactor(float(data.get('scale') or 1.0)))


def scale_for_amax(amax: float, fmt: Fp8Format,
                   constraint: ScaleConstraint = ScaleConstraint.FREE) -> ScaleFactor:
    """Scale that brings amax to (or just under) the format's max normal."""
    if not math.isfinite(amax) or amax < 0:
        raise ValueError(f"amax must be finite and non-negative, got {amax}")
    if amax == 0 or np.float32(amax) == 0:
        return ScaleFactor(1.0, constraint)

    if constraint is ScaleConstraint.POWER_OF_TWO:
        k = math.floor(math.log2(fmt.max_normal / amax))
        while amax * math.ldexp(1.0, k) > fmt.max_normal:
            k -= 1
        while amax * math.ldexp(1.0, k + 1) <= fmt.max_normal:
            k += 1
        if not _MIN_SCALE_EXP <= k <= _MAX_SCALE_EXP:
            logging.warning(f"Scale 2^{k} for amax {amax} leaves binary32, clamping")
            k = min(max(k, _MIN_SCALE_EXP), _MAX_SCALE_EXP)
        return ScaleFactor(math.ldexp(1.0, k), constraint)

    with np.errstate(over='ignore'):
        value = float(np.float32(fmt.max_normal) / np.float32(amax))
    lo, hi = math.ldexp(1.0, _MIN_SCALE_EXP), math.ldexp(1.0, _MAX_SCALE_EXP)
    if not lo <= value <= hi:
        logging.warning(f"Scale {value} for amax {amax} leaves binary32, clamping")
        return ScaleFactor(min(max(value, lo), hi), constraint)

    # Prefer a neighbour whose reciprocal brings amax back exactly, as long as
    # amax * s stays within one ulp of max_normal.
    target = np.float32(fmt.max_normal)
    for candidate in _ulp_neighbours(value):
        with np.errstate(over='ignore'):
            product = np.float32(amax) * candidate
        if target - np.spacing(target) <= product <= target and _round_trips(amax, candidate, fmt):
            return ScaleFactor(float(candidate), constraint)
    return ScaleFactor(value, constraint)


def exact_scale_for_value(value: float, fmt: Fp8Format,
                          constraint: ScaleConstraint = ScaleConstraint.FREE) -> ScaleFactor:
    """Scale whose quantize/dequantize round trip returns |value| unchanged.

    Starts from scale_for_amax. When its reciprocal cannot bring |value| back, a
    Free scale is moved down onto the next FP8 points of the top two binades until
    one round-trips. A power-of-two scale round-trips exactly when |value| fits
    the format's mantissa, so it is returned as is.
    """
    amax = abs(value)
    base = scale_for_amax(amax, fmt, constraint)
    if constraint is ScaleConstraint.POWER_OF_TWO or amax == 0 or _round_trips(amax, base.value, fmt):
        return base

    span = 2 ** (fmt.mantissa_bits + 1)
    codes = np.arange(fmt.max_code, fmt.max_code - span, -1, dtype=np.int64)
    for point in decode_array(codes, fmt):
        with np.errstate(over='ignore'):
            start = float(point / np.float32(amax))
        if not math.ldexp(1.0, _MIN_SCALE_EXP) <= start <= math.ldexp(1.0, _MAX_SCALE_EXP):
            continue
        for candidate in _ulp_neighbours(start):
            if _round_trips(amax, candidate, fmt):
                return ScaleFactor(float(candidate), constraint)
    logging.debug(f"No round-tripping {fmt.name} scale for {value}, keeping {base.value}")
    return base


def _ulp_neighbours(value: float):
    """value as binary32, then its neighbours alternating down and up."""
    centre = np.float32(value)
    yield centre
    down = up = centre
    for _ in range(_NUDGE_ULPS):
        down = np.nextafter(down, np.float32(0))
        up = np.nextafter(up, np.float32(np.inf))
        yield down
        yield up


def _round_trips(amax: float, value, fmt: Fp8Format) -> bool:
    """amax survives quantize/dequantize with scale value, unclipped."""
    s = np.float32(value)
    with np.errstate(over='ignore'):
        scaled = np.float32(amax) * s
    if scaled > np.float32(fmt.max_normal):
        return False
    bits = convert_array(np.array([scaled], dtype=np.float32), fmt)
    q = decode_array(bits, fmt)[0] * (np.float32(1.0) / s)
    return bool(q == np.float32(amax))


def quantize_scaled(x: float, s: ScaleFactor, fmt: Fp8Format,
                    rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                    overflow: OverflowMode = OverflowMode.SATURATE,
                    rng: Optional[StochasticRng] = None) -> Fp8Value:
    with np.errstate(over='ignore'):
        scaled = np.float32(_clamp_product(np.float32(x), np.float32(x) * np.float32(s.value)))
    return convert_to_fp8(scaled, fmt, rounding, overflow, rng)


def dequantize(v: Fp8Value, s: ScaleFactor) -> float:
    return float(np.float32(decode(v)) * s.reciprocal)


def quantize_scaled_array(x: np.ndarray, scales: np.ndarray, fmt: Fp8Format,
                          rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                          overflow: OverflowMode = OverflowMode.SATURATE,
                          rng: Optional[StochasticRng] = None) -> np.ndarray:
    """Elementwise binary32 multiply by (broadcast) scales, then convert."""
    with np.errstate(over='ignore', invalid='ignore'):
        x = np.asarray(x, dtype=np.float32)
        scaled = _clamp_product(x, x * np.asarray(scales, dtype=np.float32))
    return convert_array(scaled, fmt, rounding, overflow, rng)


def _clamp_product(x, scaled):
    """A finite input whose scaled product overflowed binary32 becomes +-float32.max."""
    overflowed = np.isfinite(x) & ~np.isfinite(scaled)
    if not np.any(overflowed):
        return scaled
    return np.where(overflowed, np.copysign(np.finfo(np.float32).max, scaled), scaled).astype(np.float32)


def dequantize_array(bits: np.ndarray, fmt: Fp8Format, reciprocals: np.ndarray) -> np.ndarray:
    with np.errstate(over='ignore', invalid='ignore'):
        return decode_array(bits, fmt) * np.asarray(reciprocals, dtype=np.float32)


def _bias_scale(fmt: Fp8Format, bias: int) -> ScaleFactor:
    if bias not in BIAS_WINDOW:
        raise ValueError(
            f"Exponent bias {bias} outside [{BIAS_WINDOW.start}, {BIAS_WINDOW.stop - 1}]"
        )
    return ScaleFactor(math.ldexp(1.0, bias - fmt.exponent_bias), ScaleConstraint.POWER_OF_TWO)


def emulate_bias_cast(x: float, fmt: Fp8Format, bias: int,
                      rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                      overflow: OverflowMode = OverflowMode.SATURATE,
                      rng: Optional[StochasticRng] = None) -> float:
    """Value x takes when cast to fmt with its exponent bias replaced by `bias`."""
    s = _bias_scale(fmt, bias)
    return dequantize(quantize_scaled(x, s, fmt, rounding, overflow, rng), s)


def emulate_bias_cast_array(x: np.ndarray, fmt: Fp8Format, bias: int,
                            rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                            overflow: OverflowMode = OverflowMode.SATURATE,
                            rng: Optional[StochasticRng] = None) -> np.ndarray:
    s = _bias_scale(fmt, bias)
    bits = quantize_scaled_array(x, np.float32(s.value), fmt, rounding, overflow, rng)
    return dequantize_array(bits, fmt, s.reciprocal)
