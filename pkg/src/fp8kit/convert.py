"""binary32 -> FP8 conversion under configurable rounding and overflow policies.

The array path works on the binary32 bit fields with int64 arithmetic:
each input is expressed as an integer number of FP8 quanta at its own
magnitude, rounded according to the mode, and re-packed as a magnitude
code. Scalar helpers are thin wrappers over the array path.
"""

import logging
from enum import Enum
from typing import Optional

import numpy as np

from fp8kit.formats import (
    E5M2, SIGN_MASK, Fp8Format, Fp8Value, decode, decode_array,
)

# Shift amounts past this are equivalent (binary32 significands have 24 bits).
_MAX_SHIFT = 62

_U64 = np.uint64
_GOLDEN_GAMMA = _U64(0x9E3779B97F4A7C15)
_MIX_1 = _U64(0xBF58476D1CE4E5B9)
_MIX_2 = _U64(0x94D049BB133111EB)
_PCG_MULT = _U64(6364136223846793005)
_PCG_INC = _U64(1442695040888963407)
_U32_MASK = _U64(0xFFFFFFFF)


class RoundingMode(Enum):
    NEAREST_EVEN = "rne"
    STOCHASTIC = "stochastic"
    TOWARD_ZERO = "toward-zero"


class OverflowMode(Enum):
    SATURATE = "saturate"
    NON_SATURATING = "nonsat"


def counter_uniform_u32(seed: int, counters: np.ndarray) -> np.ndarray:
    """32-bit uniform draws keyed on (seed, counter), one per counter.

    A splitmix64 mix of the counter feeds a single PCG XSH-RR output step,
    so any element's draw can be computed without touching its neighbours.
    """
    counters = np.asarray(counters, dtype=np.uint64)
    z = counters * _GOLDEN_GAMMA + _U64(seed)
    z = (z ^ (z >> _U64(30))) * _MIX_1
    z = (z ^ (z >> _U64(27))) * _MIX_2
    z = z ^ (z >> _U64(31))

    state = z * _PCG_MULT + _PCG_INC
    xorshifted = (((state >> _U64(18)) ^ state) >> _U64(27)) & _U32_MASK
    rot = state >> _U64(59)
    out = (xorshifted >> rot) | ((xorshifted << ((_U64(32) - rot) & _U64(31))) & _U32_MASK)
    return out.astype(np.uint32)


class StochasticRng:
    """Caller-owned, counter-based random state for stochastic rounding.

    Element i of a draw of size n uses counter ``counter + i``; the counter
    advances by n afterwards. Identical (seed, counter) pairs give identical
    draws however the work is partitioned.
    """

    def __init__(self, seed: int, counter: int = 0):
        if not 0 <= seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        if counter < 0:
            raise ValueError(f"counter must be non-negative, got {counter}")
        self.seed = seed
        self.counter = counter

    def draw(self, n: int) -> np.ndarray:
        counters = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        return counter_uniform_u32(self.seed, counters)

    def __repr__(self) -> str:
        return f"StochasticRng(seed={self.seed}, counter={self.counter})"


def convert_array(x, fmt: Fp8Format,
                  rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                  overflow: OverflowMode = OverflowMode.SATURATE,
                  rng: Optional[StochasticRng] = None) -> np.ndarray:
    """Convert an array of binary32 values to FP8 patterns (uint8, same shape).

    Inputs that are not float32 are first rounded to binary32.
    """
    if rounding is RoundingMode.STOCHASTIC and rng is None:
        raise ValueError("Stochastic rounding needs a StochasticRng")

    with np.errstate(over='ignore'):
        values = np.asarray(x, dtype=np.float32)
    shape = values.shape
    flat = np.ascontiguousarray(values).reshape(-1)

    raw = flat.view(np.uint32).astype(np.int64)
    sign = (raw >> 31).astype(np.uint8) * np.uint8(SIGN_MASK)
    e32 = (raw >> 23) & 0xFF
    frac = raw & 0x7FFFFF
    sig = np.where(e32 > 0, frac | (1 << 23), frac)

    m = fmt.mantissa_bits
    min_quantum = fmt.min_exponent - m
    # value = sig * 2**exp32; FP8 quantum at this magnitude is 2**quantum.
    exp32 = np.maximum(e32, 1) - 150
    quantum = np.maximum(e32 - 127, fmt.min_exponent) - m
    shift = np.clip(quantum - exp32, 1, _MAX_SHIFT)

    whole = sig >> shift
    rem = sig & ((np.int64(1) << shift) - 1)

    if rounding is RoundingMode.NEAREST_EVEN:
        half = np.int64(1) << (shift - 1)
        round_up = (rem > half) | ((rem == half) & ((whole & 1) == 1))
    elif rounding is RoundingMode.TOWARD_ZERO:
        round_up = np.zeros(flat.shape, dtype=bool)
    else:
        # P(up) = rem / 2**shift, scaled to a 32-bit threshold.
        threshold = np.where(
            shift <= 32,
            rem << (32 - np.minimum(shift, 32)),
            rem >> (np.maximum(shift, 32) - 32),
        )
        round_up = rng.draw(flat.size).astype(np.int64) < threshold

    code = ((quantum - min_quantum) << m) + whole + round_up

    too_big = code > fmt.max_code
    if rounding is RoundingMode.NEAREST_EVEN:
        too_big |= np.abs(flat).astype(np.float64) >= fmt.overflow_threshold
    finite = e32 != 0xFF
    too_big &= finite
    if overflow is OverflowMode.SATURATE:
        code = np.where(too_big, fmt.max_code, code)
    else:
        code = np.where(too_big, fmt.overflow_code, code)

    is_nan = ~finite & (frac != 0)
    is_inf = ~finite & (frac == 0)
    code = np.where(is_nan, fmt.nan_code, code)
    code = np.where(is_inf, fmt.infinity_code if fmt.has_infinity else fmt.nan_code, code)

    out = code.astype(np.uint8) | sign
    n_over = int(np.count_nonzero(too_big))
    if n_over:
        logging.debug(f"{n_over} of {flat.size} values overflowed {fmt.name} ({overflow.value})")
    return out.reshape(shape)


def convert_to_fp8(x: float, fmt: Fp8Format,
                   rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                   overflow: OverflowMode = OverflowMode.SATURATE,
                   rng: Optional[StochasticRng] = None) -> Fp8Value:
    bits = convert_array(np.array([x]), fmt, rounding, overflow, rng)
    return Fp8Value(int(bits[0]), fmt)


def convert_to_binary32(v: Fp8Value) -> float:
    return decode(v)


def convert_array_to_binary32(bits: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    return decode_array(bits, fmt)


def e5m2_from_binary16_bits(h: int,
                            rounding: RoundingMode = RoundingMode.NEAREST_EVEN,
                            overflow: OverflowMode = OverflowMode.SATURATE,
                            rng: Optional[StochasticRng] = None) -> Fp8Value:
    """Convert a binary16 bit pattern to E5M2 by widening to binary32 first.

    Both formats share the 5-bit exponent field with bias 15, so this is a
    mantissa shortening from 10 to 2 bits with rounding.
    """
    if not 0 <= h <= 0xFFFF:
        raise ValueError(f"binary16 pattern out of range: {h}")
    wide = np.array([h], dtype=np.uint16).view(np.float16).astype(np.float32)
    return Fp8Value(int(convert_array(wide, E5M2, rounding, overflow, rng)[0]), E5M2)
