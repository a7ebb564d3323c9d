"""FP8 binary formats: E4M3 and E5M2 descriptors, classification, decode and exact encode.

Magnitudes are handled as 7-bit "codes" (the pattern with the sign bit
masked off). Within a format the code order is the magnitude order, which
is what total ordering and the converter rely on.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from functools import lru_cache
from typing import Dict, List, NamedTuple, Tuple

import numpy as np

SIGN_MASK = 0x80
MAGNITUDE_MASK = 0x7F

# Host quiet NaN (binary32), sign bit added on decode.
_QNAN32_BITS = 0x7FC00000


class SpecialPolicy(Enum):
    """How the top exponent field is spent."""
    RECLAIMED_NAN_ONLY = "reclaimed-nan-only"   # E4M3: one NaN mantissa, no infinities
    FULL_IEEE = "full-ieee"                     # E5M2: IEEE infinities and NaNs


class FpKind(Enum):
    ZERO = "Zero"
    SUBNORMAL = "Subnormal"
    NORMAL = "Normal"
    INFINITY = "Infinity"
    NAN = "NaN"


class Sign(Enum):
    POS = "+"
    NEG = "-"


@dataclass(frozen=True)
class FpClass:
    kind: FpKind
    sign: Sign

    def __str__(self) -> str:
        return f"{self.sign.value}{self.kind.value}"


class NotRepresentable(ValueError):
    """Raised by encode_exact when a finite value is not in the format's value set."""

    def __init__(self, value: float, fmt: "Fp8Format"):
        self.value = value
        self.format = fmt
        super().__init__(f"{value!r} is not representable in {fmt.name}")


@dataclass(frozen=True)
class Fp8Format:
    """Descriptor of an 8-bit floating point format (1 sign bit + exponent + mantissa)."""

    name: str
    exponent_bits: int
    mantissa_bits: int
    exponent_bias: int
    special_policy: SpecialPolicy

    def __post_init__(self):
        if self.exponent_bits + self.mantissa_bits + 1 != 8:
            raise ValueError(
                f"{self.name}: exponent_bits + mantissa_bits + 1 must be 8, "
                f"got {self.exponent_bits} + {self.mantissa_bits} + 1"
            )
        if self.exponent_bits not in (4, 5):
            raise ValueError(f"{self.name}: only E4M3 and E5M2 layouts exist")

    # -- field layout -----------------------------------------------------

    @property
    def mantissa_mask(self) -> int:
        return (1 << self.mantissa_bits) - 1

    @property
    def exponent_field_max(self) -> int:
        return (1 << self.exponent_bits) - 1

    @property
    def has_infinity(self) -> bool:
        return self.special_policy is SpecialPolicy.FULL_IEEE

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal binade."""
        return 1 - self.exponent_bias

    @property
    def max_exponent(self) -> int:
        """Unbiased exponent of the binade holding max_normal."""
        top = self.exponent_field_max
        if self.special_policy is SpecialPolicy.FULL_IEEE:
            top -= 1
        return top - self.exponent_bias

    # -- special codes (magnitude, sign bit clear) --------------------------

    @property
    def max_code(self) -> int:
        """Magnitude code of max_normal."""
        if self.special_policy is SpecialPolicy.RECLAIMED_NAN_ONLY:
            return MAGNITUDE_MASK - 1
        return (self.exponent_field_max << self.mantissa_bits) - 1

    @property
    def nan_code(self) -> int:
        """Canonical NaN magnitude code emitted on encode."""
        if self.special_policy is SpecialPolicy.RECLAIMED_NAN_ONLY:
            return MAGNITUDE_MASK
        return (self.exponent_field_max << self.mantissa_bits) | (1 << (self.mantissa_bits - 1))

    @property
    def infinity_code(self) -> int:
        if not self.has_infinity:
            raise ValueError(f"{self.name} has no infinity encoding")
        return self.exponent_field_max << self.mantissa_bits

    @property
    def overflow_code(self) -> int:
        """What a non-saturating overflow turns into: infinity if the format has one, else NaN."""
        return self.infinity_code if self.has_infinity else self.nan_code

    # -- limits ------------------------------------------------------------

    @property
    def max_normal(self) -> float:
        mantissa_max = self.max_code & self.mantissa_mask
        return math.ldexp(1.0 + mantissa_max / (1 << self.mantissa_bits), self.max_exponent)

    @property
    def min_normal(self) -> float:
        return math.ldexp(1.0, self.min_exponent)

    @property
    def max_subnormal(self) -> float:
        return math.ldexp(self.mantissa_mask / (1 << self.mantissa_bits), self.min_exponent)

    @property
    def min_subnormal(self) -> float:
        return math.ldexp(1.0, self.min_exponent - self.mantissa_bits)

    @property
    def overflow_threshold(self) -> float:
        """Smallest magnitude that counts as overflow under round-to-nearest-even.

        max_normal plus half an ulp of the top binade, measured on the
        extended exponent grid: 464 for E4M3, 61440 for E5M2.
        """
        return self.max_normal + math.ldexp(1.0, self.max_exponent - self.mantissa_bits - 1)

    def limits(self) -> Dict[str, float]:
        return {
            'max_normal': self.max_normal,
            'min_normal': self.min_normal,
            'max_subnormal': self.max_subnormal,
            'min_subnormal': self.min_subnormal,
        }

    # -- hypothetical variants (oracles) ------------------------------------

    def with_bias(self, bias: int) -> "Fp8Format":
        return replace(self, name=f"{self.name}-bias{bias}", exponent_bias=bias)

    def with_special_policy(self, policy: SpecialPolicy) -> "Fp8Format":
        return replace(self, name=f"{self.name}-{policy.value}", special_policy=policy)


E4M3 = Fp8Format('e4m3', 4, 3, 7, SpecialPolicy.RECLAIMED_NAN_ONLY)
E5M2 = Fp8Format('e5m2', 5, 2, 15, SpecialPolicy.FULL_IEEE)

FORMATS: Dict[str, Fp8Format] = {E4M3.name: E4M3, E5M2.name: E5M2}


def get_format(name: str) -> Fp8Format:
    """Resolve a format by name ("e4m3" / "e5m2", case-insensitive)."""
    try:
        return FORMATS[name.lower()]
    except KeyError:
        raise ValueError(f"Unknown format '{name}' (expected one of {sorted(FORMATS)})") from None


def binade_count(fmt: Fp8Format) -> int:
    return math.ceil(math.log2(fmt.max_normal / fmt.min_subnormal))


@dataclass(frozen=True)
class Fp8Value:
    """An 8-bit pattern tagged with its format."""

    bits: int
    format: Fp8Format

    def __post_init__(self):
        if not 0 <= self.bits <= 0xFF:
            raise ValueError(f"FP8 pattern out of range: {self.bits}")

    @property
    def sign(self) -> Sign:
        return Sign.NEG if self.bits & SIGN_MASK else Sign.POS

    @property
    def exponent_field(self) -> int:
        return (self.bits & MAGNITUDE_MASK) >> self.format.mantissa_bits

    @property
    def mantissa_field(self) -> int:
        return self.bits & self.format.mantissa_mask

    @property
    def fp_class(self) -> FpClass:
        return classify(self)

    def is_nan(self) -> bool:
        return classify(self).kind is FpKind.NAN

    def to_float(self) -> float:
        return decode(self)

    def __str__(self) -> str:
        return f"0x{self.bits:02X}"


def _classify_bits(bits: int, fmt: Fp8Format) -> FpClass:
    sign = Sign.NEG if bits & SIGN_MASK else Sign.POS
    code = bits & MAGNITUDE_MASK
    exponent = code >> fmt.mantissa_bits
    mantissa = code & fmt.mantissa_mask

    if fmt.special_policy is SpecialPolicy.RECLAIMED_NAN_ONLY:
        if code == MAGNITUDE_MASK:
            return FpClass(FpKind.NAN, sign)
    elif exponent == fmt.exponent_field_max:
        return FpClass(FpKind.INFINITY if mantissa == 0 else FpKind.NAN, sign)

    if exponent == 0:
        return FpClass(FpKind.ZERO if mantissa == 0 else FpKind.SUBNORMAL, sign)
    return FpClass(FpKind.NORMAL, sign)


def _decode_bits(bits: int, fmt: Fp8Format) -> float:
    fp_class = _classify_bits(bits, fmt)
    negative = fp_class.sign is Sign.NEG
    if fp_class.kind is FpKind.NAN:
        raw = np.array([_QNAN32_BITS | (0x80000000 if negative else 0)], dtype=np.uint32)
        return float(raw.view(np.float32)[0])
    if fp_class.kind is FpKind.INFINITY:
        return -math.inf if negative else math.inf

    code = bits & MAGNITUDE_MASK
    exponent = code >> fmt.mantissa_bits
    mantissa = code & fmt.mantissa_mask
    if exponent == 0:
        magnitude = math.ldexp(mantissa, fmt.min_exponent - fmt.mantissa_bits)
    else:
        magnitude = math.ldexp((1 << fmt.mantissa_bits) | mantissa,
                               exponent - fmt.exponent_bias - fmt.mantissa_bits)
    return -magnitude if negative else magnitude


@lru_cache(maxsize=None)
def decode_table(fmt: Fp8Format) -> np.ndarray:
    """All 256 decodes as a read-only binary32 array indexed by pattern."""
    table = np.array([_decode_bits(b, fmt) for b in range(256)], dtype=np.float32)
    table.setflags(write=False)
    return table


def decode_array(bits: np.ndarray, fmt: Fp8Format) -> np.ndarray:
    """Vectorised decode of a uint8 array; result has the same shape, dtype float32."""
    return decode_table(fmt)[np.asarray(bits, dtype=np.uint8)]


def classify(v: Fp8Value) -> FpClass:
    return _classify_bits(v.bits, v.format)


def decode(v: Fp8Value) -> float:
    """Exact widening to binary32 (returned as a Python float, which holds it exactly)."""
    return float(decode_table(v.format)[v.bits])


@lru_cache(maxsize=None)
def _encode_index(fmt: Fp8Format) -> Dict[Tuple[bool, float], int]:
    index = {}
    for bits in range(256):
        value = _decode_bits(bits, fmt)
        if math.isnan(value):
            continue
        index[(math.copysign(1.0, value) < 0, abs(value))] = bits
    return index


def encode_exact(x: float, fmt: Fp8Format) -> Fp8Value:
    """Return the unique pattern decoding to x (-0.0 and +0.0 are distinct).

    NaN input gives the canonical NaN with the input's sign. Raises
    NotRepresentable for anything else outside the value set.
    """
    x = float(x)
    negative = math.copysign(1.0, x) < 0
    if math.isnan(x):
        return Fp8Value((SIGN_MASK if negative else 0) | fmt.nan_code, fmt)
    bits = _encode_index(fmt).get((negative, abs(x)))
    if bits is None:
        raise NotRepresentable(x, fmt)
    return Fp8Value(bits, fmt)


class Fp8Entry(NamedTuple):
    bits: int
    value: float
    fp_class: FpClass


def enumerate_values(fmt: Fp8Format) -> List[Fp8Entry]:
    """All 256 patterns of a format, ordered by bits."""
    return [Fp8Entry(b, _decode_bits(b, fmt), _classify_bits(b, fmt)) for b in range(256)]


def total_order_key(v: Fp8Value) -> int:
    """Integer key ordering non-NaN values numerically (sign-magnitude folding).

    Both zeros map to key 0.
    """
    if classify(v).kind is FpKind.NAN:
        raise ValueError(f"NaN pattern {v} has no position in the total order")
    code = v.bits & MAGNITUDE_MASK
    return -code if v.bits & SIGN_MASK else code


def compare(a: Fp8Value, b: Fp8Value) -> int:
    """Three-way numeric comparison (-1, 0, 1); -0 == +0."""
    if a.format != b.format:
        raise ValueError(f"Cannot compare {a.format.name} with {b.format.name}")
    ka, kb = total_order_key(a), total_order_key(b)
    return (ka > kb) - (ka < kb)


@dataclass
class Fp8Tensor:
    """Raw FP8 patterns (uint8, tensor-shaped) with their format."""

    bits: np.ndarray
    format: Fp8Format

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.bits.shape

    def decode(self) -> np.ndarray:
        return decode_array(self.bits, self.format)
