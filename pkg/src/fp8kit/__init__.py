"""fp8kit: bit-exact E4M3/E5M2 conversion, scaling and fake quantization."""

__version__ = "0.1.0"
