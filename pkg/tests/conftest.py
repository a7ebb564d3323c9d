"""Shared fixtures for the fp8kit test suite."""

import numpy as np
import pytest
from fp8kit.cli import _default_config
from fp8kit.formats import MAGNITUDE_MASK, SIGN_MASK, decode_table


def make_config():
    """Return a test-ready config dict (non-fixture, for direct import)."""
    config = _default_config()
    config['logging']['console'] = False
    config['logging']['log_file'] = None
    return config


@pytest.fixture
def default_config():
    """A default config dict with logging silenced."""
    return make_config()


def nearest_even_oracle(x, fmt) -> np.ndarray:
    """Brute-force round-to-nearest-even with saturation.

    Searches the sorted table of finite magnitudes directly instead of
    manipulating bit fields; ties go to the even code.
    """
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    table = decode_table(fmt).astype(np.float64)
    mags = table[:fmt.max_code + 1]
    a = np.abs(x.astype(np.float64))

    hi = np.searchsorted(mags, a, side='left')
    lo = np.clip(hi - 1, 0, fmt.max_code)
    hi = np.clip(hi, 0, fmt.max_code)
    d_lo = a - mags[lo]
    d_hi = mags[hi] - a
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (hi % 2 == 0))
    code = np.where(pick_hi, hi, lo)
    code = np.where(a >= fmt.overflow_threshold, fmt.max_code, code)

    sign = np.signbit(x).astype(np.uint8) * np.uint8(SIGN_MASK)
    code = np.where(np.isnan(x), fmt.nan_code, code)
    return (code.astype(np.uint8) & np.uint8(MAGNITUDE_MASK)) | sign


def stratified_inputs(fmt, n: int, seed: int = 0) -> np.ndarray:
    """Finite binary32 values covering the format's whole range, plus exact ties.

    A third log-uniform over the subnormal..overflow span, a third exact
    midpoints between neighbours, a third raw random bit patterns.
    """
    rng = np.random.default_rng(seed)
    k = n // 3

    lo = np.log2(fmt.min_subnormal) - 2
    hi = np.log2(fmt.overflow_threshold) + 1
    log_uniform = np.exp2(rng.uniform(lo, hi, k)).astype(np.float32)

    mags = decode_table(fmt).astype(np.float64)[:fmt.max_code + 1]
    mids = ((mags[:-1] + mags[1:]) / 2).astype(np.float32)
    midpoints = rng.choice(mids, k)

    raw = rng.integers(0, 2 ** 32, n - 2 * k, dtype=np.uint64).astype(np.uint32).view(np.float32)
    raw = raw[np.isfinite(raw)]

    signs = rng.choice(np.array([-1.0, 1.0], dtype=np.float32), 2 * k)
    return np.concatenate([np.concatenate([log_uniform, midpoints]) * signs, raw]).astype(np.float32)


@pytest.fixture
def lognormal_tensor():
    """Activation-like data: log-normal magnitudes with random signs."""
    rng = np.random.default_rng(1234)
    mags = rng.lognormal(mean=0.0, sigma=2.0, size=20000)
    signs = rng.choice([-1.0, 1.0], size=mags.size)
    return (mags * signs).astype(np.float32)


@pytest.fixture
def tmp_tensor_path():
    """A path in a fresh temporary directory, cleaned up afterwards."""
    import os
    import shutil
    import tempfile
    directory = tempfile.mkdtemp()
    try:
        yield os.path.join(directory, 't.fpt')
    finally:
        shutil.rmtree(directory)
