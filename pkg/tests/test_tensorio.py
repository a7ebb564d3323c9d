"""Tests for the FPT1 tensor file format and its scale sidecar."""

import json
import os
import struct

import numpy as np
import pytest

from fp8kit.formats import E4M3, E5M2, Fp8Tensor
from fp8kit.scaling import ScaleFactor, ScaleSet
from fp8kit.tensorio import (
    MAGIC, BadDtype, BadHeader, BadMagic, Dtype, RankOutOfRange, ShapeOutOfRange,
    TensorFileError, TruncatedPayload,
    decode_header, encode_header, load_as_binary32, read_sidecar, read_tensor,
    sidecar_path, write_sidecar, write_tensor,
)


def _bits(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).view(np.uint32)


class TestHeader:
    def test_layout(self):
        header = encode_header(Dtype.FP8_E5M2, (2, 3))
        assert header[:4] == b'FPT1'
        assert header[4] == 0x02
        assert header[5] == 2
        assert header[6:8] == b'\x00\x00'
        assert struct.unpack('<QQ', header[8:]) == (2, 3)

    def test_decode(self):
        header = encode_header(Dtype.BINARY32, (4, 1, 5))
        assert decode_header(header) == (Dtype.BINARY32, (4, 1, 5), 32)

    @pytest.mark.parametrize('position', range(4))
    def test_every_magic_mutation_is_rejected(self, position):
        header = bytearray(encode_header(Dtype.BINARY32, (1,)))
        for delta in range(1, 256):
            mutated = bytearray(header)
            mutated[position] = (mutated[position] + delta) % 256
            with pytest.raises(BadMagic):
                decode_header(bytes(mutated))

    def test_bad_dtype(self):
        header = bytearray(encode_header(Dtype.BINARY32, (1,)))
        header[4] = 0x07
        with pytest.raises(BadDtype) as excinfo:
            decode_header(bytes(header))
        assert excinfo.value.field == 'dtype'

    @pytest.mark.parametrize('rank', [0, 9])
    def test_rank_out_of_range(self, rank):
        header = MAGIC + bytes([0x00, rank, 0, 0]) + b'\x01' + b'\x00' * 7 * max(rank, 1)
        with pytest.raises(RankOutOfRange):
            decode_header(header)

    def test_encode_rank_zero(self):
        with pytest.raises(RankOutOfRange):
            encode_header(Dtype.BINARY32, ())

    def test_zero_dimension(self):
        with pytest.raises(ShapeOutOfRange):
            encode_header(Dtype.BINARY32, (3, 0))

    def test_too_many_elements(self):
        with pytest.raises(ShapeOutOfRange):
            encode_header(Dtype.FP8_E4M3, (2 ** 20, 2 ** 20, 2))

    def test_reserved_bytes_must_be_zero(self):
        header = bytearray(encode_header(Dtype.BINARY32, (1,)))
        header[6] = 1
        with pytest.raises(BadHeader):
            decode_header(bytes(header))

    def test_short_header(self):
        with pytest.raises(BadHeader):
            decode_header(b'FPT1')
        with pytest.raises(BadHeader):
            decode_header(encode_header(Dtype.BINARY32, (1, 2))[:-3])


class TestReadWrite:
    def test_three_element_file_is_28_bytes(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.array([1.0, 2.0, 3.0], dtype=np.float32))
        assert os.path.getsize(tmp_tensor_path) == 28

    def test_binary32_round_trip_is_bit_exact(self, tmp_tensor_path):
        t = np.array([[1.5, -0.0, np.inf], [0.0, 0.0, 1e-45]], dtype=np.float32)
        # NaNs with payloads, set through the bits so no float conversion touches them
        t.view(np.uint32)[1, :2] = [0x7FC01234, 0xFFA00001]
        write_tensor(tmp_tensor_path, t)
        back = read_tensor(tmp_tensor_path)
        assert back.shape == (2, 3)
        assert back.dtype == np.float32
        assert np.array_equal(_bits(back), _bits(t))

    def test_payload_is_little_endian(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.array([1.0], dtype=np.float32))
        with open(tmp_tensor_path, 'rb') as f:
            data = f.read()
        assert data[16:] == b'\x00\x00\x80\x3f'

    def test_fp8_round_trip(self, tmp_tensor_path):
        bits = np.arange(256, dtype=np.uint8).reshape(16, 16)
        write_tensor(tmp_tensor_path, Fp8Tensor(bits, E5M2))
        back = read_tensor(tmp_tensor_path)
        assert isinstance(back, Fp8Tensor)
        assert back.format == E5M2
        assert np.array_equal(back.bits, bits)

    def test_single_e4m3_byte_decodes_to_max(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, Fp8Tensor(np.array([0x7E], dtype=np.uint8), E4M3))
        assert read_tensor(tmp_tensor_path).decode().tolist() == [448.0]

    def test_dtype_mismatch(self, tmp_tensor_path):
        with pytest.raises(BadDtype):
            write_tensor(tmp_tensor_path, np.ones(2, dtype=np.float32), Dtype.FP8_E4M3)

    def test_rank_zero_write(self, tmp_tensor_path):
        with pytest.raises(RankOutOfRange):
            write_tensor(tmp_tensor_path, np.float32(1.0))

    def test_truncated_payload(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.ones(4, dtype=np.float32))
        with open(tmp_tensor_path, 'rb+') as f:
            f.truncate(os.path.getsize(tmp_tensor_path) - 1)
        with pytest.raises(TruncatedPayload) as excinfo:
            read_tensor(tmp_tensor_path)
        assert excinfo.value.field == 'payload'
        assert tmp_tensor_path in str(excinfo.value)

    def test_trailing_bytes(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.ones(4, dtype=np.float32))
        with open(tmp_tensor_path, 'ab') as f:
            f.write(b'\x00')
        with pytest.raises(BadHeader):
            read_tensor(tmp_tensor_path)

    def test_bad_magic_file(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.ones(1, dtype=np.float32))
        with open(tmp_tensor_path, 'rb+') as f:
            f.write(b'FPT2')
        with pytest.raises(BadMagic):
            read_tensor(tmp_tensor_path)

    def test_missing_file(self, tmp_tensor_path):
        with pytest.raises(TensorFileError) as excinfo:
            read_tensor(tmp_tensor_path)
        assert excinfo.value.field == 'io'


class TestSidecar:
    def test_round_trip(self, tmp_tensor_path):
        ss = ScaleSet.per_channel(1, [ScaleFactor(2.0), ScaleFactor(0.5)])
        target = write_sidecar(tmp_tensor_path, E4M3, ss)
        assert target == sidecar_path(tmp_tensor_path)
        assert str(target).endswith('.fpt.meta.json')
        with open(target) as f:
            meta = json.load(f)
        assert set(meta) == {'format', 'scale', 'granularity', 'axis', 'per_channel_scales'}
        fmt, back = read_sidecar(tmp_tensor_path)
        assert fmt == E4M3
        assert back == ss

    def test_absent(self, tmp_tensor_path):
        assert read_sidecar(tmp_tensor_path) is None

    def test_unreadable(self, tmp_tensor_path):
        with open(sidecar_path(tmp_tensor_path), 'w') as f:
            f.write('{"format": "e9m9"}')
        with pytest.raises(TensorFileError) as excinfo:
            read_sidecar(tmp_tensor_path)
        assert excinfo.value.field == 'sidecar'

    def test_load_as_binary32_unscales(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, Fp8Tensor(np.array([0x7E, 0x38], dtype=np.uint8), E4M3))
        write_sidecar(tmp_tensor_path, E4M3, ScaleSet.per_tensor(ScaleFactor(128.0)))
        assert load_as_binary32(tmp_tensor_path).tolist() == [3.5, 1.0 / 128]

    def test_load_as_binary32_without_sidecar(self, tmp_tensor_path):
        write_tensor(tmp_tensor_path, Fp8Tensor(np.array([0x7E], dtype=np.uint8), E4M3))
        assert load_as_binary32(tmp_tensor_path).tolist() == [448.0]

    def test_load_as_binary32_passes_binary32_through(self, tmp_tensor_path):
        t = np.array([0.1, -7.0], dtype=np.float32)
        write_tensor(tmp_tensor_path, t)
        assert np.array_equal(load_as_binary32(tmp_tensor_path), t)
