"""Tests for the fp8kit command-line interface."""

import csv
import json
import logging

import numpy as np
import pytest

from fp8kit.cli import build_parser, parse_scale_spec, parse_value, run
from fp8kit.formats import E4M3, Fp8Tensor, decode_table
from fp8kit.tensorio import read_sidecar, read_tensor, write_tensor


@pytest.fixture(autouse=True)
def _reset_logging():
    """run() points the root logger at the captured stderr; detach it afterwards."""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if type(handler) is logging.StreamHandler:
            root.removeHandler(handler)
    root.setLevel(logging.WARNING)


def _run_json(capsys, argv):
    code = run(argv)
    out = capsys.readouterr().out
    return code, json.loads(out)


@pytest.fixture
def representable_file(tmp_tensor_path):
    table = decode_table(E4M3)
    write_tensor(tmp_tensor_path, table[~np.isnan(table)].copy())
    return tmp_tensor_path


@pytest.fixture
def small_file(tmp_tensor_path):
    write_tensor(tmp_tensor_path, np.array([1.0, 2.0, 4.0, 448.0], dtype=np.float32))
    return tmp_tensor_path


class TestTable:
    def test_e4m3(self, capsys):
        code, doc = _run_json(capsys, ['table', '--format', 'e4m3'])
        assert code == 0
        assert doc['limits']['max_normal'] == 448.0
        assert doc['limits']['min_subnormal'] == 2.0 ** -9
        assert doc['limits']['binades'] == 18
        assert len(doc['entries']) == 256
        assert sum(1 for e in doc['entries'] if e['class'] == 'NaN') == 2
        assert doc['entries'][0x7E] == {'bits': '0x7E', 'value': 448.0, 'class': 'Normal', 'sign': '+'}

    def test_e5m2_infinities(self, capsys):
        _, doc = _run_json(capsys, ['table', '--format', 'e5m2'])
        assert sum(1 for e in doc['entries'] if e['class'] == 'Infinity') == 2
        assert doc['entries'][0x7C]['value'] == 'inf'
        assert doc['entries'][0x7F]['value'] == 'nan'

    def test_output_is_stable(self, capsys):
        run(['table', '--format', 'e5m2'])
        first = capsys.readouterr().out
        run(['table', '--format', 'e5m2'])
        assert capsys.readouterr().out == first

    def test_unknown_format_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            run(['table', '--format', 'e3m4'])
        assert excinfo.value.code == 2


class TestConvert:
    def test_exact(self, capsys):
        code, doc = _run_json(capsys, ['convert', '448', '--format', 'e4m3'])
        assert code == 0
        assert doc['bits_hex'] == '0x7E'
        assert doc['exact'] is True

    def test_infinity_to_e4m3(self, capsys):
        _, doc = _run_json(capsys, ['convert', 'inf', '--format', 'e4m3'])
        assert doc['class'] == 'NaN'
        assert doc['decoded'] == 'nan'

    def test_rounded(self, capsys):
        _, doc = _run_json(capsys, ['convert', '0.2', '--format', 'e4m3', '--round', 'rne'])
        assert doc['decoded'] == 0.203125
        assert doc['bits_hex'] == '0x25'
        assert doc['exact'] is False

    def test_hex_float(self, capsys):
        _, doc = _run_json(capsys, ['convert', '0x1.cp+8'])
        assert doc['bits_hex'] == '0x7E'

    def test_negative_hex_float(self, capsys):
        _, doc = _run_json(capsys, ['convert', '-0x1p-9'])
        assert doc['bits_hex'] == '0x81'
        assert doc['sign'] == '-'

    def test_nonsaturating(self, capsys):
        _, doc = _run_json(capsys, ['convert', '71680', '--format', 'e5m2', '--overflow', 'nonsat'])
        assert doc['bits_hex'] == '0x7C'
        assert doc['class'] == 'Infinity'

    def test_exact_compares_the_binary32_input(self, capsys):
        _, doc = _run_json(capsys, ['convert', '1.0000000001', '--format', 'e4m3'])
        assert doc['bits_hex'] == '0x38'
        assert doc['decoded'] == 1.0
        assert doc['exact'] is True

    def test_stochastic_with_seed(self, capsys):
        _, a = _run_json(capsys, ['convert', '0.3', '--round', 'stochastic', '--seed', '5'])
        _, b = _run_json(capsys, ['convert', '0.3', '--round', 'stochastic', '--seed', '5'])
        assert a == b
        assert a['bits_hex'] in ('0x29', '0x2A')

    def test_parse_error_is_usage_error(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            run(['convert', 'twelve'])
        assert excinfo.value.code == 2

    def test_seed_out_of_range(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            run(['convert', '1', '--round', 'stochastic', '--seed', str(2 ** 64)])
        assert excinfo.value.code == 2


class TestQuantize:
    def test_representable_tensor_has_zero_mse(self, capsys, representable_file, tmp_path):
        out_path = str(tmp_path / 'q.fpt')
        code, doc = _run_json(capsys, ['quantize', representable_file, out_path, '--scale', 'none'])
        assert code == 0
        assert doc['mse'] == 0.0
        assert doc['sqnr_db'] == 'inf'
        assert np.array_equal(read_tensor(out_path), read_tensor(representable_file))

    def test_fixed_scale(self, capsys, small_file, tmp_path):
        out_path = str(tmp_path / 'q.fpt')
        _, doc = _run_json(capsys, ['quantize', small_file, out_path, '--scale', 'fixed:2'])
        assert doc['scale_set_used']['scale'] == 2.0
        assert doc['overflow_count'] == 1

    def test_auto_scale(self, capsys, small_file, tmp_path):
        out_path = str(tmp_path / 'q.fpt')
        _, doc = _run_json(capsys, ['quantize', small_file, out_path, '--scale', 'auto:max'])
        assert doc['scale_set_used']['scale'] == 1.0
        assert doc['mse'] == 0.0

    def test_emit_fp8_writes_sidecar(self, capsys, tmp_tensor_path, tmp_path):
        write_tensor(tmp_tensor_path, np.array([[3.5, 1.0], [-7.0, 0.5]], dtype=np.float32))
        out_path = str(tmp_path / 'q.fpt')
        _, doc = _run_json(capsys, ['quantize', tmp_tensor_path, out_path, '--scale', 'auto:max',
                                    '--granularity', 'channel:0', '--emit-fp8'])
        fp8 = read_tensor(out_path)
        assert isinstance(fp8, Fp8Tensor)
        assert fp8.bits[0, 0] == 0x7E
        fmt, scale_set = read_sidecar(out_path)
        assert fmt == E4M3
        assert scale_set.values().tolist() == [128.0, 64.0]
        assert doc['sidecar'] == out_path + '.meta.json'

    def test_bad_scale_spec(self, capsys, small_file, tmp_path):
        with pytest.raises(SystemExit) as excinfo:
            run(['quantize', small_file, str(tmp_path / 'q.fpt'), '--scale', 'auto:kl'])
        assert excinfo.value.code == 2

    def test_missing_input_is_data_error(self, capsys, tmp_path):
        code = run(['quantize', str(tmp_path / 'missing.fpt'), str(tmp_path / 'q.fpt')])
        assert code == 1
        assert 'error' in capsys.readouterr().err

    def test_fp8_input_is_unscaled(self, capsys, tmp_tensor_path, tmp_path):
        write_tensor(tmp_tensor_path, np.array([3.5, 1.0], dtype=np.float32))
        fp8_path = str(tmp_path / 'fp8.fpt')
        run(['quantize', tmp_tensor_path, fp8_path, '--scale', 'auto:max', '--emit-fp8'])
        capsys.readouterr()
        _, doc = _run_json(capsys, ['stats', fp8_path])
        assert doc['amax'] == 3.5


class TestCalibrate:
    def test_max_example(self, capsys, small_file):
        code, doc = _run_json(capsys, ['calibrate', small_file, '--method', 'max'])
        assert code == 0
        assert doc['scale_set']['scale'] == 1.0
        assert doc['clipped_fraction'] == 0.0
        assert 'search_trace' not in doc

    def test_mse_trace(self, capsys, small_file):
        _, doc = _run_json(capsys, ['calibrate', small_file, '--method', 'mse', '--trace'])
        assert len(doc['search_trace'][0]) == 25

    def test_best(self, capsys, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.array([68.0] * 1000 + [448.0], dtype=np.float32))
        _, doc = _run_json(capsys, ['calibrate', tmp_tensor_path, '--method', 'best'])
        assert doc['method'] != 'max'

    def test_empty_channel_is_data_error(self, capsys, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.array([[1.0], [np.nan]], dtype=np.float32))
        assert run(['calibrate', tmp_tensor_path, '--granularity', 'channel:0']) == 1

    def test_bad_granularity(self, capsys, small_file):
        with pytest.raises(SystemExit) as excinfo:
            run(['calibrate', small_file, '--granularity', 'rows'])
        assert excinfo.value.code == 2


class TestSweepBias:
    def test_default_bias_row_matches_unscaled_quantize(self, capsys, tmp_tensor_path, tmp_path):
        rng = np.random.default_rng(0)
        write_tensor(tmp_tensor_path, rng.lognormal(0, 2, 5000).astype(np.float32))
        _, rows = _run_json(capsys, ['sweep-bias', tmp_tensor_path, '--lo', '5', '--hi', '9'])
        assert [r['bias'] for r in rows] == [5, 6, 7, 8, 9]
        _, report = _run_json(capsys, ['quantize', tmp_tensor_path, str(tmp_path / 'q.fpt')])
        assert rows[2]['value'] == report['mse']

    def test_csv(self, capsys, tmp_tensor_path, tmp_path):
        write_tensor(tmp_tensor_path, np.ones(10, dtype=np.float32))
        csv_path = str(tmp_path / 'sweep.csv')
        run(['sweep-bias', tmp_tensor_path, '--lo', '4', '--hi', '6', '--csv', csv_path])
        with open(csv_path, newline='') as f:
            rows = list(csv.reader(f))
        assert rows[0] == ['bias', 'mse']
        assert [r[0] for r in rows[1:]] == ['4', '5', '6']

    def test_inverted_range(self, capsys, small_file):
        with pytest.raises(SystemExit) as excinfo:
            run(['sweep-bias', small_file, '--lo', '9', '--hi', '3'])
        assert excinfo.value.code == 2

    def test_range_outside_bias_window(self, capsys, small_file):
        with pytest.raises(SystemExit) as excinfo:
            run(['sweep-bias', small_file, '--lo', '0', '--hi', '40'])
        assert excinfo.value.code == 2
        assert 'outside' in capsys.readouterr().err

    def test_usage_error_creates_no_log_file(self, capsys, small_file, tmp_path):
        log_path = tmp_path / 'fp8kit.log'
        config_path = tmp_path / 'fp8kit.yaml'
        config_path.write_text(f'logging:\n  log_file: {log_path}\n')
        with pytest.raises(SystemExit) as excinfo:
            run(['--config', str(config_path), 'sweep-bias', small_file, '--lo', '9', '--hi', '3'])
        assert excinfo.value.code == 2
        assert not log_path.exists()


class TestStatsAndCompare:
    def test_stats(self, capsys, tmp_tensor_path):
        write_tensor(tmp_tensor_path, np.array([0.5, -8.0, np.inf], dtype=np.float32))
        code, doc = _run_json(capsys, ['stats', tmp_tensor_path])
        assert code == 0
        assert doc['amax'] == 8.0
        assert doc['pos_inf_count'] == 1
        assert doc['log2_histogram'] == {'-1': 1, '3': 1}

    def test_compare(self, capsys, small_file):
        _, doc = _run_json(capsys, ['compare', small_file, '--format', 'e5m2'])
        assert set(doc) == {'e5m2', 'int8'}


class TestParsing:
    def test_parse_value(self):
        assert parse_value('0x1.8p1') == 3.0
        assert parse_value(' -2.5 ') == -2.5
        assert parse_value('-inf') == float('-inf')

    def test_parse_scale_spec(self):
        assert parse_scale_spec('none') == {'kind': 'none'}
        assert parse_scale_spec('auto:mse') == {'kind': 'auto', 'method': 'mse'}
        assert parse_scale_spec('fixed:0.5') == {'kind': 'fixed', 'value': 0.5}
        for bad in ('fixed:0', 'fixed:-1', 'manual', 'auto:'):
            with pytest.raises(ValueError):
                parse_scale_spec(bad)

    def test_global_flags_before_command(self):
        args = build_parser().parse_args(['--log-level', 'DEBUG', 'stats', 'x.fpt'])
        assert args.log_level == 'DEBUG'
        assert args.command == 'stats'

    def test_command_required(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_config_file(self, capsys, tmp_path):
        config_path = tmp_path / 'fp8kit.yaml'
        config_path.write_text('conversion:\n  format: e5m2\n')
        _, doc = _run_json(capsys, ['--config', str(config_path), 'table'])
        assert doc['format'] == 'e5m2'
        _, doc = _run_json(capsys, ['--config', str(config_path), 'table', '--format', 'e4m3'])
        assert doc['format'] == 'e4m3'

    def test_logs_go_to_stderr(self, capsys, small_file):
        run(['--log-level', 'INFO', 'calibrate', small_file, '--method', 'best'])
        captured = capsys.readouterr()
        json.loads(captured.out)
        assert 'Best-of calibration picked' in captured.err
