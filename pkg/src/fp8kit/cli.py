"""Command-line interface for fp8kit."""

import argparse
import copy
import csv
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from fp8kit import __version__
from fp8kit.calibrate import (
    CalibrationMethod, EmptySlice, calibrate, calibrate_best_of,
)
from fp8kit.convert import OverflowMode, RoundingMode, StochasticRng, convert_to_fp8
from fp8kit.formats import (
    FORMATS, binade_count, classify, decode, enumerate_values, get_format,
)
from fp8kit.quantsim import (
    QuantConfig, ScaleSource, SweepMetric,
    bias_sweep, compare_with_int8, fake_quantize, quantize_to_fp8, tensor_stats,
)
from fp8kit.scaling import BIAS_WINDOW, Granularity, ScaleConstraint, ScaleFactor, ScaleSet
from fp8kit.tensorio import TensorFileError, load_as_binary32, write_sidecar, write_tensor

try:
    import yaml
    YAML_AVAILABLE = True
except ImportError:
    YAML_AVAILABLE = False

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2

ROUNDING_CHOICES = [m.value for m in RoundingMode]
OVERFLOW_CHOICES = [m.value for m in OverflowMode]
METHOD_CHOICES = ['max', 'percentile', 'mse', 'best']


def _default_config() -> Dict:
    """Return default configuration."""
    return {
        'conversion': {
            'format': 'e4m3', 'rounding': 'rne', 'overflow': 'saturate', 'seed': 0
        },
        'scaling': {'constraint': 'free'},
        'calibration': {
            'method': 'max', 'percentile': 99.99, 'granularity': 'tensor',
            'mse_steps': 24, 'mse_step_exponent': 0.25
        },
        'quantsim': {'report_chunk_size': 65536},
        'output': {'indent': 2, 'csv': None},
        'logging': {'level': 'WARNING', 'log_file': None, 'console': True}
    }


def _merge(base: Dict, override: Dict) -> Dict:
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value
    return base


def load_config(config_file: Optional[str], cli_args: Dict) -> Dict:
    """Load and merge configuration from file and CLI arguments."""
    config = _default_config()

    if config_file:
        if not Path(config_file).exists():
            print(f"Config file {config_file} not found, using defaults", file=sys.stderr)
        elif not YAML_AVAILABLE:
            print(f"Cannot load {config_file}: PyYAML not installed", file=sys.stderr)
            print("Install with: pip install pyyaml", file=sys.stderr)
        else:
            try:
                with open(config_file, 'r') as f:
                    loaded = yaml.safe_load(f)
                if isinstance(loaded, dict):
                    _merge(config, loaded)
                elif loaded is not None:
                    print(f"Ignoring {config_file}: top level is not a mapping", file=sys.stderr)
            except yaml.YAMLError as e:
                print(f"Error parsing config file {config_file}: {e}", file=sys.stderr)
            except Exception as e:
                print(f"Could not read config file: {e}", file=sys.stderr)

    if cli_args.get('format'):
        config['conversion']['format'] = cli_args['format']
    if cli_args.get('round'):
        config['conversion']['rounding'] = cli_args['round']
    if cli_args.get('overflow'):
        config['conversion']['overflow'] = cli_args['overflow']
    if cli_args.get('seed') is not None:
        config['conversion']['seed'] = cli_args['seed']
    if cli_args.get('method'):
        config['calibration']['method'] = cli_args['method']
    if cli_args.get('percentile') is not None:
        config['calibration']['percentile'] = cli_args['percentile']
    if cli_args.get('granularity'):
        config['calibration']['granularity'] = cli_args['granularity']
    if cli_args.get('csv'):
        config['output']['csv'] = cli_args['csv']
    if cli_args.get('log_level'):
        config['logging']['level'] = cli_args['log_level']

    return config


def _setup_logging(config: Dict):
    """Configure logging; stdout is reserved for JSON, so the console handler uses stderr."""
    log_config = config['logging']
    log_level = getattr(logging, str(log_config['level']).upper(), logging.WARNING)

    handlers = []

    if log_config['console']:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(
            logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
        )
        handlers.append(console_handler)

    if log_config['log_file']:
        try:
            file_handler = logging.FileHandler(log_config['log_file'])
            file_handler.setFormatter(
                logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
            )
            handlers.append(file_handler)
        except Exception as e:
            print(f"Could not create log file: {e}", file=sys.stderr)

    if not handlers:
        handlers.append(logging.NullHandler())

    logging.basicConfig(
        level=log_level,
        handlers=handlers,
        force=True
    )


# -- argument parsing helpers ------------------------------------------------

def parse_value(text: str) -> float:
    """Decimal, hex-float or inf/nan spelling, as a Python float."""
    cleaned = text.strip().lower()
    if cleaned.lstrip('+-').startswith('0x'):
        return float.fromhex(cleaned)
    return float(cleaned)


def parse_scale_spec(text: str) -> Dict:
    """auto:<max|percentile|mse|best>, fixed:<float> or none."""
    if text == 'none':
        return {'kind': 'none'}
    if text.startswith('auto:'):
        method = text.split(':', 1)[1]
        if method not in METHOD_CHOICES:
            raise ValueError(f"Unknown calibration method in --scale '{text}'")
        return {'kind': 'auto', 'method': method}
    if text.startswith('fixed:'):
        value = float(text.split(':', 1)[1])
        ScaleFactor(value)
        return {'kind': 'fixed', 'value': value}
    raise ValueError(f"Bad --scale '{text}' (expected auto:<method>, fixed:<float> or none)")


def _methods(name: str, percentile: float) -> List[CalibrationMethod]:
    if name == 'best':
        return [CalibrationMethod.max(), CalibrationMethod.percentile_of(percentile),
                CalibrationMethod.mse()]
    return [CalibrationMethod.parse(name, percentile)]


def _jsonable(value):
    """Recursively replace floats JSON cannot carry with strings."""
    if isinstance(value, float):
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _emit(document, config: Dict):
    json.dump(_jsonable(document), sys.stdout, indent=config['output']['indent'],
              sort_keys=True, allow_nan=False)
    sys.stdout.write('\n')


def _quant_config(config: Dict, scale_source: ScaleSource) -> QuantConfig:
    conv = config['conversion']
    return QuantConfig(
        format=get_format(conv['format']),
        rounding=RoundingMode(conv['rounding']),
        overflow=OverflowMode(conv['overflow']),
        scale_source=scale_source,
        seed=int(conv['seed']),
        report_chunk_size=int(config['quantsim']['report_chunk_size']),
    )


def _calibration_kwargs(config: Dict) -> Dict:
    cal = config['calibration']
    return {
        'constraint': ScaleConstraint(config['scaling']['constraint']),
        'mse_steps': int(cal['mse_steps']),
        'mse_step_exponent': float(cal['mse_step_exponent']),
    }


# -- commands ------------------------------------------------------------------

def cmd_table(args, config: Dict) -> int:
    fmt = get_format(config['conversion']['format'])
    entries = []
    for entry in enumerate_values(fmt):
        entries.append({
            'bits': f"0x{entry.bits:02X}",
            'value': entry.value,
            'class': entry.fp_class.kind.value,
            'sign': entry.fp_class.sign.value,
        })
    limits = fmt.limits()
    limits.update({
        'exponent_bias': fmt.exponent_bias,
        'binades': binade_count(fmt),
        'overflow_threshold': fmt.overflow_threshold,
    })
    _emit({'format': fmt.name, 'limits': limits, 'entries': entries}, config)
    return EXIT_OK


def cmd_convert(args, config: Dict) -> int:
    conv = config['conversion']
    fmt = get_format(conv['format'])
    rounding = RoundingMode(conv['rounding'])
    rng = StochasticRng(int(conv['seed'])) if rounding is RoundingMode.STOCHASTIC else None

    value = args.parsed_value
    with np.errstate(over='ignore'):
        binary32 = float(np.float32(value))
    result = convert_to_fp8(binary32, fmt, rounding, OverflowMode(conv['overflow']), rng)
    decoded = decode(result)
    fp_class = classify(result)
    exact = (math.isnan(decoded) and math.isnan(binary32)) or decoded == binary32
    _emit({
        'input': value,
        'format': fmt.name,
        'bits_hex': f"0x{result.bits:02X}",
        'decoded': decoded,
        'class': fp_class.kind.value,
        'sign': fp_class.sign.value,
        'exact': exact,
    }, config)
    return EXIT_OK


def cmd_quantize(args, config: Dict) -> int:
    spec = args.scale_spec
    cal = config['calibration']
    fmt = get_format(config['conversion']['format'])
    granularity = Granularity.parse(cal['granularity'])
    tensor = load_as_binary32(args.input)

    if spec['kind'] == 'none':
        source = ScaleSource.none()
    elif spec['kind'] == 'fixed':
        source = ScaleSource.explicit(ScaleSet.per_tensor(ScaleFactor(spec['value'])))
    else:
        methods = _methods(spec['method'], float(cal['percentile']))
        if len(methods) == 1:
            result = calibrate(tensor, fmt, methods[0], granularity, **_calibration_kwargs(config))
        else:
            result = calibrate_best_of(tensor, fmt, methods, granularity, **_calibration_kwargs(config))
        source = ScaleSource.explicit(result.scale_set)

    qcfg = _quant_config(config, source)
    out, report = fake_quantize(tensor, qcfg)
    document = report.to_dict()
    document['format'] = qcfg.format.name
    document['output'] = str(args.output)

    if args.emit_fp8:
        fp8, scale_set = quantize_to_fp8(tensor, qcfg)
        write_tensor(args.output, fp8)
        document['sidecar'] = str(write_sidecar(args.output, qcfg.format, scale_set))
    else:
        write_tensor(args.output, out)

    _emit(document, config)
    return EXIT_OK


def cmd_calibrate(args, config: Dict) -> int:
    cal = config['calibration']
    fmt = get_format(config['conversion']['format'])
    granularity = Granularity.parse(cal['granularity'])
    methods = _methods(cal['method'], float(cal['percentile']))
    tensor = load_as_binary32(args.input)

    if len(methods) == 1:
        result = calibrate(tensor, fmt, methods[0], granularity, **_calibration_kwargs(config))
    else:
        result = calibrate_best_of(tensor, fmt, methods, granularity, **_calibration_kwargs(config))
    document = result.to_dict(include_trace=args.trace)
    document['format'] = fmt.name
    _emit(document, config)
    return EXIT_OK


def cmd_sweep_bias(args, config: Dict) -> int:
    conv = config['conversion']
    fmt = get_format(conv['format'])
    tensor = load_as_binary32(args.input)
    rows = bias_sweep(tensor, fmt, (args.lo, args.hi), SweepMetric(args.metric),
                      RoundingMode(conv['rounding']), OverflowMode(conv['overflow']),
                      int(conv['seed']))

    csv_path = config['output']['csv']
    if csv_path:
        with open(csv_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f)
            writer.writerow(['bias', args.metric])
            writer.writerows(rows)
        logging.info(f"Wrote sweep CSV to {csv_path}")

    _emit([{'bias': bias, 'value': value} for bias, value in rows], config)
    return EXIT_OK


def cmd_stats(args, config: Dict) -> int:
    _emit(tensor_stats(load_as_binary32(args.input)), config)
    return EXIT_OK


def cmd_compare(args, config: Dict) -> int:
    fmt = get_format(config['conversion']['format'])
    granularity = Granularity.parse(config['calibration']['granularity'])
    reports = compare_with_int8(load_as_binary32(args.input), fmt, granularity)
    _emit({name: report.to_dict() for name, report in reports.items()}, config)
    return EXIT_OK


COMMANDS = {
    'table': cmd_table,
    'convert': cmd_convert,
    'quantize': cmd_quantize,
    'calibrate': cmd_calibrate,
    'sweep-bias': cmd_sweep_bias,
    'stats': cmd_stats,
    'compare': cmd_compare,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fp8kit',
        description='fp8kit - bit-exact E4M3/E5M2 conversion, scaling and fake quantization',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s table --format e4m3
  %(prog)s convert 0.2 --format e4m3 --round rne
  %(prog)s quantize acts.fpt acts-q.fpt --scale auto:max
  %(prog)s calibrate acts.fpt --method mse --trace
  %(prog)s sweep-bias acts.fpt --lo 0 --hi 15 --csv sweep.csv
        """
    )
    parser.add_argument('--config', help='Path to config file (YAML)')
    parser.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level for stderr diagnostics')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--format', choices=sorted(FORMATS), help='FP8 format')

    rounding = argparse.ArgumentParser(add_help=False)
    rounding.add_argument('--round', choices=ROUNDING_CHOICES, help='Rounding mode')
    rounding.add_argument('--seed', type=int, help='Seed for stochastic rounding (u64)')
    rounding.add_argument('--overflow', choices=OVERFLOW_CHOICES, help='Overflow handling')

    calib = argparse.ArgumentParser(add_help=False)
    calib.add_argument('--granularity', help="'tensor' or 'channel:<axis>'")
    calib.add_argument('--percentile', type=float, help='Percentile for percentile calibration')

    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('table', parents=[common], help='All 256 patterns and the format limits')

    p = sub.add_parser('convert', parents=[common, rounding], help='Convert one value')
    p.add_argument('value', help='Decimal, hex-float (0x1.cp+8), inf or nan')

    p = sub.add_parser('quantize', parents=[common, rounding, calib],
                       help='Fake-quantize an FPT1 tensor file')
    p.add_argument('input', help='Input FPT1 file')
    p.add_argument('output', help='Output FPT1 file')
    p.add_argument('--scale', default='none',
                   help='auto:{max,percentile,mse,best}, fixed:<float> or none')
    p.add_argument('--emit-fp8', action='store_true',
                   help='Write raw FP8 bytes plus a .meta.json sidecar instead of binary32')

    p = sub.add_parser('calibrate', parents=[common, calib], help='Choose scale factors')
    p.add_argument('input', help='Input FPT1 file')
    p.add_argument('--method', choices=METHOD_CHOICES, help='Calibration method')
    p.add_argument('--trace', action='store_true', help='Include the MSE search trace')

    p = sub.add_parser('sweep-bias', parents=[common, rounding],
                       help='Error metric across exponent biases')
    p.add_argument('input', help='Input FPT1 file')
    p.add_argument('--lo', type=int, default=0, help='Lowest bias (default 0)')
    p.add_argument('--hi', type=int, default=15, help='Highest bias (default 15)')
    p.add_argument('--metric', choices=[m.value for m in SweepMetric], default='mse')
    p.add_argument('--csv', help='Also write bias,metric rows to this CSV file')

    p = sub.add_parser('stats', help='Magnitude statistics of a tensor')
    p.add_argument('input', help='Input FPT1 file')

    p = sub.add_parser('compare', parents=[common, calib],
                       help='int8 vs FP8 fake quantization of a tensor')
    p.add_argument('input', help='Input FPT1 file')

    return parser


def _validate(parser: argparse.ArgumentParser, args, config: Dict):
    """Check everything that can be checked before any file is touched."""
    try:
        get_format(config['conversion']['format'])
        RoundingMode(config['conversion']['rounding'])
        OverflowMode(config['conversion']['overflow'])
        ScaleConstraint(config['scaling']['constraint'])
        if not 0 <= int(config['conversion']['seed']) < 2 ** 64:
            raise ValueError(f"seed {config['conversion']['seed']} is not a u64")
        Granularity.parse(config['calibration']['granularity'])
        if config['calibration']['method'] not in METHOD_CHOICES:
            raise ValueError(f"Unknown calibration method '{config['calibration']['method']}'")
        CalibrationMethod.percentile_of(float(config['calibration']['percentile']))
        if args.command == 'convert':
            args.parsed_value = parse_value(args.value)
        if args.command == 'quantize':
            args.scale_spec = parse_scale_spec(args.scale)
        if args.command == 'sweep-bias':
            if args.lo > args.hi:
                raise ValueError(f"--lo {args.lo} is greater than --hi {args.hi}")
            if args.lo not in BIAS_WINDOW or args.hi not in BIAS_WINDOW:
                raise ValueError(f"Bias range [{args.lo}, {args.hi}] outside "
                                 f"[{BIAS_WINDOW.start}, {BIAS_WINDOW.stop - 1}]")
    except (ValueError, TypeError) as e:
        parser.error(str(e))


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one command, return the exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    config = load_config(args.config, vars(args))
    _validate(parser, args, config)
    _setup_logging(config)

    try:
        return COMMANDS[args.command](args, copy.deepcopy(config))
    except (TensorFileError, EmptySlice, ValueError, OSError) as e:
        logging.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA_ERROR


def main():
    """Synchronous entry point for console_scripts."""
    sys.exit(run())


if __name__ == '__main__':
    main()
