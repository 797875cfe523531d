#!/usr/bin/env python3
"""
BottleNet command line
Single entry point for the split-computing pipeline: generate datasets,
train the baseline, sweep bottleneck configurations, profile and plan
partitions, render reports, and run the split server, client and load
monitor.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/network error.
"""

import os
import sys
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv

from bottlenet_errors import (
    EXIT_DATA, EXIT_OK, EXIT_USAGE, ArtifactMissingError, BottleNetError, ConfigError, DatasetError,
    error_handler,
)
from bottleneck_unit import compare_training_modes, split_graph
from config.constants import (
    DEFAULT_BATCH_SIZE, DEFAULT_C_MAX, DEFAULT_EPOCHS, DEFAULT_EPSILON, DEFAULT_HOST,
    DEFAULT_HYSTERESIS, DEFAULT_LEARNING_RATE, DEFAULT_MODELS_DIR, DEFAULT_PERIOD_MS, DEFAULT_PORT,
    DEFAULT_QUALITY, DEFAULT_S_MAX, DEFAULT_SEED, DESK_GRAPH_FILE, HOLDOUT_FRACTION, QUALITY_LADDER, SERVER_CAPACITY,
)
from cost_profiler import CONFIG_DIR, BenchDevice, load_profile, normalize_network_name
from model_checkpoint import load_checkpoint, save_checkpoint
from partition_planner import (
    checkpoint_name, load_plans, load_sweep, plan_partitions, render_csv,
    render_report, save_plans, save_sweep, train_sweep,
)
from split_runtime import BottleneckClient, LoadMonitor, load_halves, parse_address, serve
from synthetic_datasets import DATASET_KINDS, Dataset, make_dataset, read_dataset, write_dataset
from tensor_core import NetworkGraph, predict, train

load_dotenv()

logger = logging.getLogger(__name__)

LOG_LEVEL = os.getenv("BOTTLENET_LOG_LEVEL")
DEFAULT_SERVER = os.getenv("BOTTLENET_SERVER", f"{DEFAULT_HOST}:{DEFAULT_PORT}")
DEFAULT_MODELS = os.getenv("BOTTLENET_MODELS", DEFAULT_MODELS_DIR)

_UNSET = object()


@dataclass
class RunConfig:
    """Parsed command plus flags, after the --config overlay"""
    command: str
    values: Dict[str, Any] = field(default_factory=dict)
    config_file: Optional[str] = None

    def __getattr__(self, name):
        try:
            return self.__dict__['values'][name]
        except KeyError:
            raise AttributeError(name) from None

    def require(self, *names: str):
        missing = [name for name in names if self.values.get(name) in (None, '')]
        if missing:
            flags = ', '.join('--' + name.replace('_', '-') for name in missing)
            raise ConfigError(f"{self.command}: missing required {flags}")


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def build_parser():
    """Top-level parser and the subparser for every command"""
    import argparse

    parser = argparse.ArgumentParser(prog='bottlenet', description='Split computing with learnable bottlenecks')
    parser.add_argument('--config', help='JSON file with flag values; flags given on the command line win')
    parser.add_argument('--verbose', '-v', action='store_true', help='Debug logging')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands = {}

    p = commands['dataset'] = sub.add_parser('dataset', help='Generate a synthetic dataset file')
    p.add_argument('--kind', choices=DATASET_KINDS, default='stripes')
    p.add_argument('--count', type=int, default=600)
    p.add_argument('--dims', type=int, nargs=3, default=[28, 28, 1], metavar=('H', 'W', 'C'))
    p.add_argument('--classes', type=int, default=4)
    p.add_argument('--seed', type=int, default=DEFAULT_SEED)
    p.add_argument('--out', help='Dataset file to write')

    p = commands['train'] = sub.add_parser('train', help='Train the graph without a bottleneck')
    _training_flags(p)
    p.add_argument('--out', help='Checkpoint file to write')

    p = commands['sweep'] = sub.add_parser('sweep', help='Train and size every bottleneck configuration')
    _training_flags(p)
    p.add_argument('--smax', type=int, default=DEFAULT_S_MAX, help='Largest spatial reduction s')
    p.add_argument('--cmax', type=int, default=DEFAULT_C_MAX, help="Largest channel count c'")
    p.add_argument('--quality', type=int, default=DEFAULT_QUALITY)
    p.add_argument('--epsilon', type=float, default=DEFAULT_EPSILON, help='Accepted accuracy loss')
    p.add_argument('--workers', type=int, default=1)
    p.add_argument('--baseline', help='Reuse a baseline checkpoint instead of training one')
    p.add_argument('--out', default=DEFAULT_MODELS, help='Sweep directory to write (default: %(default)s)')

    p = commands['plan'] = sub.add_parser('plan', help='Profile and select the partition per network')
    p.add_argument('--profiles', help='Profile document (default: bundled reference profile)')
    p.add_argument('--sweep', help='Sweep directory; its D_j replace the profile offloaded sizes')
    p.add_argument('--bench', action='store_true', help='Time the sweep models on this machine')
    p.add_argument('--data', help='Calibration dataset for --bench')
    p.add_argument('--repetitions', type=int, default=5)
    p.add_argument('--network', default='all', help='3g, 4g, wifi or all')
    p.add_argument('--k-mobile', type=float, default=1.0)
    p.add_argument('--k-cloud', type=float, default=1.0)
    p.add_argument('--target', choices=['latency', 'energy'], default='latency')
    p.add_argument('--include-sentinels', action='store_true', help='Let mobile-only and cloud-only win')
    p.add_argument('--out', help='Plan file to write')

    p = commands['report'] = sub.add_parser('report', help='Render a plan as a table')
    p.add_argument('--plan', help='Plan file')
    p.add_argument('--csv', help='Also write the table as CSV')

    p = commands['serve'] = sub.add_parser('serve', help='Run the cloud half server')
    p.add_argument('--models', default=DEFAULT_MODELS,
                   help='Sweep directory with partition checkpoints (default: %(default)s)')
    p.add_argument('--host', default=DEFAULT_HOST)
    p.add_argument('--port', type=int, default=DEFAULT_PORT)
    p.add_argument('--load-stub', type=float, help='Report this K_cloud instead of the live load')
    p.add_argument('--capacity', type=int, default=SERVER_CAPACITY)

    p = commands['infer'] = sub.add_parser('infer', help='Split inference against a running server')
    p.add_argument('--server', default=DEFAULT_SERVER, help='HOST:PORT')
    p.add_argument('--input', help='Dataset file (.bnds) or numpy array (.npy)')
    p.add_argument('--partition', type=int, help='Partition point j')
    p.add_argument('--models', default=DEFAULT_MODELS,
                   help='Sweep directory with partition checkpoints (default: %(default)s)')
    p.add_argument('--limit', type=int, default=8, help='Samples to send')
    p.add_argument('--timeout-ms', type=int)
    p.add_argument('--verify', action='store_true', help='Compare with single-process execution')

    p = commands['monitor'] = sub.add_parser('monitor', help='Poll server load and replan')
    p.add_argument('--server', default=DEFAULT_SERVER, help='HOST:PORT')
    p.add_argument('--period-ms', type=int, default=DEFAULT_PERIOD_MS)
    p.add_argument('--profiles', help='Profile document (default: bundled reference profile)')
    p.add_argument('--plan', help='Plan file to start from (default: plan from --profiles)')
    p.add_argument('--network', help='Network to follow (default: the first of the plan file or profile)')
    p.add_argument('--target', choices=['latency', 'energy'], default='latency',
                   help='Target when planning from --profiles')
    p.add_argument('--models', help='Sweep directory; swaps are applied to a live client')
    p.add_argument('--hysteresis', type=float, default=DEFAULT_HYSTERESIS)
    p.add_argument('--samples', type=int, help='Stop after this many pings')
    p.add_argument('--timeout-ms', type=int)

    p = commands['compare'] = sub.add_parser('compare', help='Compression-aware vs naive training')
    _training_flags(p)
    p.add_argument('--location', type=int, default=1)
    p.add_argument('--spatial', type=int, default=1)
    p.add_argument('--channels', type=int)
    p.add_argument('--qualities', type=int, nargs='+', default=list(QUALITY_LADDER))
    return parser, commands


def _training_flags(p):
    p.add_argument('--graph', help='Graph spec JSON (default: bundled desk graph)')
    p.add_argument('--data', help='Dataset file')
    p.add_argument('--epochs', type=int, default=DEFAULT_EPOCHS)
    p.add_argument('--lr', type=float, default=DEFAULT_LEARNING_RATE)
    p.add_argument('--batch-size', type=int, default=DEFAULT_BATCH_SIZE)
    p.add_argument('--seed', type=int, default=DEFAULT_SEED)
    p.add_argument('--crop', action='store_true', help='Random-crop training inputs to the graph input size')


def _read_overlay(path: str) -> Dict[str, Any]:
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except (OSError, ValueError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return {key.replace('-', '_'): value for key, value in data.items()}


def resolve_config(argv: Sequence[str]) -> RunConfig:
    """
    Parse argv and overlay the --config file.

    A flag explicitly present on the command line keeps its value; every
    other key of the file replaces the parser default.
    """
    parser, _ = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if e.code:
            raise ConfigError("invalid command line") from None
        raise
    if not args.command:
        parser.print_help()
        raise ConfigError("no command given")
    values = vars(args)
    command = values.pop('command')
    config_file = values.pop('config')
    values.pop('verbose')

    if config_file:
        overlay = _read_overlay(config_file)
        unknown = sorted(set(overlay) - set(values))
        if unknown:
            raise ConfigError(f"config file {config_file}: unknown keys for {command}: {', '.join(unknown)}")
        defaults_parser, commands = build_parser()
        commands[command].set_defaults(**{key: _UNSET for key in values})
        explicit = {key for key, value in vars(defaults_parser.parse_args(argv)).items() if value is not _UNSET}
        for key, value in overlay.items():
            if key not in explicit:
                values[key] = value
    return RunConfig(command, values, config_file)


# ============================================================================
# HELPERS
# ============================================================================

def _load_graph_spec(path: Optional[str]) -> Dict[str, Any]:
    path = Path(path) if path else CONFIG_DIR / DESK_GRAPH_FILE
    try:
        with open(path, encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"graph spec not found: {path}") from e
    except ValueError as e:
        raise ConfigError(f"graph spec {path} is not valid JSON: {e}") from e


def _load_dataset(path: str) -> Dataset:
    if not Path(path).exists():
        raise ArtifactMissingError(path, 'dataset')
    return read_dataset(path)


def _address(text: str):
    try:
        return parse_address(text)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_inputs(path: str) -> np.ndarray:
    if not Path(path).exists():
        raise ArtifactMissingError(path, 'dataset')
    if path.endswith('.npy'):
        try:
            x = np.load(path).astype(np.float64)
        except (ValueError, EOFError) as e:
            raise DatasetError(f"{path} is not a readable numpy array: {e}") from e
        if x.ndim not in (3, 4):
            raise DatasetError(f"{path}: expected an HWC or NHWC array, got shape {x.shape}")
        return x[None] if x.ndim == 3 else x
    return read_dataset(path).tensor()


def _print_sweep(sweep):
    print(f"\nBaseline accuracy {sweep.baseline_accuracy:.3f}, floor {sweep.floor:.3f}, q={sweep.quality}")
    for j, entry in sorted(sweep.best.items()):
        if entry is None:
            print(f"  ❌ partition {j}: infeasible")
        else:
            print(f"  ✓ partition {j}: s={entry.spatial} c'={entry.channels} D={entry.d_bytes} B "
                  f"accuracy {entry.accuracy:.3f}")


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_dataset(cfg: RunConfig) -> int:
    cfg.require('out')
    dataset = make_dataset(cfg.kind, cfg.count, tuple(cfg.dims), cfg.classes, cfg.seed)
    path = write_dataset(dataset, cfg.out)
    print(f"✓ {cfg.kind} dataset ({len(dataset)} samples, {dataset.num_classes} classes) written to {path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    cfg.require('data', 'out')
    dataset = _load_dataset(cfg.data)
    graph = NetworkGraph.from_spec(_load_graph_spec(cfg.graph), seed=cfg.seed)
    result = train(graph, dataset, cfg.epochs, cfg.lr, cfg.seed, batch_size=cfg.batch_size,
                   crop=cfg.crop, progress=True)
    save_checkpoint(result.graph, cfg.out, result.accuracy, {'epochs': cfg.epochs, 'lr': cfg.lr})
    print(f"✓ Held-out accuracy {result.accuracy:.3f}; checkpoint written to {cfg.out}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    cfg.require('data', 'out')
    dataset = _load_dataset(cfg.data)
    if cfg.baseline:
        baseline, header = load_checkpoint(cfg.baseline, producer='train')
        baseline_accuracy = header.get('accuracy')
        if baseline_accuracy is None:
            raise ConfigError(f"{cfg.baseline} carries no accuracy; retrain it with the train command")
    else:
        baseline = NetworkGraph.from_spec(_load_graph_spec(cfg.graph), seed=cfg.seed)
        baseline_accuracy = train(baseline, dataset, cfg.epochs, cfg.lr, cfg.seed, batch_size=cfg.batch_size,
                                  crop=cfg.crop, progress=True).accuracy
    floor = baseline_accuracy - cfg.epsilon
    sweep = train_sweep(baseline, dataset, floor, cfg.seed, cfg.smax, cfg.cmax, cfg.quality, cfg.epochs,
                        cfg.lr, cfg.batch_size, cfg.workers, baseline_accuracy, progress=True)
    path = save_sweep(sweep, cfg.out, baseline)
    _print_sweep(sweep)
    print(f"\n✓ Sweep written to {path}")
    return EXIT_OK


def cmd_plan(cfg: RunConfig) -> int:
    cfg.require('out')
    document = load_profile(cfg.profiles)
    sweep = load_sweep(cfg.sweep, load_models=cfg.bench) if cfg.sweep else None
    bench, calibration = None, None
    if cfg.bench:
        if sweep is None:
            raise ConfigError("--bench needs --sweep to time the trained models")
        cfg.require('data')
        bench = BenchDevice()
        _, held_out = _load_dataset(cfg.data).split(HOLDOUT_FRACTION, DEFAULT_SEED)
        calibration = held_out.tensor()

    if normalize_network_name(cfg.network) == 'all':
        networks = list(document.networks)
    else:
        networks = [cfg.network]
    plans = [plan_partitions(document, name, cfg.target, cfg.k_mobile, cfg.k_cloud, sweep, bench,
                             calibration, cfg.repetitions, cfg.include_sentinels)
             for name in networks]
    save_plans(plans, cfg.out)
    print(render_report(plans))
    print(f"✓ Plan written to {cfg.out}")
    return EXIT_OK


def cmd_report(cfg: RunConfig) -> int:
    cfg.require('plan')
    plans = load_plans(cfg.plan)
    print(render_report(plans))
    if cfg.csv:
        Path(cfg.csv).write_text(render_csv(plans), encoding='utf-8')
        print(f"✓ CSV written to {cfg.csv}")
    return EXIT_OK


def cmd_serve(cfg: RunConfig) -> int:
    cfg.require('models')
    halves = load_halves(cfg.models)
    print(f"✓ Serving partitions {sorted(halves)} on {cfg.host}:{cfg.port} (Ctrl+C to stop)")
    serve({j: cloud for j, (_, cloud) in halves.items()}, cfg.port, cfg.host, cfg.load_stub, cfg.capacity)
    return EXIT_OK


def cmd_infer(cfg: RunConfig) -> int:
    cfg.require('input', 'partition', 'models')
    x = _load_inputs(cfg.input)[:cfg.limit]
    graph, _ = load_checkpoint(Path(cfg.models) / checkpoint_name(cfg.partition))
    mobile, _ = split_graph(graph, cfg.partition)

    with BottleneckClient(_address(cfg.server), {cfg.partition: mobile}, cfg.partition,
                          cfg.timeout_ms) as client:
        rows = []
        for sample in x:
            logits = client.infer(sample)
            rows.append((logits[0], client.last_timings))

    for index, (logits, timings) in enumerate(rows):
        print(f"  sample {index}: class {int(np.argmax(logits))}  D={timings.offloaded_bytes} B  "
              f"mobile {timings.mobile_ms:.2f} ms  uplink {timings.uplink_ms:.2f} ms  "
              f"round trip {timings.round_trip_ms:.2f} ms")
    if cfg.verify:
        local = [np.float32(predict(graph, sample[None])).reshape(-1) for sample in x]
        mismatched = [i for i, ((remote, _), ref) in enumerate(zip(rows, local)) if not np.array_equal(remote, ref)]
        if mismatched:
            print(f"❌ Split logits differ from single-process execution for samples {mismatched}")
            return EXIT_DATA
        print(f"✓ {len(rows)} split results bit-identical to single-process execution")
    return EXIT_OK


def cmd_monitor(cfg: RunConfig) -> int:
    address = _address(cfg.server)
    document = load_profile(cfg.profiles)
    if cfg.plan:
        plans = load_plans(cfg.plan)
        plan = plans[0]
        if cfg.network:
            wanted = normalize_network_name(cfg.network)
            matching = [p for p in plans if normalize_network_name(p.network.name) == wanted]
            if not matching:
                raise ConfigError(f"{cfg.plan} has no plan for network {cfg.network}")
            plan = matching[0]
    else:
        plan = plan_partitions(document, cfg.network or next(iter(document.networks)), cfg.target)
    device = document.device

    client = None
    if cfg.models:
        halves = {j: mobile for j, (mobile, _) in load_halves(cfg.models).items()}
        client = BottleneckClient(address, halves, plan.chosen_j, cfg.timeout_ms)
    monitor = LoadMonitor(address, plan, device, client, cfg.period_ms, cfg.hysteresis,
                          timeout_ms=cfg.timeout_ms)
    print(f"✓ Monitoring {cfg.server} every {cfg.period_ms} ms; starting on {plan.chosen_label}")
    try:
        for k_cloud in monitor.samples(cfg.samples):
            if k_cloud is None:
                state = 'stale' if monitor.stale else f"missed {monitor.missed}"
                print(f"  ❌ ping failed ({state}); keeping {monitor.plan.chosen_label}")
            else:
                print(f"  K_cloud={k_cloud:.2f} -> {monitor.plan.chosen_label} (swaps {monitor.swaps})")
    except KeyboardInterrupt:
        pass
    finally:
        monitor.stop()
        if client is not None:
            client.close()
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    cfg.require('data')
    dataset = _load_dataset(cfg.data)
    graph = NetworkGraph.from_spec(_load_graph_spec(cfg.graph), seed=cfg.seed)
    rows = compare_training_modes(graph, dataset, cfg.location, cfg.qualities, cfg.seed, cfg.epochs, cfg.lr,
                                  cfg.spatial, cfg.channels, cfg.batch_size, cfg.crop, progress=True)
    print(f"\n{'Quality':>8}{'Aware':>9}{'Naive':>9}{'Gain':>9}{'Loss':>9}")
    for row in rows:
        print(f"{row.quality:>8}{row.aware:>9.3f}{row.naive:>9.3f}{row.gain:>+9.3f}{row.aware_loss:>+9.3f}")
    if rows:
        print(f"\nBaseline (no codec) accuracy {rows[0].baseline:.3f}")
    return EXIT_OK


COMMANDS = {
    'dataset': cmd_dataset,
    'train': cmd_train,
    'sweep': cmd_sweep,
    'plan': cmd_plan,
    'report': cmd_report,
    'serve': cmd_serve,
    'infer': cmd_infer,
    'monitor': cmd_monitor,
    'compare': cmd_compare,
}


def main(argv: Optional[List[str]] = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = '--verbose' in argv or '-v' in argv
    level = LOG_LEVEL or ('DEBUG' if verbose else 'INFO')
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO))

    try:
        cfg = resolve_config(argv)
    except SystemExit as e:
        return int(e.code or EXIT_OK)
    except BottleNetError as e:
        error = error_handler.handle_exception(e, context='command line')
        error_handler.print_user_friendly_error(error)
        return EXIT_USAGE

    logger.info(f"Resolved config for {cfg.command}: {json.dumps(cfg.values, sort_keys=True, default=str)}")
    if 'seed' in cfg.values:
        logger.info(f"Seed: {cfg.seed}")
    try:
        return COMMANDS[cfg.command](cfg)
    except (BottleNetError, OSError) as e:
        error = error_handler.handle_exception(e, context=cfg.command)
        error_handler.log_error(error, context=cfg.command)
        error_handler.print_user_friendly_error(error)
        return error.exit_code


if __name__ == "__main__":
    sys.exit(main())
