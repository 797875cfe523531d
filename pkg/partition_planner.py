#!/usr/bin/env python3
"""
Partition Planner
Training phase: sweep (s, c') bottleneck configurations per partition point,
keep the smallest-feature model that meets the accuracy floor.
Selection phase: pick the latency- or energy-optimal partition from a cost
profile, and re-pick it when loads or the network change.
"""

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from bottlenet_errors import ArtifactMissingError, PlanningError
from bottleneck_unit import BottleneckConfig, calibrate_feature_size, train_bottleneck_model
from config.constants import (
    CALIBRATION_SAMPLES, DEFAULT_BATCH_SIZE, DEFAULT_C_MAX, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE,
    DEFAULT_QUALITY, DEFAULT_S_MAX, HOLDOUT_FRACTION,
)
from cost_profiler import (
    BenchDevice, CostProfile, CostRecord, DeviceProfile, ProfileDocument, WirelessProfile, measure,
)
from model_checkpoint import load_checkpoint, save_checkpoint
from synthetic_datasets import Dataset
from tensor_core import NetworkGraph

logger = logging.getLogger(__name__)

PLAN_VERSION = 1
SWEEP_FILE = 'sweep.json'
BASELINE_FILE = 'baseline.bnmd'


class Target(str, Enum):
    LATENCY = "latency"
    ENERGY = "energy"

    @classmethod
    def parse(cls, value) -> 'Target':
        if isinstance(value, Target):
            return value
        return cls(str(value).lower().replace('min-', ''))


@dataclass
class PlanRequest:
    """Inputs to one planning run"""
    target: Target
    network: WirelessProfile
    k_mobile: float = 1.0
    k_cloud: float = 1.0
    epsilon: float = 0.02
    s_max: int = DEFAULT_S_MAX
    c_max: int = DEFAULT_C_MAX
    quality: int = DEFAULT_QUALITY

    def __post_init__(self):
        self.target = Target.parse(self.target)
        if not 0 <= self.epsilon <= 1:
            raise PlanningError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.s_max < 1 or self.c_max < 1:
            raise PlanningError(f"sweep bounds must be >= 1, got s_max={self.s_max}, c_max={self.c_max}")


# ============================================================================
# TRAINING PHASE
# ============================================================================

@dataclass
class SweepEntry:
    j: int
    spatial: int
    channels: int
    quality: int
    accuracy: float
    d_bytes: int
    seed: int
    checkpoint: Optional[str] = None


@dataclass
class SweepResult:
    baseline_accuracy: Optional[float]
    floor: float
    quality: int
    entries: List[SweepEntry] = field(default_factory=list)
    best: Dict[int, Optional[SweepEntry]] = field(default_factory=dict)
    models: Dict[int, NetworkGraph] = field(default_factory=dict, repr=False)

    @property
    def feasible(self) -> Dict[int, SweepEntry]:
        return {j: entry for j, entry in sorted(self.best.items()) if entry is not None}

    def to_dict(self) -> Dict[str, Any]:
        return {
            'baseline_accuracy': self.baseline_accuracy,
            'floor': self.floor,
            'quality': self.quality,
            'entries': [asdict(e) for e in self.entries],
            'best': {str(j): (asdict(e) if e else None) for j, e in sorted(self.best.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'SweepResult':
        return cls(
            data.get('baseline_accuracy'), float(data['floor']), int(data['quality']),
            [SweepEntry(**e) for e in data.get('entries', [])],
            {int(j): (SweepEntry(**e) if e else None) for j, e in data.get('best', {}).items()},
        )


def combo_seed(seed: int, j: int, spatial: int, channels: int) -> int:
    """Per-combination seed so serial and parallel sweeps train identical models"""
    return int(np.random.SeedSequence([seed, j, spatial, channels]).generate_state(1)[0])


def choose_best(entries: Sequence[SweepEntry], floor: float) -> Optional[SweepEntry]:
    """Smallest D among entries meeting the floor; ties: higher accuracy, smaller c', smaller s"""
    passing = [e for e in entries if e.accuracy >= floor]
    if not passing:
        return None
    return min(passing, key=lambda e: (e.d_bytes, -e.accuracy, e.channels, e.spatial))


def train_sweep(base_graph: NetworkGraph, dataset: Dataset, accuracy_floor: float, seed: int,
                s_max: int = DEFAULT_S_MAX, c_max: int = DEFAULT_C_MAX, quality: int = DEFAULT_QUALITY,
                epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LEARNING_RATE,
                batch_size: int = DEFAULT_BATCH_SIZE, workers: int = 1,
                baseline_accuracy: Optional[float] = None, progress: bool = False) -> SweepResult:
    """
    Train every (s, c') bottleneck at every partition point and keep the best per location.

    Locations where no combination reaches accuracy_floor are marked infeasible.

    Raises:
        PlanningError: when every location is infeasible
    """
    if s_max < 1 or c_max < 1:
        raise PlanningError(f"sweep bounds must be >= 1, got s_max={s_max}, c_max={c_max}")
    dataset.validate()
    _, held_out = dataset.split(HOLDOUT_FRACTION, seed)
    calibration = held_out.tensor()[:CALIBRATION_SAMPLES]

    combos = []
    for j in range(1, len(base_graph.partition_points) + 1):
        c = base_graph.shape_at(base_graph.layer_for_partition(j))[2]
        for spatial in range(1, s_max + 1):
            for channels in range(1, min(c_max, c) + 1):
                combos.append((j, spatial, channels))

    def run(combo) -> Tuple[SweepEntry, NetworkGraph]:
        j, spatial, channels = combo
        cfg = BottleneckConfig(j, spatial, channels, quality)
        sub_seed = combo_seed(seed, j, spatial, channels)
        result = train_bottleneck_model(base_graph, cfg, dataset, 'aware', sub_seed, epochs, lr,
                                        batch_size=batch_size)
        d_bytes = calibrate_feature_size(result.graph, calibration)
        return SweepEntry(j, spatial, channels, quality, result.accuracy, d_bytes, sub_seed), result.graph

    logger.info(f"[SWEEP] {len(combos)} combinations, floor={accuracy_floor:.3f}, q={quality}, workers={workers}")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(tqdm(pool.map(run, combos), total=len(combos), desc="Sweep", disable=not progress))
    else:
        outcomes = [run(combo) for combo in tqdm(combos, desc="Sweep", disable=not progress)]

    sweep = SweepResult(baseline_accuracy, accuracy_floor, quality, [entry for entry, _ in outcomes])
    graphs = {(e.j, e.spatial, e.channels): g for e, g in outcomes}
    for j in range(1, len(base_graph.partition_points) + 1):
        best = choose_best([e for e in sweep.entries if e.j == j], accuracy_floor)
        sweep.best[j] = best
        if best is None:
            logger.warning(f"[SWEEP] partition {j}: no combination reaches accuracy {accuracy_floor:.3f}")
            continue
        sweep.models[j] = graphs[(j, best.spatial, best.channels)]
        logger.info(f"[SWEEP] partition {j}: s={best.spatial} c'={best.channels} "
                    f"D={best.d_bytes}B accuracy={best.accuracy:.3f}")
    if not sweep.feasible:
        raise PlanningError(
            f"no partition reaches accuracy {accuracy_floor:.3f}; increase --epsilon or the sweep bounds"
        )
    return sweep


def checkpoint_name(j: int) -> str:
    return f'partition_{j}.bnmd'


def save_sweep(sweep: SweepResult, out_dir, baseline: Optional[NetworkGraph] = None) -> Path:
    """Checkpoint every feasible location, the optional baseline, and the sweep table (sweep.json)"""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for j, entry in sweep.feasible.items():
        entry.checkpoint = checkpoint_name(j)
        save_checkpoint(sweep.models[j], out_dir / entry.checkpoint, entry.accuracy,
                        {'partition': j, 'd_bytes': entry.d_bytes, 'seed': entry.seed})
    if baseline is not None:
        save_checkpoint(baseline, out_dir / BASELINE_FILE, sweep.baseline_accuracy, {'baseline': True})
    path = out_dir / SWEEP_FILE
    document = {'version': PLAN_VERSION, **sweep.to_dict()}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    logger.info(f"[SWEEP] Wrote {len(sweep.feasible)} checkpoints and {path}")
    return path


def load_sweep(directory, load_models: bool = False) -> SweepResult:
    """Read sweep.json from a sweep directory, optionally with the per-location checkpoints"""
    directory = Path(directory)
    path = directory / SWEEP_FILE
    if not path.exists():
        raise ArtifactMissingError(str(path), 'sweep')
    try:
        sweep = SweepResult.from_dict(json.loads(path.read_text(encoding='utf-8')))
    except (ValueError, KeyError, TypeError) as e:
        raise PlanningError(f"{path}: unreadable sweep table: {e}") from e
    if load_models:
        for j, entry in sweep.feasible.items():
            sweep.models[j], _ = load_checkpoint(directory / (entry.checkpoint or checkpoint_name(j)))
    return sweep


# ============================================================================
# SELECTION PHASE
# ============================================================================

@dataclass
class PlanRow:
    j: int
    label: str
    d_bytes: int
    tm: float
    pm: float
    tc: float
    tu: float
    latency_ms: float
    energy_uj: float
    accuracy: Optional[float] = None
    spatial: Optional[int] = None
    channels: Optional[int] = None
    quality: Optional[int] = None

    @property
    def energy_mj(self) -> float:
        return self.energy_uj / 1e3

    def objective(self, target: Target) -> float:
        return self.latency_ms if target is Target.LATENCY else self.energy_uj


@dataclass
class PlanResult:
    target: Target
    network: WirelessProfile
    k_mobile: float
    k_cloud: float
    chosen_j: int
    chosen_label: str
    objective: float
    rows: List[PlanRow]
    sentinels: List[PlanRow] = field(default_factory=list)

    @property
    def chosen(self) -> PlanRow:
        for row in self.rows + self.sentinels:
            if row.j == self.chosen_j and row.label == self.chosen_label:
                return row
        raise PlanningError(f"chosen partition {self.chosen_label} missing from the plan table")

    @property
    def config(self) -> Optional[Tuple[int, int, int]]:
        row = self.chosen
        return None if row.spatial is None else (row.spatial, row.channels, row.quality)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'target': self.target.value,
            'network': self.network.to_dict(),
            'k_mobile': self.k_mobile,
            'k_cloud': self.k_cloud,
            'chosen_j': self.chosen_j,
            'chosen_label': self.chosen_label,
            'objective': self.objective,
            'rows': [asdict(r) for r in self.rows],
            'sentinels': [asdict(r) for r in self.sentinels],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'PlanResult':
        return cls(Target.parse(data['target']), WirelessProfile.from_dict(data['network']),
                   float(data['k_mobile']), float(data['k_cloud']), int(data['chosen_j']),
                   data['chosen_label'], float(data['objective']),
                   [PlanRow(**r) for r in data['rows']], [PlanRow(**r) for r in data.get('sentinels', [])])


def _row(record: CostRecord, pu: float, extra: Optional[SweepEntry]) -> PlanRow:
    row = PlanRow(record.j, record.label, record.d_bytes, record.tm, record.pm, record.tc, record.tu,
                  record.latency(), record.energy(pu))
    if extra is not None:
        row.accuracy, row.spatial, row.channels, row.quality = (
            extra.accuracy, extra.spatial, extra.channels, extra.quality)
    return row


def select(cost: CostProfile, target, sweep: Optional[Mapping[int, SweepEntry]] = None,
           include_sentinels: bool = False) -> PlanResult:
    """
    argmin over partitions of TM + TU + TC (latency) or TM * PM + TU * PU (energy).

    Ties go to the smaller j, then the smaller D. Mobile-only and cloud-only
    rows are reported but only compete when include_sentinels is set.
    """
    target = Target.parse(target)
    if not cost.records:
        raise PlanningError("no feasible partition to select from")
    pu = cost.pu
    rows = [_row(cost.records[j], pu, (sweep or {}).get(j)) for j in sorted(cost.records)]
    sentinels = [_row(record, pu, None) for _, record in sorted(cost.sentinels.items(), reverse=True)]

    candidates = [(row.objective(target), 0, row.j, row.d_bytes, row) for row in rows]
    if include_sentinels:
        candidates += [(row.objective(target), 1, i, row.d_bytes, row) for i, row in enumerate(sentinels)]
    objective, _, _, _, best = min(candidates, key=lambda c: c[:4])

    result = PlanResult(target, cost.network, cost.k_mobile, cost.k_cloud, best.j, best.label,
                        objective, rows, sentinels)
    logger.info(f"[PLAN] {cost.network.name} K_mobile={cost.k_mobile:g} K_cloud={cost.k_cloud:g} "
                f"{target.value}: {best.label} ({objective:.3f})")
    return result


def replan(current: PlanResult, device: DeviceProfile, k_mobile: float, k_cloud: float,
           network: Optional[WirelessProfile] = None, include_sentinels: bool = False) -> PlanResult:
    """Profiling and selection again with the stored per-partition models (D_j); no retraining"""
    offloaded = {row.j: row.d_bytes for row in current.rows}
    labels = {row.j: row.label for row in current.rows}
    sweep = {row.j: SweepEntry(row.j, row.spatial, row.channels, row.quality, row.accuracy,
                               row.d_bytes, 0)
             for row in current.rows if row.spatial is not None}
    cost = measure(offloaded, device, network or current.network, k_mobile, k_cloud,
                   partitions=sorted(offloaded), labels=labels)
    return select(cost, current.target, sweep, include_sentinels)


def plan_partitions(document: ProfileDocument, network: str, target, k_mobile: float = 1.0,
                    k_cloud: float = 1.0, sweep: Optional[SweepResult] = None,
                    bench: Optional[BenchDevice] = None, calibration: Optional[np.ndarray] = None,
                    repetitions: int = 5, include_sentinels: bool = False) -> PlanResult:
    """
    Profile and select for one network.

    D_j comes from the sweep's feasible locations when given, else from the
    profile document's offloaded sizes. With bench, the sweep's models are
    timed here instead of reading the device tables.
    """
    net = document.network(network)
    if sweep is not None:
        feasible = sweep.feasible
        if bench is not None:
            models = {j: sweep.models[j] for j in feasible}
            cost = measure(models, bench, net, k_mobile, k_cloud, repetitions, calibration,
                           partitions=sorted(models))
        else:
            cost = measure({j: e.d_bytes for j, e in feasible.items()}, document.device, net,
                           k_mobile, k_cloud, partitions=sorted(feasible))
        return select(cost, target, feasible, include_sentinels)
    if not document.offloaded_bytes:
        raise ArtifactMissingError('sweep results', 'sweep')
    cost = measure(document.offloaded_bytes, document.device, net, k_mobile, k_cloud,
                   partitions=sorted(document.offloaded_bytes))
    return select(cost, target, include_sentinels=include_sentinels)


# ============================================================================
# PLAN DOCUMENTS AND REPORTS
# ============================================================================

def save_plans(plans: Sequence[PlanResult], path) -> Path:
    """Write a plan document; byte-identical for identical inputs"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {'version': PLAN_VERSION, 'plans': [plan.to_dict() for plan in plans]}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + '\n', encoding='utf-8')
    return path


def load_plans(path) -> List[PlanResult]:
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(str(path), 'plan')
    try:
        data = json.loads(path.read_text(encoding='utf-8'))
        plans = [PlanResult.from_dict(p) for p in data.get('plans', [])]
    except (ValueError, KeyError, TypeError) as e:
        raise PlanningError(f"{path}: unreadable plan document: {e}") from e
    if not plans:
        raise PlanningError(f"{path}: plan document is empty")
    return plans


def _fmt(value: Optional[float], digits: int = 1) -> str:
    return '-' if value is None else f"{value:.{digits}f}"


def render_report(plans: Sequence[PlanResult]) -> str:
    """Fixed-width table: one column per partition (chosen marked *), rows for D, latency and energy per network"""
    if not plans:
        raise PlanningError("nothing to report: plan is empty")
    labels = [row.label for row in plans[0].rows] + [row.label for row in plans[0].sentinels]
    width = max([len(label) + 1 for label in labels] + [7])

    def cells(plan: PlanResult, pick) -> List[str]:
        by_label = {row.label: row for row in plan.rows + plan.sentinels}
        out = []
        for label in labels:
            row = by_label.get(label)
            text = '-' if row is None else pick(row)
            if row is not None and label == plan.chosen_label:
                text += '*'
            out.append(text)
        return out

    lines = []
    title_width = max(len(f"Energy {p.network.name} (mJ)") for p in plans) + 2
    lines.append('Layer'.ljust(title_width) + ''.join(label.rjust(width) for label in labels))
    first = {row.label: row for row in plans[0].rows + plans[0].sentinels}
    lines.append('Offloaded Data (B)'.ljust(title_width)
                 + ''.join(str(first[label].d_bytes).rjust(width) for label in labels))
    if any(row.accuracy is not None for row in plans[0].rows):
        lines.append('Accuracy'.ljust(title_width) + ''.join(
            _fmt(first[label].accuracy, 3).rjust(width) for label in labels))
    for plan in plans:
        name = plan.network.name
        latency = cells(plan, lambda r: _fmt(r.latency_ms))
        energy = cells(plan, lambda r: _fmt(r.energy_mj))
        lines.append(f"Latency {name} (ms)".ljust(title_width) + ''.join(c.rjust(width) for c in latency))
        lines.append(f"Energy {name} (mJ)".ljust(title_width) + ''.join(c.rjust(width) for c in energy))
    lines.append('')
    for plan in plans:
        config = plan.config
        detail = f" s={config[0]} c'={config[1]} q={config[2]}" if config else ''
        unit = 'ms' if plan.target is Target.LATENCY else 'mJ'
        value = plan.objective if plan.target is Target.LATENCY else plan.objective / 1e3
        lines.append(f"* {plan.network.name} min-{plan.target.value} "
                     f"(K_mobile={plan.k_mobile:g}, K_cloud={plan.k_cloud:g}): "
                     f"{plan.chosen_label}{detail} -> {value:.3f} {unit}")
    return '\n'.join(lines) + '\n'


CSV_FIELDS = ['network', 'target', 'k_mobile', 'k_cloud', 'j', 'label', 'offloaded_bytes', 'tm_ms', 'pm_mw',
              'tc_ms', 'tu_ms', 'latency_ms', 'energy_mj', 'accuracy', 'chosen']


def render_csv(plans: Sequence[PlanResult]) -> str:
    if not plans:
        raise PlanningError("nothing to report: plan is empty")
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(CSV_FIELDS)
    for plan in plans:
        for row in plan.rows + plan.sentinels:
            writer.writerow([
                plan.network.name, plan.target.value, f"{plan.k_mobile:g}", f"{plan.k_cloud:g}", row.j,
                row.label, row.d_bytes, f"{row.tm:.6f}", f"{row.pm:.6f}", f"{row.tc:.6f}", f"{row.tu:.6f}",
                f"{row.latency_ms:.6f}", f"{row.energy_mj:.6f}",
                '' if row.accuracy is None else f"{row.accuracy:.6f}",
                int(row.label == plan.chosen_label),
            ])
    return buffer.getvalue()
