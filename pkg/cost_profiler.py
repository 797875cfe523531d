#!/usr/bin/env python3
"""
Cost Profiler
Per-partition cost records (mobile compute time and power, cloud compute
time, uplink time, offloaded bytes) from declarative device profiles or from
timing the mobile and cloud halves on this machine.

Energies are mW x ms = microjoules internally; reports show millijoules.
"""

import json
import time
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from bottlenet_errors import ProfileError
from bottleneck_unit import calibrate_feature_size, split_graph
from config.constants import CALIBRATION_SAMPLES, REFERENCE_PROFILE_FILE

logger = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).resolve().parent / 'config'


@dataclass(frozen=True)
class WirelessProfile:
    """Uplink throughput (Mbps) and the linear uplink power regression P = alpha * t_u + beta"""
    name: str
    t_u_mbps: float
    alpha_u: float
    beta: float

    def __post_init__(self):
        if not self.t_u_mbps > 0:
            raise ProfileError(f"{self.name}: t_u must be > 0, got {self.t_u_mbps}")
        if self.alpha_u < 0 or self.beta < 0:
            raise ProfileError(f"{self.name}: alpha_u and beta must be >= 0")

    def to_dict(self) -> Dict[str, Any]:
        return {'name': self.name, 't_u_mbps': self.t_u_mbps, 'alpha_u': self.alpha_u, 'beta': self.beta}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'WirelessProfile':
        return cls(str(data['name']), float(data['t_u_mbps']), float(data['alpha_u']), float(data['beta']))

    def scaled(self, factor: float) -> 'WirelessProfile':
        return WirelessProfile(self.name, self.t_u_mbps * factor, self.alpha_u, self.beta)


def uplink_time(d_bytes: float, net: WirelessProfile) -> float:
    """Milliseconds to push d_bytes at t_u Mbps"""
    if d_bytes < 0:
        raise ProfileError(f"offloaded size must be >= 0, got {d_bytes}")
    return d_bytes * 8 / (net.t_u_mbps * 1e3)


def uplink_power(net: WirelessProfile) -> float:
    """Uplink radio power in mW"""
    return net.alpha_u * net.t_u_mbps + net.beta


def mobile_energy(tm: float, pm: float, tu: float, pu: float) -> float:
    """Mobile energy in microjoules: compute phase plus uplink phase"""
    return tm * pm + tu * pu


# ============================================================================
# DEVICE PROFILES
# ============================================================================

def _load_table(values: Mapping) -> Dict[float, float]:
    return {float(k): float(v) for k, v in values.items()}


@dataclass
class PartitionTable:
    """Cost tables of one partition keyed by load level K"""
    j: int
    t_mobile_ms: Dict[float, float] = field(default_factory=dict)
    p_mobile_mw: Dict[float, float] = field(default_factory=dict)
    t_cloud_ms: Dict[float, float] = field(default_factory=dict)
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or f"P{self.j}"

    def to_dict(self) -> Dict[str, Any]:
        def dump(table):
            return {f"{k:g}": v for k, v in sorted(table.items())}
        data = {'j': self.j, 't_mobile_ms': dump(self.t_mobile_ms),
                'p_mobile_mw': dump(self.p_mobile_mw), 't_cloud_ms': dump(self.t_cloud_ms)}
        if self.name:
            data['name'] = self.name
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], j: int = 0) -> 'PartitionTable':
        return cls(int(data.get('j', j)), _load_table(data.get('t_mobile_ms', {})),
                   _load_table(data.get('p_mobile_mw', {})), _load_table(data.get('t_cloud_ms', {})),
                   data.get('name'))


class LoadModel:
    TABLE = 'table'
    LINEAR = 'linear'


@dataclass
class DeviceProfile:
    """
    Planner inputs t_mobile(j, K), p_mobile(j, K), t_cloud(j, K).

    With load_model 'linear', times at any K >= 1 are K * t(j, 1) and power
    stays at its K = 1 value; 'table' only answers the declared load levels.
    """
    partitions: Dict[int, PartitionTable]
    load_model: str = LoadModel.TABLE
    mobile_only: Optional[PartitionTable] = None
    cloud_only: Optional[PartitionTable] = None
    input_bytes: Optional[int] = None

    def __post_init__(self):
        if self.load_model not in (LoadModel.TABLE, LoadModel.LINEAR):
            raise ProfileError(f"unknown load model {self.load_model!r}")
        self.validate()

    @classmethod
    def linear(cls, t_mobile: Sequence[float], p_mobile: Sequence[float], t_cloud: Sequence[float],
               names: Optional[Sequence[str]] = None, mobile_only: Optional[Tuple[float, float]] = None,
               cloud_only: Optional[Tuple[float, int]] = None) -> 'DeviceProfile':
        """
        Linear-load profile from K = 1 columns.

        Args:
            t_mobile, p_mobile, t_cloud: per-partition values for j = 1..M
            mobile_only: (full-network mobile ms, mobile mW)
            cloud_only: (full-network cloud ms, raw input bytes)
        """
        if not len(t_mobile) == len(p_mobile) == len(t_cloud):
            raise ProfileError("linear profile columns differ in length")
        partitions = {
            j: PartitionTable(j, {1.0: float(tm)}, {1.0: float(pm)}, {1.0: float(tc)},
                              names[j - 1] if names else None)
            for j, (tm, pm, tc) in enumerate(zip(t_mobile, p_mobile, t_cloud), start=1)
        }
        mobile = cloud = None
        input_bytes = None
        if mobile_only:
            mobile = PartitionTable(0, {1.0: float(mobile_only[0])}, {1.0: float(mobile_only[1])},
                                    {1.0: 0.0}, 'Mobile-only')
        if cloud_only:
            cloud = PartitionTable(0, {1.0: 0.0}, {1.0: 0.0}, {1.0: float(cloud_only[0])}, 'Cloud-only')
            input_bytes = int(cloud_only[1])
        return cls(partitions, LoadModel.LINEAR, mobile, cloud, input_bytes)

    def _lookup(self, table: Dict[float, float], k: float, what: str, j: int, scales: bool) -> float:
        k = float(k)
        if k in table:
            return table[k]
        if self.load_model == LoadModel.LINEAR and 1.0 in table:
            if k < 1:
                raise ProfileError(f"linear load model needs K >= 1, got {k}")
            return k * table[1.0] if scales else table[1.0]
        raise ProfileError(f"no {what} entry at K={k:g}", missing=[j])

    def table(self, j: int) -> PartitionTable:
        if j not in self.partitions:
            raise ProfileError("device profile incomplete", missing=[j])
        return self.partitions[j]

    def t_mobile(self, j: int, k_mobile: float = 1.0) -> float:
        return self._lookup(self.table(j).t_mobile_ms, k_mobile, 't_mobile', j, True)

    def p_mobile(self, j: int, k_mobile: float = 1.0) -> float:
        return self._lookup(self.table(j).p_mobile_mw, k_mobile, 'p_mobile', j, False)

    def t_cloud(self, j: int, k_cloud: float = 1.0) -> float:
        return self._lookup(self.table(j).t_cloud_ms, k_cloud, 't_cloud', j, True)

    def sentinel(self, table: PartitionTable, k_mobile: float, k_cloud: float) -> Tuple[float, float, float]:
        return (self._lookup(table.t_mobile_ms, k_mobile, 't_mobile', 0, True),
                self._lookup(table.p_mobile_mw, k_mobile, 'p_mobile', 0, False),
                self._lookup(table.t_cloud_ms, k_cloud, 't_cloud', 0, True))

    def validate(self):
        """Entries >= 0, t_mobile non-decreasing in j, every entry non-decreasing in K"""
        tables = list(self.partitions.values())
        for extra in (self.mobile_only, self.cloud_only):
            if extra is not None:
                tables.append(extra)
        for table in tables:
            for what in ('t_mobile_ms', 'p_mobile_mw', 't_cloud_ms'):
                column = getattr(table, what)
                if any(v < 0 for v in column.values()):
                    raise ProfileError(f"{table.label}: negative {what}")
                values = [column[k] for k in sorted(column)]
                if any(b < a for a, b in zip(values, values[1:])):
                    raise ProfileError(f"{table.label}: {what} decreases as load grows")
        ordered = [self.partitions[j] for j in sorted(self.partitions)]
        for a, b in zip(ordered, ordered[1:]):
            for k in set(a.t_mobile_ms) & set(b.t_mobile_ms):
                if b.t_mobile_ms[k] < a.t_mobile_ms[k]:
                    raise ProfileError(f"t_mobile decreases from partition {a.j} to {b.j} at K={k:g}")

    def to_dict(self) -> Dict[str, Any]:
        data = {'load_model': self.load_model,
                'partitions': [self.partitions[j].to_dict() for j in sorted(self.partitions)]}
        if self.mobile_only:
            data['mobile_only'] = self.mobile_only.to_dict()
        if self.cloud_only:
            data['cloud_only'] = {**self.cloud_only.to_dict(), 'offloaded_bytes': self.input_bytes}
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'DeviceProfile':
        try:
            partitions = {}
            for entry in data['partitions']:
                table = PartitionTable.from_dict(entry)
                partitions[table.j] = table
            mobile = PartitionTable.from_dict(data['mobile_only']) if data.get('mobile_only') else None
            cloud = cloud_bytes = None
            if data.get('cloud_only'):
                cloud = PartitionTable.from_dict(data['cloud_only'])
                cloud_bytes = int(data['cloud_only'].get('offloaded_bytes', 0))
            for sentinel, name in ((mobile, 'Mobile-only'), (cloud, 'Cloud-only')):
                if sentinel is not None:
                    sentinel.name = sentinel.name or name
            return cls(partitions, data.get('load_model', LoadModel.TABLE), mobile, cloud, cloud_bytes)
        except (KeyError, TypeError, ValueError) as e:
            raise ProfileError(f"malformed device profile: {e}") from e


@dataclass
class ProfileDocument:
    """Profile JSON: device tables, wireless networks, optional offloaded sizes and reported figures"""
    device: DeviceProfile
    networks: Dict[str, WirelessProfile]
    offloaded_bytes: Dict[int, int] = field(default_factory=dict)
    reported: Dict[str, Any] = field(default_factory=dict)

    def network(self, name: str) -> WirelessProfile:
        key = normalize_network_name(name)
        if key not in self.networks:
            raise ProfileError(f"unknown network {name!r}; profile has {', '.join(self.networks)}")
        return self.networks[key]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'device': self.device.to_dict(),
            'networks': [net.to_dict() for net in self.networks.values()],
            'offloaded_bytes': {str(j): d for j, d in sorted(self.offloaded_bytes.items())},
            'reported': self.reported,
        }


def normalize_network_name(name: str) -> str:
    return name.lower().replace('-', '').replace('_', '')


def load_profile(path=None) -> ProfileDocument:
    """Read a profile document; the bundled reference profile when path is None"""
    path = Path(path) if path else CONFIG_DIR / REFERENCE_PROFILE_FILE
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise ProfileError(f"cannot read profile {path}: {e}") from e
    try:
        networks = {}
        for entry in data.get('networks', []):
            net = WirelessProfile.from_dict(entry)
            networks[normalize_network_name(net.name)] = net
        offloaded = {int(j): int(d) for j, d in data.get('offloaded_bytes', {}).items()}
    except (KeyError, TypeError, ValueError) as e:
        raise ProfileError(f"malformed profile {path}: {e}") from e
    if 'device' not in data:
        raise ProfileError(f"{path}: profile has no device section")
    document = ProfileDocument(DeviceProfile.from_dict(data['device']), networks, offloaded,
                               data.get('reported', {}))
    logger.debug(f"[PROFILE] Loaded {len(document.device.partitions)} partitions, "
                 f"{len(networks)} networks from {path}")
    return document


# ============================================================================
# MEASUREMENT
# ============================================================================

@dataclass
class CostRecord:
    """TM, PM, TC, TU and D for one partition (or sentinel)"""
    j: int
    label: str
    tm: float
    pm: float
    tc: float
    tu: float
    d_bytes: int

    def latency(self) -> float:
        return self.tm + self.tu + self.tc

    def energy(self, pu: float) -> float:
        return mobile_energy(self.tm, self.pm, self.tu, pu)


@dataclass
class CostProfile:
    network: WirelessProfile
    k_mobile: float
    k_cloud: float
    records: Dict[int, CostRecord]
    sentinels: Dict[str, CostRecord] = field(default_factory=dict)

    @property
    def pu(self) -> float:
        return uplink_power(self.network)

    def __getitem__(self, j: int) -> CostRecord:
        return self.records[j]


@dataclass
class BenchDevice:
    """Time the halves on this machine; power comes from a constant (no power sensor)"""
    mobile_power_mw: float = 1000.0
    warmup: int = 1
    timer: Callable[[], float] = time.perf_counter


def median_timing(fn: Callable[[], Any], repetitions: int, warmup: int = 1,
                  timer: Callable[[], float] = time.perf_counter) -> Tuple[float, List[float]]:
    """Median wall time in ms over repetitions, after untimed warmup calls"""
    if repetitions < 1:
        raise ProfileError(f"repetitions must be >= 1, got {repetitions}")
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        start = timer()
        fn()
        samples.append((timer() - start) * 1e3)
    return float(np.median(samples)), samples


ModelEntry = Union[int, Any]


def measure(models: Mapping[int, ModelEntry], device: Union[DeviceProfile, BenchDevice],
            network: WirelessProfile, k_mobile: float = 1.0, k_cloud: float = 1.0,
            repetitions: int = 5, calibration: Optional[np.ndarray] = None,
            partitions: Optional[Sequence[int]] = None,
            labels: Optional[Mapping[int, str]] = None) -> CostProfile:
    """
    Build the CostProfile for the given partitions.

    Args:
        models: per partition j either its offloaded size D_j in bytes or its
            trained bottlenecked graph (D_j then comes from the calibration batch)
        device: simulated DeviceProfile, or BenchDevice to time the halves here
        network: wireless profile for TU and PU
        calibration: input batch for D_j and bench timing
        partitions: partitions to profile (default: all of the device's, or all models)
    """
    simulated = isinstance(device, DeviceProfile)
    if partitions is None:
        partitions = sorted(device.partitions) if simulated else sorted(models)
    missing = [j for j in partitions if j not in models]
    if missing:
        raise ProfileError("no trained model", missing=missing)
    if simulated:
        absent = [j for j in partitions if j not in device.partitions]
        if absent:
            raise ProfileError("device profile incomplete", missing=absent)

    records = {}
    for j in partitions:
        entry = models[j]
        label = (labels or {}).get(j) or (device.partitions[j].label if simulated else f"P{j}")
        if isinstance(entry, (int, np.integer)):
            d_bytes = int(entry)
        else:
            if calibration is None:
                raise ProfileError(f"partition {j}: calibration batch needed to size the feature")
            d_bytes = calibrate_feature_size(entry, calibration, CALIBRATION_SAMPLES)

        if simulated:
            tm, pm, tc = device.t_mobile(j, k_mobile), device.p_mobile(j, k_mobile), device.t_cloud(j, k_cloud)
        else:
            if isinstance(entry, (int, np.integer)):
                raise ProfileError(f"partition {j}: bench timing needs the trained model")
            mobile, cloud = split_graph(entry, j)
            sample = np.asarray(calibration)[:1]
            encoded = [f.to_bytes() for f in mobile.encode(sample)]
            tm, _ = median_timing(lambda: mobile.encode(sample), repetitions, device.warmup, device.timer)
            tc, _ = median_timing(lambda: cloud.infer(encoded), repetitions, device.warmup, device.timer)
            pm = device.mobile_power_mw
        records[j] = CostRecord(j, label, tm, pm, tc, uplink_time(d_bytes, network), d_bytes)
        logger.debug(f"[PROFILE] j={j} D={d_bytes}B TM={tm:.3f} TC={tc:.3f} TU={records[j].tu:.3f}")

    sentinels = {}
    if simulated and device.mobile_only is not None:
        tm, pm, _ = device.sentinel(device.mobile_only, k_mobile, k_cloud)
        sentinels['mobile-only'] = CostRecord(0, device.mobile_only.label, tm, pm, 0.0, 0.0, 0)
    if simulated and device.cloud_only is not None:
        _, _, tc = device.sentinel(device.cloud_only, k_mobile, k_cloud)
        d_bytes = device.input_bytes or 0
        sentinels['cloud-only'] = CostRecord(0, device.cloud_only.label, 0.0, 0.0, tc,
                                             uplink_time(d_bytes, network), d_bytes)
    return CostProfile(network, float(k_mobile), float(k_cloud), records, sentinels)
