#!/usr/bin/env python3
"""
Model Checkpoint
BNMD single-file checkpoints: magic, u32 version, u32 header length, a UTF-8
JSON header (graph spec, bottleneck config, parameter manifest) and the raw
little-endian f64 parameter and running-statistic blobs in layer order.
"""

import json
import struct
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np

from bottlenet_errors import ArtifactMissingError, CheckpointError
from bottleneck_unit import BottleneckConfig
from tensor_core import NetworkGraph

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'BNMD'
CHECKPOINT_VERSION = 1
CHECKPOINT_PREFIX = struct.Struct('<4sII')


def _ordered(values: Dict[str, np.ndarray]):
    """(key, array) pairs in layer order, then name order within a layer"""
    return sorted(values.items(), key=lambda item: (int(item[0].split('.', 1)[0]), item[0]))


def save_checkpoint(graph: NetworkGraph, path, accuracy: Optional[float] = None,
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write graph spec, bottleneck config and all parameters to one file"""
    path = Path(path)
    manifest = []
    blobs = []
    for section, values in (('param', graph.parameters()), ('buffer', graph.buffers())):
        for key, value in _ordered(values):
            manifest.append({'key': key, 'section': section, 'shape': list(value.shape)})
            blobs.append(np.ascontiguousarray(value, dtype='<f8').tobytes())

    header = {
        'graph': graph.to_spec(),
        'seed': graph.seed,
        'bottleneck': graph.bottleneck.to_dict() if graph.bottleneck else None,
        'accuracy': accuracy,
        'metadata': metadata or {},
        'manifest': manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'wb') as f:
            f.write(CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header_bytes)))
            f.write(header_bytes)
            for blob in blobs:
                f.write(blob)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    logger.debug(f"[CHECKPOINT] Saved {len(manifest)} tensors to {path}")
    return path


def load_checkpoint(path, producer: str = 'sweep') -> Tuple[NetworkGraph, Dict[str, Any]]:
    """
    Rebuild a graph from a checkpoint.

    Returns:
        (graph, header) where header carries accuracy and metadata
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactMissingError(str(path), producer)
    blob = path.read_bytes()
    if len(blob) < CHECKPOINT_PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, header_len = CHECKPOINT_PREFIX.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")

    offset = CHECKPOINT_PREFIX.size
    try:
        header = json.loads(blob[offset:offset + header_len].decode('utf-8'))
        graph = NetworkGraph.from_spec(header['graph'], seed=header.get('seed', 0))
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: unreadable header: {e}") from e
    offset += header_len

    params, buffers = {}, {}
    for entry in header['manifest']:
        count = int(np.prod(entry['shape'], dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: parameter data truncated at {entry['key']}")
        value = np.frombuffer(blob, dtype='<f8', count=count, offset=offset).reshape(entry['shape'])
        (params if entry['section'] == 'param' else buffers)[entry['key']] = value.astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    graph.set_parameters(params)
    graph.set_buffers(buffers)
    if header.get('bottleneck'):
        graph.bottleneck = BottleneckConfig.from_dict(header['bottleneck'])
    return graph, header
