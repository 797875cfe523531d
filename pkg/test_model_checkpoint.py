#!/usr/bin/env python3
"""
Test BNMD checkpoint save and load
"""
import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from bottlenet_errors import ArtifactMissingError, CheckpointError
from bottleneck_unit import BottleneckConfig, insert_bottleneck
from model_checkpoint import CHECKPOINT_PREFIX, load_checkpoint, save_checkpoint
from tensor_core import NetworkGraph, predict


def bottlenecked_model():
    specs = [
        {'kind': 'conv2d', 'kernel_h': 3, 'kernel_w': 3, 'stride': 1, 'filters': 3},
        {'kind': 'batchnorm'},
        {'kind': 'relu'},
        {'kind': 'avgpool-global'},
        {'kind': 'dense', 'units': 2},
        {'kind': 'softmax-xent-head'},
    ]
    graph = NetworkGraph(specs, (6, 6, 1), [2], seed=11)
    model = insert_bottleneck(graph, BottleneckConfig(1, spatial=2, channels=2, quality=40), seed=12)
    # non-default running statistics so they are part of the round trip
    model.forward(np.random.default_rng(0).uniform(size=(4, 6, 6, 1)), training=True)
    return model


def test_round_trip_restores_everything(tmp_path):
    model = bottlenecked_model()
    path = save_checkpoint(model, tmp_path / 'runs' / 'partition_1.bnmd', accuracy=0.875,
                           metadata={'partition': 1, 'd_bytes': 120})
    loaded, header = load_checkpoint(path)

    assert header['accuracy'] == 0.875
    assert header['metadata'] == {'partition': 1, 'd_bytes': 120}
    assert loaded.bottleneck == model.bottleneck
    assert loaded.to_spec() == model.to_spec()
    for key, value in {**model.parameters(), **model.buffers()}.items():
        restored = {**loaded.parameters(), **loaded.buffers()}[key]
        assert np.array_equal(restored, value), key

    x = np.random.default_rng(1).uniform(size=(3, 6, 6, 1))
    assert np.array_equal(predict(loaded, x), predict(model, x))


def test_saving_twice_is_byte_identical(tmp_path):
    model = bottlenecked_model()
    first = save_checkpoint(model, tmp_path / 'a.bnmd', accuracy=0.5)
    second = save_checkpoint(model, tmp_path / 'b.bnmd', accuracy=0.5)
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes()[:4] == b'BNMD'


def test_graph_without_bottleneck(tmp_path):
    graph = NetworkGraph([{'kind': 'dense', 'units': 2}], (2, 2, 1), [], seed=3)
    loaded, header = load_checkpoint(save_checkpoint(graph, tmp_path / 'baseline.bnmd'))
    assert loaded.bottleneck is None
    assert header['accuracy'] is None
    assert np.array_equal(loaded.parameters()['0.weight'], graph.parameters()['0.weight'])


def test_missing_file_names_producer(tmp_path):
    with pytest.raises(ArtifactMissingError) as info:
        load_checkpoint(tmp_path / 'absent.bnmd', producer='train')
    assert info.value.producer == 'train'


def test_corrupt_files_rejected(tmp_path):
    data = save_checkpoint(bottlenecked_model(), tmp_path / 'good.bnmd').read_bytes()
    _, _, header_len = CHECKPOINT_PREFIX.unpack_from(data, 0)
    cases = {
        'magic': b'XXXX' + data[4:],
        'version': data[:4] + (9).to_bytes(4, 'little') + data[8:],
        'prefix': data[:6],
        'header': data[:CHECKPOINT_PREFIX.size] + b'{' * header_len + data[CHECKPOINT_PREFIX.size + header_len:],
        'truncated': data[:-8],
        'trailing': data + b'\x00' * 8,
    }
    for name, blob in cases.items():
        path = tmp_path / f'{name}.bnmd'
        path.write_bytes(blob)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
