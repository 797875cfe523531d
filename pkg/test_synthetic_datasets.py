#!/usr/bin/env python3
"""
Test dataset generation, the BNDS file format and cropping
"""
import sys
import os
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from bottlenet_errors import DatasetError
from synthetic_datasets import (
    DATASET_HEADER, DATASET_KINDS, Dataset, center_crop, make_dataset, random_crop, read_dataset,
    stripe_frequency_classifier, write_dataset,
)


@pytest.mark.parametrize("kind", DATASET_KINDS)
def test_same_seed_gives_identical_file(kind, tmp_path):
    first = write_dataset(make_dataset(kind, 40, (12, 12, 2), 3, seed=5), tmp_path / 'a.bnds')
    second = write_dataset(make_dataset(kind, 40, (12, 12, 2), 3, seed=5), tmp_path / 'b.bnds')
    assert first.read_bytes() == second.read_bytes()


def test_different_seed_differs():
    a = make_dataset('blobs', 20, (8, 8, 1), 2, seed=1)
    b = make_dataset('blobs', 20, (8, 8, 1), 2, seed=2)
    assert not np.array_equal(a.images, b.images)


def test_file_layout(tmp_path):
    dataset = make_dataset('shapes', 10, (6, 7, 3), 4, seed=0)
    path = write_dataset(dataset, tmp_path / 'nested' / 'shapes.bnds')
    blob = path.read_bytes()
    assert blob[:4] == b'BNDS'
    assert DATASET_HEADER.unpack_from(blob, 0)[1:] == (10, 6, 7, 3, 4)
    assert len(blob) == DATASET_HEADER.size + 10 * (6 * 7 * 3 + 1)
    # first record: pixels then its label
    record = 6 * 7 * 3
    assert blob[DATASET_HEADER.size + record] == dataset.labels[0]

    loaded = read_dataset(path)
    assert np.array_equal(loaded.images, dataset.images)
    assert np.array_equal(loaded.labels, dataset.labels)
    assert loaded.num_classes == 4


def test_read_rejects_corrupt_files(tmp_path):
    path = write_dataset(make_dataset('blobs', 4, (4, 4, 1), 2, seed=0), tmp_path / 'd.bnds')
    blob = path.read_bytes()
    (tmp_path / 'magic.bnds').write_bytes(b'XXXX' + blob[4:])
    (tmp_path / 'short.bnds').write_bytes(blob[:-1])
    (tmp_path / 'header.bnds').write_bytes(blob[:5])
    for name in ('magic.bnds', 'short.bnds', 'header.bnds'):
        with pytest.raises(DatasetError):
            read_dataset(tmp_path / name)


def test_every_class_present():
    for kind in DATASET_KINDS:
        dataset = make_dataset(kind, 24, (16, 16, 1), 4, seed=3)
        assert sorted(set(dataset.labels.tolist())) == [0, 1, 2, 3]
        assert dataset.images.dtype == np.uint8


def test_stripes_are_separable_by_frequency():
    dataset = make_dataset('stripes', 200, (28, 28, 1), 4, seed=7)
    predicted = stripe_frequency_classifier(dataset)
    assert np.mean(predicted == dataset.labels) >= 0.9


def test_blob_positions_differ_per_class():
    dataset = make_dataset('blobs', 200, (16, 16, 1), 4, seed=8)
    peaks = set()
    for label in range(4):
        mean = dataset.images[dataset.labels == label].astype(np.float64).mean(axis=0)[..., 0]
        peaks.add(np.unravel_index(np.argmax(mean), mean.shape))
    assert len(peaks) == 4


def test_generator_limits():
    with pytest.raises(DatasetError):
        make_dataset('shapes', 10, (8, 8, 1), 5, seed=0)
    with pytest.raises(DatasetError):
        make_dataset('stripes', 10, (8, 8, 1), 4, seed=0)
    with pytest.raises(DatasetError):
        make_dataset('noise', 10, (8, 8, 1), 2, seed=0)
    with pytest.raises(DatasetError):
        make_dataset('blobs', 1, (8, 8, 1), 2, seed=0)


def test_validate_rejects_out_of_range_label():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2, 2, 1)), np.array([0, 3]), 2).validate()
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 2, 2, 1)), np.array([0]), 2)


def test_split_is_deterministic_and_disjoint():
    dataset = make_dataset('blobs', 40, (6, 6, 1), 2, seed=9)
    train_a, test_a = dataset.split(0.15, seed=4)
    train_b, test_b = dataset.split(0.15, seed=4)
    assert np.array_equal(test_a.images, test_b.images)
    assert len(test_a) == 6 and len(train_a) == 34
    assert len(train_a) + len(test_a) == len(dataset)
    assert np.array_equal(train_a.labels, train_b.labels)


def test_tensor_scales_to_unit_range():
    dataset = Dataset(np.array([0, 255], dtype=np.uint8).reshape(2, 1, 1, 1), np.array([0, 1]), 2)
    assert dataset.tensor().reshape(-1).tolist() == [0.0, 1.0]


def test_crops():
    batch = np.arange(2 * 5 * 6 * 1, dtype=np.float64).reshape(2, 5, 6, 1)
    centered = center_crop(batch, (3, 4))
    assert centered.shape == (2, 3, 4, 1)
    assert np.array_equal(centered, batch[:, 1:4, 1:5])

    first = random_crop(batch, (3, 4), np.random.default_rng(0))
    second = random_crop(batch, (3, 4), np.random.default_rng(0))
    assert first.shape == (2, 3, 4, 1)
    assert np.array_equal(first, second)

    with pytest.raises(DatasetError):
        center_crop(batch, (6, 6))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
