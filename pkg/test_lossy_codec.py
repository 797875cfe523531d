#!/usr/bin/env python3
"""
Test the quantizer, channel tiling, block codec and EncodedFeature layout
"""
import sys
import os
import math
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from bottlenet_errors import CodecError
from config.constants import QUALITY_LADDER
from lossy_codec import (
    FEATURE_HEADER, EncodedFeature, _BitReader, _BitWriter, decode, decode_feature, dequantize, encode,
    encode_feature, encoded_size, quality_table, quantize, reconstruct_feature, size_ladder, tile, tile_grid,
    untile,
)


def smooth_image(rng, height=32, width=40, noise=6.0):
    yy, xx = np.mgrid[0:height, 0:width]
    base = 128 + 60 * np.sin(xx / 5.0) * np.cos(yy / 7.0) + rng.normal(0, noise, (height, width))
    return np.clip(np.round(base), 0, 255).astype(np.int64)


# ----------------------------------------------------------------------------
# Quantizer
# ----------------------------------------------------------------------------

def test_quantize_rounds_half_away_from_zero():
    values, fmin, fmax = quantize(np.array([0.0, 0.5, 1.0]), 8)
    assert values.tolist() == [0, 128, 255]
    assert (fmin, fmax) == (0.0, 1.0)


def test_quantize_integral_grid():
    values, fmin, fmax = quantize(np.array([-1.0, 0.0, 1.0, 2.0]), 2)
    assert values.tolist() == [0, 1, 2, 3]
    assert (fmin, fmax) == (-1.0, 2.0)


def test_quantize_constant_tensor_is_all_zeros():
    values, fmin, fmax = quantize(np.full((3, 4), 2.5), 8)
    assert not values.any()
    assert fmin == fmax == 2.5
    assert np.array_equal(dequantize(values, fmin, fmax, 8), np.full((3, 4), 2.5))


def test_dequantize_endpoints():
    assert dequantize(np.array([255]), -3.0, 7.0, 8)[0] == 7.0
    assert dequantize(np.array([0]), -3.0, 7.0, 8)[0] == -3.0


def test_round_trip_error_bound():
    rng = np.random.default_rng(0)
    for bits in (1, 2, 4, 8, 12):
        for _ in range(20):
            feature = rng.normal(size=(5, 6, 3)) * rng.uniform(0.1, 10)
            values, fmin, fmax = quantize(feature, bits)
            assert values.min() >= 0 and values.max() <= (1 << bits) - 1
            restored = dequantize(values, fmin, fmax, bits)
            bound = (fmax - fmin) / (2 * ((1 << bits) - 1))
            assert np.max(np.abs(restored - feature)) <= bound * (1 + 1e-9)


def test_round_trip_of_half_vector_within_bound():
    feature = np.array([0.0, 0.5, 1.0])
    values, fmin, fmax = quantize(feature, 8)
    assert np.max(np.abs(dequantize(values, fmin, fmax, 8) - feature)) <= 1 / 510 + 1e-12


# ----------------------------------------------------------------------------
# Tiling
# ----------------------------------------------------------------------------

@pytest.mark.parametrize("channels,grid", [(256, (16, 16)), (32, (8, 4)), (5, (4, 2)), (1, (1, 1)),
                                           (2, (2, 1)), (3, (2, 2))])
def test_tile_grid_shapes(channels, grid):
    assert tile_grid(channels) == grid


def test_tile_grid_matches_square_formula():
    for channels in range(1, 1025):
        c_pad = 1 << math.ceil(math.log2(channels)) if channels > 1 else 1
        log = math.log2(c_pad)
        expected = (2 ** math.ceil(log / 2), 2 ** math.floor(log / 2))
        assert tile_grid(channels) == expected, channels


def test_single_channel_tile_is_the_channel():
    values = np.arange(28 * 28).reshape(28, 28, 1)
    assert np.array_equal(tile(values), values[:, :, 0])


def test_tile_places_channel_k_row_major():
    h, w, c = 2, 3, 5
    values = np.zeros((h, w, c), dtype=np.int64)
    for k in range(c):
        values[:, :, k] = k + 1
    image = tile(values)
    grid_w, grid_h = tile_grid(c)
    assert image.shape == (grid_h * h, grid_w * w)
    for k in range(grid_w * grid_h):
        row, col = divmod(k, grid_w)
        cell = image[row * h:(row + 1) * h, col * w:(col + 1) * w]
        assert np.all(cell == (k + 1 if k < c else 0))


def test_untile_inverts_tile():
    rng = np.random.default_rng(1)
    for channels in (1, 2, 3, 5, 32, 256):
        values = rng.integers(0, 256, size=(4, 3, channels))
        assert np.array_equal(untile(tile(values), 4, 3, channels), values)


def test_untile_all_zero_image():
    assert not untile(np.zeros((8, 16), dtype=np.int64), 4, 4, 5).any()


def test_untile_rejects_inconsistent_dims():
    with pytest.raises(CodecError):
        untile(np.zeros((8, 8)), 4, 4, 5)


# ----------------------------------------------------------------------------
# Block codec
# ----------------------------------------------------------------------------

def test_quality_table_scaling():
    assert quality_table(50)[0, 1] == 11
    assert quality_table(100).max() == 1
    # q=10 -> scale 500: floor((11 * 500 + 50) / 100) = 55
    assert quality_table(10)[0, 1] == 55
    assert quality_table(1).min() >= 1
    assert all(quality_table(q)[0, 0] == 1 for q in (1, 20, 80))


def test_quality_bounds():
    with pytest.raises(CodecError):
        quality_table(0)
    with pytest.raises(CodecError):
        encode(np.zeros((8, 8), dtype=np.int64), quality=101)


def test_near_lossless_at_quality_100():
    rng = np.random.default_rng(2)
    image = smooth_image(rng)
    restored = decode(encode(image, 100), *image.shape, quality=100)
    assert np.max(np.abs(restored - image)) <= 4


@pytest.mark.parametrize("quality", [1, 20, 100])
def test_constant_image_restored_exactly(quality):
    image = np.full((13, 21), 201, dtype=np.int64)
    assert np.array_equal(decode(encode(image, quality), 13, 21, quality=quality), image)


def test_lower_quality_is_smaller():
    image = smooth_image(np.random.default_rng(3), 64, 64)
    assert len(encode(image, 20)) <= len(encode(image, 80))


def test_encode_is_deterministic():
    image = smooth_image(np.random.default_rng(4))
    assert encode(image, 20) == encode(image, 20)


def test_size_ladder_covers_qualities():
    image = smooth_image(np.random.default_rng(5), 48, 48)
    sizes = size_ladder(image, [100, 60, 20, 5])
    assert sorted(sizes) == [5, 20, 60, 100]
    assert sizes[5] <= sizes[100]


def test_size_non_decreasing_in_quality():
    rng = np.random.default_rng(11)
    ladder = sorted(QUALITY_LADDER)
    violations, comparisons = [], 0
    for index in range(100):
        sizes = size_ladder(smooth_image(rng), ladder)
        for q_lo, q_hi in zip(ladder, ladder[1:]):
            comparisons += 1
            if sizes[q_lo] > sizes[q_hi]:
                violations.append((index, q_lo, q_hi, sizes[q_lo], sizes[q_hi]))
    assert len(violations) <= comparisons // 100, violations


@pytest.mark.parametrize("quality,max_drift", [(20, 1), (100, 4)])
def test_reencode_drift_is_bounded(quality, max_drift):
    rng = np.random.default_rng(12)
    for _ in range(5):
        image = smooth_image(rng)
        first = decode(encode(image, quality), *image.shape, quality=quality)
        payload = encode(first, quality)
        second = decode(payload, *image.shape, quality=quality)
        assert encode(first, quality) == payload
        assert np.max(np.abs(second - first)) <= max_drift


def test_bit_packing_is_msb_first_with_one_padding():
    writer = _BitWriter()
    for value, length in [(0b101, 3), (0, 0), (1, 1), (0xABC, 12), (0, 2)]:
        writer.write(value, length)
    assert writer.getvalue() == bytes([0xBA, 0xBC, 0x3F])

    reader = _BitReader(writer.getvalue(), base_offset=10)
    assert [reader.read(n) for n in (3, 1, 12, 2)] == [0b101, 1, 0xABC, 0]
    assert reader.remaining() == 6
    assert reader.tail_is_padding()
    with pytest.raises(CodecError) as info:
        reader.read(7)
    assert info.value.offset == 13


def test_large_image_round_trip():
    image = np.random.default_rng(13).integers(0, 256, size=(256, 256))
    restored = decode(encode(image, 100), 256, 256, quality=100)
    assert np.max(np.abs(restored - image)) <= 4


def test_encode_rejects_out_of_range_samples():
    with pytest.raises(CodecError):
        encode(np.full((8, 8), 256), 50, bits=8)


def test_truncated_payload_names_offset():
    image = smooth_image(np.random.default_rng(6))
    payload = encode(image, 20)
    with pytest.raises(CodecError) as info:
        decode(payload[:-1], *image.shape, quality=20)
    assert info.value.offset is not None


def test_trailing_bytes_rejected():
    image = smooth_image(np.random.default_rng(7))
    payload = encode(image, 20)
    with pytest.raises(CodecError):
        decode(payload + b'\x00', *image.shape, quality=20)


# ----------------------------------------------------------------------------
# EncodedFeature
# ----------------------------------------------------------------------------

def test_header_layout():
    assert FEATURE_HEADER.size == 28
    feature = np.random.default_rng(8).normal(size=(7, 9, 3))
    encoded = encode_feature(feature, 20)
    data = encoded.to_bytes()
    assert data[:4] == b'BNF1'
    assert len(data) == len(encoded) == encoded_size(feature, 20)
    parsed = EncodedFeature.from_bytes(data)
    assert parsed == encoded
    assert parsed.shape == (7, 9, 3)
    assert (parsed.crop_w, parsed.crop_h) == (18, 14)


def test_byte_path_matches_straight_through_path():
    rng = np.random.default_rng(9)
    for quality in (1, 20, 100):
        for channels in (1, 3, 8):
            feature = rng.normal(size=(6, 5, channels)) * 3
            wire = decode_feature(encode_feature(feature, quality).to_bytes())
            assert np.array_equal(wire, reconstruct_feature(feature, quality))


def test_constant_feature_survives():
    feature = np.full((4, 4, 2), -1.25)
    assert np.array_equal(decode_feature(encode_feature(feature, 5).to_bytes()), feature)


def test_from_bytes_validation():
    data = encode_feature(np.random.default_rng(10).normal(size=(4, 4, 2))).to_bytes()
    with pytest.raises(CodecError):
        EncodedFeature.from_bytes(b'XXXX' + data[4:])
    with pytest.raises(CodecError):
        EncodedFeature.from_bytes(data[:10])
    with pytest.raises(CodecError) as info:
        EncodedFeature.from_bytes(data[:-1])
    assert info.value.offset == FEATURE_HEADER.size


def test_non_finite_feature_rejected():
    feature = np.zeros((2, 2, 1))
    feature[0, 0, 0] = np.nan
    with pytest.raises(CodecError):
        encode_feature(feature)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
