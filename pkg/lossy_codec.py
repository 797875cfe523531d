#!/usr/bin/env python3
"""
Lossy Feature Codec
Quantizes a (h', w', c') feature tensor to n-bit integers, tiles the channels
into one 2-D image, and compresses it with a JPEG-like block transform coder.
The EncodedFeature byte layout is what travels between mobile and cloud.
"""

import heapq
import struct
import logging
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from bottlenet_errors import CodecError
from config.constants import BLOCK_SIZE, DEFAULT_BITS, DEFAULT_QUALITY

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b'BNF1'
# magic, n, q, w', h', c', crop_w, crop_h, min, max, payload_len
FEATURE_HEADER = struct.Struct('<4sBBHHHHHffI')

# Base luminance quantization table (row-major, 8x8)
BASE_LUMINANCE_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.int64)


def _zigzag_order(size: int) -> np.ndarray:
    """Flat indices of an size x size block in zigzag scan order"""
    cells = sorted(
        ((r, c) for r in range(size) for c in range(size)),
        key=lambda rc: (rc[0] + rc[1], rc[1] if (rc[0] + rc[1]) % 2 == 0 else rc[0]),
    )
    return np.array([r * size + c for r, c in cells], dtype=np.int64)


def _dct_matrix(size: int) -> np.ndarray:
    """Orthonormal DCT-II basis, rows are frequencies"""
    k = np.arange(size)[:, None]
    x = np.arange(size)[None, :]
    basis = np.cos(np.pi * (2 * x + 1) * k / (2 * size)) * np.sqrt(2.0 / size)
    basis[0] /= np.sqrt(2.0)
    return basis


ZIGZAG = _zigzag_order(BLOCK_SIZE)
DCT = _dct_matrix(BLOCK_SIZE)

# AC symbol = run * 32 + category; category 0 only appears in EOB and ZRL
AC_RUN_SHIFT = 32
EOB = 0
ZRL = 15 * AC_RUN_SHIFT


def _check_params(bits: int, quality: int):
    if not 1 <= bits <= 16:
        raise CodecError(f"bits must be in 1..16, got {bits}")
    if not 1 <= quality <= 100:
        raise CodecError(f"quality must be in 1..100, got {quality}")


# ============================================================================
# QUANTIZER
# ============================================================================

def quantize(feature: np.ndarray, bits: int = DEFAULT_BITS, value_range=None) -> Tuple[np.ndarray, float, float]:
    """
    Map a real tensor onto unsigned n-bit integers.

    Args:
        feature: finite real tensor of any shape
        bits: quantizer bits n
        value_range: (min, max) to use instead of the tensor's own extrema

    Returns:
        (integer tensor in [0, 2^n - 1], min, max); all zeros when min == max
    """
    feature = np.asarray(feature, dtype=np.float64)
    if value_range is None:
        fmin, fmax = float(feature.min()), float(feature.max())
    else:
        fmin, fmax = (float(v) for v in value_range)
    levels = (1 << bits) - 1
    if fmax == fmin:
        return np.zeros(feature.shape, dtype=np.int64), fmin, fmax
    scaled = (feature - fmin) * levels / (fmax - fmin)
    # scaled >= 0, so floor(x + 0.5) rounds half away from zero
    values = np.floor(scaled + 0.5)
    return np.clip(values, 0, levels).astype(np.int64), fmin, fmax


def dequantize(values: np.ndarray, fmin: float, fmax: float, bits: int = DEFAULT_BITS) -> np.ndarray:
    """Inverse quantizer; level 0 maps to min and level 2^n - 1 maps exactly to max"""
    values = np.asarray(values)
    if fmax == fmin:
        return np.full(values.shape, fmin, dtype=np.float64)
    t = values.astype(np.float64) / ((1 << bits) - 1)
    return fmin * (1.0 - t) + fmax * t


# ============================================================================
# CHANNEL TILING
# ============================================================================

def tile_grid(channels: int) -> Tuple[int, int]:
    """(grid_w, grid_h) for c' channels padded to the next power of two"""
    if channels < 1:
        raise CodecError(f"channel count must be >= 1, got {channels}")
    k = (channels - 1).bit_length()
    return 1 << ((k + 1) // 2), 1 << (k // 2)


def tile(values: np.ndarray) -> np.ndarray:
    """(h', w', c') tensor -> (grid_h*h', grid_w*w') image, channel k at row k // grid_w, col k % grid_w"""
    h, w, c = values.shape
    grid_w, grid_h = tile_grid(c)
    padded = np.zeros((h, w, grid_w * grid_h), dtype=values.dtype)
    padded[:, :, :c] = values
    return padded.reshape(h, w, grid_h, grid_w).transpose(2, 0, 3, 1).reshape(grid_h * h, grid_w * w)


def untile(image: np.ndarray, height: int, width: int, channels: int) -> np.ndarray:
    """Inverse of tile; pad tiles beyond c' are discarded"""
    grid_w, grid_h = tile_grid(channels)
    if image.shape != (grid_h * height, grid_w * width):
        raise CodecError(
            f"tiled image {image.shape} inconsistent with ({height}, {width}, {channels})"
        )
    cells = image.reshape(grid_h, height, grid_w, width).transpose(1, 3, 0, 2)
    return cells.reshape(height, width, grid_h * grid_w)[:, :, :channels]


# ============================================================================
# BLOCK TRANSFORM
# ============================================================================

def quality_table(quality: int) -> np.ndarray:
    """8x8 quantization steps for a quality level; the DC step is always 1"""
    _check_params(DEFAULT_BITS, quality)
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    table = np.floor((BASE_LUMINANCE_TABLE * scale + 50) / 100).astype(np.int64)
    table = np.maximum(table, 1)
    # lossless DC keeps flat blocks exact at every quality
    table[0, 0] = 1
    return table


def _blocks(image: np.ndarray) -> np.ndarray:
    """Edge-replicate to a multiple of the block size and split into (by, bx, 8, 8)"""
    h, w = image.shape
    ph, pw = -(-h // BLOCK_SIZE) * BLOCK_SIZE, -(-w // BLOCK_SIZE) * BLOCK_SIZE
    padded = np.pad(image, ((0, ph - h), (0, pw - w)), mode='edge')
    return padded.reshape(ph // BLOCK_SIZE, BLOCK_SIZE, pw // BLOCK_SIZE, BLOCK_SIZE).transpose(0, 2, 1, 3)


def _forward_transform(image: np.ndarray, quality: int, bits: int) -> np.ndarray:
    """Quantized DCT coefficients, (blocks, 64) in zigzag order"""
    blocks = _blocks(image.astype(np.float64) - (1 << (bits - 1)))
    coeffs = DCT @ blocks @ DCT.T
    steps = coeffs / quality_table(quality)
    levels = np.sign(steps) * np.floor(np.abs(steps) + 0.5)
    flat = levels.reshape(-1, BLOCK_SIZE * BLOCK_SIZE).astype(np.int64)
    return flat[:, ZIGZAG]


def _reconstruct(zigzag: np.ndarray, height: int, width: int, quality: int, bits: int) -> np.ndarray:
    """Dequantize, inverse DCT, clamp and crop back to (height, width)"""
    by, bx = -(-height // BLOCK_SIZE), -(-width // BLOCK_SIZE)
    flat = np.empty_like(zigzag)
    flat[:, ZIGZAG] = zigzag
    coeffs = flat.reshape(by, bx, BLOCK_SIZE, BLOCK_SIZE).astype(np.float64) * quality_table(quality)
    pixels = DCT.T @ coeffs @ DCT + (1 << (bits - 1))
    pixels = np.clip(np.floor(pixels + 0.5), 0, (1 << bits) - 1).astype(np.int64)
    image = pixels.transpose(0, 2, 1, 3).reshape(by * BLOCK_SIZE, bx * BLOCK_SIZE)
    return image[:height, :width]


# ============================================================================
# ENTROPY CODING
# ============================================================================

def _category(value: int) -> int:
    return abs(int(value)).bit_length()


def _amplitude_bits(value: int, category: int) -> int:
    return value if value > 0 else value + (1 << category) - 1


def _amplitude_value(bits: int, category: int) -> int:
    if category == 0:
        return 0
    return bits if bits >> (category - 1) else bits - (1 << category) + 1


def _block_symbols(zigzag: np.ndarray) -> Tuple[List[Tuple[int, int, int]], List[List[Tuple[int, int, int]]]]:
    """Per block: DC (symbol, amplitude, category) and AC symbol lists"""
    dc_symbols, ac_symbols = [], []
    previous = 0
    for block in zigzag.tolist():
        diff = block[0] - previous
        previous = block[0]
        cat = _category(diff)
        dc_symbols.append((cat, _amplitude_bits(diff, cat), cat))

        symbols = []
        last = max((k for k in range(1, len(block)) if block[k] != 0), default=0)
        run = 0
        for k in range(1, last + 1):
            value = block[k]
            if value == 0:
                run += 1
                continue
            while run > 15:
                symbols.append((ZRL, 0, 0))
                run -= 16
            cat = _category(value)
            symbols.append((run * AC_RUN_SHIFT + cat, _amplitude_bits(value, cat), cat))
            run = 0
        if last < len(block) - 1:
            symbols.append((EOB, 0, 0))
        ac_symbols.append(symbols)
    return dc_symbols, ac_symbols


def _code_lengths(frequencies: Dict[int, int]) -> Dict[int, int]:
    """Huffman code lengths with deterministic tie-breaks on (count, symbol)"""
    if len(frequencies) == 1:
        return {next(iter(frequencies)): 1}
    heap = [(count, symbol, [symbol]) for symbol, count in sorted(frequencies.items())]
    heapq.heapify(heap)
    lengths = {symbol: 0 for symbol in frequencies}
    while len(heap) > 1:
        count_a, key_a, members_a = heapq.heappop(heap)
        count_b, key_b, members_b = heapq.heappop(heap)
        for symbol in members_a + members_b:
            lengths[symbol] += 1
        heapq.heappush(heap, (count_a + count_b, min(key_a, key_b), members_a + members_b))
    return lengths


def _canonical_codes(lengths: Dict[int, int]) -> Dict[int, Tuple[int, int]]:
    """symbol -> (code, length), assigned in (length, symbol) order"""
    codes = {}
    code = 0
    previous = 0
    for symbol, length in sorted(lengths.items(), key=lambda item: (item[1], item[0])):
        code <<= length - previous
        codes[symbol] = (code, length)
        code += 1
        previous = length
    return codes


class _BitWriter:

    def __init__(self):
        self._out = bytearray()
        self._acc = 0
        self._count = 0

    def write(self, value: int, length: int):
        if not length:
            return
        self._acc = (self._acc << length) | int(value)
        self._count += length
        while self._count >= 8:
            self._count -= 8
            self._out.append((self._acc >> self._count) & 0xFF)
        self._acc &= (1 << self._count) - 1

    def getvalue(self) -> bytes:
        if not self._count:
            return bytes(self._out)
        pad = 8 - self._count
        return bytes(self._out) + bytes([(self._acc << pad) | ((1 << pad) - 1)])


class _BitReader:

    def __init__(self, data: bytes, base_offset: int):
        self._data = bytes(data)
        self._size = len(self._data) * 8
        self._pos = 0
        self._base = base_offset

    @property
    def offset(self) -> int:
        return self._base + self._pos // 8

    def _peek(self, length: int) -> int:
        first, last = self._pos // 8, (self._pos + length + 7) // 8
        chunk = int.from_bytes(self._data[first:last], 'big')
        return (chunk >> (last * 8 - self._pos - length)) & ((1 << length) - 1)

    def read(self, length: int) -> int:
        if length == 0:
            return 0
        if self._pos + length > self._size:
            raise CodecError("bitstream truncated", offset=self._base + len(self._data))
        value = self._peek(length)
        self._pos += length
        return value

    def read_symbol(self, table: Dict[Tuple[int, int], int], max_length: int) -> int:
        start = self.offset
        code = 0
        for length in range(1, max_length + 1):
            code = (code << 1) | self.read(1)
            symbol = table.get((length, code))
            if symbol is not None:
                return symbol
        raise CodecError("invalid prefix code", offset=start)

    def remaining(self) -> int:
        return self._size - self._pos

    def tail_is_padding(self) -> bool:
        remaining = self.remaining()
        return self._peek(remaining) == (1 << remaining) - 1 if remaining else True


def encode(image: np.ndarray, quality: int = DEFAULT_QUALITY, bits: int = DEFAULT_BITS) -> bytes:
    """
    Compress an n-bit single-plane image.

    Payload: u16 DC table size, (u8 symbol, u8 length) pairs, u16 AC table size,
    (u16 symbol, u8 length) pairs, then the MSB-first bitstream padded with ones.
    """
    _check_params(bits, quality)
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise CodecError(f"expected a non-empty 2-D image, got shape {image.shape}")
    if image.min() < 0 or image.max() > (1 << bits) - 1:
        raise CodecError(f"image samples outside [0, {(1 << bits) - 1}]")

    dc_symbols, ac_symbols = _block_symbols(_forward_transform(image, quality, bits))
    dc_freq: Dict[int, int] = {}
    ac_freq: Dict[int, int] = {}
    for symbol, _, _ in dc_symbols:
        dc_freq[symbol] = dc_freq.get(symbol, 0) + 1
    for block in ac_symbols:
        for symbol, _, _ in block:
            ac_freq[symbol] = ac_freq.get(symbol, 0) + 1
    dc_lengths = _code_lengths(dc_freq)
    ac_lengths = _code_lengths(ac_freq) if ac_freq else {}
    if max(list(dc_lengths.values()) + list(ac_lengths.values())) > 255:
        raise CodecError("prefix code too long for the table format")
    dc_codes, ac_codes = _canonical_codes(dc_lengths), _canonical_codes(ac_lengths)

    out = bytearray()
    out += struct.pack('<H', len(dc_lengths))
    for symbol, length in sorted(dc_lengths.items()):
        out += struct.pack('<BB', symbol, length)
    out += struct.pack('<H', len(ac_lengths))
    for symbol, length in sorted(ac_lengths.items()):
        out += struct.pack('<HB', symbol, length)

    writer = _BitWriter()
    for (dc_symbol, dc_amp, dc_cat), block in zip(dc_symbols, ac_symbols):
        writer.write(*dc_codes[dc_symbol])
        writer.write(dc_amp, dc_cat)
        for symbol, amp, cat in block:
            writer.write(*ac_codes[symbol])
            writer.write(amp, cat)
    return bytes(out) + writer.getvalue()


def _read_table(data: bytes, offset: int, symbol_format: str) -> Tuple[Dict[Tuple[int, int], int], int, int]:
    entry = struct.Struct('<' + symbol_format + 'B')
    if offset + 2 > len(data):
        raise CodecError("code table truncated", offset=offset)
    (count,) = struct.unpack_from('<H', data, offset)
    offset += 2
    if offset + count * entry.size > len(data):
        raise CodecError("code table truncated", offset=offset)
    lengths = {}
    for _ in range(count):
        symbol, length = entry.unpack_from(data, offset)
        if length == 0 or symbol in lengths:
            raise CodecError("corrupt code table entry", offset=offset)
        lengths[symbol] = length
        offset += entry.size
    if lengths and sum(2.0 ** -length for length in lengths.values()) > 1.0:
        raise CodecError("code table violates prefix property", offset=offset)
    table = {(length, code): symbol for symbol, (code, length) in _canonical_codes(lengths).items()}
    return table, max(lengths.values(), default=0), offset


def _entropy_decode(payload: bytes, blocks: int, bits: int, base_offset: int = 0) -> np.ndarray:
    dc_table, dc_max, offset = _read_table(payload, 0, 'B')
    ac_table, ac_max, offset = _read_table(payload, offset, 'H')
    reader = _BitReader(payload[offset:], base_offset + offset)
    # widest legal coefficient for this bit depth
    max_category = bits + 5
    zigzag = np.zeros((blocks, BLOCK_SIZE * BLOCK_SIZE), dtype=np.int64)
    previous = 0
    for b in range(blocks):
        if not dc_table:
            raise CodecError("empty DC code table", offset=base_offset)
        category = reader.read_symbol(dc_table, dc_max)
        if category > max_category + 1:
            raise CodecError(f"DC category {category} out of range", offset=reader.offset)
        previous += _amplitude_value(reader.read(category), category)
        zigzag[b, 0] = previous
        k = 1
        while k < BLOCK_SIZE * BLOCK_SIZE:
            if not ac_table:
                raise CodecError("empty AC code table", offset=reader.offset)
            symbol = reader.read_symbol(ac_table, ac_max)
            if symbol == EOB:
                break
            if symbol == ZRL:
                k += 16
                continue
            run, category = divmod(symbol, AC_RUN_SHIFT)
            if category == 0 or category > max_category:
                raise CodecError(f"invalid AC symbol {symbol}", offset=reader.offset)
            k += run
            if k >= BLOCK_SIZE * BLOCK_SIZE:
                raise CodecError("coefficient run overflows block", offset=reader.offset)
            zigzag[b, k] = _amplitude_value(reader.read(category), category)
            k += 1
        if k > BLOCK_SIZE * BLOCK_SIZE:
            raise CodecError("coefficient run overflows block", offset=reader.offset)
    if reader.remaining() >= 8 or not reader.tail_is_padding():
        raise CodecError("trailing data after last block", offset=reader.offset)
    return zigzag


def decode(payload: bytes, height: int, width: int, quality: int = DEFAULT_QUALITY,
           bits: int = DEFAULT_BITS, base_offset: int = 0) -> np.ndarray:
    """Decompress a payload produced by encode back to a (height, width) n-bit image"""
    _check_params(bits, quality)
    if height < 1 or width < 1:
        raise CodecError(f"invalid image dims {height}x{width}")
    blocks = -(-height // BLOCK_SIZE) * -(-width // BLOCK_SIZE)
    zigzag = _entropy_decode(bytes(payload), blocks, bits, base_offset)
    return _reconstruct(zigzag, height, width, quality, bits)


# ============================================================================
# ENCODED FEATURE
# ============================================================================

@dataclass(frozen=True)
class EncodedFeature:
    """Header plus entropy-coded payload of one transmitted feature tensor"""
    bits: int
    quality: int
    width: int
    height: int
    channels: int
    crop_w: int
    crop_h: int
    fmin: float
    fmax: float
    payload: bytes

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.height, self.width, self.channels

    def __len__(self) -> int:
        return FEATURE_HEADER.size + len(self.payload)

    def to_bytes(self) -> bytes:
        header = FEATURE_HEADER.pack(
            FEATURE_MAGIC, self.bits, self.quality, self.width, self.height, self.channels,
            self.crop_w, self.crop_h, self.fmin, self.fmax, len(self.payload),
        )
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> 'EncodedFeature':
        data = bytes(data)
        if len(data) < FEATURE_HEADER.size:
            raise CodecError("feature header truncated", offset=len(data))
        (magic, bits, quality, width, height, channels,
         crop_w, crop_h, fmin, fmax, payload_len) = FEATURE_HEADER.unpack_from(data, 0)
        if magic != FEATURE_MAGIC:
            raise CodecError(f"bad feature magic {magic!r}", offset=0)
        if not (1 <= bits <= 16 and 1 <= quality <= 100):
            raise CodecError(f"invalid codec parameters n={bits} q={quality}", offset=4)
        if min(width, height, channels) < 1:
            raise CodecError(f"invalid feature shape ({height}, {width}, {channels})", offset=6)
        grid_w, grid_h = tile_grid(channels)
        if (crop_w, crop_h) != (grid_w * width, grid_h * height):
            raise CodecError(f"tiled dims {crop_w}x{crop_h} inconsistent with feature shape", offset=12)
        if not (np.isfinite(fmin) and np.isfinite(fmax)) or fmin > fmax:
            raise CodecError("invalid quantizer range", offset=16)
        end = FEATURE_HEADER.size + payload_len
        if len(data) != end:
            raise CodecError(f"payload length {payload_len} does not match {len(data) - FEATURE_HEADER.size} bytes",
                             offset=FEATURE_HEADER.size)
        return cls(bits, quality, width, height, channels, crop_w, crop_h,
                   float(fmin), float(fmax), data[FEATURE_HEADER.size:])


def _feature_range(feature: np.ndarray) -> Tuple[float, float]:
    """Tensor extrema rounded through f32, the precision carried in the header"""
    if not np.all(np.isfinite(feature)):
        raise CodecError("feature tensor contains non-finite values")
    return float(np.float32(feature.min())), float(np.float32(feature.max()))


def _check_feature(feature: np.ndarray) -> np.ndarray:
    feature = np.asarray(feature, dtype=np.float64)
    if feature.ndim != 3 or max(feature.shape) > 0xFFFF or feature.size == 0:
        raise CodecError(f"expected a (h', w', c') feature tensor, got shape {feature.shape}")
    return feature


def encode_feature(feature: np.ndarray, quality: int = DEFAULT_QUALITY,
                   bits: int = DEFAULT_BITS) -> EncodedFeature:
    """quantize -> tile -> encode, with the header needed to invert it"""
    _check_params(bits, quality)
    feature = _check_feature(feature)
    fmin, fmax = _feature_range(feature)
    values, _, _ = quantize(feature, bits, (fmin, fmax))
    image = tile(values)
    height, width, channels = feature.shape
    return EncodedFeature(bits, quality, width, height, channels, image.shape[1], image.shape[0],
                          fmin, fmax, encode(image, quality, bits))


def decode_feature(data: Union[bytes, EncodedFeature]) -> np.ndarray:
    """decode -> untile -> dequantize"""
    feature = data if isinstance(data, EncodedFeature) else EncodedFeature.from_bytes(data)
    image = decode(feature.payload, feature.crop_h, feature.crop_w, feature.quality, feature.bits,
                   base_offset=FEATURE_HEADER.size)
    values = untile(image, feature.height, feature.width, feature.channels)
    return dequantize(values, feature.fmin, feature.fmax, feature.bits)


def reconstruct_feature(feature: np.ndarray, quality: int = DEFAULT_QUALITY,
                        bits: int = DEFAULT_BITS) -> np.ndarray:
    """decode_feature(encode_feature(x)) without the entropy coder; bit-identical result"""
    _check_params(bits, quality)
    feature = _check_feature(feature)
    fmin, fmax = _feature_range(feature)
    values, _, _ = quantize(feature, bits, (fmin, fmax))
    image = tile(values)
    restored = _reconstruct(_forward_transform(image, quality, bits), image.shape[0], image.shape[1],
                            quality, bits)
    height, width, channels = feature.shape
    return dequantize(untile(restored, height, width, channels), fmin, fmax, bits)


def encoded_size(feature: np.ndarray, quality: int = DEFAULT_QUALITY, bits: int = DEFAULT_BITS) -> int:
    """Bytes on the wire for one feature, header included"""
    return len(encode_feature(feature, quality, bits))


def size_ladder(image: np.ndarray, qualities: Sequence[int], bits: int = DEFAULT_BITS) -> Dict[int, int]:
    """Payload size per quality; logs any point where size grows as quality drops"""
    sizes = {q: len(encode(image, q, bits)) for q in sorted(qualities, reverse=True)}
    ordered = list(sizes.items())
    for (q_hi, size_hi), (q_lo, size_lo) in zip(ordered, ordered[1:]):
        if size_lo > size_hi:
            logger.warning(f"[CODEC] payload grew from {size_hi} B at q={q_hi} to {size_lo} B at q={q_lo}")
    return sizes
