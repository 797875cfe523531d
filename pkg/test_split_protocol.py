#!/usr/bin/env python3
"""
Test frame encoding, parsing and the stream helpers
"""
import sys
import os
import socket
import asyncio
import struct
sys.path.insert(0, os.path.dirname(__file__))

import numpy as np
import pytest

from bottlenet_errors import ProtocolError, StreamError
from split_protocol import (
    FRAME_HEADER, ErrorCode, ErrorMessage, InferRequest, InferResponse, LoadQuery, LoadReport, MessageType,
    decode_body, encode_body, encode_frame, parse_frame, read_frame, recv_message, send_message,
)

MESSAGES = [
    InferRequest(3, b'BNF1' + bytes(range(40))),
    InferRequest(0, b''),
    InferResponse(np.array([0.5, -1.25, 3.0], dtype=np.float32)),
    LoadQuery(),
    LoadReport(2.5, 7),
    ErrorMessage(404, 'unknown partition 9'),
    ErrorMessage(500, ''),
]


@pytest.mark.parametrize("message", MESSAGES)
def test_frame_round_trip(message):
    frame = encode_frame(message)
    parsed, consumed = parse_frame(frame + b'extra')
    assert parsed == message
    assert consumed == len(frame)


def test_header_layout():
    frame = encode_frame(LoadReport(1.0, 2))
    magic, version, msg_type, body_len = FRAME_HEADER.unpack_from(frame, 0)
    assert FRAME_HEADER.size == 10
    assert (magic, version, msg_type, body_len) == (b'BNRT', 1, MessageType.LOAD_REPORT, 8)
    assert frame[6:10] == (8).to_bytes(4, 'little')


def test_infer_request_body_layout():
    body = encode_body(InferRequest(0x0102, b'xyz'))
    assert body == b'\x02\x01xyz'


def test_infer_response_is_float32():
    body = encode_body(InferResponse(np.array([1.0, 2.0])))
    assert body[:2] == (2).to_bytes(2, 'little')
    assert np.frombuffer(body, dtype='<f4', offset=2).tolist() == [1.0, 2.0]


def test_fatal_header_errors():
    frame = encode_frame(LoadQuery())
    cases = [
        (b'XXXX' + frame[4:], ErrorCode.BAD_REQUEST),
        (frame[:4] + b'\x02' + frame[5:], ErrorCode.BAD_REQUEST),
    ]
    for data, code in cases:
        with pytest.raises(ProtocolError) as info:
            parse_frame(data)
        assert info.value.fatal and info.value.error_code == code

    big = FRAME_HEADER.pack(b'BNRT', 1, MessageType.INFER_REQ, 1000)
    with pytest.raises(ProtocolError) as info:
        parse_frame(big + bytes(1000), max_body=100)
    assert info.value.fatal and info.value.error_code == ErrorCode.TOO_LARGE


def test_truncated_frames_are_fatal():
    frame = encode_frame(ErrorMessage(400, 'bad'))
    for cut in (3, len(frame) - 1):
        with pytest.raises(ProtocolError) as info:
            parse_frame(frame[:cut])
        assert info.value.fatal


@pytest.mark.parametrize("msg_type,body", [
    (9, b''),
    (MessageType.INFER_REQ, b'\x01'),
    (MessageType.INFER_RESP, b'\x02\x00' + bytes(4)),
    (MessageType.INFER_RESP, b'\x01\x00' + struct.pack('<f', float('nan'))),
    (MessageType.LOAD_QUERY, b'\x00'),
    (MessageType.LOAD_REPORT, bytes(7)),
    (MessageType.LOAD_REPORT, struct.pack('<fI', float('inf'), 0)),
    (MessageType.ERROR, b'\x01'),
    (MessageType.ERROR, b'\x90\x01\xff\xfe'),
])
def test_malformed_bodies_are_recoverable(msg_type, body):
    with pytest.raises(ProtocolError) as info:
        decode_body(msg_type, body)
    assert not info.value.fatal
    assert info.value.error_code == ErrorCode.BAD_REQUEST


def test_unencodable_message():
    with pytest.raises(ProtocolError):
        encode_body(object())


def test_mutated_frames_only_raise_protocol_errors():
    rng = np.random.default_rng(0)
    frames = [encode_frame(m) for m in MESSAGES]
    for _ in range(10_000):
        frame = bytearray(frames[rng.integers(len(frames))])
        choice = rng.random()
        if choice < 0.6:
            for _ in range(rng.integers(1, 4)):
                bit = int(rng.integers(len(frame) * 8))
                frame[bit // 8] ^= 1 << (bit % 8)
        elif choice < 0.9:
            frame = frame[:rng.integers(len(frame) + 1)]
        else:
            struct.pack_into('<I', frame, 6, int(rng.integers(len(frame), 2 ** 32)))
        try:
            parse_frame(bytes(frame))
        except ProtocolError:
            pass


# ----------------------------------------------------------------------------
# Streams
# ----------------------------------------------------------------------------

def test_socket_helpers():
    left, right = socket.socketpair()
    try:
        for message in MESSAGES:
            send_message(left, message)
            assert recv_message(right) == message
        left.close()
        with pytest.raises(StreamError):
            recv_message(right)
    finally:
        left.close()
        right.close()


def test_socket_timeout_is_stream_error():
    left, right = socket.socketpair()
    try:
        right.settimeout(0.05)
        with pytest.raises(StreamError):
            recv_message(right)
    finally:
        left.close()
        right.close()


def test_async_read_frame():
    async def scenario():
        reader = asyncio.StreamReader()
        reader.feed_data(encode_frame(LoadReport(4.0, 1)) + encode_frame(LoadQuery()))
        reader.feed_eof()
        first = await read_frame(reader)
        second = await read_frame(reader)
        end = await read_frame(reader)
        return first, second, end

    first, second, end = asyncio.run(scenario())
    assert first == LoadReport(4.0, 1)
    assert second == LoadQuery()
    assert end is None


def test_async_read_frame_partial_header():
    async def scenario():
        reader = asyncio.StreamReader()
        reader.feed_data(encode_frame(LoadQuery())[:4])
        reader.feed_eof()
        return await read_frame(reader)

    with pytest.raises(ProtocolError) as info:
        asyncio.run(scenario())
    assert info.value.fatal


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
