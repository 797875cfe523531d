#!/usr/bin/env python3
"""
Split Runtime Protocol
Length-prefixed frames between the mobile client and the cloud server:
magic "BNRT", u8 version, u8 message type, u32 body length (little-endian),
then the body.
"""

import asyncio
import socket
import struct
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Optional, Tuple, Union

import numpy as np

from bottlenet_errors import ProtocolError, StreamError
from config.constants import MAX_FRAME_BODY

logger = logging.getLogger(__name__)

FRAME_MAGIC = b'BNRT'
PROTOCOL_VERSION = 1
FRAME_HEADER = struct.Struct('<4sBBI')


class MessageType(IntEnum):
    INFER_REQ = 1
    INFER_RESP = 2
    LOAD_QUERY = 3
    LOAD_REPORT = 4
    ERROR = 5


class ErrorCode(IntEnum):
    BAD_REQUEST = 400
    NOT_FOUND = 404
    TOO_LARGE = 413
    INTERNAL = 500


@dataclass(frozen=True)
class InferRequest:
    partition_id: int
    feature: bytes
    msg_type = MessageType.INFER_REQ


@dataclass
class InferResponse:
    logits: np.ndarray
    msg_type = MessageType.INFER_RESP

    def __eq__(self, other):
        return (isinstance(other, InferResponse)
                and np.array_equal(np.asarray(self.logits, dtype='<f4'), np.asarray(other.logits, dtype='<f4')))


@dataclass(frozen=True)
class LoadQuery:
    msg_type = MessageType.LOAD_QUERY


@dataclass(frozen=True)
class LoadReport:
    k_cloud: float
    queue_depth: int
    msg_type = MessageType.LOAD_REPORT


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    message: str = ''
    msg_type = MessageType.ERROR


Message = Union[InferRequest, InferResponse, LoadQuery, LoadReport, ErrorMessage]


# ============================================================================
# BODY CODECS
# ============================================================================

def encode_body(message: Message) -> bytes:
    if isinstance(message, InferRequest):
        return struct.pack('<H', message.partition_id) + bytes(message.feature)
    if isinstance(message, InferResponse):
        logits = np.asarray(message.logits, dtype='<f4').reshape(-1)
        return struct.pack('<H', len(logits)) + logits.tobytes()
    if isinstance(message, LoadQuery):
        return b''
    if isinstance(message, LoadReport):
        return struct.pack('<fI', message.k_cloud, message.queue_depth)
    if isinstance(message, ErrorMessage):
        return struct.pack('<H', message.code) + message.message.encode('utf-8')
    raise ProtocolError(f"cannot encode {type(message).__name__}")


def decode_body(msg_type: int, body: bytes) -> Message:
    """Parse a frame body; raises a non-fatal ProtocolError on malformed bodies"""
    try:
        kind = MessageType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None

    if kind is MessageType.INFER_REQ:
        if len(body) < 2:
            raise ProtocolError("INFER_REQ body truncated")
        (partition_id,) = struct.unpack_from('<H', body, 0)
        return InferRequest(partition_id, bytes(body[2:]))
    if kind is MessageType.INFER_RESP:
        if len(body) < 2:
            raise ProtocolError("INFER_RESP body truncated")
        (count,) = struct.unpack_from('<H', body, 0)
        if len(body) != 2 + 4 * count:
            raise ProtocolError(f"INFER_RESP declares {count} logits but carries {len(body) - 2} bytes")
        logits = np.frombuffer(body, dtype='<f4', count=count, offset=2).astype(np.float32)
        if not np.all(np.isfinite(logits)):
            raise ProtocolError("INFER_RESP carries non-finite logits")
        return InferResponse(logits)
    if kind is MessageType.LOAD_QUERY:
        if body:
            raise ProtocolError("LOAD_QUERY must have an empty body")
        return LoadQuery()
    if kind is MessageType.LOAD_REPORT:
        if len(body) != 8:
            raise ProtocolError(f"LOAD_REPORT body must be 8 bytes, got {len(body)}")
        k_cloud, depth = struct.unpack('<fI', body)
        if not np.isfinite(k_cloud):
            raise ProtocolError("LOAD_REPORT carries a non-finite load")
        return LoadReport(float(k_cloud), depth)
    if len(body) < 2:
        raise ProtocolError("ERROR body truncated")
    (code,) = struct.unpack_from('<H', body, 0)
    try:
        text = bytes(body[2:]).decode('utf-8')
    except UnicodeDecodeError:
        raise ProtocolError("ERROR message is not valid UTF-8") from None
    return ErrorMessage(code, text)


def encode_frame(message: Message) -> bytes:
    body = encode_body(message)
    if len(body) > MAX_FRAME_BODY:
        raise ProtocolError(f"body of {len(body)} bytes exceeds {MAX_FRAME_BODY}", ErrorCode.TOO_LARGE)
    return FRAME_HEADER.pack(FRAME_MAGIC, PROTOCOL_VERSION, int(message.msg_type), len(body)) + body


def parse_header(header: bytes, max_body: int = MAX_FRAME_BODY) -> Tuple[int, int]:
    """(msg_type, body_len) from a frame header; fatal errors mean the stream is lost"""
    magic, version, msg_type, body_len = FRAME_HEADER.unpack(header)
    if magic != FRAME_MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}", ErrorCode.BAD_REQUEST, fatal=True)
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}", ErrorCode.BAD_REQUEST, fatal=True)
    if body_len > max_body:
        raise ProtocolError(f"frame body of {body_len} bytes too large", ErrorCode.TOO_LARGE, fatal=True)
    return msg_type, body_len


def parse_frame(data: bytes, max_body: int = MAX_FRAME_BODY) -> Tuple[Message, int]:
    """
    Parse one frame from the front of data.

    Returns:
        (message, bytes consumed)
    """
    if len(data) < FRAME_HEADER.size:
        raise ProtocolError("frame header truncated", fatal=True)
    msg_type, body_len = parse_header(bytes(data[:FRAME_HEADER.size]), max_body)
    end = FRAME_HEADER.size + body_len
    if len(data) < end:
        raise ProtocolError(f"frame body truncated: {len(data) - FRAME_HEADER.size} of {body_len} bytes",
                            fatal=True)
    return decode_body(msg_type, bytes(data[FRAME_HEADER.size:end])), end


# ============================================================================
# STREAM HELPERS
# ============================================================================

async def read_frame(reader: asyncio.StreamReader, max_body: int = MAX_FRAME_BODY) -> Optional[Message]:
    """Next message from an asyncio stream; None on clean EOF between frames"""
    try:
        header = await reader.readexactly(FRAME_HEADER.size)
    except asyncio.IncompleteReadError as e:
        if not e.partial:
            return None
        raise ProtocolError("connection closed inside a frame header", fatal=True) from e
    msg_type, body_len = parse_header(header, max_body)
    try:
        body = await reader.readexactly(body_len)
    except asyncio.IncompleteReadError as e:
        raise ProtocolError("connection closed inside a frame body", fatal=True) from e
    return decode_body(msg_type, body)


async def write_frame(writer: asyncio.StreamWriter, message: Message):
    writer.write(encode_frame(message))
    await writer.drain()


def _recv_exact(sock: socket.socket, size: int) -> bytes:
    chunks = []
    remaining = size
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout as e:
            raise StreamError(f"timed out waiting for {remaining} more bytes") from e
        except OSError as e:
            raise StreamError(f"connection failed mid-stream: {e}") from e
        if not chunk:
            raise StreamError(f"connection closed with {remaining} bytes outstanding")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def recv_message(sock: socket.socket, max_body: int = MAX_FRAME_BODY) -> Message:
    """Blocking read of one message from a socket"""
    msg_type, body_len = parse_header(_recv_exact(sock, FRAME_HEADER.size), max_body)
    return decode_body(msg_type, _recv_exact(sock, body_len))


def send_message(sock: socket.socket, message: Message):
    try:
        sock.sendall(encode_frame(message))
    except socket.timeout as e:
        raise StreamError("timed out sending frame") from e
    except OSError as e:
        raise StreamError(f"connection failed mid-stream: {e}") from e
