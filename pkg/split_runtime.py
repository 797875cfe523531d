#!/usr/bin/env python3
"""
Split Runtime
Cloud server (asyncio, one task per connection, inference in a worker pool),
mobile client with a reusable connection, and the load monitor that pings the
server and swaps the client's active partition when replanning says so.
"""

import os
import time
import socket
import asyncio
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from bottlenet_errors import (
    ArtifactMissingError, BottleNetError, CodecError, ConnectError, ProtocolError, RemoteError,
    ShapeError, StreamError, error_handler,
)
from bottleneck_unit import CloudHalf, MobileHalf, split_graph
from config.constants import (
    DEFAULT_HOST, DEFAULT_HYSTERESIS, DEFAULT_PERIOD_MS, DEFAULT_PORT, DEFAULT_TIMEOUT_MS,
    MAX_FRAME_BODY, MAX_MISSED_PINGS, SERVER_CAPACITY,
)
from cost_profiler import DeviceProfile
from model_checkpoint import load_checkpoint
from partition_planner import PlanResult, replan
from split_protocol import (
    ErrorCode, ErrorMessage, InferRequest, InferResponse, LoadQuery, LoadReport, Message,
    read_frame, recv_message, send_message, write_frame,
)

load_dotenv()

logger = logging.getLogger(__name__)

Address = Tuple[str, int]


def resolve_timeout_ms(value: Optional[int] = None) -> int:
    """Explicit value, else BOTTLENET_TIMEOUT_MS, else the default"""
    if value is not None:
        return int(value)
    return int(os.getenv('BOTTLENET_TIMEOUT_MS', DEFAULT_TIMEOUT_MS))


def parse_address(text: str) -> Address:
    host, _, port = text.rpartition(':')
    if not host or not port.isdigit():
        raise ValueError(f"expected HOST:PORT, got {text!r}")
    return host, int(port)


def load_halves(models_dir, producer: str = 'sweep') -> Dict[int, Tuple[MobileHalf, CloudHalf]]:
    """Mobile and cloud halves for every partition checkpoint in a sweep directory"""
    models_dir = Path(models_dir)
    paths = sorted(models_dir.glob('partition_*.bnmd'))
    if not paths:
        raise ArtifactMissingError(str(models_dir / 'partition_*.bnmd'), producer)
    halves = {}
    for path in paths:
        j = int(path.stem.split('_', 1)[1])
        graph, _ = load_checkpoint(path, producer)
        halves[j] = split_graph(graph, j)
    logger.info(f"[SERVE] Loaded partitions {sorted(halves)} from {models_dir}")
    return halves


# ============================================================================
# SERVER
# ============================================================================

class SplitServer:
    """
    Answers INFER_REQ with logits from the partition's cloud half and
    LOAD_QUERY with K_cloud = 1 + in_flight / capacity (or a configured stub).
    """

    def __init__(self, halves: Dict[int, CloudHalf], host: str = DEFAULT_HOST, port: int = DEFAULT_PORT,
                 load_stub: Optional[float] = None, capacity: int = SERVER_CAPACITY,
                 max_body: int = MAX_FRAME_BODY):
        self.halves = dict(halves)
        self.host = host
        self.port = port
        self.load_stub = load_stub
        self.capacity = capacity
        self.max_body = max_body
        self.in_flight = 0
        self.requests_served = 0
        self._executor = ThreadPoolExecutor(max_workers=capacity)
        self._server: Optional[asyncio.AbstractServer] = None
        self._loop: Optional[asyncio.AbstractEventLoop] = None
        self._thread: Optional[threading.Thread] = None
        self._ready = threading.Event()

    def current_load(self) -> LoadReport:
        if self.load_stub is not None:
            return LoadReport(float(self.load_stub), self.in_flight)
        return LoadReport(1.0 + self.in_flight / self.capacity, self.in_flight)

    async def _infer(self, request: InferRequest) -> Message:
        half = self.halves.get(request.partition_id)
        if half is None:
            return ErrorMessage(ErrorCode.NOT_FOUND, f"unknown partition {request.partition_id}")
        self.in_flight += 1
        try:
            loop = asyncio.get_running_loop()
            logits = await loop.run_in_executor(self._executor, half.infer, [request.feature])
            self.requests_served += 1
            return InferResponse(logits[0].astype(np.float32))
        except (CodecError, ShapeError) as e:
            return ErrorMessage(ErrorCode.BAD_REQUEST, str(e))
        except Exception as e:
            logger.exception(f"[SERVE] inference failed on partition {request.partition_id}")
            return ErrorMessage(ErrorCode.INTERNAL, f"internal error: {e}")
        finally:
            self.in_flight -= 1

    async def dispatch(self, message: Message) -> Message:
        if isinstance(message, InferRequest):
            return await self._infer(message)
        if isinstance(message, LoadQuery):
            return self.current_load()
        return ErrorMessage(ErrorCode.BAD_REQUEST, f"unexpected {type(message).__name__} from client")

    async def handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        peer = writer.get_extra_info('peername')
        logger.debug(f"[SERVE] connection from {peer}")
        try:
            while True:
                try:
                    message = await read_frame(reader, self.max_body)
                except ProtocolError as e:
                    logger.warning(f"[SERVE] {peer}: {e}")
                    await write_frame(writer, ErrorMessage(e.error_code, str(e)))
                    if e.fatal:
                        break
                    continue
                if message is None:
                    break
                await write_frame(writer, await self.dispatch(message))
        except (ConnectionError, asyncio.IncompleteReadError, OSError) as e:
            logger.debug(f"[SERVE] {peer} dropped: {e}")
        except Exception:
            logger.exception(f"[SERVE] unexpected error on connection {peer}")
        finally:
            writer.close()
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def start(self) -> Address:
        self._server = await asyncio.start_server(self.handle_connection, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        logger.info(f"[SERVE] Listening on {self.host}:{self.port} with partitions {sorted(self.halves)}")
        return self.host, self.port

    async def serve_forever(self):
        if self._server is None:
            await self.start()
        async with self._server:
            await self._server.serve_forever()

    def start_background(self) -> Address:
        """Run the server loop in a daemon thread; returns the bound address"""
        def run():
            self._loop = asyncio.new_event_loop()
            asyncio.set_event_loop(self._loop)
            self._loop.run_until_complete(self.start())
            self._ready.set()
            self._loop.run_forever()
            self._server.close()
            self._loop.close()

        self._thread = threading.Thread(target=run, name='split-server', daemon=True)
        self._thread.start()
        self._ready.wait()
        return self.host, self.port

    def stop(self):
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread is not None:
            self._thread.join(timeout=5)
        self._executor.shutdown(wait=False)


def serve(halves: Dict[int, CloudHalf], port: int = DEFAULT_PORT, host: str = DEFAULT_HOST,
          load_stub: Optional[float] = None, capacity: int = SERVER_CAPACITY):
    """Blocking server until interrupted"""
    server = SplitServer(halves, host, port, load_stub, capacity)
    try:
        asyncio.run(server.serve_forever())
    except KeyboardInterrupt:
        logger.info("[SERVE] Shutting down")


# ============================================================================
# CLIENT
# ============================================================================

@dataclass
class InferTimings:
    partition_id: int
    mobile_ms: float
    uplink_ms: float
    round_trip_ms: float
    offloaded_bytes: int


class BottleneckClient:
    """Mobile-side client; one request at a time on a reusable connection"""

    def __init__(self, address: Address, halves: Optional[Dict[int, MobileHalf]] = None,
                 partition_id: Optional[int] = None, timeout_ms: Optional[int] = None):
        self.address = address
        self.halves = dict(halves or {})
        self.timeout_ms = resolve_timeout_ms(timeout_ms)
        self._active = partition_id if partition_id is not None else (min(self.halves) if self.halves else None)
        self._active_lock = threading.Lock()
        self._io_lock = threading.Lock()
        self._sock: Optional[socket.socket] = None
        self.last_timings: Optional[InferTimings] = None

    @property
    def partition_id(self) -> Optional[int]:
        with self._active_lock:
            return self._active

    def swap_partition(self, partition_id: int):
        """Next inference runs on partition_id; an in-flight one finishes on its own"""
        if partition_id not in self.halves:
            raise ShapeError(f"no mobile half for partition {partition_id}")
        with self._active_lock:
            previous, self._active = self._active, partition_id
        if previous != partition_id:
            logger.info(f"[CLIENT] Active partition {previous} -> {partition_id}")

    def connect(self):
        if self._sock is not None:
            return
        try:
            self._sock = socket.create_connection(self.address, timeout=self.timeout_ms / 1e3)
        except (socket.timeout, OSError) as e:
            self._sock = None
            raise ConnectError(f"cannot connect to {self.address[0]}:{self.address[1]}: {e}") from e
        self._sock.settimeout(self.timeout_ms / 1e3)

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _exchange(self, message: Message) -> Tuple[Message, float]:
        """Send one frame and read the reply; returns (reply, send time ms)"""
        with self._io_lock:
            self.connect()
            try:
                start = time.perf_counter()
                send_message(self._sock, message)
                sent = time.perf_counter()
                reply = recv_message(self._sock)
            except (StreamError, ProtocolError):
                self.close()
                raise
        if isinstance(reply, ErrorMessage):
            raise RemoteError(reply.code, reply.message)
        return reply, (sent - start) * 1e3

    def infer(self, x: np.ndarray) -> np.ndarray:
        """Logits (batch, classes) as f32; one request per sample"""
        with self._active_lock:
            partition_id = self._active
            half = self.halves.get(partition_id)
        if half is None:
            raise ShapeError(f"no mobile half for partition {partition_id}")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]

        start = time.perf_counter()
        features = [f.to_bytes() for f in half.encode(x)]
        mobile_ms = (time.perf_counter() - start) * 1e3
        outputs, uplink_ms = [], 0.0
        for feature in features:
            reply, send_ms = self._exchange(InferRequest(partition_id, feature))
            if not isinstance(reply, InferResponse):
                raise ProtocolError(f"expected INFER_RESP, got {type(reply).__name__}")
            outputs.append(reply.logits)
            uplink_ms += send_ms
        self.last_timings = InferTimings(partition_id, mobile_ms, uplink_ms,
                                         (time.perf_counter() - start) * 1e3,
                                         sum(len(f) for f in features))
        logger.debug(f"[CLIENT] {self.last_timings}")
        return np.stack(outputs)

    def query_load(self) -> LoadReport:
        reply, _ = self._exchange(LoadQuery())
        if not isinstance(reply, LoadReport):
            raise ProtocolError(f"expected LOAD_REPORT, got {type(reply).__name__}")
        return reply


def client_infer(x: np.ndarray, mobile: MobileHalf, address: Address, partition_id: Optional[int] = None,
                 timeout_ms: Optional[int] = None) -> Tuple[np.ndarray, InferTimings]:
    """One-shot split inference"""
    partition_id = mobile.partition_id if partition_id is None else partition_id
    with BottleneckClient(address, {partition_id: mobile}, partition_id, timeout_ms) as client:
        logits = client.infer(x)
        return logits, client.last_timings


# ============================================================================
# LOAD MONITOR
# ============================================================================

class LoadMonitor:
    """
    Pings the server for K_cloud. A sample outside the hysteresis band around
    the load of the current plan triggers replanning; a changed partition is
    swapped into the client. After max_missed failed pings, or one failure
    the error handler will not retry, the monitor is stale and keeps the last
    plan. A swap the client cannot make leaves the plan unchanged.
    """

    def __init__(self, address: Address, plan: PlanResult, device: DeviceProfile,
                 client: Optional[BottleneckClient] = None, period_ms: int = DEFAULT_PERIOD_MS,
                 hysteresis: float = DEFAULT_HYSTERESIS, max_missed: int = MAX_MISSED_PINGS,
                 k_mobile: Optional[float] = None, timeout_ms: Optional[int] = None,
                 on_replan: Optional[Callable[[PlanResult], None]] = None):
        self.plan = plan
        self.device = device
        self.client = client
        self.period_ms = period_ms
        self.hysteresis = hysteresis
        self.max_missed = max_missed
        self.k_mobile = plan.k_mobile if k_mobile is None else k_mobile
        self.on_replan = on_replan
        self.reference_k = plan.k_cloud
        self.missed = 0
        self.stale = False
        self.swaps = 0
        self._pinger = BottleneckClient(address, timeout_ms=timeout_ms)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def poll_once(self) -> Optional[float]:
        """One ping; returns K_cloud, or None when the ping failed"""
        try:
            report = self._pinger.query_load()
        except BottleNetError as e:
            self.missed += 1
            error = error_handler.handle_exception(e)
            error_handler.log_error(error, context='load ping')
            retry, _ = error_handler.should_retry(error)
            if (not retry or self.missed >= self.max_missed) and not self.stale:
                self.stale = True
                logger.warning(f"[MONITOR] {self.missed} missed pings ({error.code}); load is stale, keeping "
                               f"{self.plan.chosen_label}")
            return None
        self.missed = 0
        self.stale = False
        k_cloud = report.k_cloud
        if abs(k_cloud - self.reference_k) > self.hysteresis:
            self._replan(k_cloud)
        return k_cloud

    def _replan(self, k_cloud: float):
        new_plan = replan(self.plan, self.device, self.k_mobile, k_cloud)
        logger.info(f"[MONITOR] K_cloud {self.reference_k:g} -> {k_cloud:g}: "
                    f"{self.plan.chosen_label} -> {new_plan.chosen_label}")
        changed = new_plan.chosen_j != self.plan.chosen_j
        if changed and self.client is not None:
            try:
                self.client.swap_partition(new_plan.chosen_j)
            except ShapeError as e:
                error = error_handler.handle_exception(e)
                error_handler.log_error(error, context='partition swap')
                logger.warning(f"[MONITOR] Cannot run {new_plan.chosen_label}; keeping {self.plan.chosen_label}")
                return
        self.plan = new_plan
        self.reference_k = k_cloud
        if changed:
            self.swaps += 1
        if self.on_replan is not None:
            self.on_replan(new_plan)

    def samples(self, count: Optional[int] = None) -> Iterator[Optional[float]]:
        """Poll every period; yields each K_cloud sample (None for a missed ping)"""
        taken = 0
        while count is None or taken < count:
            if self._stop.is_set():
                return
            yield self.poll_once()
            taken += 1
            if count is None or taken < count:
                self._stop.wait(self.period_ms / 1e3)

    def start(self):
        def run():
            for _ in self.samples():
                pass

        self._stop.clear()
        self._thread = threading.Thread(target=run, name='load-monitor', daemon=True)
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=max(1.0, 2 * self.period_ms / 1e3))
        self._pinger.close()
