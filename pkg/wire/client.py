"""
Wall-clock controller that talks to a PolicyServer over the wire protocol.

A receiver thread parses frames into per-chunk assemblers. The controller
thread ticks every dt_ctrl and executes whatever action its plan holds for
the tick, with the same schedule as the simulator: asynchronous requests go
out `latency + guard` before the tick that runs their first usable index,
and a synchronous client runs each chunk from the moment it arrives.
"""

import logging
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from core.exceptions import DomainError, FasterError, ProtocolError
from env.world import WORKSPACE, WorldState, step
from pipeline.simulator import ExecutedAction, RunTrace, TimedEvents, measure_reactions
from pipeline.timing import ClientMode, delay_and_smin, execution_horizon, infer_latency
from wire.protocol import (
    ActionPacket,
    ChunkBulk,
    ChunkDone,
    ErrorMessage,
    FrameReader,
    Hello,
    ObsRequest,
    ServerMode,
    encode,
    read_message,
)

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9


class ChunkAssembler:
    """
    Collects one chunk's actions; streamed indices must arrive in order from d.
    `arrived` is set once `first_index` is usable. `first_tick` is the tick
    that executes it, or None for a synchronous chunk.
    """

    def __init__(self, chunk_id, H, A, d, sent_at, first_index=None, first_tick=None, obs_time=0.0):
        self.chunk_id = chunk_id
        self.actions = np.full((H, A), np.nan)
        self.received_at = np.full(H, np.inf)
        self.next_index = d
        self.sent_at = sent_at
        self.first_index = d if first_index is None else first_index
        self.first_tick = first_tick
        self.obs_time = obs_time
        self.arrived = threading.Event()
        self.done = False
        self.steps_used = None

    @property
    def first_arrival(self):
        arrived = self.received_at[np.isfinite(self.received_at)]
        return float(arrived.min()) if arrived.size else None

    def add_packet(self, packet, now):
        if self.done:
            raise ProtocolError(f"packet for chunk {self.chunk_id} after CHUNK_DONE")
        if packet.index != self.next_index:
            raise ProtocolError(
                f"chunk {self.chunk_id}: expected index {self.next_index}, got {packet.index}"
            )
        if packet.action.shape != self.actions.shape[1:]:
            raise ProtocolError(f"action width {packet.action.size} != {self.actions.shape[1]}")
        self.actions[packet.index] = packet.action
        self.received_at[packet.index] = now
        self.next_index += 1
        if packet.index == self.first_index:
            self.arrived.set()

    def add_bulk(self, bulk, now):
        if bulk.chunk.shape != self.actions.shape:
            raise ProtocolError(f"bulk chunk shape {bulk.chunk.shape} != {self.actions.shape}")
        self.actions[:] = bulk.chunk
        self.received_at[:] = now
        self.steps_used = bulk.steps_used
        self.done = True
        self.arrived.set()

    def finish(self, done):
        self.done = True
        self.steps_used = done.steps_used

    def ready(self, index):
        return np.isfinite(self.received_at[index])


@dataclass
class ClientConfig:
    host: str = "127.0.0.1"
    port: int = 0
    mode: ClientMode = ClientMode.FASTER
    s: Optional[int] = None
    # overrides the delay derived from the timing model
    d: Optional[int] = None
    duration: float = 10.0
    seed: int = 0
    connect_timeout: float = 5.0
    # extra lead on every asynchronous trigger for socket and scheduling jitter
    guard: float = 0.01


@dataclass
class ClientReport:
    trace: RunTrace
    ttfa: list = field(default_factory=list)
    late_packets: int = 0
    window_packets: int = 0
    error: Optional[str] = None

    def ttfa_stats(self):
        if not self.ttfa:
            return {"count": 0, "mean": None, "p95": None}
        values = np.asarray(self.ttfa)
        return {"count": int(values.size), "mean": float(values.mean()), "p95": float(np.percentile(values, 95))}

    def summary(self):
        return {
            "mode": self.trace.mode.value,
            "s": self.trace.s,
            "d": self.trace.d,
            "actions": len(self.trace.executed),
            "stall_fraction": self.trace.stall_fraction,
            "reaction": self.trace.reaction_stats(),
            "ttfa": self.ttfa_stats(),
            "late_packets": self.late_packets,
            "window_packets": self.window_packets,
            "truncated": self.trace.truncated,
            "error": self.error,
        }


class StreamingClient:
    def __init__(self, timing, cfg=None, events=None):
        self.timing = timing
        self.cfg = cfg or ClientConfig()
        self.mode = ClientMode(self.cfg.mode)
        self.s = execution_horizon(timing, self.mode, self.cfg.s)
        self.d = delay_and_smin(timing, self.mode)[0] if self.mode.is_async else 0
        if self.cfg.d is not None:
            if not self.mode.is_async and self.cfg.d:
                raise DomainError("a delay override needs an asynchronous client mode")
            self.d = self.cfg.d
        if self.cfg.guard < 0:
            raise DomainError(f"guard must be non-negative, got {self.cfg.guard}")
        self.latency = infer_latency(timing, self.mode)
        self.events = events if events is not None else TimedEvents(np.zeros(0), np.zeros((0, 2)))
        self.rng = np.random.default_rng(self.cfg.seed)

        self._sock = None
        self._lock = threading.Lock()
        # live chunks only; ids below the watermark are retired
        self._chunks = {}
        self._retired_below = 0
        self._next_id = 0
        self._error = None
        self._closed = threading.Event()
        self.hello = None

    def connect(self):
        self._sock = socket.create_connection((self.cfg.host, self.cfg.port), timeout=self.cfg.connect_timeout)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader, self._pending = FrameReader(), []
        hello = read_message(self._sock, self._reader, self._pending)
        if not isinstance(hello, Hello):
            raise ProtocolError(f"expected HELLO, got {type(hello).__name__}")
        if self.mode is ClientMode.FASTER and hello.mode is not ServerMode.FASTER:
            raise ProtocolError("streaming clients need a server in faster mode")
        if self.mode is not ClientMode.FASTER and hello.mode is not ServerMode.CONSTANT:
            raise ProtocolError(f"{self.mode.value} clients need a server in constant mode")
        if hello.H != self.timing.horizon:
            raise ProtocolError(f"server horizon {hello.H} != configured horizon {self.timing.horizon}")
        if self.d + self.s > hello.H:
            raise ProtocolError(f"d + s = {self.d + self.s} exceeds the server horizon {hello.H}")
        self.hello = hello
        self._sock.settimeout(0.2)
        logger.info(
            "connected to %s:%d (H=%d, N=%d, server %s)",
            self.cfg.host,
            self.cfg.port,
            hello.H,
            hello.N,
            hello.mode.name.lower(),
        )
        return self

    def close(self):
        self._closed.set()
        if self._sock is not None:
            self._sock.close()

    def _receive_loop(self):
        while not self._closed.is_set():
            try:
                message = read_message(self._sock, self._reader, self._pending)
            except socket.timeout:
                continue
            except ProtocolError as exc:
                self._fail(exc.message)
                return
            except OSError as exc:
                if not self._closed.is_set():
                    self._fail(f"connection lost: {exc}")
                return
            if message is None:
                if not self._closed.is_set():
                    self._fail("server closed the connection")
                return
            try:
                self._dispatch(message, time.perf_counter())
            except ProtocolError as exc:
                self._fail(exc.message)
                return

    def _dispatch(self, message, now):
        if isinstance(message, ErrorMessage):
            raise ProtocolError(f"server error: {message.message}")
        if not isinstance(message, (ActionPacket, ChunkBulk, ChunkDone)):
            raise ProtocolError(f"unexpected {type(message).__name__} from server")
        with self._lock:
            if message.chunk_id < self._retired_below:
                return
            chunk = self._chunks.get(message.chunk_id)
            if chunk is None:
                raise ProtocolError(f"message for unknown chunk {message.chunk_id}")
            if isinstance(message, ActionPacket):
                chunk.add_packet(message, now)
            elif isinstance(message, ChunkBulk):
                chunk.add_bulk(message, now)
            else:
                chunk.finish(message)

    def _fail(self, message):
        logger.warning("stream aborted: %s", message)
        with self._lock:
            if self._error is None:
                self._error = message
            # wake a controller blocked on an arrival
            for chunk in self._chunks.values():
                chunk.arrived.set()

    def _raise_if_failed(self):
        with self._lock:
            error = self._error
        if error is not None:
            raise ProtocolError(error)

    def _sleep_until(self, at):
        delay = self._t0 + at - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        self._raise_if_failed()

    def _apply_events(self, now):
        while self._next_event < len(self.events) and self.events.times[self._next_event] <= now + TIME_TOL:
            self._world = self._world.with_target(self.events.targets[self._next_event])
            self._next_event += 1

    def _request(self, obs_time, d, prefix, first_index, first_tick=None):
        chunk_id = self._next_id
        self._next_id += 1
        chunk = ChunkAssembler(
            chunk_id,
            self.hello.H,
            self.hello.A,
            d,
            time.perf_counter(),
            first_index=first_index,
            first_tick=first_tick,
            obs_time=obs_time,
        )
        with self._lock:
            self._chunks[chunk_id] = chunk
        request = ObsRequest(chunk_id, self._world.observation(), d, self.s, prefix, time.time_ns() // 1000)
        self._sock.sendall(encode(request))
        return chunk

    def _execute(self, trace, tick, now, chunk, index):
        action = chunk.actions[index].copy()
        trace.executed.append(
            ExecutedAction(tick, now, action, chunk.chunk_id, index, chunk.obs_time, self._world.position.copy())
        )
        self._world = step(self._world, action, self.timing.dt_ctrl)

    def _retire(self, below, report, ticks_run):
        """Drop chunks with ids below `below`, folding their timing into the report."""
        dt = self.timing.dt_ctrl
        with self._lock:
            retired = []
            while self._retired_below < below:
                chunk = self._chunks.pop(self._retired_below, None)
                if chunk is not None:
                    retired.append(chunk)
                self._retired_below += 1
        for chunk in retired:
            first = chunk.first_arrival
            if first is not None:
                report.ttfa.append(first - chunk.sent_at)
            if chunk.first_tick is None:
                continue
            for j in range(self.s):
                if chunk.first_tick + j >= ticks_run:
                    break
                report.window_packets += 1
                required = self._t0 + (chunk.first_tick + j) * dt
                if chunk.received_at[self.d + j] > required:
                    report.late_packets += 1

    def _run_async(self, trace, report):
        dt = self.timing.dt_ctrl
        lead = self.latency + self.cfg.guard
        d = self.d if self.mode.uses_prefix else 0
        exec_tick = int(np.ceil(lead / dt - TIME_TOL))
        plan, windows, last = {}, deque(), None
        tick = 0
        while tick < trace.total_ticks:
            trigger_at = max(0.0, exec_tick * dt - lead)
            if exec_tick < trace.total_ticks and trigger_at <= tick * dt + TIME_TOL:
                self._sleep_until(trigger_at)
                self._apply_events(trigger_at)
                last = self._request(trigger_at, d, self._prefix(last, d), self.d, exec_tick)
                trace.trigger_times.append(trigger_at)
                for j in range(self.s):
                    plan[exec_tick + j] = (last, self.d + j)
                windows.append((last.chunk_id, exec_tick + self.s - 1))
                exec_tick += self.s
                continue

            now = tick * dt
            self._sleep_until(now)
            self._apply_events(now)
            entry = plan.pop(tick, None)
            if entry is not None and entry[0].ready(entry[1]):
                self._execute(trace, tick, now, *entry)
            elif trace.executed:
                trace.stall_ticks.append(tick)
            tick += 1
            self._ticks_run = tick
            # a chunk stays live until its window is over and the next request has read its prefix
            while windows and windows[0][1] < tick and windows[0][0] < last.chunk_id:
                self._retire(windows.popleft()[0] + 1, report, tick)

    def _wait_arrival(self, chunk):
        """Block until the chunk's first action is in; False once the run is out of time."""
        while not chunk.arrived.wait(0.05):
            self._raise_if_failed()
            if time.perf_counter() - self._t0 >= self.cfg.duration:
                return False
        self._raise_if_failed()
        return True

    def _run_sync(self, trace, report):
        dt = self.timing.dt_ctrl
        tick, now = 0, 0.0
        while now < self.cfg.duration - TIME_TOL:
            self._sleep_until(now)
            self._apply_events(now)
            chunk = self._request(now, 0, None, 0)
            trace.trigger_times.append(now)
            if not self._wait_arrival(chunk):
                break
            arrival = max(now, time.perf_counter() - self._t0)
            waited = int(np.ceil((arrival - now) / dt - TIME_TOL))
            if trace.executed:
                trace.stall_ticks.extend(range(tick, tick + waited))
            tick += waited
            self._ticks_run = tick
            for i in range(self.s):
                now = arrival + i * dt
                if now >= self.cfg.duration - TIME_TOL:
                    break
                self._sleep_until(now)
                self._apply_events(now)
                self._execute(trace, tick, now, chunk, i)
                tick += 1
                self._ticks_run = tick
            now = arrival + self.s * dt
            self._retire(chunk.chunk_id + 1, report, tick)

    def run(self):
        """Drive the controller for cfg.duration seconds of wall time."""
        if self.hello is None:
            self.connect()
        dt = self.timing.dt_ctrl
        trace = RunTrace(self.mode, self.s, self.d, dt)
        trace.total_ticks = int(np.floor(self.cfg.duration / dt + TIME_TOL))
        self._ticks_run = 0
        report = ClientReport(trace)
        self._world = WorldState(self.rng.uniform(-WORKSPACE, WORKSPACE, 2), self.rng.uniform(-WORKSPACE, WORKSPACE, 2))
        self._next_event = 0

        receiver = threading.Thread(target=self._receive_loop, name="wire-receiver", daemon=True)
        receiver.start()
        self._t0 = time.perf_counter()
        try:
            if self.mode is ClientMode.SYNC:
                self._run_sync(trace, report)
            else:
                self._run_async(trace, report)
        except ProtocolError as exc:
            trace.truncated = True
            report.error = exc.message
        except OSError as exc:
            trace.truncated = True
            report.error = f"connection lost: {exc}"
        finally:
            self.close()
            receiver.join(timeout=1.0)

        trace.total_ticks = self._ticks_run
        self._retire(self._next_id, report, trace.total_ticks)
        measure_reactions(trace, self.events)
        logger.info(
            "%s client s=%d: %d actions, %d stalls, %d late packets, mean TTFA %s%s",
            self.mode.value,
            self.s,
            len(trace.executed),
            len(trace.stall_ticks),
            report.late_packets,
            f"{np.mean(report.ttfa) * 1000:.1f}ms" if report.ttfa else "n/a",
            " (truncated)" if trace.truncated else "",
        )
        return report

    def _prefix(self, last, d):
        if d == 0:
            return None
        if last is None:
            return np.zeros((d, self.hello.A))
        with self._lock:
            window = last.actions[self.s : self.s + d]
        # indices the server never sent are zero-filled
        return np.nan_to_num(window, nan=0.0)


def run_client(timing, cfg, events=None):
    client = StreamingClient(timing, cfg, events)
    try:
        client.connect()
    except (OSError, FasterError):
        client.close()
        raise
    return client.run()
