"""
Discrete-event simulation of a controller and an inference server.

The controller ticks every dt_ctrl and executes at most one action per
tick; the server handles requests one at a time. Requests are triggered
between ticks so that the first usable action of a chunk becomes available
exactly on the tick that executes it. Times are in seconds.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import simpy

from core.exceptions import InfeasibleError, ShapeError
from env.reaction import behavioral_onset
from env.world import DEFAULT_DT, WORKSPACE, WorldState, draw_far_target, expert_chunk, step
from flow.sampling import SamplerConfig, sample_constant, sample_has
from pipeline.timing import (
    ClientMode,
    delay_and_smin,
    execution_horizon,
    infer_latency,
    streaming_offsets,
    window_busy_time,
)
from schedule.timesteps import hit_times

logger = logging.getLogger(__name__)

TIME_TOL = 1e-9


@dataclass
class TimedEvents:
    """Target jumps at continuous times (sorted)."""

    times: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.times)


def _chained_targets(rng, count):
    """Each target at least MIN_JUMP away from the one before it."""
    targets = np.zeros((count, 2))
    previous = np.zeros(2)
    for k in range(count):
        previous = targets[k] = draw_far_target(rng, previous)
    return targets


def uniform_events(rng, count, start, end):
    times = np.sort(rng.uniform(start, end, size=count))
    return TimedEvents(times, _chained_targets(rng, count))


def events_at(times, rng):
    """Events at given instants, e.g. exactly at inference triggers."""
    times = np.sort(np.asarray(times, dtype=np.float64))
    return TimedEvents(times, _chained_targets(rng, len(times)))


@dataclass
class ExecutedAction:
    tick: int
    time: float
    action: np.ndarray
    chunk_id: int
    index: int
    obs_time: float
    position: np.ndarray


@dataclass
class RunTrace:
    mode: ClientMode
    s: int
    d: int
    dt_ctrl: float
    executed: list = field(default_factory=list)
    trigger_times: list = field(default_factory=list)
    event_times: list = field(default_factory=list)
    reactions: list = field(default_factory=list)
    behavioral: list = field(default_factory=list)
    stall_ticks: list = field(default_factory=list)
    uncovered_events: int = 0
    total_ticks: int = 0
    truncated: bool = False

    @property
    def exec_times(self):
        return np.array([e.time for e in self.executed])

    @property
    def obs_times(self):
        return np.array([e.obs_time for e in self.executed])

    @property
    def stall_fraction(self):
        """Stalled share of the ticks from the first executed action on."""
        if not self.executed:
            return 1.0 if self.total_ticks else 0.0
        active = self.total_ticks - self.executed[0].tick
        return len(self.stall_ticks) / active if active > 0 else 0.0

    def reaction_stats(self):
        if not self.reactions:
            return {"count": 0, "mean": None, "min": None, "max": None}
        values = np.asarray(self.reactions)
        return {
            "count": int(values.size),
            "mean": float(values.mean()),
            "min": float(values.min()),
            "max": float(values.max()),
        }

    def write_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as handle:
            for e in self.executed:
                record = {
                    "tick": e.tick,
                    "time": e.time,
                    "chunk": e.chunk_id,
                    "index": e.index,
                    "obs_time": e.obs_time,
                    "action": e.action.tolist(),
                }
                handle.write(json.dumps(record) + "\n")
        return path


class ScriptedPolicy:
    """Expert chunks straight from the observation; prefixes are ignored."""

    def __init__(self, H, gain=2.0, v_max=1.0, dt=DEFAULT_DT):
        self.H = H
        self.gain = gain
        self.v_max = v_max
        self.dt = dt

    def chunk(self, obs, d, prefix, s, mode, rng):
        return expert_chunk(WorldState(obs[:2], obs[2:]), self.H, self.gain, self.v_max, self.dt)


class FlowPolicy:
    """Trained flow model; streaming clients use the horizon-aware sampler."""

    def __init__(self, model, N=10, alpha=0.6, u_d=0.9):
        self.model = model
        self.H = model.H
        self.N = N
        self.alpha = alpha
        self.u_d = u_d

    def chunk(self, obs, d, prefix, s, mode, rng):
        if mode is ClientMode.FASTER:
            cfg = SamplerConfig(N=self.N, alpha=self.alpha, u_d=self.u_d, early_stop=True, execution_horizon=s)
            actions, _ = sample_has(self.model, obs, self.N, d, prefix, cfg=cfg, rng=rng)
        elif mode is ClientMode.ASYNC_PREFIX and d > 0:
            actions, _ = sample_constant(self.model, obs, self.N, d, prefix, rng=rng)
        else:
            actions, _ = sample_constant(self.model, obs, self.N, rng=rng)
        return actions


@dataclass
class _Request:
    chunk_id: int
    obs: np.ndarray
    obs_time: float
    d: int
    prefix: Optional[np.ndarray]
    # index whose availability wakes a waiting controller
    first_index: int = 0
    arrived: Optional[simpy.Event] = None


@dataclass
class _ServedChunk:
    actions: np.ndarray
    obs_time: float
    available_at: np.ndarray


class PipelineSimulation:
    """
    Async and streaming clients trigger each request `latency` before the
    tick that executes its first usable index, so chunk k runs indices
    [d, d+s-1] on ticks E_k .. E_k+s-1 with E_{k+1} = E_k + s. A sync
    client stops, observes, waits for the whole chunk and runs it from the
    moment it arrives; the wait is counted in whole control periods.
    """

    def __init__(self, timing, mode, policy, s=None, events=None, duration=10.0, seed=0, behavioral=True):
        self.timing = timing
        self.mode = ClientMode(mode)
        self.policy = policy
        if policy.H != timing.horizon:
            raise ShapeError(f"policy horizon {policy.H} != timing horizon {timing.horizon}")
        self.s = execution_horizon(timing, self.mode, s)
        self.d = delay_and_smin(timing, self.mode)[0] if self.mode.is_async else 0
        if self.d + self.s > timing.horizon:
            raise InfeasibleError(f"d + s = {self.d + self.s} exceeds the horizon {timing.horizon}")
        self.latency = infer_latency(timing, self.mode)
        self.events = events if events is not None else TimedEvents(np.zeros(0), np.zeros((0, 2)))
        self.duration = duration
        self.behavioral = behavioral
        self.rng = np.random.default_rng(seed)

        self.env = simpy.Environment()
        self.requests = simpy.Store(self.env)
        self.ready = {}
        self.plan = {}
        self.next_chunk_id = 0
        self.last_chunk_id = None
        self.next_event = 0
        self.world = WorldState(
            self.rng.uniform(-WORKSPACE, WORKSPACE, 2), self.rng.uniform(-WORKSPACE, WORKSPACE, 2)
        )
        self.trace = RunTrace(self.mode, self.s, self.d, timing.dt_ctrl)
        self.trace.total_ticks = int(np.floor(duration / timing.dt_ctrl + TIME_TOL))
        self._offsets, self._busy = self._server_timing()
        if self.mode is ClientMode.SYNC:
            self.env.process(self._sync_controller())
        else:
            self.env.process(self._trigger_loop())
            self.env.process(self._controller())
        self.env.process(self._server())

    def _server_timing(self):
        t, H = self.timing, self.timing.horizon
        if self.mode is not ClientMode.FASTER:
            return np.full(H, self.latency), self.latency
        offsets = np.full(H, np.inf)
        offsets[self.d : self.d + self.s] = streaming_offsets(t, self.d, self.s)
        u = hit_times(H, self.d, t.alpha, t.u_d)
        return offsets, window_busy_time(t, u, self.s)

    def _server(self):
        while True:
            request = yield self.requests.get()
            start = self.env.now
            actions = self.policy.chunk(request.obs, request.d, request.prefix, self.s, self.mode, self.rng)
            served = _ServedChunk(np.asarray(actions, dtype=np.float64), request.obs_time, start + self._offsets)
            self.ready[request.chunk_id] = served
            first = float(self._offsets[request.first_index])
            yield self.env.timeout(first)
            if request.arrived is not None:
                request.arrived.succeed()
            yield self.env.timeout(max(0.0, self._busy - first))

    def _apply_events(self, now):
        while self.next_event < len(self.events) and self.events.times[self.next_event] <= now + TIME_TOL:
            self.world = self.world.with_target(self.events.targets[self.next_event])
            self.next_event += 1

    def _trigger(self, d, prefix, first_index, arrived=None):
        now = self.env.now
        self._apply_events(now)
        request = _Request(self.next_chunk_id, self.world.observation(), now, d, prefix, first_index, arrived)
        self.next_chunk_id += 1
        self.trace.trigger_times.append(now)
        self.requests.put(request)
        self.last_chunk_id = request.chunk_id
        return request

    def _prefix(self):
        if not self.mode.uses_prefix or self.d == 0:
            return None
        previous = self.ready.get(self.last_chunk_id) if self.last_chunk_id is not None else None
        if previous is None:
            return np.zeros((self.d, 2))
        return previous.actions[self.s : self.s + self.d].copy()

    def _trigger_loop(self):
        dt = self.timing.dt_ctrl
        exec_tick = int(np.ceil(self.latency / dt - TIME_TOL))
        while exec_tick < self.trace.total_ticks:
            at = max(0.0, exec_tick * dt - self.latency)
            if at > self.env.now:
                yield self.env.timeout(at - self.env.now)
            d = self.d if self.mode.uses_prefix else 0
            request = self._trigger(d, self._prefix(), self.d)
            for j in range(self.s):
                self.plan[exec_tick + j] = (request.chunk_id, self.d + j)
            exec_tick += self.s

    def _controller(self):
        dt = self.timing.dt_ctrl
        for tick in range(self.trace.total_ticks):
            now = tick * dt
            if now > self.env.now:
                yield self.env.timeout(now - self.env.now)
            self._apply_events(now)
            entry = self.plan.pop(tick, None)
            served = self.ready.get(entry[0]) if entry is not None else None
            if served is None or served.available_at[entry[1]] > now + TIME_TOL:
                if self.trace.executed:
                    self.trace.stall_ticks.append(tick)
                continue
            self._run_action(tick, now, entry[0], entry[1], served)

    def _sync_controller(self):
        dt = self.timing.dt_ctrl
        tick = 0
        while self.env.now < self.duration - TIME_TOL:
            request = self._trigger(0, None, 0, self.env.event())
            asked = self.env.now
            yield request.arrived
            waited = int(np.ceil((self.env.now - asked) / dt - TIME_TOL))
            if self.trace.executed:
                self.trace.stall_ticks.extend(range(tick, tick + waited))
            tick += waited
            served = self.ready[request.chunk_id]
            for i in range(self.s):
                now = self.env.now
                if now >= self.duration - TIME_TOL:
                    break
                self._apply_events(now)
                self._run_action(tick, now, request.chunk_id, i, served)
                tick += 1
                yield self.env.timeout(dt)
            self.trace.total_ticks = tick

    def _run_action(self, tick, now, chunk_id, index, served):
        action = served.actions[index]
        self.trace.executed.append(
            ExecutedAction(tick, now, action.copy(), chunk_id, index, served.obs_time, self.world.position.copy())
        )
        self.world = step(self.world, action, self.timing.dt_ctrl)

    def run(self):
        self.env.run(until=self.duration + self.timing.dt_ctrl)
        measure_reactions(self.trace, self.events, self.behavioral)
        stats = self.trace.reaction_stats()
        logger.info(
            "%s s=%d: %d actions, %d stalls, %d reactions (mean %s)",
            self.mode.value,
            self.s,
            len(self.trace.executed),
            len(self.trace.stall_ticks),
            stats["count"],
            f"{stats['mean'] * 1000:.1f}ms" if stats["count"] else "n/a",
        )
        return self.trace


def event_window(timing, mode, s, duration):
    """Span in which uniformly placed events are covered by later chunks."""
    latency = infer_latency(timing, ClientMode(mode))
    margin = 3 * (latency + s * timing.dt_ctrl) + timing.dt_ctrl
    if duration <= margin:
        raise InfeasibleError(f"duration {duration}s is too short to cover events (need > {margin:.3f}s)")
    return 0.0, duration - margin


def simulate(timing, mode, policy=None, s=None, duration=10.0, events=None, seed=0, gain=2.0, v_max=1.0, behavioral=True):
    """Run one client mode against the simulated server and world; returns a RunTrace."""
    policy = ScriptedPolicy(timing.horizon, gain, v_max, timing.dt_ctrl) if policy is None else policy
    return PipelineSimulation(timing, mode, policy, s, events, duration, seed, behavioral).run()


def measure_reactions(trace, events, behavioral=True):
    """
    Fill the trace's reaction lists: for each event, the first executed action
    whose observation was taken at or after it. Behavioral onsets only look at
    actions before the next event.
    """
    exec_times, obs_times = trace.exec_times, trace.obs_times
    trace.event_times = [float(e) for e in events.times]
    if not len(exec_times):
        trace.uncovered_events = len(events)
        return trace
    first = np.searchsorted(obs_times, events.times - TIME_TOL, side="left")
    positions = np.array([e.position for e in trace.executed])
    actions = np.array([e.action for e in trace.executed])
    for k, (event_time, idx) in enumerate(zip(events.times, first)):
        if idx >= len(exec_times):
            trace.uncovered_events += 1
            continue
        trace.reactions.append(float(exec_times[idx] - event_time))
        if behavioral:
            until = events.times[k + 1] if k + 1 < len(events) else np.inf
            lo = np.searchsorted(exec_times, event_time - TIME_TOL, side="left")
            hi = np.searchsorted(exec_times, until - TIME_TOL, side="left")
            trace.behavioral.append(
                behavioral_onset(exec_times[lo:hi], actions[lo:hi], positions[lo:hi], event_time, events.targets[k])
            )
    return trace
