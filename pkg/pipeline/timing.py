"""
Analytic reaction-time model of synchronous, asynchronous and streaming
clients. All times are in seconds.
"""

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from core.exceptions import DomainError, InfeasibleError
from schedule.timesteps import finalization_steps, hit_times, steps_for_window

TIME_TOL = 1e-9


class ClientMode(str, enum.Enum):
    SYNC = "sync"
    ASYNC_NAIVE = "async_naive"
    ASYNC_PREFIX = "async_prefix"
    FASTER = "faster"

    @property
    def is_async(self):
        return self is not ClientMode.SYNC

    @property
    def uses_prefix(self):
        return self in (ClientMode.ASYNC_PREFIX, ClientMode.FASTER)


@dataclass(frozen=True)
class TimingModel:
    """
    Latency components of one policy on one device plus the schedule geometry
    (horizon, alpha, u_d) that decides when streamed actions finalize.
    `packet_cost` is charged once for every streamed action after the first.
    """

    dt_ctrl: float = 1.0 / 30.0
    dt_vlm: float = 0.0
    dt_ae: float = 0.0
    N: int = 10
    overhead: float = 0.0
    packet_cost: float = 0.0
    horizon: int = 50
    alpha: float = 0.6
    u_d: float = 0.9
    delay_pad: int = 0
    smin_pad: int = 0

    def __post_init__(self):
        if self.dt_ctrl <= 0:
            raise DomainError("dt_ctrl must be positive")
        for name in ("dt_vlm", "dt_ae", "overhead", "packet_cost"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if self.N < 1:
            raise DomainError(f"N must be >= 1, got {self.N}")
        if self.horizon < 1:
            raise DomainError(f"horizon must be >= 1, got {self.horizon}")
        if self.delay_pad < 0 or self.smin_pad < 0:
            raise DomainError("pads must be non-negative")

    @classmethod
    def fit(cls, full_latency, ttfa, N=10, overhead=0.0, **kwargs):
        """Solve dt_ae and dt_vlm from a measured (full latency, TTFA) pair."""
        if N < 2:
            raise DomainError("fitting needs N >= 2")
        dt_ae = (full_latency - ttfa) / (N - 1)
        dt_vlm = ttfa - dt_ae - overhead
        if dt_ae < 0 or dt_vlm < 0:
            raise InfeasibleError(f"latency pair ({full_latency}, {ttfa}) has no non-negative fit")
        return cls(dt_vlm=dt_vlm, dt_ae=dt_ae, N=N, overhead=overhead, **kwargs)

    def with_changes(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class UniformDist:
    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise DomainError(f"uniform bounds out of order: {self.lo} > {self.hi}")

    @property
    def mean(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size=size)


def infer_latency(t, mode):
    """Full chunk latency for sync/async clients; time to first action when streaming."""
    mode = ClientMode(mode)
    if mode is ClientMode.FASTER:
        return t.dt_vlm + t.dt_ae + t.overhead
    return t.dt_vlm + t.N * t.dt_ae + t.overhead


def faster_delay(t):
    return int(math.floor(infer_latency(t, ClientMode.FASTER) / t.dt_ctrl + TIME_TOL)) + t.delay_pad


def window_busy_time(t, u, s):
    """Server time until indices [d, d+s-1] are finalized and streamed."""
    return t.dt_vlm + steps_for_window(u, t.N, s) * t.dt_ae + t.overhead + (s - 1) * t.packet_cost


def delay_and_smin(t, mode, schedule=None):
    """
    (d, s_min). Sync/async use the full latency: d = floor(L/dt_ctrl),
    s_min = ceil(L/dt_ctrl). Streaming scans s upward until the early-stopped
    request fits into s control periods.
    """
    mode = ClientMode(mode)
    if mode is not ClientMode.FASTER:
        ratio = infer_latency(t, mode) / t.dt_ctrl
        d = int(math.floor(ratio + TIME_TOL)) + t.delay_pad
        s_min = max(1, int(math.ceil(ratio - TIME_TOL))) + t.smin_pad
        return d, s_min

    d = faster_delay(t)
    if d >= t.horizon:
        raise InfeasibleError(f"delay d={d} leaves no valid action in a chunk of {t.horizon}")
    u = hit_times(t.horizon, d, t.alpha, t.u_d) if schedule is None else schedule
    if u.prefix_len != d or u.horizon != t.horizon:
        raise DomainError(f"hit times were built for d={u.prefix_len}, H={u.horizon}; need d={d}, H={t.horizon}")
    for s in range(1, t.horizon - d + 1):
        if s * t.dt_ctrl >= window_busy_time(t, u, s) - TIME_TOL:
            return d, s + t.smin_pad
    raise InfeasibleError(f"no execution horizon up to {t.horizon - d} keeps up with the controller")


def execution_horizon(t, mode, s):
    _, s_min = delay_and_smin(t, mode)
    if s is None:
        return s_min
    if s < 1:
        raise DomainError(f"execution horizon must be >= 1, got {s}")
    if ClientMode(mode).is_async and s < s_min:
        raise InfeasibleError(f"s={s} is below s_min={s_min} for {ClientMode(mode).value}")
    return s


def reaction_distribution(t, mode, s=None):
    """
    Sync: U(L, 2L + s*dt_ctrl). Async and streaming: U(L, L + s*dt_ctrl),
    with L the mode's latency (time to first action when streaming).
    `s` defaults to s_min.
    """
    mode = ClientMode(mode)
    s = execution_horizon(t, mode, s)
    latency = infer_latency(t, mode)
    execution = s * t.dt_ctrl
    if mode is ClientMode.SYNC:
        return UniformDist(latency, 2 * latency + execution)
    return UniformDist(latency, latency + execution)


def _integrated_cdf(dist, y):
    """Integral of the CDF of `dist` from -inf to y."""
    if y <= dist.lo:
        return 0.0
    if dist.width == 0:
        return y - dist.lo
    if y < dist.hi:
        return (y - dist.lo) ** 2 / (2 * dist.width)
    return dist.width / 2 + (y - dist.hi)


def dominance_probability(a, b):
    """Exact P(X < Y) for independent X ~ a, Y ~ b."""
    if a.hi <= b.lo and (a.width or b.width):
        return 1.0
    if b.hi <= a.lo and (a.width or b.width):
        return 0.0
    if b.width == 0:
        if a.width == 0:
            if a.lo == b.lo:
                return 0.5
            return 1.0 if a.lo < b.lo else 0.0
        return float(np.clip((b.lo - a.lo) / a.width, 0.0, 1.0))
    return (_integrated_cdf(a, b.hi) - _integrated_cdf(a, b.lo)) / b.width


def dominance_monte_carlo(a, b, n, rng):
    return float(np.mean(a.sample(rng, n) < b.sample(rng, n)))


@dataclass(frozen=True)
class PacketTiming:
    index: int
    required: float
    received: float

    @property
    def slack(self):
        return self.required - self.received


def streaming_offsets(t, d, s):
    """
    Per valid index in [d, d+s-1], time after the trigger at which the
    streamed action is available.
    """
    u = hit_times(t.horizon, d, t.alpha, t.u_d)
    steps = finalization_steps(u, t.N)
    indices = np.arange(d, d + s)
    return t.dt_vlm + steps[indices] * t.dt_ae + t.overhead + (indices - d) * t.packet_cost


def stream_timeline(t, s=None):
    """
    Required execution time vs. availability time for every streamed action
    of one request, measured from the trigger. The first valid index runs the
    moment it arrives; each later one follows a control period after it.
    """
    d, s_min = delay_and_smin(t, ClientMode.FASTER)
    s = s_min if s is None else s
    if not 1 <= s <= t.horizon - d:
        raise DomainError(f"execution horizon must be in [1, {t.horizon - d}], got {s}")
    received = streaming_offsets(t, d, s)
    first = infer_latency(t, ClientMode.FASTER)
    return [
        PacketTiming(index=d + k, required=first + k * t.dt_ctrl, received=float(received[k]))
        for k in range(s)
    ]


@dataclass(frozen=True)
class ModeSummary:
    mode: ClientMode
    latency: float
    d: int
    s_min: int
    s: int
    reaction: UniformDist
    # share of control ticks spent waiting for a chunk
    stall_fraction: float = 0.0


def summarize_mode(t, mode, s=None):
    mode = ClientMode(mode)
    d, s_min = delay_and_smin(t, mode)
    s = execution_horizon(t, mode, s)
    latency = infer_latency(t, mode)
    stall = 0.0
    if mode is ClientMode.SYNC:
        waiting = int(math.ceil(latency / t.dt_ctrl - TIME_TOL))
        stall = waiting / (waiting + s)
    return ModeSummary(mode, latency, d, s_min, s, reaction_distribution(t, mode, s), stall)
