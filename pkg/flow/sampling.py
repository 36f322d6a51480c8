"""
Euler samplers: the constant schedule and the horizon-aware schedule with
streaming dispatch and early stopping.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from core.exceptions import DomainError, ShapeError
from schedule.timesteps import constant_timesteps, global_timesteps, hit_times, local_timesteps

logger = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    N: int = 10
    alpha: float = 0.6
    u_d: Optional[float] = None
    early_stop: bool = True
    execution_horizon: int = 1
    # called as sink(index, action, step_index) when an action finalizes
    dispatch: Optional[Callable] = None

    def __post_init__(self):
        if self.N < 1:
            raise DomainError(f"N must be >= 1, got {self.N}")
        if self.u_d is None:
            self.u_d = (self.N - 1) / self.N if self.N > 1 else 0.5
        if self.execution_horizon < 1:
            raise DomainError("execution horizon s must be >= 1")


@dataclass
class SampleTrace:
    rhos: list = field(default_factory=list)
    finalize_step: Optional[np.ndarray] = None
    steps_used: int = 0
    early_stopped: bool = False
    # one dict per step when recording: tau, chunk (before update), velocity
    intermediates: list = field(default_factory=list)
    noise: Optional[np.ndarray] = None
    # final chunk in model space
    final: Optional[np.ndarray] = None


def _prepare(model, obs, N, d, prefix):
    if N < 1:
        raise DomainError(f"N must be >= 1, got {N}")
    if not 0 <= d < model.H:
        raise DomainError(f"prefix length d must satisfy 0 <= d < H={model.H}, got {d}")
    prefix = np.zeros((0, model.A)) if prefix is None else np.asarray(prefix, dtype=np.float64)
    if prefix.shape != (d, model.A):
        raise ShapeError(f"prefix must have shape ({d}, {model.A}), got {prefix.shape}")
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (model.O,):
        raise ShapeError(f"observation must have shape ({model.O},), got {obs.shape}")
    return model.normalize_obs(obs), prefix, model.normalize_actions(prefix)


def _integrate(model, obs_n, noise, d, prefix_n, N, tau_at, on_finalize=None, stop_after=None, record=False):
    """
    Shared Euler loop. `tau_at(rho)` gives the local timestep vector for a
    global timestep; rows whose next timestep hits 0 are finalized.
    """
    H = model.H
    rho = global_timesteps(N)
    chunk = noise.copy()
    trace = SampleTrace(finalize_step=np.zeros(H, dtype=np.int64), noise=noise.copy())
    pending = set(range(d, H))

    for j in range(1, N + 1):
        tau = tau_at(rho[j - 1])
        tau_next = tau_at(rho[j])
        chunk[:d] = prefix_n
        velocity = model.velocity(obs_n, chunk, tau)
        if record:
            trace.intermediates.append(
                {"step": j, "tau": tau.copy(), "chunk": chunk.copy(), "velocity": velocity.copy()}
            )
        chunk = chunk + velocity * (tau_next - tau)[:, None]
        trace.rhos.append(float(rho[j - 1]))
        trace.steps_used = j

        for i in range(d, H):
            if i in pending and tau_next[i] == 0.0:
                pending.discard(i)
                trace.finalize_step[i] = j
                if on_finalize is not None:
                    on_finalize(i, chunk[i], j)

        if stop_after is not None and not pending.intersection(stop_after):
            trace.early_stopped = j < N
            break

    chunk[:d] = prefix_n
    trace.final = chunk.copy()
    return chunk, trace


def _finish(model, chunk, prefix, d):
    out = model.denormalize_actions(chunk)
    out[:d] = prefix
    return out


def sample_constant(model, obs, N, d=0, prefix=None, rng=None, record=False):
    """Plain Euler integration with one shared timestep for all valid rows."""
    rng = np.random.default_rng() if rng is None else rng
    obs_n, prefix, prefix_n = _prepare(model, obs, N, d, prefix)
    noise = rng.standard_normal((model.H, model.A))
    chunk, trace = _integrate(
        model,
        obs_n,
        noise,
        d,
        prefix_n,
        N,
        lambda rho: constant_timesteps(rho, model.H, d).values,
        record=record,
    )
    return _finish(model, chunk, prefix, d), trace


def sample_has(model, obs, N, d=0, prefix=None, cfg=None, rng=None, u=None, record=False):
    """
    Horizon-aware sampling: each index follows its own local timestep,
    finalized actions are handed to cfg.dispatch immediately (in raw units)
    and sampling stops once [d, d+s-1] is done when cfg.early_stop is set.

    `u` overrides the hit times computed from cfg (e.g. all-zero hit times).
    """
    cfg = SamplerConfig(N=N) if cfg is None else cfg
    if cfg.N != N:
        raise DomainError(f"sampler config was built for N={cfg.N}, sampling with N={N}")
    rng = np.random.default_rng() if rng is None else rng
    obs_n, prefix, prefix_n = _prepare(model, obs, N, d, prefix)
    s = cfg.execution_horizon
    if s > model.H - d:
        raise DomainError(f"execution horizon s={s} exceeds H - d = {model.H - d}")

    if u is None:
        u = hit_times(model.H, d, cfg.alpha, cfg.u_d)
    elif u.prefix_len != d or u.horizon != model.H:
        raise ShapeError("hit times do not match the chunk geometry")

    on_finalize = None
    if cfg.dispatch is not None:
        def on_finalize(index, row, step):
            cfg.dispatch(index, model.denormalize_actions(row), step)

    noise = rng.standard_normal((model.H, model.A))
    chunk, trace = _integrate(
        model,
        obs_n,
        noise,
        d,
        prefix_n,
        N,
        lambda rho: local_timesteps(rho, u).values,
        on_finalize=on_finalize,
        stop_after=set(range(d, d + s)) if cfg.early_stop else None,
        record=record,
    )
    if trace.early_stopped:
        logger.debug("early stop after %d/%d steps (d=%d, s=%d)", trace.steps_used, N, d, s)
    return _finish(model, chunk, prefix, d), trace
