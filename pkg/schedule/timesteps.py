"""
Hit times, local timesteps and prefix masks of the horizon-aware schedule.

Every vector here has length H. Prefix slots (indices < d) always hold 0 so
downstream code can index chunks uniformly.
"""

import enum
from dataclasses import dataclass

import numpy as np

from core.exceptions import DomainError

# rho <= u_i within this tolerance counts as "finalized"
FINALIZE_TOL = 1e-12

ALPHA_GRID = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


class ScheduleKind(str, enum.Enum):
    HAS = "has"
    CONSTANT = "constant"


@dataclass(frozen=True)
class HitTimes:
    values: np.ndarray
    prefix_len: int
    alpha: float
    u_d: float

    @property
    def horizon(self):
        return len(self.values)

    def zeroed(self):
        """Same geometry with every hit time forced to 0 (constant schedule)."""
        return HitTimes(np.zeros_like(self.values), self.prefix_len, self.alpha, self.u_d)


@dataclass(frozen=True)
class TimestepVector:
    values: np.ndarray
    global_rho: float


@dataclass(frozen=True)
class PrefixMask:
    bits: np.ndarray
    count_ones: int


@dataclass(frozen=True)
class ScheduleSample:
    rho: float
    d: int
    kind: ScheduleKind
    tau: TimestepVector
    mask: PrefixMask


def _check_prefix(H, d):
    if H < 1:
        raise DomainError(f"chunk length H must be >= 1, got {H}")
    if not 0 <= d < H:
        raise DomainError(f"prefix length d must satisfy 0 <= d < H={H}, got {d}")


def _check_rho(rho):
    if not 0.0 <= rho <= 1.0:
        raise DomainError(f"global timestep rho must be in [0, 1], got {rho}")


def hit_times(H, d, alpha, u_d):
    _check_prefix(H, d)
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must be in (0, 1], got {alpha}")
    if not 0.0 < u_d < 1.0:
        raise DomainError(f"u_d must be in (0, 1), got {u_d}")

    values = np.zeros(H, dtype=np.float64)
    offset = np.arange(H - d, dtype=np.float64)
    base = np.clip(1.0 - offset / max(H - 1 - d, 1), 0.0, 1.0)
    values[d:] = base**alpha * u_d
    return HitTimes(values=values, prefix_len=d, alpha=float(alpha), u_d=float(u_d))


def local_timesteps(rho, u):
    _check_rho(rho)
    d = u.prefix_len
    values = np.zeros(u.horizon, dtype=np.float64)
    valid = u.values[d:]
    numerator = rho - valid
    tau = np.where(numerator <= FINALIZE_TOL, 0.0, numerator / (1.0 - valid))
    values[d:] = np.clip(tau, 0.0, 1.0)
    return TimestepVector(values=values, global_rho=float(rho))


def constant_timesteps(rho, H, d):
    _check_rho(rho)
    _check_prefix(H, d)
    values = np.zeros(H, dtype=np.float64)
    values[d:] = rho
    return TimestepVector(values=values, global_rho=float(rho))


def prefix_mask(H, d):
    if not 0 <= d < H:
        # an all-zero mask would divide the loss by zero
        raise DomainError(f"prefix length d must satisfy 0 <= d < H={H}, got {d}")
    bits = np.zeros(H, dtype=np.int8)
    bits[d:] = 1
    return PrefixMask(bits=bits, count_ones=H - d)


def sample_training_schedule(rng, H, alpha, u_d, p, d_max):
    """
    Draw one (rho, d, schedule kind) triple of the mixed training schedule and
    build its timestep vector and loss mask.
    """
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"mixing probability p must be in [0, 1], got {p}")
    if not 0 <= d_max < H:
        raise DomainError(f"d_max must satisfy 0 <= d_max < H={H}, got {d_max}")

    rho = float(rng.uniform(0.0, 1.0))
    d = int(rng.integers(0, d_max + 1))
    use_has = bool(rng.uniform(0.0, 1.0) < p)

    if use_has:
        tau = local_timesteps(rho, hit_times(H, d, alpha, u_d))
        kind = ScheduleKind.HAS
    else:
        tau = constant_timesteps(rho, H, d)
        kind = ScheduleKind.CONSTANT
    return ScheduleSample(rho=rho, d=d, kind=kind, tau=tau, mask=prefix_mask(H, d))


def global_timesteps(N):
    """rho^j = (N-j+1)/N for j = 1..N+1, with rho^{N+1} pinned to exactly 0."""
    if N < 1:
        raise DomainError(f"number of sampling steps N must be >= 1, got {N}")
    grid = np.array([(N - j + 1) / N for j in range(1, N + 2)], dtype=np.float64)
    grid[-1] = 0.0
    return grid


def default_first_hit(N):
    """u_d that finalizes the first valid action after a single step."""
    if N < 2:
        raise DomainError("a single-step first action needs N >= 2")
    return (N - 1) / N


def finalization_steps(u, N):
    """
    1-based sampler step after which each index is fully denoised
    (tau^{j+1}_i = 0). Prefix indices report 0.
    """
    rho = global_timesteps(N)
    steps = np.zeros(u.horizon, dtype=np.int64)
    for i in range(u.prefix_len, u.horizon):
        for j in range(1, N + 1):
            if rho[j] - u.values[i] <= FINALIZE_TOL:
                steps[i] = j
                break
    return steps


def steps_for_window(u, N, s):
    """Global steps needed until indices [d, d+s-1] are all finalized."""
    d = u.prefix_len
    if not 1 <= s <= u.horizon - d:
        raise DomainError(f"execution horizon s must be in [1, {u.horizon - d}], got {s}")
    return int(finalization_steps(u, N)[d : d + s].max())


def hit_time_table(H, u_d, alphas=ALPHA_GRID, d=0):
    """Rows of (alpha, index, hit time) for the alpha ablation grid."""
    rows = []
    for alpha in alphas:
        u = hit_times(H, d, alpha, u_d)
        rows.extend((float(alpha), i, float(value)) for i, value in enumerate(u.values))
    return rows
