"""
Point mass chasing a target that jumps at random ticks.

Observations are (position, target), both in the [-1, 1]^2 workspace.
Actions are 2-D velocities integrated with first-order kinematics.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from core.exceptions import DomainError

logger = logging.getLogger(__name__)

WORKSPACE = 1.0
MIN_JUMP = 0.5
ACTION_DIM = 2
OBS_DIM = 4
DEFAULT_DT = 1.0 / 30.0


def clamp(point):
    return np.clip(np.asarray(point, dtype=np.float64), -WORKSPACE, WORKSPACE)


@dataclass
class WorldState:
    position: np.ndarray
    target: np.ndarray
    time: int = 0

    def __post_init__(self):
        self.position = clamp(self.position)
        self.target = clamp(self.target)

    def observation(self):
        return np.concatenate([self.position, self.target])

    def with_target(self, target):
        return WorldState(self.position.copy(), target, self.time)


@dataclass
class EventSchedule:
    """Target jumps: strictly increasing ticks with the target shown from that tick on."""

    jump_times: list = field(default_factory=list)
    jump_targets: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if len(self.jump_times) != len(self.jump_targets):
            raise DomainError("jump_times and jump_targets differ in length")
        if any(b <= a for a, b in zip(self.jump_times, self.jump_times[1:])):
            raise DomainError("jump times must be strictly increasing")
        self.jump_targets = [clamp(t) for t in self.jump_targets]

    @classmethod
    def draw(cls, rng, episode_len, jump_rate, initial_target, seed=0):
        """
        Geometric inter-arrival ticks with mean 1/jump_rate; each new target is
        uniform in the workspace and at least MIN_JUMP away from the previous one.
        """
        if not 0.0 <= jump_rate < 1.0:
            raise DomainError(f"jump rate must be in [0, 1), got {jump_rate}")
        times, targets = [], []
        if jump_rate == 0.0:
            return cls(times, targets, seed)

        tick, current = 0, clamp(initial_target)
        while True:
            tick += int(rng.geometric(jump_rate))
            if tick >= episode_len:
                break
            current = draw_far_target(rng, current)
            times.append(tick)
            targets.append(current)
        return cls(times, targets, seed)

    def jump_at(self, tick):
        """Target that appears exactly at `tick`, or None."""
        try:
            return self.jump_targets[self.jump_times.index(tick)]
        except ValueError:
            return None


def draw_far_target(rng, previous):
    while True:
        candidate = rng.uniform(-WORKSPACE, WORKSPACE, size=2)
        if np.linalg.norm(candidate - previous) >= MIN_JUMP:
            return candidate


def expert_action(state, gain, v_max):
    """Proportional velocity toward the target, magnitude clipped to v_max."""
    if gain <= 0 or v_max <= 0:
        raise DomainError("gain and v_max must be positive")
    action = gain * (state.target - state.position)
    speed = np.linalg.norm(action)
    if speed > v_max:
        action = action * (v_max / speed)
    return action


def step(state, action, dt=DEFAULT_DT):
    return WorldState(state.position + np.asarray(action, dtype=np.float64) * dt, state.target, state.time + 1)


def expert_chunk(state, H, gain, v_max, dt=DEFAULT_DT):
    """Expert rollout of H actions assuming the current target stays put."""
    if H < 1:
        raise DomainError(f"chunk length H must be >= 1, got {H}")
    chunk = np.zeros((H, ACTION_DIM))
    rolled = state
    for i in range(H):
        chunk[i] = expert_action(rolled, gain, v_max)
        rolled = step(rolled, chunk[i], dt)
    return chunk


@dataclass
class Episode:
    seed: int
    H: int
    schedule: EventSchedule
    ticks: list = field(default_factory=list)
    observations: list = field(default_factory=list)
    chunks: list = field(default_factory=list)

    def __len__(self):
        return len(self.ticks)


def rollout_episode(seed, episode_len, H, jump_rate, gain, v_max, dt=DEFAULT_DT):
    """
    Drive the world with the expert's first action at every tick and record
    (tick, observation, expert chunk).
    """
    if episode_len < 1:
        raise DomainError("episode length must be positive")
    rng = np.random.default_rng(seed)
    state = WorldState(rng.uniform(-WORKSPACE, WORKSPACE, 2), rng.uniform(-WORKSPACE, WORKSPACE, 2))
    schedule = EventSchedule.draw(rng, episode_len, jump_rate, state.target, seed=seed)
    episode = Episode(seed=seed, H=H, schedule=schedule)

    for tick in range(episode_len):
        jump = schedule.jump_at(tick)
        if jump is not None:
            state = state.with_target(jump)
        chunk = expert_chunk(state, H, gain, v_max, dt)
        episode.ticks.append(tick)
        episode.observations.append(state.observation())
        episode.chunks.append(chunk)
        state = step(state, chunk[0], dt)
    return episode
