"""
Reaction measurements over an executed action sequence.

The protocol reaction counts from the event to the first executed action
that was computed from an observation captured at or after the event. The
behavioral reaction is a secondary, interpretive metric: the first executed
action pointing within BEHAVIOR_ANGLE_DEG of the new target.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import ShapeError, TraceError

BEHAVIOR_ANGLE_DEG = 30.0
TIME_TOL = 1e-9


@dataclass
class ReactionMeasurement:
    event_time: float
    protocol: float
    # None when the executed actions never turn toward the new target
    behavioral: Optional[float] = None


def protocol_reaction(exec_times, obs_times, event_time):
    exec_times = np.asarray(exec_times, dtype=np.float64)
    obs_times = np.asarray(obs_times, dtype=np.float64)
    if exec_times.shape != obs_times.shape:
        raise ShapeError("exec_times and obs_times differ in shape")
    responsive = np.flatnonzero(obs_times >= event_time - TIME_TOL)
    if len(exec_times) == 0 or event_time > exec_times[-1] or len(responsive) == 0:
        raise TraceError(f"event at {event_time:.6f}s is not covered by the trace")
    return float(exec_times[responsive[0]] - event_time)


def behavioral_onset(exec_times, actions, positions, event_time, new_target, angle_deg=BEHAVIOR_ANGLE_DEG):
    exec_times = np.asarray(exec_times, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64)
    cos_limit = np.cos(np.deg2rad(angle_deg))
    for t, action, position in zip(exec_times, actions, positions):
        if t < event_time - TIME_TOL:
            continue
        bearing = np.asarray(new_target, dtype=np.float64) - position
        norms = np.linalg.norm(action) * np.linalg.norm(bearing)
        if norms > 0 and float(action @ bearing) / norms >= cos_limit:
            return float(t - event_time)
    return None


def behavioral_reaction(exec_times, obs_times, actions, positions, event_time, new_target):
    """
    Both reaction metrics for one event. `positions[k]` is the controlled
    point's position when action k executes.
    """
    return ReactionMeasurement(
        event_time=float(event_time),
        protocol=protocol_reaction(exec_times, obs_times, event_time),
        behavioral=behavioral_onset(exec_times, actions, positions, event_time, new_target),
    )
