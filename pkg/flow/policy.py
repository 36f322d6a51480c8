"""
Flow-matching velocity models over action chunks.

A chunk is an (H, A) float array. Models work in a standardized "model
space"; `FlowModel` owns the dataset statistics used to move between raw
units and model space.
"""

import logging
import struct
from pathlib import Path

import numpy as np

from core.exceptions import DomainError, ShapeError
from neural.network import backward, forward, forward_with_cache, init_dense_net, net_from_bytes, net_to_bytes

logger = logging.getLogger(__name__)

FLOW_MAGIC = b"FCFLOW"


def check_chunk(chunk, H, A, name="chunk"):
    chunk = np.asarray(chunk, dtype=np.float64)
    if chunk.shape != (H, A):
        raise ShapeError(f"{name} must have shape ({H}, {A}), got {chunk.shape}")
    if not np.all(np.isfinite(chunk)):
        raise DomainError(f"{name} contains non-finite entries")
    return chunk


def interpolate(clean, noise, tau):
    """Row i is tau_i * noise_i + (1 - tau_i) * clean_i."""
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if clean.shape != noise.shape or tau.shape != clean.shape[:-1]:
        raise ShapeError(f"shapes differ: clean {clean.shape}, noise {noise.shape}, tau {tau.shape}")
    if np.any((tau < 0) | (tau > 1)):
        raise DomainError("timesteps must lie in [0, 1]")
    t = tau[..., None]
    return t * noise + (1.0 - t) * clean


def clean_estimate(noisy, velocity, tau):
    """One-shot extrapolation to tau = 0: row i is noisy_i - velocity_i * tau_i."""
    noisy = np.asarray(noisy, dtype=np.float64)
    velocity = np.asarray(velocity, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if noisy.shape != velocity.shape or tau.shape != noisy.shape[:-1]:
        raise ShapeError(f"shapes differ: noisy {noisy.shape}, velocity {velocity.shape}, tau {tau.shape}")
    return noisy - velocity * tau[..., None]


class VelocityField:
    """
    Anything the samplers can integrate. Subclasses implement `velocity`;
    normalization defaults to the identity.
    """

    def __init__(self, H, A, O):
        self.H = H
        self.A = A
        self.O = O

    def velocity(self, obs, chunk, tau):
        raise NotImplementedError

    def normalize_obs(self, obs):
        return np.asarray(obs, dtype=np.float64)

    def normalize_actions(self, actions):
        return np.asarray(actions, dtype=np.float64)

    def denormalize_actions(self, actions):
        return np.asarray(actions, dtype=np.float64)


class FlowModel(VelocityField):
    """Dense velocity network v(o, A^tau, tau) plus normalization statistics."""

    def __init__(self, net, H, A, O, obs_mean=None, obs_scale=None, act_mean=None, act_scale=None):
        super().__init__(H, A, O)
        if net.input_dim != O + H * A + H or net.output_dim != H * A:
            raise ShapeError(
                f"network dims {net.input_dim}->{net.output_dim} do not fit H={H}, A={A}, O={O}"
            )
        self.net = net
        self.obs_mean = np.zeros(O) if obs_mean is None else np.asarray(obs_mean, dtype=np.float64)
        self.obs_scale = np.ones(O) if obs_scale is None else np.asarray(obs_scale, dtype=np.float64)
        self.act_mean = np.zeros(A) if act_mean is None else np.asarray(act_mean, dtype=np.float64)
        self.act_scale = np.ones(A) if act_scale is None else np.asarray(act_scale, dtype=np.float64)

    @classmethod
    def initialize(cls, H, A, O, rng, hidden=(256, 256), **stats):
        net = init_dense_net([O + H * A + H, *hidden, H * A], rng)
        return cls(net, H, A, O, **stats)

    def normalize_obs(self, obs):
        return (np.asarray(obs, dtype=np.float64) - self.obs_mean) / self.obs_scale

    def normalize_actions(self, actions):
        return (np.asarray(actions, dtype=np.float64) - self.act_mean) / self.act_scale

    def denormalize_actions(self, actions):
        return np.asarray(actions, dtype=np.float64) * self.act_scale + self.act_mean

    def network_input(self, obs, chunk, tau):
        """Batched concat(obs, flattened chunk, tau); obs (B,O), chunk (B,H,A), tau (B,H)."""
        batch = chunk.shape[0]
        return np.concatenate([obs, chunk.reshape(batch, -1), tau], axis=1)

    def velocity(self, obs, chunk, tau):
        x = self.network_input(obs[None, :], chunk[None, :, :], tau[None, :])
        return forward(self.net, x)[0].reshape(self.H, self.A)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stats = np.concatenate([self.obs_mean, self.obs_scale, self.act_mean, self.act_scale])
        blob = b"".join(
            [
                net_to_bytes(self.net),
                FLOW_MAGIC,
                struct.pack("<3I", self.H, self.A, self.O),
                stats.astype("<f4").tobytes(),
            ]
        )
        path.write_bytes(blob)
        logger.info("checkpoint written to %s (%d bytes)", path, len(blob))
        return path

    @classmethod
    def load(cls, path):
        blob = Path(path).read_bytes()
        net, offset = net_from_bytes(blob)
        if blob[offset : offset + len(FLOW_MAGIC)] != FLOW_MAGIC:
            raise ShapeError(f"{path} has no flow-model trailer")
        offset += len(FLOW_MAGIC)
        H, A, O = struct.unpack_from("<3I", blob, offset)
        offset += 12
        stats = np.frombuffer(blob, dtype="<f4", count=2 * O + 2 * A, offset=offset).astype(np.float64)
        return cls(
            net,
            H,
            A,
            O,
            obs_mean=stats[:O],
            obs_scale=stats[O : 2 * O],
            act_mean=stats[2 * O : 2 * O + A],
            act_scale=stats[2 * O + A :],
        )


def batch_loss_and_grads(model, obs, clean, noise, tau, mask):
    """
    Masked flow-matching loss averaged over a batch, all in model space.

    obs (B,O), clean/noise (B,H,A), tau/mask (B,H). Prefix rows are written
    with ground truth before the forward pass.
    """
    noisy = interpolate(clean, noise, tau)
    prefix = mask == 0
    noisy[prefix] = clean[prefix]
    x = model.network_input(obs, noisy, tau)
    out, cache = forward_with_cache(model.net, x)

    batch = clean.shape[0]
    target = (noise - clean).reshape(batch, -1)
    row_mask = np.repeat(mask.astype(np.float64), model.A, axis=1)
    ones = mask.sum(axis=1, keepdims=True).astype(np.float64)
    if np.any(ones == 0):
        raise DomainError("every sample needs at least one unmasked action")

    residual = row_mask * (out - target)
    per_sample = np.sum(residual**2, axis=1, keepdims=True) / ones
    loss = float(per_sample.mean())
    upstream = 2.0 * residual / ones / batch
    grads, _ = backward(model.net, x, upstream, cache=cache)
    return loss, grads


def training_loss(model, obs, clean, noise, sched):
    """
    Single-sample masked loss ||m * (v - (eps - A))||^2 / ||m||_1 and its
    parameter gradients. `obs`/`clean` are in raw units, `noise` in model space.
    """
    if sched.mask.count_ones < 1:
        raise DomainError("mask must contain at least one valid action")
    clean = check_chunk(clean, model.H, model.A, "clean")
    noise = check_chunk(noise, model.H, model.A, "noise")
    return batch_loss_and_grads(
        model,
        model.normalize_obs(obs)[None, :],
        model.normalize_actions(clean)[None, :, :],
        noise[None, :, :],
        sched.tau.values[None, :],
        sched.mask.bits[None, :],
    )
