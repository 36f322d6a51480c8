"""
Mixed-schedule flow-matching training with prefix conditioning.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from tqdm import tqdm

from core.exceptions import DomainError
from flow.policy import FlowModel, batch_loss_and_grads
from neural.optim import AdamState, adam_step, clip_grad_norm, learning_rate
from schedule.timesteps import sample_training_schedule

logger = logging.getLogger(__name__)


@dataclass
class ChunkDataset:
    """Flat (observation, expert chunk) pairs; chunks are (n, H, A)."""

    obs: np.ndarray
    chunks: np.ndarray

    def __post_init__(self):
        if len(self.obs) == 0:
            raise DomainError("dataset is empty")
        if len(self.obs) != len(self.chunks):
            raise DomainError("observation and chunk counts differ")

    def __len__(self):
        return len(self.obs)

    @property
    def horizon(self):
        return self.chunks.shape[1]

    @property
    def action_dim(self):
        return self.chunks.shape[2]

    @property
    def obs_dim(self):
        return self.obs.shape[1]

    def split(self, holdout_fraction, rng):
        order = rng.permutation(len(self))
        cut = max(1, int(round(len(self) * (1.0 - holdout_fraction))))
        train_idx, held_idx = order[:cut], order[cut:]
        if len(held_idx) == 0:
            held_idx = train_idx[-1:]
        return (
            ChunkDataset(self.obs[train_idx], self.chunks[train_idx]),
            ChunkDataset(self.obs[held_idx], self.chunks[held_idx]),
        )


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    p: float = 0.5
    d_max: int = 10
    alpha: float = 0.6
    u_d: float = 0.9
    seed: int = 0
    lr: float = 1e-4
    betas: tuple = (0.9, 0.95)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    hidden: tuple = (256, 256)
    warmup_steps: int = 0
    lr_schedule: str = "constant"
    log_path: Optional[str] = None
    show_progress: bool = False

    def validate(self, horizon):
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be positive")
        if not 0 <= self.d_max < horizon:
            raise DomainError(f"d_max must satisfy 0 <= d_max < H={horizon}, got {self.d_max}")
        if not 0.0 <= self.p <= 1.0:
            raise DomainError(f"p must be in [0, 1], got {self.p}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise DomainError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass
class TrainResult:
    model: FlowModel
    epoch_losses: list = field(default_factory=list)
    initial_holdout_loss: float = 0.0
    final_holdout_loss: float = 0.0

    @property
    def loss_ratio(self):
        if self.final_holdout_loss <= 0:
            return float("inf")
        return self.initial_holdout_loss / self.final_holdout_loss


def dataset_statistics(dataset):
    obs_mean = dataset.obs.mean(axis=0)
    obs_scale = np.maximum(dataset.obs.std(axis=0), 1e-6)
    flat = dataset.chunks.reshape(-1, dataset.action_dim)
    act_mean = flat.mean(axis=0)
    act_scale = np.maximum(flat.std(axis=0), 1e-6)
    return {"obs_mean": obs_mean, "obs_scale": obs_scale, "act_mean": act_mean, "act_scale": act_scale}


def _draw_batch(chunks, cfg, rng):
    """Noise, per-sample schedules and masks for one batch (model space)."""
    batch, H, A = chunks.shape
    noise = rng.standard_normal((batch, H, A))
    taus = np.empty((batch, H))
    masks = np.empty((batch, H), dtype=np.int8)
    for b in range(batch):
        sched = sample_training_schedule(rng, H, cfg.alpha, cfg.u_d, cfg.p, cfg.d_max)
        taus[b] = sched.tau.values
        masks[b] = sched.mask.bits
    return noise, taus, masks


def evaluate_loss(model, dataset, cfg, seed=1234, batch_size=256):
    """Mean masked loss over a dataset under a fixed schedule/noise stream."""
    rng = np.random.default_rng(seed)
    obs = model.normalize_obs(dataset.obs)
    chunks = model.normalize_actions(dataset.chunks)
    total, count = 0.0, 0
    for start in range(0, len(dataset), batch_size):
        o, c = obs[start : start + batch_size], chunks[start : start + batch_size]
        noise, taus, masks = _draw_batch(c, cfg, rng)
        loss, _ = batch_loss_and_grads(model, o, c, noise, taus, masks)
        total += loss * len(o)
        count += len(o)
    return total / count


def train(dataset, cfg, holdout=None):
    """
    Train a velocity network with the mixed schedule. Returns a TrainResult
    whose model carries the dataset normalization statistics.
    """
    cfg.validate(dataset.horizon)
    rng = np.random.default_rng(cfg.seed)
    model = FlowModel.initialize(
        dataset.horizon,
        dataset.action_dim,
        dataset.obs_dim,
        rng,
        hidden=tuple(cfg.hidden),
        **dataset_statistics(dataset),
    )
    params = model.net.parameters()
    state = AdamState.for_parameters(
        params, lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1], eps=cfg.eps, weight_decay=cfg.weight_decay
    )

    obs = model.normalize_obs(dataset.obs)
    chunks = model.normalize_actions(dataset.chunks)
    steps_per_epoch = -(-len(dataset) // cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    result = TrainResult(model=model)
    if holdout is not None:
        result.initial_holdout_loss = evaluate_loss(model, holdout, cfg)
        logger.info("initial held-out loss %.5f", result.initial_holdout_loss)

    log_file = None
    if cfg.log_path:
        Path(cfg.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(cfg.log_path, "w", encoding="utf-8")

    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(dataset))
            losses = []
            batches = range(0, len(dataset), cfg.batch_size)
            for start in tqdm(batches, desc=f"epoch {epoch + 1}", disable=not cfg.show_progress, leave=False):
                idx = order[start : start + cfg.batch_size]
                noise, taus, masks = _draw_batch(chunks[idx], cfg, rng)
                loss, grads = batch_loss_and_grads(model, obs[idx], chunks[idx], noise, taus, masks)
                clip_grad_norm(grads, cfg.grad_clip)
                lr = learning_rate(cfg.lr, state.step, cfg.warmup_steps, cfg.lr_schedule, total_steps)
                adam_step(state, params, grads, lr=lr)
                losses.append(loss)

            mean_loss = float(np.mean(losses))
            result.epoch_losses.append(mean_loss)
            logger.info("epoch %d/%d mean loss %.5f", epoch + 1, cfg.epochs, mean_loss)
            if log_file is not None:
                log_file.write(json.dumps({"epoch": epoch + 1, "loss": mean_loss}) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if holdout is not None:
        result.final_holdout_loss = evaluate_loss(model, holdout, cfg)
        logger.info(
            "final held-out loss %.5f (%.1fx below initialization)",
            result.final_holdout_loss,
            result.loss_ratio,
        )
    return result


def describe(cfg):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}
