"""JSON-Lines demonstration datasets: one header line, then one record per tick."""

import json
import logging
from pathlib import Path

import numpy as np
from tqdm import tqdm

from core.exceptions import DomainError, ShapeError
from env.world import ACTION_DIM, DEFAULT_DT, OBS_DIM, rollout_episode
from flow.training import ChunkDataset

logger = logging.getLogger(__name__)

DATASET_FORMAT = "faster-chunks/1"


def episode_seeds(seed, num_episodes):
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(num_episodes)]


def generate_dataset(
    path,
    num_episodes=200,
    episode_len=300,
    H=50,
    jump_rate=1 / 90,
    seed=0,
    gain=2.0,
    v_max=1.0,
    dt=DEFAULT_DT,
    show_progress=False,
):
    """Write expert demonstrations to `path`; returns the number of records."""
    if num_episodes < 1 or episode_len < 1 or H < 1:
        raise DomainError("num_episodes, episode_len and H must be positive")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": DATASET_FORMAT,
        "num_episodes": num_episodes,
        "episode_len": episode_len,
        "H": H,
        "A": ACTION_DIM,
        "O": OBS_DIM,
        "jump_rate": jump_rate,
        "seed": seed,
        "gain": gain,
        "v_max": v_max,
        "dt_ctrl": dt,
    }
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(json.dumps(header, sort_keys=True) + "\n")
        seeds = episode_seeds(seed, num_episodes)
        for ep, ep_seed in enumerate(tqdm(seeds, desc="episodes", disable=not show_progress)):
            episode = rollout_episode(ep_seed, episode_len, H, jump_rate, gain, v_max, dt)
            for tick, obs, chunk in zip(episode.ticks, episode.observations, episode.chunks):
                record = {"ep": ep, "t": tick, "obs": obs.tolist(), "chunk": chunk.tolist()}
                handle.write(json.dumps(record) + "\n")
                count += 1
    logger.info("wrote %d records (%d episodes) to %s", count, num_episodes, path)
    return count


def read_header(path):
    with open(path, encoding="utf-8") as handle:
        header = json.loads(handle.readline())
    if header.get("format") != DATASET_FORMAT:
        raise DomainError(f"{path} is not a {DATASET_FORMAT} dataset")
    return header


def load_dataset(path):
    """Returns (header, ChunkDataset, episode ids per record)."""
    header = read_header(path)
    H, A, O = header["H"], header["A"], header["O"]
    obs, chunks, episodes = [], [], []
    with open(path, encoding="utf-8") as handle:
        handle.readline()
        for line_no, line in enumerate(handle, start=2):
            if not line.strip():
                continue
            record = json.loads(line)
            o = np.asarray(record["obs"], dtype=np.float64)
            c = np.asarray(record["chunk"], dtype=np.float64)
            if o.shape != (O,) or c.shape != (H, A):
                raise ShapeError(f"{path}:{line_no}: record shapes {o.shape}/{c.shape} do not match the header")
            obs.append(o)
            chunks.append(c)
            episodes.append(record["ep"])
    if not obs:
        raise DomainError(f"{path} contains no records")
    return header, ChunkDataset(np.stack(obs), np.stack(chunks)), np.asarray(episodes)
