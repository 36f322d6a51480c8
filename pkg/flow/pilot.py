"""
Sampling-dynamics metrics: per-index straightness of the denoising path and
deviation of intermediate clean estimates from the final chunk.
"""

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from core.exceptions import DomainError
from flow.policy import clean_estimate
from flow.sampling import sample_constant

logger = logging.getLogger(__name__)

DEFAULT_EVAL_SAMPLES = 200


@dataclass
class StraightnessReport:
    mean: np.ndarray
    p05: np.ndarray
    p95: np.ndarray


def _recorded_runs(model, eval_obs, N, rng):
    if len(eval_obs) == 0:
        raise DomainError("evaluation set is empty")
    for obs in eval_obs:
        _, trace = sample_constant(model, obs, N, rng=rng, record=True)
        yield trace, trace.final


def straightness(model, eval_obs, N, rng=None):
    """
    Per index i: sum over steps of ||(A^1_i - A^0_i) - v^j_i||^2 / N, averaged
    over the evaluation set, with 5%/95% percentiles across samples.
    Computed in model space; the noise seed varies per sample.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    per_sample = []
    for trace, final in _recorded_runs(model, eval_obs, N, rng):
        displacement = trace.noise - final
        score = np.zeros(model.H)
        for step in trace.intermediates:
            score += np.sum((displacement - step["velocity"]) ** 2, axis=1) / N
        per_sample.append(score)
    per_sample = np.array(per_sample)
    return StraightnessReport(
        mean=per_sample.mean(axis=0),
        p05=np.percentile(per_sample, 5, axis=0),
        p95=np.percentile(per_sample, 95, axis=0),
    )


def deviation_curves(model, eval_obs, N, rng=None):
    """Matrix [step, index] of mean ||clean estimate at step j - final chunk||."""
    rng = np.random.default_rng(0) if rng is None else rng
    total = np.zeros((N, model.H))
    count = 0
    for trace, final in _recorded_runs(model, eval_obs, N, rng):
        for row, step in enumerate(trace.intermediates):
            estimate = clean_estimate(step["chunk"], step["velocity"], step["tau"])
            total[row] += np.linalg.norm(estimate - final, axis=1)
        count += 1
    return total / count


def trend_margin(values, fraction=0.2):
    """(mean over first fraction of indices, mean over last fraction, late - early)."""
    values = np.asarray(values, dtype=np.float64)
    width = max(1, int(round(len(values) * fraction)))
    early, late = float(values[:width].mean()), float(values[-width:].mean())
    return early, late, late - early


def write_straightness_csv(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["index", "straightness", "p05", "p95"])
        for i, (m, lo, hi) in enumerate(zip(report.mean, report.p05, report.p95)):
            writer.writerow([i, f"{m:.8g}", f"{lo:.8g}", f"{hi:.8g}"])
    return path


def write_deviation_csv(curves, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "index", "deviation"])
        for step, row in enumerate(curves, start=1):
            for i, value in enumerate(row):
                writer.writerow([step, i, f"{value:.8g}"])
    return path
