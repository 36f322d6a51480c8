"""
One function per subcommand. Each takes the validated config plus the run
directory, writes its artifacts there and returns a JSON-able result dict
that ends up in the manifest.
"""

import csv
import json
import logging
from pathlib import Path

import numpy as np

from core.exceptions import ConfigError, DomainError
from env.dataset import generate_dataset, load_dataset
from env.world import WORKSPACE
from flow.pilot import deviation_curves, straightness, trend_margin, write_deviation_csv, write_straightness_csv
from flow.policy import FlowModel
from flow.sampling import SamplerConfig, sample_constant, sample_has
from flow.training import TrainConfig, describe, train
from pipeline.presets import PRESETS, TABLE_PRESETS
from pipeline.report import compare_modes, write_comparison, write_speedups, write_timeline
from pipeline.simulator import FlowPolicy, ScriptedPolicy, event_window, simulate, uniform_events
from pipeline.timing import ClientMode, execution_horizon, stream_timeline
from schedule.timesteps import hit_time_table
from wire.client import ClientConfig, run_client as run_streaming_client
from wire.protocol import ServerMode
from wire.server import ServerConfig

logger = logging.getLogger(__name__)


def _timing(cfg):
    return cfg["timing"]["timing"]


def _rng(cfg, stream):
    return np.random.default_rng([cfg["seed"], stream])


def _load_model(checkpoint):
    if checkpoint is None:
        raise DomainError("this subcommand needs --checkpoint")
    return FlowModel.load(checkpoint)


def run_gen_data(cfg, out_dir, show_progress=False, H=None):
    env = cfg["env"]
    path = Path(out_dir) / "dataset.jsonl"
    count = generate_dataset(
        path,
        num_episodes=env["num_episodes"],
        episode_len=env["episode_len"],
        H=H or env["H"],
        jump_rate=env["jump_rate"],
        seed=cfg["seed"],
        gain=env["gain"],
        v_max=env["v_max"],
        dt=env["dt"],
        show_progress=show_progress,
    )
    return {"dataset": str(path), "records": count}


def train_config(cfg, show_progress=False, log_path=None):
    section = cfg["train"]
    return TrainConfig(
        epochs=section["epochs"],
        batch_size=section["batch_size"],
        p=section["p"],
        d_max=section["d_max"],
        alpha=cfg["schedule"]["alpha"],
        u_d=cfg["schedule"]["u_d"],
        seed=cfg["seed"],
        lr=section["lr"],
        betas=tuple(section["betas"]),
        eps=section["eps"],
        weight_decay=section["weight_decay"],
        grad_clip=section["grad_clip"],
        hidden=tuple(section["hidden"]),
        warmup_steps=section["warmup_steps"],
        lr_schedule=section["lr_schedule"],
        log_path=log_path,
        show_progress=show_progress,
    )


def run_train(cfg, out_dir, data_path=None, show_progress=False, H=None):
    out_dir = Path(out_dir)
    results = {}
    if data_path is None:
        results.update(run_gen_data(cfg, out_dir, show_progress, H=H))
        data_path = results["dataset"]
    _, dataset, _ = load_dataset(data_path)
    train_cfg = train_config(cfg, show_progress, log_path=str(out_dir / "train_log.jsonl"))
    if train_cfg.d_max >= dataset.horizon:
        raise ConfigError(
            f"d_max={train_cfg.d_max} must be below the dataset horizon {dataset.horizon}", path="train.d_max"
        )
    fit, holdout = dataset.split(cfg["train"]["holdout_fraction"], _rng(cfg, 1))
    result = train(fit, train_cfg, holdout=holdout)
    checkpoint = result.model.save(out_dir / "checkpoint.bin")
    target = cfg["train"]["loss_ratio_target"]
    if result.loss_ratio < target:
        logger.warning("held-out loss fell %.1fx, below the %.0fx target", result.loss_ratio, target)
    results.update(
        {
            "checkpoint": str(checkpoint),
            "train": describe(train_cfg),
            "final_epoch_loss": result.epoch_losses[-1],
            "initial_holdout_loss": result.initial_holdout_loss,
            "final_holdout_loss": result.final_holdout_loss,
            "loss_ratio": result.loss_ratio,
            "loss_ratio_target": target,
            "target_met": result.loss_ratio >= target,
        }
    )
    return results, result.model


def run_sample(cfg, out_dir, checkpoint, d=0, s=None, schedule="has", obs=None):
    model = _load_model(checkpoint)
    sched = cfg["schedule"]
    rng = _rng(cfg, 2)
    if obs is None:
        obs = rng.uniform(-WORKSPACE, WORKSPACE, model.O)
    obs = np.asarray(obs, dtype=np.float64)
    prefix = np.zeros((d, model.A)) if d else None
    if schedule == "has":
        s = 1 if s is None else s
        sampler = SamplerConfig(N=sched["N"], alpha=sched["alpha"], u_d=sched["u_d"], execution_horizon=s)
        chunk, trace = sample_has(model, obs, sched["N"], d, prefix, cfg=sampler, rng=rng)
    else:
        chunk, trace = sample_constant(model, obs, sched["N"], d, prefix, rng=rng)
    results = {
        "schedule": schedule,
        "obs": obs.tolist(),
        "d": d,
        "s": s,
        "steps_used": trace.steps_used,
        "early_stopped": trace.early_stopped,
        "finalize_step": trace.finalize_step.tolist(),
        "chunk": chunk.tolist(),
    }
    path = Path(out_dir) / "sample.json"
    path.write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return results


def evaluation_observations(cfg, count, O=4):
    return _rng(cfg, 3).uniform(-WORKSPACE, WORKSPACE, size=(count, O))


def run_pilot(cfg, out_dir, samples=200, horizon=None, checkpoint=None, show_progress=False):
    """Straightness and clean-estimate deviation per index, on a given or freshly trained model."""
    out_dir = Path(out_dir)
    results = {}
    if checkpoint is None:
        results, model = run_train(cfg, out_dir, show_progress=show_progress, H=horizon)
    else:
        model = _load_model(checkpoint)
    if horizon is not None and model.H != horizon:
        raise DomainError(f"checkpoint horizon {model.H} differs from --horizon {horizon}")
    N = cfg["schedule"]["N"]
    eval_obs = evaluation_observations(cfg, samples, model.O)
    report = straightness(model, eval_obs, N, rng=_rng(cfg, 4))
    curves = deviation_curves(model, eval_obs, N, rng=_rng(cfg, 4))
    write_straightness_csv(report, out_dir / "straightness.csv")
    write_deviation_csv(curves, out_dir / "deviation.csv")

    early, late, margin = trend_margin(report.mean)
    dev_early, dev_late, dev_margin = trend_margin(curves[0])
    logger.info("straightness early %.4g late %.4g (margin %.4g)", early, late, margin)
    logger.info("step-1 deviation early %.4g late %.4g (margin %.4g)", dev_early, dev_late, dev_margin)
    if margin <= 0 or dev_margin <= 0:
        logger.warning("near indices are not straighter than far ones on this model")
    results.update(
        {
            "samples": samples,
            "horizon": model.H,
            "straightness": {"early": early, "late": late, "margin": margin},
            "deviation_step1": {"early": dev_early, "late": dev_late, "margin": dev_margin},
        }
    )
    return results


def run_simulate(cfg, out_dir, mode, events=20, s=None, duration=30.0, checkpoint=None, behavioral=True):
    timing = _timing(cfg)
    env = cfg["env"]
    mode = ClientMode(mode)
    s = execution_horizon(timing, mode, s)
    if checkpoint is None:
        policy = ScriptedPolicy(timing.horizon, env["gain"], env["v_max"], timing.dt_ctrl)
    else:
        sched = cfg["schedule"]
        policy = FlowPolicy(_load_model(checkpoint), sched["N"], sched["alpha"], sched["u_d"])
    timed = None
    if events:
        start, end = event_window(timing, mode, s, duration)
        timed = uniform_events(_rng(cfg, 5), events, start, end)
    trace = simulate(timing, mode, policy, s, duration, timed, seed=cfg["seed"], behavioral=behavioral)
    trace.write_jsonl(Path(out_dir) / "trace.jsonl")
    onsets = [b for b in trace.behavioral if b is not None]
    return {
        "mode": mode.value,
        "s": trace.s,
        "d": trace.d,
        "actions": len(trace.executed),
        "stall_fraction": trace.stall_fraction,
        "reaction": trace.reaction_stats(),
        "uncovered_events": trace.uncovered_events,
        "behavioral_mean": float(np.mean(onsets)) if onsets else None,
    }


def run_compare(cfg, out_dir, name="timing", modes=None):
    timing = _timing(cfg)
    comparison = compare_modes(timing, name, modes) if modes else compare_modes(timing, name)
    write_comparison(comparison, out_dir)
    write_timeline(stream_timeline(timing), Path(out_dir) / f"timeline_{name}.csv")
    return {"name": name, "table": comparison.table_rows(), "speedups": comparison.speedups()}


def write_hit_times(cfg, path):
    rows = hit_time_table(cfg["env"]["H"], cfg["schedule"]["u_d"])
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["alpha", "index", "hit_time"])
        writer.writerows([a, i, f"{u:.8g}"] for a, i, u in rows)
    return path


def run_reproduce(cfg, out_dir, tables=True, figures=False, checkpoint=None, samples=200, show_progress=False):
    out_dir = Path(out_dir)
    results = {}
    if tables:
        comparisons = []
        for name in TABLE_PRESETS:
            comparison = compare_modes(PRESETS[name], name)
            write_comparison(comparison, out_dir)
            comparisons.append(comparison)
        write_speedups(comparisons, out_dir / "speedups.csv")
        results["tables"] = {c.name: c.table_rows() for c in comparisons}
    if figures:
        write_hit_times(cfg, out_dir / "hit_time_table.csv")
        results["figures"] = run_pilot(cfg, out_dir, samples, checkpoint=checkpoint, show_progress=show_progress)
    return results


def server_config(cfg, mode=None, host=None, port=None):
    wire, timing, sched = cfg["wire"], _timing(cfg), cfg["schedule"]
    return ServerConfig(
        host=host or wire["host"],
        port=wire["port"] if port is None else port,
        mode=ServerMode[(mode or wire["server_mode"]).upper()],
        N=sched["N"],
        alpha=sched["alpha"],
        u_d=sched["u_d"],
        dt_vlm=timing.dt_vlm if wire["emulate"] else 0.0,
        dt_ae=timing.dt_ae if wire["emulate"] else 0.0,
        seed=cfg["seed"],
    )


def run_client(cfg, out_dir, mode=None, s=None, d=None, duration=None, events=0, host=None, port=None, trace_path=None):
    wire = cfg["wire"]
    timing = _timing(cfg)
    mode = ClientMode(mode or wire["client_mode"])
    client_cfg = ClientConfig(
        host=host or wire["host"],
        port=wire["port"] if port is None else port,
        mode=mode,
        s=execution_horizon(timing, mode, s),
        d=d,
        duration=duration or wire["duration"],
        seed=cfg["seed"],
        guard=wire["guard"],
    )
    timed = None
    if events:
        start, end = event_window(timing, mode, client_cfg.s, client_cfg.duration)
        timed = uniform_events(_rng(cfg, 6), events, start, end)
    report = run_streaming_client(timing, client_cfg, timed)
    report.trace.write_jsonl(trace_path or Path(out_dir) / "trace.jsonl")
    return report.summary()
