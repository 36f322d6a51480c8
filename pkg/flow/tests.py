import csv
import json

import numpy as np
import pytest

from core.exceptions import DomainError, ShapeError
from flow.pilot import (
    deviation_curves,
    straightness,
    trend_margin,
    write_deviation_csv,
    write_straightness_csv,
)
from flow.policy import FlowModel, VelocityField, clean_estimate, interpolate, training_loss
from flow.sampling import SamplerConfig, sample_constant, sample_has
from flow.training import ChunkDataset, TrainConfig, train
from neural.network import DenseNet, Layer, init_dense_net
from schedule.timesteps import (
    ScheduleKind,
    ScheduleSample,
    constant_timesteps,
    finalization_steps,
    hit_times,
    local_timesteps,
    prefix_mask,
)


class OracleVelocity(VelocityField):
    """Exact straight-path velocity towards a fixed target chunk."""

    def __init__(self, target, O=4):
        super().__init__(target.shape[0], target.shape[1], O)
        self.target = np.asarray(target, dtype=np.float64)

    def velocity(self, obs, chunk, tau):
        v = np.zeros_like(chunk)
        live = tau > 0
        v[live] = (chunk[live] - self.target[live]) / tau[live, None]
        return v


class FixedVelocity(VelocityField):
    def __init__(self, value, O=4):
        super().__init__(value.shape[0], value.shape[1], O)
        self.value = value

    def velocity(self, obs, chunk, tau):
        return self.value.copy()


def random_model(H=6, A=2, O=4, seed=0, hidden=(16, 16), **stats):
    return FlowModel.initialize(H, A, O, np.random.default_rng(seed), hidden=hidden, **stats)


def bias_only_model(bias, H, A, O):
    net = DenseNet([Layer(np.zeros((H * A, O + H * A + H)), np.asarray(bias, dtype=np.float64), "identity")])
    return FlowModel(net, H, A, O)


@pytest.fixture
def target():
    return np.random.default_rng(3).normal(size=(8, 2))


class TestInterpolation:
    """Noise/data interpolation and clean-action extrapolation."""

    def test_endpoints_and_midpoint(self):
        clean = np.array([[2.0, 0.0], [1.0, 1.0]])
        noise = np.array([[0.0, 2.0], [5.0, -1.0]])
        np.testing.assert_array_equal(interpolate(clean, noise, np.zeros(2)), clean)
        np.testing.assert_array_equal(interpolate(clean, noise, np.ones(2)), noise)
        np.testing.assert_allclose(interpolate(clean, noise, np.array([0.5, 0.0]))[0], [1.0, 1.0])

    def test_interpolation_shape_mismatch(self):
        with pytest.raises(ShapeError):
            interpolate(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros(2))

    def test_clean_estimate(self):
        noisy = np.array([[0.3, -0.2]])
        np.testing.assert_array_equal(clean_estimate(noisy, np.ones((1, 2)), np.zeros(1)), noisy)
        target = np.array([[1.0, 2.0]])
        eps = np.array([[0.5, -0.5]])
        np.testing.assert_allclose(clean_estimate(eps, eps - target, np.ones(1)), target)
        # 1x1 midpoint: 0.8 - 0.6 * 0.5 = 0.5
        assert clean_estimate(np.array([[0.8]]), np.array([[0.6]]), np.array([0.5]))[0, 0] == pytest.approx(0.5)


class TestTrainingLoss:
    """Masked flow-matching loss."""

    def test_zero_when_prediction_matches_target(self):
        clean = np.array([[1.0], [2.0], [3.0]])
        noise = np.array([[0.0], [1.0], [1.0]])
        model = bias_only_model((noise - clean).ravel(), 3, 1, 1)
        sched = ScheduleSample(0.4, 0, ScheduleKind.CONSTANT, constant_timesteps(0.4, 3, 0), prefix_mask(3, 0))
        loss, _ = training_loss(model, np.zeros(1), clean, noise, sched)
        assert loss == pytest.approx(0.0)

    def test_hand_computed_masked_mse(self):
        clean = np.array([[1.0], [2.0], [3.0]])
        noise = np.array([[0.0], [1.0], [1.0]])
        model = bias_only_model([0.5, -0.2, 0.1], 3, 1, 1)
        sched = ScheduleSample(0.5, 1, ScheduleKind.CONSTANT, constant_timesteps(0.5, 3, 1), prefix_mask(3, 1))
        # residuals on rows 1, 2: (-0.2 + 1) and (0.1 + 2) -> (0.64 + 4.41) / 2
        loss, grads = training_loss(model, np.zeros(1), clean, noise, sched)
        assert loss == pytest.approx(2.525)
        np.testing.assert_allclose(grads[1], [0.0, 0.8, 2.1])

    def test_masked_rows_do_not_affect_loss(self):
        model = random_model(H=5, A=2, seed=4)
        rng = np.random.default_rng(9)
        clean, noise = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
        sched = ScheduleSample(
            0.7, 4, ScheduleKind.HAS, local_timesteps(0.7, hit_times(5, 4, 0.6, 0.9)), prefix_mask(5, 4)
        )
        base, grads = training_loss(model, np.ones(4), clean, noise, sched)
        perturbed = noise.copy()
        perturbed[:4] += 10.0
        again, _ = training_loss(model, np.ones(4), clean, perturbed, sched)
        assert again == pytest.approx(base, abs=1e-12)
        # output bias rows for masked actions receive no gradient
        assert np.all(grads[-1][:8] == 0.0)


class TestSamplers:
    """Constant and horizon-aware Euler samplers."""

    @pytest.mark.parametrize("N", [1, 2, 5, 10])
    @pytest.mark.parametrize("alpha", [0.4, 0.6, 0.8, 1.0])
    def test_oracle_recovers_target(self, target, N, alpha):
        oracle = OracleVelocity(target)
        const, _ = sample_constant(oracle, np.zeros(4), N, rng=np.random.default_rng(1))
        np.testing.assert_allclose(const, target, atol=1e-6)
        cfg = SamplerConfig(N=N, alpha=alpha, early_stop=False, execution_horizon=1)
        has, _ = sample_has(oracle, np.zeros(4), N, cfg=cfg, rng=np.random.default_rng(1))
        np.testing.assert_allclose(has, target, atol=1e-6)

    def test_zero_velocity_returns_noise(self):
        field = FixedVelocity(np.zeros((5, 2)))
        noise = np.random.default_rng(7).standard_normal((5, 2))
        out, _ = sample_constant(field, np.zeros(4), 4, rng=np.random.default_rng(7))
        np.testing.assert_array_equal(out, noise)

    def test_single_step_is_one_extrapolation(self):
        v = np.full((3, 2), 0.25)
        noise = np.random.default_rng(2).standard_normal((3, 2))
        out, trace = sample_constant(FixedVelocity(v), np.zeros(4), 1, rng=np.random.default_rng(2))
        np.testing.assert_allclose(out, noise - v)
        assert trace.steps_used == 1

    def test_zero_hit_times_match_constant_schedule(self):
        model = random_model(H=10, seed=5)
        obs = np.array([0.1, -0.4, 0.3, 0.9])
        prefix = np.random.default_rng(8).normal(size=(2, 2))
        const, _ = sample_constant(model, obs, 10, 2, prefix, rng=np.random.default_rng(42))
        zero_u = hit_times(10, 2, 0.6, 0.9).zeroed()
        cfg = SamplerConfig(N=10, early_stop=False)
        has, _ = sample_has(model, obs, 10, 2, prefix, cfg=cfg, rng=np.random.default_rng(42), u=zero_u)
        np.testing.assert_allclose(has, const, atol=1e-6)

    def test_first_valid_action_dispatched_after_one_step(self):
        model = random_model(H=12, seed=6)
        dispatched = []
        cfg = SamplerConfig(
            N=10, early_stop=False, execution_horizon=3, dispatch=lambda i, a, j: dispatched.append((i, j))
        )
        prefix = np.zeros((3, 2))
        _, trace = sample_has(model, np.zeros(4), 10, 3, prefix, cfg=cfg, rng=np.random.default_rng(0))
        assert dispatched[0] == (3, 1)
        indices = [i for i, _ in dispatched]
        assert indices == sorted(indices) == list(range(3, 12))
        assert np.all(np.diff(trace.finalize_step[3:]) >= 0)
        assert trace.finalize_step[3] == 1

    def test_early_stop_step_count(self):
        # u_3 ~= 0.8665 is reached once rho^{j+1} = 0.8, i.e. after step 2
        model = random_model(H=50, seed=7)
        cfg = SamplerConfig(N=10, alpha=0.6, u_d=0.9, early_stop=True, execution_horizon=4)
        _, trace = sample_has(model, np.zeros(4), 10, cfg=cfg, rng=np.random.default_rng(0))
        expected = int(finalization_steps(hit_times(50, 0, 0.6, 0.9), 10)[:4].max())
        assert trace.steps_used == expected == 2
        assert trace.early_stopped

    def test_early_stop_is_bitwise_equal_on_window(self):
        model = random_model(H=20, seed=8)
        prefix = np.full((2, 2), 0.3)
        kwargs = dict(N=10, alpha=0.6, execution_horizon=5)
        stopped, trace = sample_has(
            model, np.ones(4), 10, 2, prefix, cfg=SamplerConfig(early_stop=True, **kwargs), rng=np.random.default_rng(3)
        )
        full, _ = sample_has(
            model, np.ones(4), 10, 2, prefix, cfg=SamplerConfig(early_stop=False, **kwargs), rng=np.random.default_rng(3)
        )
        assert trace.steps_used < 10
        assert np.array_equal(stopped[2:7], full[2:7])
        assert np.all(trace.finalize_step[2:7] > 0)

    def test_prefix_rows_are_returned_unchanged(self):
        stats = dict(act_mean=np.array([0.1, -0.2]), act_scale=np.array([0.3, 0.7]))
        model = random_model(H=8, seed=9, **stats)
        prefix = np.array([[0.123456789, -1.0], [2.5, 0.333333333]])
        out, _ = sample_has(model, np.zeros(4), 5, 2, prefix, cfg=SamplerConfig(N=5), rng=np.random.default_rng(0))
        assert np.array_equal(out[:2], prefix)

    def test_execution_horizon_must_fit(self):
        model = random_model(H=6)
        with pytest.raises(DomainError):
            sample_has(model, np.zeros(4), 10, 3, np.zeros((3, 2)), cfg=SamplerConfig(execution_horizon=4))

    def test_step_count_must_match_config(self):
        with pytest.raises(DomainError, match="N=10"):
            sample_has(random_model(H=6), np.zeros(4), 5, cfg=SamplerConfig(N=10))

    def test_prefix_shape_checked(self):
        with pytest.raises(ShapeError):
            sample_constant(random_model(H=6), np.zeros(4), 4, 2, np.zeros((1, 2)))


class TestCheckpoint:
    """Flow model persistence."""

    def test_save_and_load(self, tmp_path):
        stats = dict(
            obs_mean=np.arange(4.0), obs_scale=np.full(4, 2.0), act_mean=np.array([0.5, -0.5]), act_scale=np.ones(2)
        )
        model = random_model(H=5, seed=10, **stats)
        path = model.save(tmp_path / "checkpoint.bin")
        loaded = FlowModel.load(path)
        assert (loaded.H, loaded.A, loaded.O) == (5, 2, 4)
        np.testing.assert_allclose(loaded.obs_mean, stats["obs_mean"])
        obs, chunk, tau = np.ones(4), np.zeros((5, 2)), np.full(5, 0.5)
        np.testing.assert_allclose(loaded.velocity(obs, chunk, tau), model.velocity(obs, chunk, tau), atol=1e-4)


def toy_dataset(n=512, H=4, seed=0):
    """Chunks that are a smooth function of the observation."""
    rng = np.random.default_rng(seed)
    obs = rng.uniform(-1, 1, size=(n, 4))
    direction = obs[:, 2:] - obs[:, :2]
    decay = 0.8 ** np.arange(H)
    chunks = 0.2 * direction[:, None, :] * decay[None, :, None]
    return ChunkDataset(obs, chunks)


class TestTraining:
    """Mixed-schedule training loop."""

    def test_same_seed_same_checkpoint(self, tmp_path):
        data = toy_dataset(n=96)
        cfg = TrainConfig(epochs=2, batch_size=32, d_max=1, hidden=(16, 16), lr=1e-3, seed=3)
        first = train(data, cfg).model.save(tmp_path / "a.bin")
        second = train(data, cfg).model.save(tmp_path / "b.bin")
        assert first.read_bytes() == second.read_bytes()

    def test_loss_decreases_and_log_written(self, tmp_path):
        data = toy_dataset(n=512)
        train_set, holdout = data.split(0.2, np.random.default_rng(0))
        log_path = tmp_path / "train_log.jsonl"
        cfg = TrainConfig(
            epochs=40, batch_size=32, d_max=1, p=0.5, hidden=(64, 64), lr=3e-3, seed=1, log_path=str(log_path)
        )
        result = train(train_set, cfg, holdout=holdout)
        assert result.final_holdout_loss < result.initial_holdout_loss / 2
        lines = [json.loads(line) for line in log_path.read_text().splitlines()]
        assert [line["epoch"] for line in lines] == list(range(1, 41))

    def test_plain_flow_matching_configuration(self):
        result = train(toy_dataset(n=64), TrainConfig(epochs=1, batch_size=16, p=0.0, d_max=0, hidden=(8,)))
        assert len(result.epoch_losses) == 1

    def test_invalid_prefix_bound(self):
        with pytest.raises(DomainError):
            train(toy_dataset(n=16, H=4), TrainConfig(d_max=4))


class TestPilotMetrics:
    """Straightness and clean-estimate deviation."""

    def test_zero_velocity_is_straight(self):
        report = straightness(FixedVelocity(np.zeros((6, 2))), np.zeros((5, 4)), 4)
        np.testing.assert_array_equal(report.mean, np.zeros(6))

    def test_oracle_is_straight_and_exact(self, target):
        oracle = OracleVelocity(target)
        report = straightness(oracle, np.zeros((5, 4)), 5)
        np.testing.assert_allclose(report.mean, 0.0, atol=1e-20)
        np.testing.assert_allclose(deviation_curves(oracle, np.zeros((5, 4)), 5), 0.0, atol=1e-12)

    def test_last_deviation_row_is_zero(self):
        model = random_model(H=6, seed=12)
        curves = deviation_curves(model, np.random.default_rng(0).normal(size=(4, 4)), 6)
        assert curves.shape == (6, 6)
        assert np.all(curves[-1] == 0.0)

    def test_empty_eval_set(self):
        with pytest.raises(DomainError):
            straightness(random_model(), np.zeros((0, 4)), 4)

    def test_csv_outputs(self, tmp_path):
        model = random_model(H=5, seed=13)
        eval_obs = np.random.default_rng(1).normal(size=(200, 4))
        report = straightness(model, eval_obs, 3)
        curves = deviation_curves(model, eval_obs[:10], 3)
        with open(write_straightness_csv(report, tmp_path / "s.csv")) as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["index", "straightness", "p05", "p95"]
        assert len(rows) == 6
        with open(write_deviation_csv(curves, tmp_path / "d.csv")) as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["step", "index", "deviation"]
        assert len(rows) == 1 + 3 * 5
        assert np.all(report.p05 <= report.p95)

    def test_trend_margin(self):
        early, late, margin = trend_margin(np.arange(10.0))
        assert (early, late, margin) == (0.5, 8.5, 8.0)
