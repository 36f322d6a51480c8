import numpy as np
import pytest

from core.exceptions import DomainError
from schedule.timesteps import (
    ScheduleKind,
    constant_timesteps,
    default_first_hit,
    finalization_steps,
    global_timesteps,
    hit_time_table,
    hit_times,
    local_timesteps,
    prefix_mask,
    sample_training_schedule,
    steps_for_window,
)


@pytest.fixture
def rng():
    """Seeded random source."""
    return np.random.default_rng(20240611)


class TestHitTimes:
    """Hit-time construction."""

    def test_two_action_chunk_endpoints(self):
        u = hit_times(2, 0, 1.0, 0.9)
        np.testing.assert_allclose(u.values, [0.9, 0.0])

    def test_linear_when_alpha_is_one(self):
        u = hit_times(50, 0, 1.0, 0.9)
        np.testing.assert_allclose(u.values, np.linspace(0.9, 0.0, 50), atol=1e-12)

    def test_concave_profile_value(self):
        u = hit_times(50, 0, 0.6, 0.9)
        assert u.values[10] == pytest.approx((39 / 49) ** 0.6 * 0.9, abs=1e-12)
        assert u.values[10] == pytest.approx(0.78480, abs=1e-4)

    def test_single_valid_action_takes_first_hit(self):
        u = hit_times(5, 4, 0.6, 0.9)
        np.testing.assert_allclose(u.values, [0, 0, 0, 0, 0.9])

    def test_prefix_slots_are_zero(self):
        u = hit_times(10, 3, 0.7, 0.9)
        assert np.all(u.values[:3] == 0.0)
        assert u.values[3] == pytest.approx(0.9)
        assert u.values[-1] == 0.0

    @pytest.mark.parametrize(
        "args",
        [(4, 4, 0.6, 0.9), (4, 5, 0.6, 0.9), (4, 0, 0.0, 0.9), (4, 0, 1.2, 0.9), (4, 0, 0.6, 1.0), (4, 0, 0.6, 0.0)],
    )
    def test_domain_errors(self, args):
        with pytest.raises(DomainError):
            hit_times(*args)

    def test_smaller_alpha_gives_later_hits(self):
        low = hit_times(30, 2, 0.4, 0.9).values
        high = hit_times(30, 2, 0.8, 0.9).values
        assert np.all(low >= high - 1e-15)

    def test_hit_time_table_rows(self):
        rows = hit_time_table(10, 0.9, alphas=(0.4, 1.0))
        assert len(rows) == 20
        assert rows[0] == (0.4, 0, pytest.approx(0.9))
        assert rows[-1][2] == 0.0


class TestLocalTimesteps:
    """Local timestep vectors under HAS and the constant schedule."""

    def test_rho_one_gives_ones_on_valid_indices(self):
        u = hit_times(8, 2, 0.6, 0.9)
        tau = local_timesteps(1.0, u)
        np.testing.assert_allclose(tau.values, [0, 0, 1, 1, 1, 1, 1, 1])

    def test_rho_equal_to_hit_time_is_zero(self):
        u = hit_times(8, 0, 1.0, 0.7)
        tau = local_timesteps(float(u.values[3]), u)
        assert tau.values[3] == 0.0

    def test_half_way_between_hit_and_one(self):
        u = hit_times(5, 4, 0.6, 0.9)
        assert local_timesteps(0.95, u).values[4] == pytest.approx(0.5)

    def test_constant_schedule(self):
        np.testing.assert_allclose(constant_timesteps(0.3, 4, 0).values, [0.3] * 4)
        np.testing.assert_allclose(constant_timesteps(0.3, 4, 2).values, [0, 0, 0.3, 0.3])
        np.testing.assert_allclose(constant_timesteps(0.0, 4, 1).values, [0, 0, 0, 0])

    def test_constant_schedule_rejects_full_prefix(self):
        with pytest.raises(DomainError):
            constant_timesteps(0.5, 4, 4)

    def test_rho_out_of_range(self):
        with pytest.raises(DomainError):
            local_timesteps(1.5, hit_times(4, 0, 0.6, 0.9))


class TestPrefixMask:
    """Action prefix mask."""

    def test_masks(self):
        np.testing.assert_array_equal(prefix_mask(4, 0).bits, [1, 1, 1, 1])
        np.testing.assert_array_equal(prefix_mask(4, 2).bits, [0, 0, 1, 1])
        mask = prefix_mask(1, 0)
        np.testing.assert_array_equal(mask.bits, [1])
        assert mask.count_ones == 1

    def test_full_prefix_rejected(self):
        with pytest.raises(DomainError):
            prefix_mask(4, 4)


class TestTrainingScheduleSampler:
    """Mixed HAS / constant training schedule."""

    def test_p_zero_is_always_constant(self, rng):
        for _ in range(200):
            sample = sample_training_schedule(rng, 10, 0.6, 0.9, 0.0, 3)
            assert sample.kind is ScheduleKind.CONSTANT
            np.testing.assert_allclose(sample.tau.values[sample.d :], sample.rho)

    def test_p_one_without_prefix(self, rng):
        for _ in range(200):
            sample = sample_training_schedule(rng, 10, 0.6, 0.9, 1.0, 0)
            assert sample.kind is ScheduleKind.HAS
            assert sample.d == 0
            expected = local_timesteps(sample.rho, hit_times(10, 0, 0.6, 0.9)).values
            np.testing.assert_allclose(sample.tau.values, expected)

    def test_mixing_fraction(self, rng):
        draws = 100_000
        has = sum(
            sample_training_schedule(rng, 6, 0.6, 0.9, 0.5, 2).kind is ScheduleKind.HAS
            for _ in range(draws)
        )
        assert abs(has / draws - 0.5) < 0.01

    def test_prefix_length_range_and_mask(self, rng):
        seen = set()
        for _ in range(500):
            sample = sample_training_schedule(rng, 12, 0.6, 0.9, 0.5, 4)
            seen.add(sample.d)
            assert sample.mask.count_ones == 12 - sample.d
        assert seen == {0, 1, 2, 3, 4}

    def test_d_max_must_leave_a_valid_action(self, rng):
        with pytest.raises(DomainError):
            sample_training_schedule(rng, 5, 0.6, 0.9, 0.5, 5)


class TestFinalization:
    """Sampler-step bookkeeping derived from hit times."""

    def test_global_grid_ends_at_zero(self):
        grid = global_timesteps(10)
        assert grid[0] == 1.0
        assert grid[-1] == 0.0
        assert len(grid) == 11

    def test_first_action_after_one_step(self):
        for N in (2, 5, 10, 20):
            u = hit_times(30, 3, 0.6, default_first_hit(N))
            steps = finalization_steps(u, N)
            assert steps[3] == 1
            assert np.all(steps[:3] == 0)
            assert np.all(np.diff(steps[3:]) >= 0)
            assert steps[-1] == N

    def test_window_steps_for_short_execution_horizon(self):
        # u_3 = (46/49)^0.6 * 0.9 ~= 0.8665, first crossed by rho^3 = 0.8
        u = hit_times(50, 0, 0.6, 0.9)
        assert steps_for_window(u, 10, 4) == 2
        assert steps_for_window(u, 10, 1) == 1
        assert steps_for_window(u, 10, 50) == 10


class TestScheduleProperties:
    """Randomized property suite over (H, d, alpha, u_d, rho)."""

    def test_random_tuples(self, rng):
        for _ in range(10_000):
            H = int(rng.integers(1, 65))
            d = int(rng.integers(0, H))
            alpha = float(rng.uniform(0.05, 1.0))
            u_d = float(rng.uniform(0.01, 0.99))
            rho = float(rng.uniform(0.0, 1.0))

            u = hit_times(H, d, alpha, u_d)
            valid = u.values[d:]
            assert np.all(np.diff(valid) <= 1e-15)
            assert np.all(u.values[:d] == 0.0)
            if d < H - 1:
                assert valid[-1] == 0.0

            tau = local_timesteps(rho, u).values
            assert np.all(tau[:d] == 0.0)
            assert np.all(np.diff(tau[d:]) >= -1e-12)
            assert np.all(tau[d:][rho <= valid] == 0.0)

            assert np.all(local_timesteps(0.0, u).values == 0.0)
            np.testing.assert_allclose(local_timesteps(1.0, u).values[d:], 1.0)

            embedded = local_timesteps(rho, u.zeroed()).values
            np.testing.assert_allclose(embedded, constant_timesteps(rho, H, d).values, atol=1e-12)

            N = int(rng.integers(2, 21))
            first = hit_times(H, d, alpha, (N - 1) / N)
            assert local_timesteps((N - 1) / N, first).values[d] == 0.0
