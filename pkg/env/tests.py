import json

import numpy as np
import pytest

from core.exceptions import DomainError, TraceError
from env.dataset import generate_dataset, load_dataset, read_header
from env.reaction import behavioral_reaction, protocol_reaction
from env.world import (
    MIN_JUMP,
    EventSchedule,
    WorldState,
    expert_action,
    expert_chunk,
    rollout_episode,
)


@pytest.fixture
def small_dataset(tmp_path):
    """Three short episodes with frequent jumps."""
    path = tmp_path / "data.jsonl"
    generate_dataset(path, num_episodes=3, episode_len=40, H=6, jump_rate=0.1, seed=11)
    return path


class TestExpert:
    """Expert demonstrator."""

    def test_proportional_action(self):
        state = WorldState(np.zeros(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(expert_action(state, 1.0, 10.0), [1.0, 0.0])

    def test_zero_at_target(self):
        state = WorldState(np.array([0.2, 0.2]), np.array([0.2, 0.2]))
        np.testing.assert_array_equal(expert_action(state, 3.0, 1.0), [0.0, 0.0])

    def test_clipping_keeps_direction(self):
        state = WorldState(np.zeros(2), np.array([0.3, 0.4]))
        np.testing.assert_allclose(expert_action(state, 10.0, 1.0), [0.6, 0.8])

    def test_invalid_gain(self):
        with pytest.raises(DomainError):
            expert_action(WorldState(np.zeros(2), np.ones(2)), 0.0, 1.0)

    def test_zero_chunk_at_target(self):
        state = WorldState(np.array([0.5, -0.5]), np.array([0.5, -0.5]))
        assert not expert_chunk(state, 10, 2.0, 1.0).any()

    def test_two_step_hand_rollout(self):
        # p=0 -> a=0.5, p=0.5 -> a=0.25 with k=0.5 and dt=1
        state = WorldState(np.zeros(2), np.array([1.0, 0.0]))
        np.testing.assert_allclose(expert_chunk(state, 2, 0.5, 10.0, dt=1.0), [[0.5, 0.0], [0.25, 0.0]])

    def test_strong_gain_converges(self):
        state = WorldState(np.array([-0.9, -0.9]), np.array([0.9, 0.9]))
        chunk = expert_chunk(state, 50, 20.0, 100.0)
        assert np.linalg.norm(chunk[-1]) < 1e-6
        assert np.linalg.norm(chunk[0]) > 1.0


class TestEventSchedule:
    """Target jump generation."""

    def test_increasing_and_far(self):
        rng = np.random.default_rng(0)
        schedule = EventSchedule.draw(rng, 2000, 0.05, np.zeros(2))
        assert len(schedule.jump_times) > 20
        assert all(b > a for a, b in zip(schedule.jump_times, schedule.jump_times[1:]))
        previous = np.zeros(2)
        for target in schedule.jump_targets:
            assert np.linalg.norm(target - previous) >= MIN_JUMP
            assert np.all(np.abs(target) <= 1.0)
            previous = target

    def test_no_jumps_at_zero_rate(self):
        schedule = EventSchedule.draw(np.random.default_rng(0), 500, 0.0, np.zeros(2))
        assert schedule.jump_times == []

    def test_unsorted_times_rejected(self):
        with pytest.raises(DomainError):
            EventSchedule([5, 3], [np.zeros(2), np.ones(2)])


class TestDataset:
    """Dataset generation and loading."""

    def test_fixed_seed_is_byte_identical(self, tmp_path, small_dataset):
        again = tmp_path / "again.jsonl"
        generate_dataset(again, num_episodes=3, episode_len=40, H=6, jump_rate=0.1, seed=11)
        assert again.read_bytes() == small_dataset.read_bytes()

    def test_record_count_and_layout(self, small_dataset):
        lines = small_dataset.read_text().splitlines()
        assert len(lines) == 1 + 3 * 40
        record = json.loads(lines[1])
        assert set(record) == {"ep", "t", "obs", "chunk"}
        assert len(record["obs"]) == 4
        assert np.asarray(record["chunk"]).shape == (6, 2)
        assert read_header(small_dataset)["H"] == 6

    def test_zero_jump_rate_keeps_target(self, tmp_path):
        path = tmp_path / "still.jsonl"
        generate_dataset(path, num_episodes=2, episode_len=30, H=4, jump_rate=0.0, seed=1)
        _, data, episodes = load_dataset(path)
        for ep in (0, 1):
            targets = data.obs[episodes == ep][:, 2:]
            assert np.all(targets == targets[0])

    def test_replay_reproduces_next_state(self, small_dataset):
        header, data, episodes = load_dataset(small_dataset)
        for k in range(len(data) - 1):
            if episodes[k] != episodes[k + 1]:
                continue
            predicted = data.obs[k, :2] + data.chunks[k, 0] * header["dt_ctrl"]
            np.testing.assert_allclose(data.obs[k + 1, :2], predicted, atol=1e-9)

    def test_episode_chunks_follow_visible_target(self):
        episode = rollout_episode(5, 60, 8, 0.2, 2.0, 1.0)
        for obs, chunk in zip(episode.observations, episode.chunks):
            state = WorldState(obs[:2], obs[2:])
            np.testing.assert_allclose(chunk, expert_chunk(state, 8, 2.0, 1.0))


class TestReaction:
    """Protocol and behavioral reaction."""

    exec_times = [0.10, 0.20, 0.30, 0.40, 0.50]
    obs_times = [0.00, 0.00, 0.20, 0.20, 0.40]

    def test_event_at_trigger(self):
        assert protocol_reaction(self.exec_times, self.obs_times, 0.20) == pytest.approx(0.10)

    def test_event_after_trigger_waits_for_next_chunk(self):
        assert protocol_reaction(self.exec_times, self.obs_times, 0.21) == pytest.approx(0.29)

    def test_uncovered_event(self):
        with pytest.raises(TraceError):
            protocol_reaction(self.exec_times, self.obs_times, 0.45)

    def test_stationary_policy_has_no_behavioral_onset(self):
        result = behavioral_reaction(
            self.exec_times, self.obs_times, np.zeros((5, 2)), np.zeros((5, 2)), 0.2, np.array([1.0, 0.0])
        )
        assert result.protocol == pytest.approx(0.1)
        assert result.behavioral is None

    def test_behavioral_onset_within_angle(self):
        actions = np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.2], [1.0, 0.0]])
        result = behavioral_reaction(
            self.exec_times, self.obs_times, actions, np.zeros((5, 2)), 0.2, np.array([1.0, 0.0])
        )
        assert result.behavioral == pytest.approx(0.2)
