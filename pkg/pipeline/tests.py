import csv

import numpy as np
import pytest
from rest_framework.test import APIClient

from core.exceptions import ConfigError, DomainError, InfeasibleError
from flow.policy import FlowModel
from pipeline.presets import PRESETS, get_preset
from pipeline.report import compare_modes, write_comparison, write_speedups
from pipeline.simulator import FlowPolicy, event_window, events_at, simulate, uniform_events
from pipeline.timing import (
    ClientMode,
    TimingModel,
    UniformDist,
    delay_and_smin,
    dominance_monte_carlo,
    dominance_probability,
    infer_latency,
    reaction_distribution,
    stream_timeline,
)
from schedule.timesteps import hit_times

MS = 1e-3
SYNC, NAIVE, PREFIX, FASTER = ClientMode.SYNC, ClientMode.ASYNC_NAIVE, ClientMode.ASYNC_PREFIX, ClientMode.FASTER


@pytest.fixture
def api_client():
    """Return an API client instance."""
    return APIClient()


@pytest.fixture
def desk():
    """Desk-scale timing: 133 ms full latency, 99.9 ms to first action."""
    return PRESETS["desk"]


class TestInferLatency:
    """Latency components."""

    def test_pure_sampler_cost(self):
        t = TimingModel(dt_vlm=0.0, dt_ae=8 * MS, N=10)
        assert infer_latency(t, SYNC) == pytest.approx(80 * MS)
        assert infer_latency(t, FASTER) == pytest.approx(8 * MS)

    def test_fit_recovers_components(self):
        t = get_preset("pi05-4090")
        assert t.dt_ae == pytest.approx(1.98889 * MS, abs=1e-8)
        assert t.dt_vlm == pytest.approx(60.1111 * MS, abs=1e-7)
        assert infer_latency(t, NAIVE) == pytest.approx(80.0 * MS)
        assert infer_latency(t, FASTER) == pytest.approx(62.1 * MS)

    def test_fit_round_trip_xvla(self):
        t = get_preset("xvla-4060")
        assert infer_latency(t, SYNC) == pytest.approx(399.5 * MS)
        assert infer_latency(t, FASTER) == pytest.approx(129.2 * MS)

    def test_preset_names(self):
        assert sorted(PRESETS) == ["desk", "pi05-4060", "pi05-4090", "xvla-4060", "xvla-4090"]
        with pytest.raises(ConfigError, match="unknown timing preset"):
            get_preset("desk-h30")

    def test_negative_component_rejected(self):
        with pytest.raises(DomainError):
            TimingModel(dt_vlm=-1.0)


class TestDelayAndSmin:
    """Discretized delay and minimum execution horizon."""

    @pytest.mark.parametrize(
        "preset,async_smin,faster_smin",
        [("pi05-4090", 3, 3), ("pi05-4060", 10, 8), ("xvla-4090", 4, 2), ("xvla-4060", 12, 6)],
    )
    def test_measured_presets(self, preset, async_smin, faster_smin):
        t = get_preset(preset)
        assert delay_and_smin(t, SYNC)[1] == async_smin
        assert delay_and_smin(t, NAIVE)[1] == async_smin
        assert delay_and_smin(t, FASTER)[1] == faster_smin

    def test_floor_and_ceil(self):
        t = TimingModel(dt_vlm=0.0, dt_ae=8 * MS, N=10)
        assert delay_and_smin(t, NAIVE) == (2, 3)

    def test_deployed_pads(self):
        t = get_preset("pi05-4090").with_changes(delay_pad=2, smin_pad=2)
        assert delay_and_smin(t, SYNC) == (4, 5)

    def test_controller_cannot_be_fed(self):
        with pytest.raises(InfeasibleError):
            delay_and_smin(TimingModel(dt_vlm=5.0, dt_ae=0.01, horizon=10), FASTER)

    def test_schedule_for_wrong_delay(self):
        t = get_preset("pi05-4090")
        with pytest.raises(DomainError):
            delay_and_smin(t, FASTER, schedule=hit_times(50, 0, 0.6, 0.9))

    def test_explicit_schedule(self):
        t = get_preset("pi05-4060")
        assert delay_and_smin(t, FASTER, schedule=hit_times(50, 7, 0.6, 0.9)) == (7, 8)


class TestReactionDistribution:
    """Uniform reaction-time laws."""

    def test_sync_bounds(self):
        dist = reaction_distribution(get_preset("pi05-4090"), SYNC)
        assert (dist.lo / MS, dist.hi / MS) == pytest.approx((80.0, 260.0))
        assert dist.mean / MS == pytest.approx(170.0)

    def test_faster_bounds(self):
        dist = reaction_distribution(get_preset("pi05-4090"), FASTER)
        assert (dist.lo / MS, dist.hi / MS, dist.mean / MS) == pytest.approx((62.1, 162.1, 112.1))

    def test_xvla_low_end_gpu(self):
        dist = reaction_distribution(get_preset("xvla-4060"), FASTER)
        assert (dist.lo / MS, dist.hi / MS) == pytest.approx((129.2, 329.2))

    def test_below_smin_is_infeasible(self):
        with pytest.raises(InfeasibleError):
            reaction_distribution(get_preset("pi05-4060"), NAIVE, s=9)

    def test_sync_accepts_any_horizon(self):
        assert reaction_distribution(get_preset("pi05-4060"), SYNC, s=1).lo == pytest.approx(303.3 * MS)

    @pytest.mark.parametrize("preset", ["pi05-4090", "pi05-4060", "xvla-4090", "xvla-4060", "desk"])
    def test_monotone_in_horizon_and_mode(self, preset):
        t = get_preset(preset)
        _, s_min = delay_and_smin(t, NAIVE)
        means = [reaction_distribution(t, NAIVE, s).mean for s in range(s_min, s_min + 5)]
        assert all(b >= a for a, b in zip(means, means[1:]))
        assert reaction_distribution(t, FASTER).mean <= reaction_distribution(t, NAIVE).mean


class TestDominance:
    """P(X < Y) between uniform laws."""

    @pytest.mark.parametrize(
        "preset,mode_a,mode_b,expected",
        [
            ("pi05-4090", NAIVE, SYNC, 0.72),
            ("pi05-4090", FASTER, SYNC, 0.81),
            ("pi05-4090", FASTER, NAIVE, 0.66),
            ("pi05-4060", NAIVE, SYNC, 0.74),
            ("pi05-4060", FASTER, SYNC, 0.88),
            ("pi05-4060", FASTER, NAIVE, 0.77),
            ("xvla-4090", NAIVE, SYNC, 0.73),
            ("xvla-4090", FASTER, SYNC, 1.00),
            ("xvla-4090", FASTER, NAIVE, 1.00),
            ("xvla-4060", NAIVE, SYNC, 0.75),
            ("xvla-4060", FASTER, SYNC, 1.00),
            ("xvla-4060", FASTER, NAIVE, 1.00),
        ],
    )
    def test_published_probabilities(self, preset, mode_a, mode_b, expected):
        t = get_preset(preset)
        p = dominance_probability(reaction_distribution(t, mode_a), reaction_distribution(t, mode_b))
        assert p == pytest.approx(expected, abs=0.005)

    def test_hand_integrated_value(self):
        p = dominance_probability(UniformDist(62.1, 162.1), UniformDist(80.0, 180.0))
        assert p == pytest.approx(1 - (1 - 0.179) ** 2 / 2, abs=1e-9)

    def test_symmetry_and_disjoint(self):
        a = UniformDist(1.0, 3.0)
        assert dominance_probability(a, a) == pytest.approx(0.5)
        assert dominance_probability(UniformDist(44.8, 111.5), UniformDist(113.7, 247.0)) == 1.0
        assert dominance_probability(UniformDist(113.7, 247.0), UniformDist(44.8, 111.5)) == 0.0
        assert dominance_probability(UniformDist(0.0, 1.0), UniformDist(1.0, 2.0)) == 1.0
        assert dominance_probability(UniformDist(1.0, 2.0), UniformDist(0.5, 0.5)) == 0.0

    def test_point_masses(self):
        assert dominance_probability(UniformDist(1.0, 1.0), UniformDist(1.0, 1.0)) == 0.5
        assert dominance_probability(UniformDist(0.0, 2.0), UniformDist(0.5, 0.5)) == pytest.approx(0.25)

    @pytest.mark.parametrize(
        "a,b",
        [((62.1, 162.1), (80.0, 180.0)), ((80.0, 180.0), (80.0, 260.0)), ((238.6, 505.3), (303.3, 939.9))],
    )
    def test_monte_carlo_agreement(self, a, b):
        a, b = UniformDist(*a), UniformDist(*b)
        estimate = dominance_monte_carlo(a, b, 10**6, np.random.default_rng(0))
        assert estimate == pytest.approx(dominance_probability(a, b), abs=0.005)


class TestStreamTimeline:
    """Required vs received time of streamed actions."""

    @pytest.mark.parametrize("preset", ["pi05-4090", "pi05-4060", "xvla-4090", "xvla-4060"])
    def test_actions_arrive_before_they_are_needed(self, preset):
        timeline = stream_timeline(get_preset(preset))
        assert all(p.received <= p.required + 1e-9 for p in timeline)
        assert [p.index for p in timeline] == sorted(p.index for p in timeline)

    def test_first_packet_is_time_to_first_action(self):
        timeline = stream_timeline(get_preset("pi05-4090"))
        assert timeline[0].index == 1
        assert timeline[0].received == pytest.approx(62.1 * MS)
        assert timeline[0].required == pytest.approx(timeline[0].received)
        assert timeline[2].required == pytest.approx(62.1 * MS + 2 / 30)
        assert len(timeline) == 3


class TestCompareModes:
    """Comparison tables."""

    def test_reaction_column_matches_published_means(self):
        expected = {
            "pi05-4090": (170.0, 130.0, 112.1),
            "pi05-4060": (621.6, 470.0, 371.9),
            "xvla-4090": (237.2, 180.4, 78.1),
            "xvla-4060": (799.2, 599.5, 229.2),
        }
        for preset, means in expected.items():
            comparison = compare_modes(get_preset(preset), preset)
            got = [comparison.summaries[m].reaction.mean / MS for m in (SYNC, NAIVE, FASTER)]
            assert got == pytest.approx(list(means), abs=0.06)

    def test_speedups(self):
        ratios = compare_modes(get_preset("pi05-4090")).speedups()
        assert ratios["ttfa"] == pytest.approx(1.29, abs=0.005)
        assert ratios["react"] == pytest.approx(1.16, abs=0.005)
        ratios = compare_modes(get_preset("xvla-4060")).speedups()
        assert ratios["ttfa"] == pytest.approx(3.09, abs=0.005)
        assert ratios["smin"] == pytest.approx(2.0)

    def test_equal_timings_give_unit_speedups(self):
        ratios = compare_modes(TimingModel(dt_vlm=0.05, dt_ae=0.0)).speedups()
        assert ratios == pytest.approx({"ttfa": 1.0, "smin": 1.0, "react": 1.0})

    def test_csv_layout(self, tmp_path):
        comparison = compare_modes(get_preset("pi05-4090"), "pi05-4090")
        table, matrix = write_comparison(comparison, tmp_path)
        with open(table) as handle:
            rows = list(csv.DictReader(handle))
        assert list(rows[0]) == ["mode", "ttfa_ms", "smin", "expected_react_ms", "lo_ms", "hi_ms", "stall_fraction"]
        assert [r["expected_react_ms"] for r in rows] == ["170.0", "130.0", "130.0", "112.1"]
        assert rows[0]["stall_fraction"] == "0.5000"
        with open(matrix) as handle:
            pairs = list(csv.DictReader(handle))
        assert len(pairs) == 12
        assert list(pairs[0]) == ["mode_a", "mode_b", "p_faster"]
        speedups = write_speedups([comparison], tmp_path / "speedup.csv")
        assert speedups.read_text().splitlines()[1] == "pi05-4090,1.29,1.00,1.16"


class TestSimulator:
    """Discrete-event pipeline simulation."""

    @pytest.mark.parametrize("mode", [SYNC, NAIVE, FASTER])
    def test_events_at_triggers_react_at_latency(self, desk, mode):
        triggers = simulate(desk, mode, duration=6.0).trigger_times[2:30]
        trace = simulate(desk, mode, duration=6.0, events=events_at(triggers, np.random.default_rng(0)))
        assert len(trace.reactions) == len(triggers)
        assert trace.reactions == pytest.approx([infer_latency(desk, mode)] * len(triggers), abs=1e-9)

    @pytest.mark.parametrize("preset", ["pi05-4090", "pi05-4060", "xvla-4090", "xvla-4060", "desk"])
    @pytest.mark.parametrize("mode", [SYNC, NAIVE, PREFIX, FASTER])
    def test_distribution_law(self, preset, mode):
        timing = get_preset(preset)
        rng = np.random.default_rng(7)
        s = delay_and_smin(timing, mode)[1]
        duration = 300.0
        events = uniform_events(rng, 20000, *event_window(timing, mode, s, duration))
        trace = simulate(timing, mode, duration=duration, events=events, seed=7, behavioral=False)
        dist = reaction_distribution(timing, mode)
        samples = np.asarray(trace.reactions)
        assert trace.uncovered_events == 0
        assert samples.mean() == pytest.approx(dist.mean, rel=0.02)
        assert samples.min() >= dist.lo - 1e-9
        assert samples.max() <= dist.hi + timing.dt_ctrl + 1e-9

    def test_sync_stalls_while_waiting(self, desk):
        trace = simulate(desk, SYNC, duration=20.0)
        # four periods waiting, four executing
        assert trace.stall_fraction == pytest.approx(0.5, abs=0.02)

    def test_sync_runs_the_chunk_on_arrival(self):
        timing = get_preset("pi05-4090")
        trace = simulate(timing, SYNC, duration=2.0)
        first = trace.executed[:3]
        assert [e.index for e in first] == [0, 1, 2]
        assert [e.time for e in first] == pytest.approx([0.08, 0.08 + timing.dt_ctrl, 0.08 + 2 * timing.dt_ctrl])
        assert trace.trigger_times[1] == pytest.approx(0.08 + 3 * timing.dt_ctrl)

    def test_async_request_lands_on_its_tick(self):
        timing = get_preset("pi05-4090")
        trace = simulate(timing, NAIVE, duration=2.0)
        # 80 ms ahead of tick 3, then every s = 3 ticks
        assert trace.trigger_times[:2] == pytest.approx([0.02, 0.02 + 3 * timing.dt_ctrl])
        assert (trace.executed[0].tick, trace.executed[0].index) == (3, 2)

    @pytest.mark.parametrize("preset", ["pi05-4090", "pi05-4060", "xvla-4090", "xvla-4060", "desk"])
    @pytest.mark.parametrize("mode", [NAIVE, PREFIX, FASTER])
    def test_async_modes_never_stall(self, preset, mode):
        trace = simulate(get_preset(preset), mode, duration=20.0)
        assert trace.executed
        assert trace.stall_ticks == []
        assert trace.stall_fraction == 0.0

    def test_no_events_no_reactions(self, desk):
        trace = simulate(desk, SYNC, duration=3.0)
        assert trace.reactions == []
        assert trace.stall_fraction > 0

    def test_horizon_below_smin(self, desk):
        with pytest.raises(InfeasibleError):
            simulate(desk, NAIVE, s=2, duration=1.0)

    def test_trace_is_well_formed(self, desk):
        events = uniform_events(np.random.default_rng(1), 10, 0.5, 5.0)
        trace = simulate(desk, FASTER, duration=8.0, events=events)
        ticks = [e.tick for e in trace.executed]
        assert all(b > a for a, b in zip(ticks, ticks[1:]))
        assert all(e.chunk_id < len(trace.trigger_times) for e in trace.executed)
        assert all(trace.d <= e.index < trace.d + trace.s for e in trace.executed)
        assert len(trace.behavioral) == len(trace.reactions) == 10

    def test_same_seed_same_trace(self, desk):
        events = uniform_events(np.random.default_rng(3), 50, 0.0, 8.0)
        first = simulate(desk, PREFIX, duration=10.0, events=events, seed=4)
        second = simulate(desk, PREFIX, duration=10.0, events=events, seed=4)
        assert first.reactions == second.reactions
        assert [e.action.tolist() for e in first.executed] == [e.action.tolist() for e in second.executed]

    def test_scripted_expert_turns_toward_new_target(self, desk):
        events = events_at([1.0 + 2.0 * k for k in range(8)], np.random.default_rng(5))
        trace = simulate(desk, FASTER, duration=20.0, events=events, gain=2.0, v_max=1.0)
        assert sum(b is not None for b in trace.behavioral) >= 7

    def test_flow_policy_streams_without_stalls(self, desk, tmp_path):
        model = FlowModel.initialize(50, 2, 4, np.random.default_rng(0), hidden=(16,))
        trace = simulate(desk, FASTER, policy=FlowPolicy(model), duration=2.0)
        assert len(trace.executed) > 40
        assert trace.stall_ticks == []
        path = trace.write_jsonl(tmp_path / "trace.jsonl")
        assert len(path.read_text().splitlines()) == len(trace.executed)


@pytest.mark.django_db
class TestPipelineAPI:
    """HTTP analytics endpoints."""

    def test_latency(self, api_client):
        response = api_client.post(
            "/api/v1/pipeline/latency/", {"timing": {"preset": "pi05-4060"}, "mode": "faster"}, format="json"
        )
        assert response.status_code == 200
        body = response.json()
        assert body["success"] is True
        assert body["response"]["latency_ms"] == pytest.approx(238.6)
        assert (body["response"]["d"], body["response"]["s_min"]) == (7, 8)

    def test_reaction(self, api_client):
        payload = {"timing": {"preset": "pi05-4090"}, "mode": "sync"}
        body = api_client.post("/api/v1/pipeline/reaction/", payload, format="json").json()
        assert body["response"]["mean_ms"] == pytest.approx(170.0)

    def test_dominance(self, api_client):
        payload = {"a": {"lo": 0.0621, "hi": 0.1621}, "b": {"lo": 0.08, "hi": 0.18}}
        body = api_client.post("/api/v1/pipeline/dominance/", payload, format="json").json()
        assert body["response"]["p"] == pytest.approx(0.663, abs=0.001)

    def test_compare(self, api_client):
        payload = {"timing": {"preset": "xvla-4090"}, "name": "xvla", "modes": ["async_naive", "faster"]}
        body = api_client.post("/api/v1/pipeline/compare/", payload, format="json").json()
        assert [row["mode"] for row in body["response"]["table"]] == ["async_naive", "faster"]
        assert body["response"]["speedups"]["smin"] == pytest.approx(2.0)
        assert len(body["response"]["timeline"]) == 2

    def test_unknown_key_rejected(self, api_client):
        payload = {"timing": {"preset": "pi05-4090", "bogus": 1}, "mode": "sync"}
        response = api_client.post("/api/v1/pipeline/latency/", payload, format="json")
        assert response.status_code == 400
        body = response.json()
        assert body["success"] is False
        assert "bogus" in str(body["error"]["details"])

    def test_infeasible_horizon_envelope(self, api_client):
        payload = {"timing": {"preset": "pi05-4060"}, "mode": "async_naive", "s": 2}
        response = api_client.post("/api/v1/pipeline/reaction/", payload, format="json")
        assert response.status_code == 400
        assert "s_min" in response.json()["error"]["message"]
