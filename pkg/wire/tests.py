import socket
import threading
import time

import numpy as np
import pytest

from core.exceptions import ProtocolError
from flow.policy import FlowModel
from pipeline.simulator import events_at
from pipeline.timing import ClientMode, TimingModel, delay_and_smin, reaction_distribution
from wire.client import ChunkAssembler, ClientConfig, StreamingClient
from wire.protocol import (
    HEADER,
    ActionPacket,
    ChunkBulk,
    ChunkDone,
    ErrorMessage,
    FrameReader,
    Hello,
    MsgType,
    ObsRequest,
    ServerMode,
    decode,
    encode,
    encode_frame,
    read_message,
)
from wire.server import PolicyServer, ServerConfig

# emulated device: 30ms prefill, 6ms per denoising step
DT_VLM = 0.03
DT_AE = 0.006
# a lighter device that leaves the sequential server idle between chunks
QUICK_VLM = 0.02
QUICK_AE = 0.005


def small_model(H=50, seed=0):
    return FlowModel.initialize(H, 2, 4, np.random.default_rng(seed), hidden=(16,))


@pytest.fixture
def streaming_server():
    with PolicyServer(small_model(), ServerConfig(mode=ServerMode.FASTER, dt_vlm=DT_VLM, dt_ae=DT_AE)) as server:
        yield server


@pytest.fixture
def constant_server():
    with PolicyServer(small_model(), ServerConfig(mode=ServerMode.CONSTANT, dt_vlm=DT_VLM, dt_ae=DT_AE)) as server:
        yield server


@pytest.fixture
def quick_constant_server():
    with PolicyServer(small_model(), ServerConfig(mode=ServerMode.CONSTANT, dt_vlm=QUICK_VLM, dt_ae=QUICK_AE)) as server:
        yield server


@pytest.fixture
def quick_streaming_server():
    with PolicyServer(small_model(), ServerConfig(mode=ServerMode.FASTER, dt_vlm=QUICK_VLM, dt_ae=QUICK_AE)) as server:
        yield server


class RawConnection:
    """Blocking test-side socket speaking the frame format."""

    def __init__(self, address):
        self.sock = socket.create_connection(address, timeout=5.0)
        self.reader, self.pending = FrameReader(), []

    def send(self, message):
        self.sock.sendall(encode(message))

    def recv(self):
        return read_message(self.sock, self.reader, self.pending)

    def close(self):
        self.sock.close()


def request(chunk_id=0, d=0, s=1, sent_us=0):
    return ObsRequest(chunk_id, np.zeros(4), d, s, np.zeros((d, 2)) if d else None, sent_us)


class TestFraming:
    def test_golden_action_packet(self):
        frame = encode(ActionPacket(1, 0, np.zeros(2), 1, 0))
        expected = (
            b"\x18\x00\x00\x00\x03"
            + b"\x01\x00\x00\x00"
            + b"\x00\x00"
            + b"\x00" * 8
            + b"\x01"
            + b"\x00" * 8
        )
        assert frame == expected

    def test_header_length_counts_type_byte(self):
        frame = encode(ChunkDone(7, 3, True))
        length, msg_type = HEADER.unpack_from(frame)
        assert length == len(frame) - 4
        assert msg_type == MsgType.CHUNK_DONE

    def test_decode_observation_request(self):
        prefix = np.array([[0.5, -0.25], [1.0, 2.0]])
        msg = decode(encode(ObsRequest(3, np.arange(4.0), 2, 5, prefix, 123456)))
        assert (msg.chunk_id, msg.d, msg.s, msg.sent_us) == (3, 2, 5, 123456)
        np.testing.assert_array_equal(msg.prefix, prefix)
        np.testing.assert_array_equal(msg.obs, np.arange(4.0))

    def test_fragmented_stream(self):
        rng = np.random.default_rng(0)
        messages = []
        for k in range(1000):
            kind = k % 3
            if kind == 0:
                messages.append(ActionPacket(k, k % 50, rng.normal(size=2).astype(np.float32), 1, k))
            elif kind == 1:
                messages.append(ChunkDone(k, k % 10, bool(k % 2)))
            else:
                messages.append(ChunkBulk(k, rng.normal(size=(5, 2)).astype(np.float32), 10, k))
        stream = b"".join(encode(m) for m in messages)

        reader, received, pos = FrameReader(), [], 0
        while pos < len(stream):
            size = int(rng.integers(1, 40))
            received.extend(reader.feed(stream[pos : pos + size]))
            pos += size
        assert reader.pending == 0
        assert [type(m) for m in received] == [type(m) for m in messages]
        assert [m.chunk_id for m in received] == list(range(1000))
        np.testing.assert_array_equal(received[0].action, messages[0].action)
        np.testing.assert_array_equal(received[2].chunk, messages[2].chunk)

    def test_empty_payload_rejected(self):
        with pytest.raises(ProtocolError):
            encode_frame(MsgType.ERROR, b"")
        with pytest.raises(ProtocolError, match="empty"):
            decode(b"\x01\x00\x00\x00\x0f")

    def test_unknown_type_rejected(self):
        with pytest.raises(ProtocolError, match="unknown message type"):
            decode(encode_frame(42, b"\x00"))
        with pytest.raises(ProtocolError):
            FrameReader().feed(encode_frame(42, b"\x00"))

    def test_truncated_and_mismatched_frames(self):
        frame = encode(ChunkDone(1, 2, False))
        with pytest.raises(ProtocolError, match="truncated"):
            decode(frame[:3])
        with pytest.raises(ProtocolError, match="length"):
            decode(frame[:-1])
        with pytest.raises(ProtocolError):
            decode(frame + b"\x00")

    def test_truncated_payload_fields(self):
        payload = ActionPacket(1, 0, np.zeros(2), 1, 0).pack()
        with pytest.raises(ProtocolError):
            decode(encode_frame(MsgType.ACTION_PACKET, payload[:5]))
        with pytest.raises(ProtocolError):
            decode(encode_frame(MsgType.CHUNK_DONE, b"\x01\x02"))

    def test_partial_frame_waits(self):
        frame = encode(ChunkDone(1, 2, False))
        reader = FrameReader()
        assert reader.feed(frame[:4]) == []
        assert reader.pending == 4
        (msg,) = reader.feed(frame[4:])
        assert msg == ChunkDone(1, 2, False)


class TestChunkAssembler:
    def test_in_order_packets(self):
        chunk = ChunkAssembler(0, H=6, A=2, d=2, sent_at=0.0)
        chunk.add_packet(ActionPacket(0, 2, np.ones(2), 1, 0), now=0.1)
        chunk.add_packet(ActionPacket(0, 3, np.ones(2), 2, 0), now=0.2)
        assert chunk.ready(2) and chunk.ready(3) and not chunk.ready(4)
        assert chunk.first_arrival == pytest.approx(0.1)

    def test_out_of_order_and_duplicates_rejected(self):
        chunk = ChunkAssembler(0, H=6, A=2, d=0, sent_at=0.0)
        with pytest.raises(ProtocolError, match="expected index 0"):
            chunk.add_packet(ActionPacket(0, 1, np.ones(2), 1, 0), now=0.1)
        chunk.add_packet(ActionPacket(0, 0, np.ones(2), 1, 0), now=0.1)
        with pytest.raises(ProtocolError):
            chunk.add_packet(ActionPacket(0, 0, np.ones(2), 1, 0), now=0.2)

    def test_packet_after_done_rejected(self):
        chunk = ChunkAssembler(0, H=6, A=2, d=0, sent_at=0.0)
        chunk.finish(ChunkDone(0, 3, True))
        with pytest.raises(ProtocolError, match="after CHUNK_DONE"):
            chunk.add_packet(ActionPacket(0, 0, np.ones(2), 1, 0), now=0.1)

    def test_arrival_flag_follows_first_index(self):
        chunk = ChunkAssembler(0, H=6, A=2, d=1, sent_at=0.0, first_tick=4)
        assert not chunk.arrived.is_set()
        chunk.add_packet(ActionPacket(0, 1, np.ones(2), 1, 0), now=0.1)
        assert chunk.arrived.is_set()
        bulk = ChunkAssembler(1, H=6, A=2, d=0, sent_at=0.0, first_index=2)
        bulk.add_bulk(ChunkBulk(1, np.zeros((6, 2)), 10, 0), now=0.2)
        assert bulk.arrived.is_set() and bulk.done


class TestPolicyServer:
    def test_hello(self, streaming_server):
        conn = RawConnection(streaming_server.address)
        try:
            hello = conn.recv()
            assert hello == Hello(50, 2, 4, 10, ServerMode.FASTER)
        finally:
            conn.close()

    def test_early_stop_sends_single_packet(self, streaming_server):
        conn = RawConnection(streaming_server.address)
        try:
            conn.recv()
            conn.send(request(s=1))
            packets = []
            while True:
                msg = conn.recv()
                if isinstance(msg, ChunkDone):
                    break
                packets.append(msg)
            assert [p.index for p in packets] == [0]
            assert packets[0].step == 1
            assert msg.steps_used == 1
            assert msg.early_stopped
        finally:
            conn.close()

    def test_streamed_window_in_order_with_prefix(self, streaming_server):
        conn = RawConnection(streaming_server.address)
        try:
            conn.recv()
            conn.send(request(d=3, s=4))
            indices = []
            while True:
                msg = conn.recv()
                if isinstance(msg, ChunkDone):
                    break
                indices.append(msg.index)
            assert indices[:4] == [3, 4, 5, 6]
            assert indices == sorted(indices)
            assert msg.early_stopped
        finally:
            conn.close()

    def test_constant_mode_sends_bulk(self, constant_server):
        conn = RawConnection(constant_server.address)
        try:
            assert conn.recv().mode is ServerMode.CONSTANT
            conn.send(request(chunk_id=5, s=10))
            msg = conn.recv()
            assert isinstance(msg, ChunkBulk)
            assert msg.chunk_id == 5
            assert msg.chunk.shape == (50, 2)
            assert msg.steps_used == 10
        finally:
            conn.close()

    def test_infeasible_request_gets_error_and_keeps_connection(self, streaming_server):
        conn = RawConnection(streaming_server.address)
        try:
            conn.recv()
            conn.send(request(d=48, s=5))
            msg = conn.recv()
            assert isinstance(msg, ErrorMessage)
            assert "infeasible" in msg.message
            conn.send(request(chunk_id=1, s=1))
            assert isinstance(conn.recv(), ActionPacket)
        finally:
            conn.close()

    def test_malformed_frame_closes_connection(self, streaming_server):
        conn = RawConnection(streaming_server.address)
        try:
            conn.recv()
            conn.sock.sendall(encode_frame(42, b"\x00"))
            msg = conn.recv()
            assert isinstance(msg, ErrorMessage)
            assert "unknown message type" in msg.message
            assert conn.recv() is None
        finally:
            conn.close()

    def test_streaming_cuts_time_to_first_action(self, streaming_server, constant_server):
        """First action after prefill plus one step (36ms) versus all ten steps (90ms)."""

        def mean_first_arrival(server):
            conn = RawConnection(server.address)
            try:
                conn.recv()
                waits = []
                for k in range(5):
                    start = time.perf_counter()
                    conn.send(request(chunk_id=k, s=1))
                    first = conn.recv()
                    waits.append(time.perf_counter() - start)
                    if isinstance(first, ActionPacket):
                        conn.recv()
                return float(np.mean(waits))
            finally:
                conn.close()

        ratio = mean_first_arrival(streaming_server) / mean_first_arrival(constant_server)
        assert ratio == pytest.approx(0.4, rel=0.25)

    def test_finished_connection_threads_are_pruned(self, streaming_server):
        for _ in range(5):
            conn = RawConnection(streaming_server.address)
            conn.recv()
            conn.close()
        deadline = time.monotonic() + 3.0
        while any(t.is_alive() for t in streaming_server._threads[1:]) and time.monotonic() < deadline:
            time.sleep(0.05)
        conn = RawConnection(streaming_server.address)
        try:
            conn.recv()
            deadline = time.monotonic() + 1.0
            while len(streaming_server._threads) != 2 and time.monotonic() < deadline:
                time.sleep(0.02)
            assert len(streaming_server._threads) == 2
        finally:
            conn.close()


def fake_server(script):
    """One-shot listener that runs `script(conn)` for the first connection."""
    listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    listener.bind(("127.0.0.1", 0))
    listener.listen()

    def serve():
        conn, _ = listener.accept()
        try:
            script(conn)
        finally:
            conn.close()
            listener.close()

    threading.Thread(target=serve, daemon=True).start()
    return listener.getsockname()[:2]


def loopback_timing(dt_vlm=DT_VLM, dt_ae=DT_AE):
    return TimingModel(dt_vlm=dt_vlm, dt_ae=dt_ae, N=10, horizon=50)


def quick_timing():
    return loopback_timing(QUICK_VLM, QUICK_AE)


def staggered_events(count, period, start=0.3):
    """Events whose phases against a trigger grid of `period` are evenly spread."""
    times = start + np.arange(count) * period * (1 + 1 / count)
    return events_at(times, np.random.default_rng(0))


def client_for(server, mode, **kwargs):
    host, port = server.address
    return ClientConfig(host=host, port=port, mode=mode, **kwargs)


class TestStreamingClient:
    def test_faster_client_does_not_stall(self, streaming_server):
        host, port = streaming_server.address
        cfg = ClientConfig(host=host, port=port, mode=ClientMode.FASTER, s=4, duration=2.0)
        events = events_at([0.5, 1.0], np.random.default_rng(1))
        report = StreamingClient(loopback_timing(), cfg, events).run()
        trace = report.trace
        assert not trace.truncated
        assert trace.d == 1
        assert trace.stall_fraction == 0.0
        assert len(trace.executed) > 50
        assert report.ttfa_stats()["mean"] == pytest.approx(DT_VLM + DT_AE, rel=0.5)
        assert report.late_packets == 0
        assert len(trace.reactions) == 2

    def test_mode_mismatch_rejected(self, constant_server):
        host, port = constant_server.address
        client = StreamingClient(loopback_timing(), ClientConfig(host=host, port=port, mode=ClientMode.FASTER))
        with pytest.raises(ProtocolError, match="faster mode"):
            client.connect()
        client.close()

    def test_out_of_order_stream_truncates_run(self):
        def script(conn):
            conn.sendall(encode(Hello(50, 2, 4, 10, ServerMode.FASTER)))
            reader, pending = FrameReader(), []
            req = read_message(conn, reader, pending)
            conn.sendall(encode(ActionPacket(req.chunk_id, req.d + 1, np.zeros(2), 1, 0)))
            conn.sendall(encode(ActionPacket(req.chunk_id, req.d, np.zeros(2), 1, 0)))
            conn.settimeout(3.0)
            try:
                while read_message(conn, reader, pending) is not None:
                    pass
            except OSError:
                pass

        host, port = fake_server(script)
        cfg = ClientConfig(host=host, port=port, mode=ClientMode.FASTER, s=4, duration=1.0)
        report = StreamingClient(loopback_timing(), cfg).run()
        assert report.trace.truncated
        assert "expected index 1" in report.error

    def test_sync_client_runs_whole_chunks_after_waiting(self, quick_constant_server):
        timing = quick_timing()
        cfg = client_for(quick_constant_server, ClientMode.SYNC, duration=3.5)
        report = StreamingClient(timing, cfg, staggered_events(10, 0.2)).run()
        trace = report.trace
        assert not trace.truncated
        assert trace.d == 0 and trace.s == 3
        for chunk_id in range(5):
            assert [e.index for e in trace.executed if e.chunk_id == chunk_id] == [0, 1, 2]
        assert 0.3 < trace.stall_fraction < 0.7
        assert len(trace.reactions) == 10
        latency = 0.07
        assert min(trace.reactions) >= latency - 1e-6
        assert max(trace.reactions) <= 2 * (latency + 0.03) + trace.s * timing.dt_ctrl
        assert report.window_packets == 0

    @pytest.mark.parametrize(
        "mode, server",
        [
            (ClientMode.ASYNC_NAIVE, "quick_constant_server"),
            (ClientMode.ASYNC_PREFIX, "quick_constant_server"),
            (ClientMode.FASTER, "quick_streaming_server"),
        ],
    )
    def test_async_clients_never_stall_at_smin(self, request, mode, server):
        timing = quick_timing()
        d, s_min = delay_and_smin(timing, mode)
        report = StreamingClient(timing, client_for(request.getfixturevalue(server), mode, duration=2.0)).run()
        trace = report.trace
        assert not trace.truncated
        assert (trace.d, trace.s) == (d, s_min)
        assert len(trace.executed) > 40
        assert trace.stall_fraction == 0.0
        assert report.window_packets > 0
        assert report.late_packets == 0
        assert [e.index for e in trace.executed[:s_min]] == list(range(d, d + s_min))

    def test_streaming_reacts_faster_than_naive_by_the_predicted_gap(
        self, quick_constant_server, quick_streaming_server
    ):
        timing, s = quick_timing(), 3
        events = staggered_events(20, s * timing.dt_ctrl)
        means = {}
        for mode, server in ((ClientMode.ASYNC_NAIVE, quick_constant_server), (ClientMode.FASTER, quick_streaming_server)):
            report = StreamingClient(timing, client_for(server, mode, s=s, duration=3.0), events).run()
            assert not report.trace.truncated
            assert len(report.trace.reactions) == 20
            means[mode] = float(np.mean(report.trace.reactions))
        predicted = (
            reaction_distribution(timing, ClientMode.ASYNC_NAIVE, s).mean
            - reaction_distribution(timing, ClientMode.FASTER, s).mean
        )
        gap = means[ClientMode.ASYNC_NAIVE] - means[ClientMode.FASTER]
        assert means[ClientMode.FASTER] < means[ClientMode.ASYNC_NAIVE]
        assert gap == pytest.approx(predicted, rel=0.3)

    def test_retired_chunks_are_dropped(self, quick_constant_server):
        client = StreamingClient(quick_timing(), client_for(quick_constant_server, ClientMode.ASYNC_NAIVE, duration=2.0))
        live, send = [], client._request

        def tracking(*args, **kwargs):
            live.append(len(client._chunks))
            return send(*args, **kwargs)

        client._request = tracking
        report = client.run()
        assert not report.trace.truncated
        assert len(live) == len(report.trace.trigger_times) > 10
        assert max(live) <= 2
        assert client._chunks == {}
        assert report.ttfa_stats()["count"] == len(live)
        # late replies for retired chunks are ignored, unknown ids are not
        client._dispatch(ChunkDone(0, 10, False), now=0.0)
        with pytest.raises(ProtocolError, match="unknown chunk"):
            client._dispatch(ChunkDone(len(live) + 5, 10, False), now=0.0)
