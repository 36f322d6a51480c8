"""
Threaded policy server. Each connection is served sequentially: for every
OBS_REQUEST the sampler runs and, in streaming mode, every action is written
to the socket the moment it is finalized.
"""

import logging
import socket
import threading
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from core.exceptions import FasterError, ProtocolError
from flow.policy import FlowModel, VelocityField
from flow.sampling import SamplerConfig, sample_constant, sample_has
from wire.protocol import (
    ActionPacket,
    ChunkBulk,
    ChunkDone,
    ErrorMessage,
    FrameReader,
    Hello,
    ObsRequest,
    ServerMode,
    encode,
    read_message,
)

logger = logging.getLogger(__name__)


def wall_us():
    return time.time_ns() // 1000


class TimedVelocity(VelocityField):
    """Delegates to a model and sleeps `dt_ae` per evaluation to emulate a slower device."""

    def __init__(self, model, dt_ae):
        super().__init__(model.H, model.A, model.O)
        self.model = model
        self.dt_ae = dt_ae

    def velocity(self, obs, chunk, tau):
        if self.dt_ae > 0:
            time.sleep(self.dt_ae)
        return self.model.velocity(obs, chunk, tau)

    def normalize_obs(self, obs):
        return self.model.normalize_obs(obs)

    def normalize_actions(self, actions):
        return self.model.normalize_actions(actions)

    def denormalize_actions(self, actions):
        return self.model.denormalize_actions(actions)


@dataclass
class ServerConfig:
    host: str = "127.0.0.1"
    port: int = 0
    mode: ServerMode = ServerMode.FASTER
    N: int = 10
    alpha: float = 0.6
    u_d: Optional[float] = 0.9
    # emulated prefill and per-step costs, seconds
    dt_vlm: float = 0.0
    dt_ae: float = 0.0
    seed: int = 0


class PolicyServer:
    def __init__(self, model, cfg=None):
        self.model = model
        self.cfg = cfg or ServerConfig()
        self.field = TimedVelocity(model, self.cfg.dt_ae)
        self._sock = None
        self._stop = threading.Event()
        self._threads = []
        self._rng = np.random.default_rng(self.cfg.seed)
        self._rng_lock = threading.Lock()
        self.served = []

    @property
    def address(self):
        return self._sock.getsockname()[:2]

    def start(self):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self.cfg.host, self.cfg.port))
        self._sock.listen()
        self._sock.settimeout(0.2)
        thread = threading.Thread(target=self._accept_loop, name="policy-server", daemon=True)
        thread.start()
        self._threads.append(thread)
        logger.info("policy server listening on %s:%d (%s mode)", *self.address, self.cfg.mode.name.lower())
        return self

    def serve_forever(self):
        if self._sock is None:
            self.start()
        try:
            while not self._stop.is_set():
                self._stop.wait(0.5)
        except KeyboardInterrupt:
            logger.info("interrupted")
        finally:
            self.shutdown()

    def shutdown(self):
        self._stop.set()
        if self._sock is not None:
            self._sock.close()
        for thread in self._threads:
            thread.join(timeout=2.0)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            logger.info("connection from %s:%d", *peer)
            thread = threading.Thread(target=self._handle, args=(conn,), daemon=True)
            thread.start()
            self._threads = [t for t in self._threads if t.is_alive()]
            self._threads.append(thread)

    def _handle(self, conn):
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn.settimeout(0.5)
        reader, pending = FrameReader(), []
        m = self.model
        try:
            conn.sendall(encode(Hello(m.H, m.A, m.O, self.cfg.N, self.cfg.mode)))
            while not self._stop.is_set():
                try:
                    message = read_message(conn, reader, pending)
                except socket.timeout:
                    continue
                if message is None:
                    break
                if not isinstance(message, ObsRequest):
                    raise ProtocolError(f"unexpected {type(message).__name__} from client")
                self._serve_request(conn, message)
        except ProtocolError as exc:
            logger.warning("closing connection: %s", exc.message)
            self._send_error(conn, exc.message)
        except OSError as exc:
            logger.info("connection dropped: %s", exc)
        finally:
            conn.close()

    def _send_error(self, conn, message):
        try:
            conn.sendall(encode(ErrorMessage(message or "error")))
        except OSError:
            pass

    def _serve_request(self, conn, request):
        m = self.model
        if not 0 <= request.d < m.H or not 1 <= request.s <= m.H - request.d:
            self._send_error(conn, f"infeasible request d={request.d}, s={request.s} for H={m.H}")
            return
        with self._rng_lock:
            rng = np.random.default_rng(self._rng.integers(2**63))
        prefix = request.prefix if request.d else None
        if self.cfg.dt_vlm > 0:
            time.sleep(self.cfg.dt_vlm)

        try:
            if self.cfg.mode is ServerMode.CONSTANT:
                chunk, trace = sample_constant(self.field, request.obs, self.cfg.N, request.d, prefix, rng=rng)
                conn.sendall(encode(ChunkBulk(request.chunk_id, chunk, trace.steps_used, wall_us())))
            else:

                def dispatch(index, action, step):
                    conn.sendall(encode(ActionPacket(request.chunk_id, index, action, step, wall_us())))

                cfg = SamplerConfig(
                    N=self.cfg.N,
                    alpha=self.cfg.alpha,
                    u_d=self.cfg.u_d,
                    early_stop=True,
                    execution_horizon=request.s,
                    dispatch=dispatch,
                )
                _, trace = sample_has(self.field, request.obs, self.cfg.N, request.d, prefix, cfg=cfg, rng=rng)
                conn.sendall(encode(ChunkDone(request.chunk_id, trace.steps_used, trace.early_stopped)))
                if trace.early_stopped:
                    logger.debug("chunk %d stopped after %d steps", request.chunk_id, trace.steps_used)
        except FasterError as exc:
            self._send_error(conn, exc.message)
            return
        self.served.append(request.chunk_id)


def serve(checkpoint, cfg=None):
    """Load a checkpoint and serve it until interrupted."""
    server = PolicyServer(FlowModel.load(checkpoint), cfg)
    server.serve_forever()
    return server
