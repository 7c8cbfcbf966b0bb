"""The moving parts: actor threads, inference loop, learner, and both runtimes.

Poly mode: actor threads stream steps from environment servers over TCP,
submit observations to a DynamicBatcher for model evaluation, and enqueue
fixed-length rollouts to a BatchingQueue consumed by the learner. Mono mode
keeps everything in one process: actors write rollouts into pre-allocated
shared buffer slots whose indices cycle through a free queue and a full
queue. Both modes share the same learner step: V-trace losses, exact
backprop, global-norm clipping, one exclusive RMSProp update per batch.
"""
from __future__ import annotations

import csv
import logging
import os
import socket
import struct
import sys
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import wire
from .envs import EpisodeAccounting, make_env
from .model import (
    PARAM_FIELDS,
    ModelParams,
    NonFiniteError,
    RmsPropState,
    clip_global_norm,
    init_params,
    init_rmsprop,
    mlp_forward,
    mlp_forward_backward,
    rmsprop_step,
    sample_actions,
)
from .queues import BatchingQueue, DynamicBatcher, QueueClosed
from .rollout import (
    AgentOutput,
    EnvOutput,
    Rollout,
    TrainingBatch,
    rollout_from_rows,
    validate_batch,
)
from .vtrace import VtraceConfig, compute_losses

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "step",
    "frames",
    "mean_episode_return",
    "pg_loss",
    "baseline_loss",
    "entropy_loss",
    "total_loss",
    "fps",
)


@contextmanager
def _responsive_threads(interval: float = 0.0005):
    """Shorten the interpreter's thread switch interval for the run.

    Cross-thread handoffs (actor → inference → actor) dominate step latency
    at toy payload sizes; the 5 ms default stalls them badly.
    """
    previous = sys.getswitchinterval()
    sys.setswitchinterval(interval)
    try:
        yield
    finally:
        sys.setswitchinterval(previous)


class ConfigError(ValueError):
    """A pipeline configuration violates its invariants."""


class ConnectError(Exception):
    """Environment servers unreachable after retries."""


class CheckpointError(ValueError):
    """Bad checkpoint file or shape mismatch against the current config."""


@dataclass
class PipelineConfig:
    unroll_length: int = 20
    batch_size: int = 8
    total_steps: int = 500_000
    num_actors: int = 4
    server_addresses: tuple[str, ...] = ()
    connect_retries: int = 40
    num_inference_threads: int = 2
    env_name: str = "grid5"
    num_buffers: int = 16
    num_learner_threads: int = 2
    discounting: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    baseline_cost: float = 0.5
    entropy_cost: float = 0.01
    pg_cost: float = 1.0
    learning_rate: float = 0.005
    rmsprop_decay: float = 0.99
    rmsprop_epsilon: float = 0.01
    grad_norm_clip: float = 40.0
    hidden_size: int = 128
    seed: int = 1
    logdir: Optional[str] = None
    checkpoint_every: int = 0

    def vtrace_config(self) -> VtraceConfig:
        return VtraceConfig(
            discount=self.discounting,
            rho_bar=self.rho_bar,
            c_bar=self.c_bar,
            baseline_cost=self.baseline_cost,
            entropy_cost=self.entropy_cost,
            pg_cost=self.pg_cost,
        )

    def validate_common(self) -> None:
        if self.unroll_length < 1:
            raise ConfigError("unroll_length must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_actors < 1:
            raise ConfigError("num_actors must be >= 1")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")

    def validate_poly(self) -> None:
        self.validate_common()
        if not self.server_addresses:
            raise ConfigError("server_addresses must not be empty")

    def validate_mono(self) -> None:
        self.validate_common()
        if self.num_buffers < 2 * self.batch_size:
            raise ConfigError("num_buffers must be >= 2*batch_size")
        if self.num_buffers <= self.num_actors:
            raise ConfigError("num_buffers must be > num_actors")
        if self.num_learner_threads < 1:
            raise ConfigError("num_learner_threads must be >= 1")


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    frames: int
    mean_episode_return: float
    pg_loss: float
    baseline_loss: float
    entropy_loss: float
    total_loss: float
    fps: float


class MetricsSink:
    """Thread-safe window of completed-episode returns (actor-side)."""

    def __init__(self, window: int = 100):
        self._returns: list[float] = []
        self._window = window
        self._lock = threading.Lock()
        self.episodes = 0

    def record_episode(self, episode_return: float) -> None:
        with self._lock:
            self.episodes += 1
            self._returns.append(float(episode_return))
            if len(self._returns) > self._window:
                del self._returns[: -self._window]

    def mean_episode_return(self) -> float:
        with self._lock:
            if not self._returns:
                return float("nan")
            return float(np.mean(self._returns))


class MetricsWriter:
    """Appends MetricsRecords to logs.csv (if a logdir is set) and keeps them."""

    def __init__(self, logdir: Optional[str]):
        self._lock = threading.Lock()
        self.records: list[MetricsRecord] = []
        self._file = None
        self._csv = None
        if logdir is not None:
            os.makedirs(logdir, exist_ok=True)
            self._file = open(os.path.join(logdir, "logs.csv"), "w", newline="")
            self._csv = csv.writer(self._file)
            self._csv.writerow(LOG_COLUMNS)
            self._file.flush()

    def append(self, record: MetricsRecord) -> None:
        with self._lock:
            self.records.append(record)
            if self._csv is not None:
                self._csv.writerow(
                    [
                        record.step,
                        record.frames,
                        f"{record.mean_episode_return:.6f}",
                        f"{record.pg_loss:.6f}",
                        f"{record.baseline_loss:.6f}",
                        f"{record.entropy_loss:.6f}",
                        f"{record.total_loss:.6f}",
                        f"{record.fps:.2f}",
                    ]
                )
                self._file.flush()

    def close(self) -> None:
        with self._lock:
            if self._file is not None:
                self._file.close()
                self._file = None
                self._csv = None


class SharedModel:
    """Parameter holder: lock-free snapshots, exclusive optimizer steps."""

    def __init__(self, params: ModelParams, opt_state: RmsPropState):
        self._params = params
        self._opt = opt_state
        self._lock = threading.Lock()

    def snapshot(self) -> ModelParams:
        return self._params

    @property
    def version(self) -> int:
        return self._params.version

    def apply_gradients(self, grads, max_norm: float) -> tuple[int, float]:
        with self._lock:
            clipped, norm = clip_global_norm(grads, max_norm)
            self._params, self._opt = rmsprop_step(self._params, clipped, self._opt)
            return self._params.version, norm


def _dump_batch(batch: TrainingBatch, logdir: Optional[str]) -> Optional[str]:
    if logdir is None:
        return None
    path = os.path.join(logdir, "diagnostic_batch.npz")
    np.savez(
        path,
        observation=batch.observation,
        reward=batch.reward,
        done=batch.done,
        policy_logits=batch.policy_logits,
        baseline=batch.baseline,
        action=batch.action,
        model_versions=batch.model_versions,
    )
    return path


class LearnerContext:
    """Shared learner state: step counting, metrics, checkpoints, stop flag."""

    def __init__(
        self,
        cfg: PipelineConfig,
        model: SharedModel,
        sink: MetricsSink,
        writer: MetricsWriter,
    ):
        self.cfg = cfg
        self.model = model
        self.sink = sink
        self.writer = writer
        self.vcfg = cfg.vtrace_config()
        self.done = threading.Event()
        self.steps = 0
        self.frames = 0
        self.max_staleness = 0
        self._lock = threading.Lock()
        self._t_start = time.monotonic()
        self._t_first_batch: Optional[float] = None
        self._frames_first_batch = 0
        self._t_last = self._t_start
        self._frames_last = 0

    def train_batch(self, batch: TrainingBatch) -> bool:
        """One learner step; returns True once the frame budget is consumed.

        The step slot is claimed up front so concurrent learner threads never
        overshoot the budget: a batch dequeued after the last slot was claimed
        is dropped untrained.
        """
        frames_per_step = self.cfg.unroll_length * self.cfg.batch_size
        with self._lock:
            if self.done.is_set():
                return True
            self.steps += 1
            step_now = self.steps
            frames_now = step_now * frames_per_step
            self.frames = max(self.frames, frames_now)
            done_now = frames_now >= self.cfg.total_steps
            if done_now:
                self.done.set()

        validate_batch(batch)
        params = self.model.snapshot()
        t1, b = batch.observation.shape[:2]
        obs_flat = batch.observation.reshape(t1 * b, -1).astype(np.float32)
        bundle_box = []

        def loss_grads(logits_flat, baseline_flat):
            logits = logits_flat.reshape(t1, b, -1)
            baseline = baseline_flat.reshape(t1, b)
            bundle, d_logits, d_baseline, _ = compute_losses(
                batch, logits[:-1], baseline, self.vcfg
            )
            bundle_box.append(bundle)
            up_logits = np.zeros_like(logits)
            up_logits[:-1] = d_logits
            return up_logits.reshape(t1 * b, -1), d_baseline.reshape(t1 * b)

        try:
            _, _, grads = mlp_forward_backward(params, obs_flat, loss_grads)
        except NonFiniteError:
            path = _dump_batch(batch, self.cfg.logdir)
            log.error("non-finite loss; offending batch dumped to %s", path)
            raise
        bundle = bundle_box[0]
        new_version, _ = self.model.apply_gradients(grads, self.cfg.grad_norm_clip)

        now = time.monotonic()
        with self._lock:
            staleness = int(new_version - 1 - batch.model_versions.min())
            self.max_staleness = max(self.max_staleness, staleness)
            if self._t_first_batch is None:
                self._t_first_batch = now
                self._frames_first_batch = frames_now
            dt = max(now - self._t_last, 1e-9)
            fps = (frames_now - self._frames_last) / dt
            self._t_last = now
            self._frames_last = max(self._frames_last, frames_now)
            record = MetricsRecord(
                step=step_now,
                frames=frames_now,
                mean_episode_return=self.sink.mean_episode_return(),
                pg_loss=bundle.pg_loss,
                baseline_loss=bundle.baseline_loss,
                entropy_loss=bundle.entropy_loss,
                total_loss=bundle.total,
                fps=fps,
            )
        self.writer.append(record)
        if (
            self.cfg.checkpoint_every > 0
            and self.cfg.logdir is not None
            and step_now % self.cfg.checkpoint_every == 0
        ):
            checkpoint(
                self.model.snapshot(),
                os.path.join(self.cfg.logdir, f"checkpoint-{step_now:06d}.tbst"),
            )
        return done_now

    def run_fps(self) -> float:
        """Frames per second excluding time before the first batch landed."""
        if self._t_first_batch is None:
            return 0.0
        elapsed = max(time.monotonic() - self._t_first_batch, 1e-9)
        return (self.frames - self._frames_first_batch) / elapsed

    def final_record(self) -> MetricsRecord:
        if self.writer.records:
            last = max(self.writer.records, key=lambda r: r.step)
            return replace(last, fps=self.run_fps())
        return MetricsRecord(0, 0, float("nan"), 0.0, 0.0, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Poly mode
# ---------------------------------------------------------------------------


def parse_address(address: str) -> tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"address '{address}' must look like host:port")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"address '{address}' has a non-numeric port") from None


def probe_env_spec(
    address: tuple[str, int], retries: int = 40, base_delay: float = 0.05
) -> wire.Hello:
    """Connect, read HELLO, say BYE. Raises ConnectError after retries."""
    delay = base_delay
    last_err: Optional[Exception] = None
    for _ in range(retries):
        try:
            with socket.create_connection(address, timeout=2.0) as sock:
                sock.settimeout(2.0)
                msg = wire.read_frame(sock)
                if isinstance(msg, wire.Hello):
                    wire.write_frame(sock, wire.Bye())
                    return msg
                raise wire.ProtocolError(f"expected HELLO, got {type(msg).__name__}")
        except (OSError, wire.ProtocolError) as exc:
            last_err = exc
            time.sleep(delay)
            delay = min(delay * 1.5, 1.0)
    raise ConnectError(f"environment server at {address} unreachable: {last_err}")


class _ActorState:
    """Per-actor bookkeeping shared with the runner."""

    def __init__(self):
        self.rollouts_enqueued = 0
        self.reconnects = 0
        self.fatal = False


class PolyRunner:
    """Actor threads + inference thread + in-thread learner over TCP envs."""

    def __init__(
        self,
        cfg: PipelineConfig,
        rollout_observer: Optional[Callable[[list[Rollout]], None]] = None,
    ):
        cfg.validate_poly()
        self.cfg = cfg
        self.addresses = [parse_address(a) for a in cfg.server_addresses]
        self.stop = threading.Event()
        self.inference = DynamicBatcher(max_batch_size=max(1, cfg.num_actors))
        if rollout_observer is None:
            self.learner_queue = BatchingQueue(cfg.batch_size)
        else:
            from .rollout import stack_rollouts

            def observe_and_stack(items):
                rollout_observer(items)
                return stack_rollouts(items)

            self.learner_queue = BatchingQueue(
                cfg.batch_size, stack_fn=observe_and_stack
            )
        self.sink = MetricsSink()
        self.writer = MetricsWriter(cfg.logdir)
        self.actor_states = [_ActorState() for _ in range(cfg.num_actors)]
        self._actors_alive = cfg.num_actors
        self._alive_lock = threading.Lock()
        self.model: Optional[SharedModel] = None
        self.ctx: Optional[LearnerContext] = None

    # -- actor side --------------------------------------------------------

    def _infer(self, env_out: EnvOutput) -> tuple[AgentOutput, int]:
        outputs = self.inference.submit(
            {
                "observation": env_out.observation[None, None].astype(np.float32),
                "reward": np.array([[env_out.reward]], dtype=np.float32),
                "done": np.array([[env_out.done]], dtype=bool),
            }
        )
        return (
            AgentOutput(
                action=int(outputs["action"][0, 0]),
                policy_logits=outputs["policy_logits"][0, 0],
                baseline=float(outputs["baseline"][0, 0]),
            ),
            int(outputs["model_version"][0, 0]),
        )

    def _read_raw(self, reader: wire.FrameReader) -> bytes:
        while True:
            try:
                raw = reader.read_frame_raw()
            except socket.timeout:
                if self.stop.is_set():
                    raise QueueClosed("stopping")
                continue
            if raw is None:
                raise ConnectionResetError("server closed the connection")
            return raw

    def _read_msg(self, reader: wire.FrameReader) -> wire.WireMessage:
        msg = wire.decode_frame(self._read_raw(reader))
        if isinstance(msg, wire.Error):
            raise wire.ProtocolError(f"server error {msg.code}: {msg.message}")
        if isinstance(msg, wire.Bye):
            raise ConnectionResetError("server said BYE")
        return msg

    def _read_step(self, reader: wire.FrameReader, decode_step) -> EnvOutput:
        raw = self._read_raw(reader)
        step = decode_step(raw)
        if step is None:
            msg = wire.decode_frame(raw)
            if isinstance(msg, wire.Error):
                raise wire.ProtocolError(f"server error {msg.code}: {msg.message}")
            if isinstance(msg, wire.Bye):
                raise ConnectionResetError("server said BYE")
            if isinstance(msg, wire.Step):
                raise wire.ProtocolError("STEP does not match the HELLO observation spec")
            raise wire.ProtocolError(f"expected STEP, got {type(msg).__name__}")
        return EnvOutput(
            observation=step.observation,
            reward=step.reward,
            done=step.done,
            episode_step=step.episode_step,
            episode_return=step.episode_return,
        )

    def _run_connection(self, sock: socket.socket, actor_index: int, state: _ActorState):
        t_len = self.cfg.unroll_length
        reader = wire.FrameReader(sock)
        hello = self._read_msg(reader)
        if not isinstance(hello, wire.Hello):
            raise wire.ProtocolError(f"expected HELLO, got {type(hello).__name__}")
        decode_step = wire.make_step_decoder(
            wire.DTYPE_BY_CODE[hello.obs_dtype_code], hello.obs_dims
        )
        env_out = self._read_step(reader, decode_step)  # initial boundary marker
        agent_out, version = self._infer(env_out)
        rows = [(env_out, agent_out)]
        versions = [version]
        while True:
            while len(rows) < t_len + 1:
                wire.write_frame(sock, wire.Action(rows[-1][1].action))
                env_out = self._read_step(reader, decode_step)
                if env_out.done:
                    self.sink.record_episode(env_out.episode_return)
                agent_out, version = self._infer(env_out)
                rows.append((env_out, agent_out))
                versions.append(version)
            uid = f"a{actor_index}-{state.rollouts_enqueued}"
            self.learner_queue.put(
                rollout_from_rows(rows, model_version=min(versions), uid=uid)
            )
            state.rollouts_enqueued += 1
            rows = [rows[-1]]
            versions = [versions[-1]]

    def _actor_loop(self, actor_index: int) -> None:
        state = self.actor_states[actor_index]
        address = self.addresses[actor_index % len(self.addresses)]
        connected_once = False
        attempts = 0
        try:
            while not self.stop.is_set():
                try:
                    sock = socket.create_connection(address, timeout=2.0)
                except OSError:
                    attempts += 1
                    if not connected_once and attempts >= self.cfg.connect_retries:
                        state.fatal = True
                        log.error(
                            "actor %d: giving up on %s after %d attempts",
                            actor_index,
                            address,
                            attempts,
                        )
                        return
                    self.stop.wait(min(0.05 * attempts, 1.0))
                    continue
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                sock.settimeout(1.0)
                try:
                    if connected_once:
                        state.reconnects += 1
                    connected_once = True
                    attempts = 0
                    self._run_connection(sock, actor_index, state)
                except QueueClosed:
                    try:
                        wire.write_frame(sock, wire.Bye())
                    except OSError:
                        pass
                    return
                except (OSError, wire.ProtocolError) as exc:
                    # Partial rollout discarded; reconnect with fresh state.
                    log.debug("actor %d: connection lost (%s), retrying", actor_index, exc)
                finally:
                    try:
                        sock.close()
                    except OSError:
                        pass
        finally:
            with self._alive_lock:
                self._actors_alive -= 1
                if self._actors_alive == 0:
                    self.learner_queue.close()

    # -- inference side ------------------------------------------------------

    def _inference_loop(self, loop_index: int = 0) -> None:
        rng = np.random.default_rng(self.cfg.seed + 10_000 + loop_index)
        for handle in self.inference:
            try:
                inputs = handle.get_inputs()
                obs = inputs["observation"]
                k = obs.shape[1]
                params = self.model.snapshot()
                logits, baseline = mlp_forward(params, obs.reshape(k, -1))
                actions = sample_actions(logits, rng)
                handle.set_outputs(
                    {
                        "action": actions[None, :],
                        "policy_logits": logits[None],
                        "baseline": baseline[None],
                        "model_version": np.full((1, k), params.version, dtype=np.int64),
                    }
                )
            except BaseException as exc:
                # Abort the whole run rather than strand blocked submitters.
                handle.fail(exc)
                self.stop.set()
                self.inference.close()
                self.learner_queue.close()
                log.error("inference loop failed: %s", exc)
                raise

    # -- runner ----------------------------------------------------------------

    def run(self) -> MetricsRecord:
        cfg = self.cfg
        hello = probe_env_spec(self.addresses[0], retries=cfg.connect_retries)
        obs_dim = int(np.prod(hello.obs_dims)) if hello.obs_dims else 1
        params = init_params(
            obs_dim, hello.num_actions, hidden=cfg.hidden_size, seed=cfg.seed
        )
        self.model = SharedModel(
            params,
            init_rmsprop(
                params,
                learning_rate=cfg.learning_rate,
                decay=cfg.rmsprop_decay,
                epsilon=cfg.rmsprop_epsilon,
            ),
        )
        self.ctx = LearnerContext(cfg, self.model, self.sink, self.writer)

        inference_threads = [
            threading.Thread(
                target=self._inference_loop, args=(i,), name=f"inference-{i}",
                daemon=True,
            )
            for i in range(max(1, cfg.num_inference_threads))
        ]
        actor_threads = [
            threading.Thread(
                target=self._actor_loop, args=(i,), name=f"actor-{i}", daemon=True
            )
            for i in range(cfg.num_actors)
        ]
        for t in inference_threads:
            t.start()
        for t in actor_threads:
            t.start()
        try:
            with _responsive_threads():
                for batch in self.learner_queue:
                    if self.ctx.train_batch(batch):
                        break
        finally:
            self.stop.set()
            self.learner_queue.close()
            self.inference.close()
            for t in actor_threads:
                t.join(timeout=10.0)
            for t in inference_threads:
                t.join(timeout=10.0)
            self.writer.close()
        if self.ctx.steps == 0 and any(s.fatal for s in self.actor_states):
            raise ConnectError(
                f"no rollouts received; servers unreachable: {cfg.server_addresses}"
            )
        if cfg.logdir is not None:
            checkpoint(
                self.model.snapshot(), os.path.join(cfg.logdir, "model_final.tbst")
            )
        return self.ctx.final_record()


def poly_run(cfg: PipelineConfig) -> MetricsRecord:
    return PolyRunner(cfg).run()


# ---------------------------------------------------------------------------
# Mono mode
# ---------------------------------------------------------------------------

FREE, ACTOR, FULL, LEARNER = range(4)
_STATE_NAMES = {FREE: "free", ACTOR: "actor", FULL: "full", LEARNER: "learner"}


class SharedBuffers:
    """num_buffers pre-allocated rollout slots with audited ownership.

    Every slot index is, at any moment, in exactly one of the states
    free / owned-by-actor / full / owned-by-learner; transitions assert the
    expected prior state and raise on any violation.
    """

    def __init__(
        self,
        num_buffers: int,
        unroll_length: int,
        obs_dims: tuple[int, ...],
        num_actions: int,
    ):
        t1 = unroll_length + 1
        self.num_buffers = num_buffers
        self.slots = [
            {
                "observation": np.zeros((t1, *obs_dims), dtype=np.float32),
                "reward": np.zeros(t1, dtype=np.float32),
                "done": np.zeros(t1, dtype=bool),
                "policy_logits": np.zeros((t1, num_actions), dtype=np.float32),
                "baseline": np.zeros(t1, dtype=np.float32),
                "action": np.zeros(t1, dtype=np.int64),
            }
            for _ in range(num_buffers)
        ]
        self.versions = np.zeros(num_buffers, dtype=np.int64)
        self._state = [FREE] * num_buffers
        self._lock = threading.Lock()
        self.trips_to_free = [0] * num_buffers

    def transition(self, index: int, expected: int, to: int) -> None:
        with self._lock:
            current = self._state[index]
            if current != expected:
                raise RuntimeError(
                    f"buffer {index}: illegal transition to {_STATE_NAMES[to]} "
                    f"from {_STATE_NAMES[current]} (expected {_STATE_NAMES[expected]})"
                )
            self._state[index] = to
            if to == FREE:
                self.trips_to_free[index] += 1

    def state_counts(self) -> dict[str, int]:
        with self._lock:
            counts = {name: 0 for name in _STATE_NAMES.values()}
            for s in self._state:
                counts[_STATE_NAMES[s]] += 1
        return counts

    def write_row(self, index: int, t: int, env_out: EnvOutput, agent_out: AgentOutput):
        slot = self.slots[index]
        slot["observation"][t] = env_out.observation
        slot["reward"][t] = env_out.reward
        slot["done"][t] = env_out.done
        slot["policy_logits"][t] = agent_out.policy_logits
        slot["baseline"][t] = agent_out.baseline
        slot["action"][t] = agent_out.action

    def stack(self, indices: list[int]) -> TrainingBatch:
        return TrainingBatch(
            observation=np.stack([self.slots[i]["observation"] for i in indices], axis=1),
            reward=np.stack([self.slots[i]["reward"] for i in indices], axis=1),
            done=np.stack([self.slots[i]["done"] for i in indices], axis=1),
            policy_logits=np.stack(
                [self.slots[i]["policy_logits"] for i in indices], axis=1
            ),
            baseline=np.stack([self.slots[i]["baseline"] for i in indices], axis=1),
            action=np.stack([self.slots[i]["action"] for i in indices], axis=1),
            model_versions=self.versions[indices].copy(),
        )


class MonoActor:
    """One environment worker: fills one buffer slot per produced rollout."""

    def __init__(
        self,
        actor_index: int,
        cfg: PipelineConfig,
        buffers: SharedBuffers,
        free_queue: BatchingQueue,
        full_queue: BatchingQueue,
        model: SharedModel,
        sink: MetricsSink,
    ):
        self.cfg = cfg
        self.buffers = buffers
        self.free_queue = free_queue
        self.full_queue = full_queue
        self.model = model
        self.sink = sink
        self.env = EpisodeAccounting(make_env(cfg.env_name))
        self.rng = np.random.default_rng(cfg.seed + actor_index)
        self._carry: Optional[tuple[EnvOutput, AgentOutput, int]] = None

    def _act(self, env_out: EnvOutput) -> tuple[AgentOutput, int]:
        params = self.model.snapshot()
        logits, baseline = mlp_forward(
            params, env_out.observation[None].astype(np.float32)
        )
        action = int(sample_actions(logits, self.rng)[0])
        return (
            AgentOutput(
                action=action, policy_logits=logits[0], baseline=float(baseline[0])
            ),
            params.version,
        )

    def produce_one(self) -> bool:
        """Fill one rollout slot; False once the free queue is closed."""
        index = self.free_queue.next_batch()
        if index is None:
            return False
        self.buffers.transition(index, FREE, ACTOR)
        if self._carry is None:
            env_out = self.env.initial()
            agent_out, version = self._act(env_out)
        else:
            env_out, agent_out, version = self._carry
        versions = [version]
        self.buffers.write_row(index, 0, env_out, agent_out)
        for t in range(1, self.cfg.unroll_length + 1):
            env_out = self.env.step(agent_out.action)
            if env_out.done:
                self.sink.record_episode(env_out.episode_return)
            agent_out, version = self._act(env_out)
            versions.append(version)
            self.buffers.write_row(index, t, env_out, agent_out)
        self._carry = (env_out, agent_out, version)
        self.buffers.versions[index] = min(versions)
        self.buffers.transition(index, ACTOR, FULL)
        try:
            self.full_queue.put(index)
        except QueueClosed:
            return False
        return True


class MonoLearner:
    """One batch consumer: dequeue B indices, stack, free, train."""

    def __init__(
        self,
        cfg: PipelineConfig,
        buffers: SharedBuffers,
        free_queue: BatchingQueue,
        full_queue: BatchingQueue,
        ctx: LearnerContext,
    ):
        self.cfg = cfg
        self.buffers = buffers
        self.free_queue = free_queue
        self.full_queue = full_queue
        self.ctx = ctx

    def consume_one(self) -> bool:
        indices = self.full_queue.next_batch()
        if indices is None:
            return False
        for i in indices:
            self.buffers.transition(i, FULL, LEARNER)
        batch = self.buffers.stack(indices)
        for i in indices:
            self.buffers.transition(i, LEARNER, FREE)
            try:
                self.free_queue.put(i)
            except QueueClosed:
                pass
        if self.ctx.train_batch(batch):
            self.free_queue.close()
            self.full_queue.close()
            return False
        return True


def mono_run(
    cfg: PipelineConfig,
    buffers_observer: Optional[
        Callable[[SharedBuffers, BatchingQueue, BatchingQueue], None]
    ] = None,
) -> MetricsRecord:
    """Single-process shared-buffer training run.

    `buffers_observer(buffers, free_queue, full_queue)` is called after the
    free queue is seeded with every index and before any worker starts; it
    exists for audit instrumentation in tests.
    """
    cfg.validate_mono()
    spec = make_env(cfg.env_name).spec
    obs_dim = int(np.prod(spec.obs_dims))
    params = init_params(
        obs_dim, spec.num_actions, hidden=cfg.hidden_size, seed=cfg.seed
    )
    model = SharedModel(
        params,
        init_rmsprop(
            params,
            learning_rate=cfg.learning_rate,
            decay=cfg.rmsprop_decay,
            epsilon=cfg.rmsprop_epsilon,
        ),
    )
    sink = MetricsSink()
    writer = MetricsWriter(cfg.logdir)
    ctx = LearnerContext(cfg, model, sink, writer)
    buffers = SharedBuffers(
        cfg.num_buffers, cfg.unroll_length, spec.obs_dims, spec.num_actions
    )
    free_queue = BatchingQueue(
        1, capacity=cfg.num_buffers, stack_fn=lambda items: items[0]
    )
    full_queue = BatchingQueue(
        cfg.batch_size, capacity=cfg.num_buffers, stack_fn=list
    )
    for i in range(cfg.num_buffers):
        free_queue.put(i)
    if buffers_observer is not None:
        buffers_observer(buffers, free_queue, full_queue)

    actors = [
        MonoActor(i, cfg, buffers, free_queue, full_queue, model, sink)
        for i in range(cfg.num_actors)
    ]
    learners = [
        MonoLearner(cfg, buffers, free_queue, full_queue, ctx)
        for _ in range(cfg.num_learner_threads)
    ]

    try:
        if cfg.num_actors == 1 and cfg.num_learner_threads == 1:
            # Cooperative schedule at concurrency 1: deterministic given the seed.
            running = True
            while running:
                for _ in range(cfg.batch_size):
                    if not actors[0].produce_one():
                        running = False
                        break
                if running:
                    running = learners[0].consume_one()
        else:
            actor_threads = [
                threading.Thread(
                    target=_drive, args=(a.produce_one,), name=f"mono-actor-{i}",
                    daemon=True,
                )
                for i, a in enumerate(actors)
            ]
            learner_threads = [
                threading.Thread(
                    target=_drive, args=(l.consume_one,), name=f"mono-learner-{i}",
                    daemon=True,
                )
                for i, l in enumerate(learners)
            ]
            with _responsive_threads():
                for t in actor_threads + learner_threads:
                    t.start()
                for t in learner_threads:
                    t.join()
                free_queue.close()
                full_queue.close()
                for t in actor_threads:
                    t.join(timeout=10.0)
    finally:
        free_queue.close()
        full_queue.close()
        writer.close()
    if cfg.logdir is not None:
        checkpoint(model.snapshot(), os.path.join(cfg.logdir, "model_final.tbst"))
    return ctx.final_record()


def _drive(step_fn: Callable[[], bool]) -> None:
    while step_fn():
        pass


# ---------------------------------------------------------------------------
# Checkpoints (magic "TBST1")
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"TBST1"
_CKPT_DTYPE_BY_CODE = {
    0: np.dtype(np.uint8),
    1: np.dtype(np.int64),
    2: np.dtype(np.float32),
    3: np.dtype(np.float64),
}
_CKPT_CODE_BY_DTYPE = {v: k for k, v in _CKPT_DTYPE_BY_CODE.items()}


def checkpoint(params: ModelParams, path: str) -> None:
    """Write params: magic, then per-field name/dtype/dims/data, then version."""
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        for name in PARAM_FIELDS:
            arr = getattr(params, name)
            dtype = np.dtype(arr.dtype)
            if dtype not in _CKPT_CODE_BY_DTYPE:
                raise CheckpointError(f"{name}: dtype {dtype} not storable")
            f.write(struct.pack("<I", len(name)))
            f.write(name.encode("ascii"))
            f.write(struct.pack("<BB", _CKPT_CODE_BY_DTYPE[dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(dtype.newbyteorder("<")).tobytes())
        f.write(struct.pack("<Q", params.version))


def restore(
    path: str,
    expected_obs_dim: Optional[int] = None,
    expected_num_actions: Optional[int] = None,
) -> ModelParams:
    """Read a TBST1 checkpoint; optionally validate against a config."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:5] != _CKPT_MAGIC:
        raise CheckpointError(f"bad magic {data[:5]!r}, expected {_CKPT_MAGIC!r}")
    offset = 5
    arrays: dict[str, np.ndarray] = {}
    try:
        for expected_name in PARAM_FIELDS:
            (name_len,) = struct.unpack_from("<I", data, offset)
            offset += 4
            name = data[offset : offset + name_len].decode("ascii")
            offset += name_len
            if name != expected_name:
                raise CheckpointError(
                    f"unexpected field '{name}', expected '{expected_name}'"
                )
            code, ndim = struct.unpack_from("<BB", data, offset)
            offset += 2
            if code not in _CKPT_DTYPE_BY_CODE:
                raise CheckpointError(f"{name}: unknown dtype code {code}")
            dims = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            dtype = _CKPT_DTYPE_BY_CODE[code]
            count = int(np.prod(dims)) if ndim else 1
            arr = np.frombuffer(
                data, dtype=dtype.newbyteorder("<"), count=count, offset=offset
            ).astype(dtype)
            offset += count * dtype.itemsize
            arrays[name] = arr.reshape(dims)
        (version,) = struct.unpack_from("<Q", data, offset)
        offset += 8
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes in checkpoint")
    params = ModelParams(version=int(version), **arrays)
    params.check_consistent()
    if expected_num_actions is not None and params.num_actions != expected_num_actions:
        raise CheckpointError(
            f"Wp: checkpoint has num_actions {params.num_actions}, "
            f"expected {expected_num_actions}"
        )
    if expected_obs_dim is not None and params.obs_dim != expected_obs_dim:
        raise CheckpointError(
            f"W1: checkpoint has obs_dim {params.obs_dim}, expected {expected_obs_dim}"
        )
    return params


def evaluate_greedy(
    params: ModelParams, env_name: str, episodes: int, max_steps: int = 100_000
) -> list[float]:
    """Run argmax-policy episodes; returns the per-episode returns."""
    env = make_env(env_name)
    spec = env.spec
    obs_dim = int(np.prod(spec.obs_dims))
    if params.obs_dim != obs_dim:
        raise CheckpointError(
            f"W1: checkpoint obs_dim {params.obs_dim} != env obs_dim {obs_dim}"
        )
    if params.num_actions != spec.num_actions:
        raise CheckpointError(
            f"Wp: checkpoint num_actions {params.num_actions} != env "
            f"num_actions {spec.num_actions}"
        )
    returns = []
    for _ in range(episodes):
        obs = env.reset()
        total = 0.0
        for _ in range(max_steps):
            logits, _ = mlp_forward(params, obs[None].astype(np.float32))
            obs, reward, done = env.step(int(np.argmax(logits[0])))
            total += reward
            if done:
                break
        returns.append(total)
    return returns
