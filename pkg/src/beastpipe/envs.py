"""Built-in toy environments, episode accounting, and the environment server.

Environments follow the familiar reset/step contract: reset() returns an
observation, step(action) returns (observation, reward, done). The
EpisodeAccounting wrapper adds auto-reset bookkeeping with the convention
that done=true marks the FIRST row of a new episode (the terminal reward
arrives together with the next episode's initial observation).
"""
from __future__ import annotations

import logging
import socket
import threading
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import wire
from .rollout import EnvOutput

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnvSpec:
    obs_dims: tuple[int, ...]
    obs_dtype: np.dtype
    num_actions: int


class BanditEnv:
    """Two-armed deterministic bandit: arm 0 pays 0.0, arm 1 pays 1.0.

    Every episode lasts exactly one step; the observation is a constant [1.0].
    """

    arm_rewards = (0.0, 1.0)

    def __init__(self):
        self._obs = np.ones(1, dtype=np.float32)

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(obs_dims=(1,), obs_dtype=np.dtype(np.float32), num_actions=2)

    def reset(self) -> np.ndarray:
        return self._obs

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if not 0 <= action < 2:
            raise ValueError(f"action {action} outside [0, 2)")
        return self._obs, self.arm_rewards[action], True


class GridMaze:
    """Deterministic N×N maze: start (0,0), reward 1.0 at (N−1,N−1).

    Actions 0:up 1:down 2:left 3:right, clipped at walls; episodes end with
    reward 0 at the step limit. Observations are one-hot float32 of length N².
    """

    def __init__(self, side: int = 5, step_limit: int = 50):
        self.side = side
        self.step_limit = step_limit
        self.x = 0
        self.y = 0
        self.steps = 0

    @property
    def spec(self) -> EnvSpec:
        return EnvSpec(
            obs_dims=(self.side * self.side,),
            obs_dtype=np.dtype(np.float32),
            num_actions=4,
        )

    def _observe(self) -> np.ndarray:
        obs = np.zeros(self.side * self.side, dtype=np.float32)
        obs[self.y * self.side + self.x] = 1.0
        return obs

    def reset(self) -> np.ndarray:
        self.x = 0
        self.y = 0
        self.steps = 0
        return self._observe()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if not 0 <= action < 4:
            raise ValueError(f"action {action} outside [0, 4)")
        if action == 0:
            self.y = max(0, self.y - 1)
        elif action == 1:
            self.y = min(self.side - 1, self.y + 1)
        elif action == 2:
            self.x = max(0, self.x - 1)
        else:
            self.x = min(self.side - 1, self.x + 1)
        self.steps += 1
        goal = self.x == self.side - 1 and self.y == self.side - 1
        if goal:
            return self._observe(), 1.0, True
        if self.steps >= self.step_limit:
            return self._observe(), 0.0, True
        return self._observe(), 0.0, False


ENV_FACTORIES: dict[str, Callable[[], object]] = {
    "bandit": BanditEnv,
    "grid5": lambda: GridMaze(5),
}


def make_env(name: str):
    try:
        factory = ENV_FACTORIES[name]
    except KeyError:
        raise ValueError(
            f"unknown env '{name}'; valid names: {', '.join(sorted(ENV_FACTORIES))}"
        ) from None
    return factory()


class EpisodeAccounting:
    """Auto-resetting wrapper producing EnvOutput rows.

    The first output of a fresh wrapper has reward 0 and done=true (episode
    boundary marker). When the inner env terminates, the output carries the
    terminal reward, the completed episode's return, and the NEXT episode's
    initial observation with done=true and episode_step reset to 0.
    """

    def __init__(self, env):
        self._env = env
        self.spec: EnvSpec = env.spec
        self._episode_step = 0
        self._episode_return = 0.0

    def initial(self) -> EnvOutput:
        self._episode_step = 0
        self._episode_return = 0.0
        obs = self._env.reset()
        return EnvOutput(
            observation=obs, reward=0.0, done=True, episode_step=0, episode_return=0.0
        )

    def step(self, action: int) -> EnvOutput:
        obs, reward, done = self._env.step(action)
        self._episode_step += 1
        self._episode_return += reward
        if done:
            completed_return = self._episode_return
            self._episode_step = 0
            self._episode_return = 0.0
            return EnvOutput(
                observation=self._env.reset(),
                reward=float(reward),
                done=True,
                episode_step=0,
                episode_return=float(completed_return),
            )
        return EnvOutput(
            observation=obs,
            reward=float(reward),
            done=False,
            episode_step=self._episode_step,
            episode_return=float(self._episode_return),
        )


class EnvServer:
    """Accepts connections and serves one fresh environment copy per session."""

    def __init__(
        self,
        address: tuple[str, int],
        env_factory: Callable[[], object],
        max_connections: int = 4,
    ):
        self._address = address
        self._env_factory = env_factory
        self._max_connections = max_connections
        self._stop = threading.Event()
        self._listener: Optional[socket.socket] = None
        self._accept_thread: Optional[threading.Thread] = None
        self._sessions: set[threading.Thread] = set()
        self._lock = threading.Lock()
        self.connections_served = 0

    @property
    def bound_address(self) -> tuple[str, int]:
        assert self._listener is not None, "server not started"
        return self._listener.getsockname()[:2]

    def start(self) -> None:
        self._listener = socket.create_server(self._address, backlog=8)
        self._listener.settimeout(0.2)
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="env-accept", daemon=True
        )
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._sessions = {t for t in self._sessions if t.is_alive()}
                if len(self._sessions) >= self._max_connections:
                    try:
                        wire.write_frame(
                            conn,
                            wire.Error(wire.ERR_CAPACITY, "server at connection limit"),
                        )
                        conn.close()
                    except OSError:
                        pass
                    continue
                thread = threading.Thread(
                    target=self._run_session, args=(conn,), daemon=True
                )
                self._sessions.add(thread)
                self.connections_served += 1
                thread.start()

    def _run_session(self, conn: socket.socket) -> None:
        env = EpisodeAccounting(self._env_factory())
        wire.env_session(conn, env, stop_event=self._stop)

    def stop(self, join_timeout: float = 5.0) -> None:
        self._stop.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=join_timeout)
        with self._lock:
            sessions = list(self._sessions)
        for t in sessions:
            t.join(timeout=join_timeout)

    def __enter__(self) -> "EnvServer":
        self.start()
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_envs(
    address: tuple[str, int],
    env_factory: Callable[[], object],
    max_connections: int = 4,
    stop_event: Optional[threading.Event] = None,
) -> None:
    """Blocking convenience: run an EnvServer until stop_event (or forever)."""
    server = EnvServer(address, env_factory, max_connections)
    server.start()
    host, port = server.bound_address
    log.info("serving on %s:%d", host, port)
    try:
        if stop_event is None:
            stop_event = threading.Event()
        while not stop_event.wait(0.2):
            pass
    finally:
        server.stop()
