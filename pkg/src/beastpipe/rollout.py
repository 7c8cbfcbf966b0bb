"""Time-major rollout and training-batch schema.

A rollout carries T+1 rows: T transitions plus one extra row whose baseline
bootstraps the value targets. Row t holds the environment output observed at
time t (done=true marks the first row of an episode) and the agent output
produced from it. Batches stack rollouts along axis 1 (time-major).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SchemaError(ValueError):
    """A rollout or batch violates the learner input schema."""


@dataclass(frozen=True)
class EnvOutput:
    """One environment step as seen by an actor."""

    observation: np.ndarray
    reward: float
    done: bool
    episode_step: int
    episode_return: float


@dataclass(frozen=True)
class AgentOutput:
    """Behavior-policy output for one step."""

    action: int
    policy_logits: np.ndarray
    baseline: float


@dataclass(frozen=True)
class Rollout:
    """T+1 rows of experience from one actor, stored field-wise.

    observation: (T+1, *obs_shape); reward/baseline: (T+1,) float32;
    done: (T+1,) bool; action: (T+1,) int64; policy_logits: (T+1, A) float32.
    `model_version` is the oldest parameter version that produced any of the
    rollout's actions; `uid` identifies the rollout for conservation checks.
    """

    observation: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    policy_logits: np.ndarray
    baseline: np.ndarray
    action: np.ndarray
    model_version: int
    uid: str = ""

    @property
    def unroll_length(self) -> int:
        return self.observation.shape[0] - 1

    @property
    def num_actions(self) -> int:
        return self.policy_logits.shape[-1]


@dataclass(frozen=True)
class TrainingBatch:
    """B rollouts stacked time-major: leading dims (T+1, B)."""

    observation: np.ndarray
    reward: np.ndarray
    done: np.ndarray
    policy_logits: np.ndarray
    baseline: np.ndarray
    action: np.ndarray
    model_versions: np.ndarray

    @property
    def unroll_length(self) -> int:
        return self.observation.shape[0] - 1

    @property
    def batch_size(self) -> int:
        return self.observation.shape[1]

    @property
    def num_actions(self) -> int:
        return self.policy_logits.shape[-1]


def rollout_from_rows(
    rows: list[tuple[EnvOutput, AgentOutput]], model_version: int, uid: str = ""
) -> Rollout:
    """Assemble a Rollout from T+1 (EnvOutput, AgentOutput) pairs."""
    if len(rows) < 2:
        raise SchemaError(f"rollout needs at least 2 rows, got {len(rows)}")
    obs_shape = rows[0][0].observation.shape
    for env_out, _ in rows:
        if env_out.observation.shape != obs_shape:
            raise SchemaError(
                f"observation shape {env_out.observation.shape} != {obs_shape}"
            )
    return Rollout(
        observation=np.stack([e.observation for e, _ in rows]),
        reward=np.array([e.reward for e, _ in rows], dtype=np.float32),
        done=np.array([e.done for e, _ in rows], dtype=bool),
        policy_logits=np.stack([a.policy_logits for _, a in rows]).astype(np.float32),
        baseline=np.array([a.baseline for _, a in rows], dtype=np.float32),
        action=np.array([a.action for _, a in rows], dtype=np.int64),
        model_version=model_version,
        uid=uid,
    )


def stack_rollouts(rollouts: list[Rollout], batch_dim: int = 1) -> TrainingBatch:
    """Stack B rollouts into a TrainingBatch, inserting the batch axis at dim 1."""
    if batch_dim != 1:
        raise SchemaError(f"batch_dim must be 1, got {batch_dim}")
    if not rollouts:
        raise SchemaError("cannot stack zero rollouts")
    first = rollouts[0]
    for r in rollouts[1:]:
        if r.observation.shape != first.observation.shape:
            raise SchemaError(
                f"observation dims {r.observation.shape} != {first.observation.shape}"
            )
        if r.policy_logits.shape != first.policy_logits.shape:
            raise SchemaError(
                f"policy_logits dims {r.policy_logits.shape} != {first.policy_logits.shape}"
            )
        if r.observation.dtype != first.observation.dtype:
            raise SchemaError(
                f"observation dtype {r.observation.dtype} != {first.observation.dtype}"
            )
    return TrainingBatch(
        observation=np.stack([r.observation for r in rollouts], axis=1),
        reward=np.stack([r.reward for r in rollouts], axis=1),
        done=np.stack([r.done for r in rollouts], axis=1),
        policy_logits=np.stack([r.policy_logits for r in rollouts], axis=1),
        baseline=np.stack([r.baseline for r in rollouts], axis=1),
        action=np.stack([r.action for r in rollouts], axis=1),
        model_versions=np.array([r.model_version for r in rollouts], dtype=np.int64),
    )


def slice_batch(batch: TrainingBatch, j: int) -> Rollout:
    """Recover rollout j from a batch (inverse of stack_rollouts, minus uid)."""
    return Rollout(
        observation=batch.observation[:, j],
        reward=batch.reward[:, j],
        done=batch.done[:, j],
        policy_logits=batch.policy_logits[:, j],
        baseline=batch.baseline[:, j],
        action=batch.action[:, j],
        model_version=int(batch.model_versions[j]),
    )


def validate_batch(batch: TrainingBatch) -> None:
    """Raise SchemaError (naming field and dims) on the first violation."""
    obs = batch.observation
    if obs.ndim < 2:
        raise SchemaError(f"observation: dims {obs.shape}, need at least (T+1, B)")
    t1, b = obs.shape[0], obs.shape[1]
    if t1 < 2:
        raise SchemaError(f"observation: dims {obs.shape}, need T+1 >= 2 rows")
    for name in ("reward", "done", "baseline", "action"):
        arr = getattr(batch, name)
        if arr.shape != (t1, b):
            raise SchemaError(f"{name}: dims {arr.shape}, expected ({t1}, {b})")
    logits = batch.policy_logits
    if logits.ndim != 3 or logits.shape[:2] != (t1, b):
        raise SchemaError(
            f"policy_logits: dims {logits.shape}, expected ({t1}, {b}, A)"
        )
    if batch.model_versions.shape != (b,):
        raise SchemaError(
            f"model_versions: dims {batch.model_versions.shape}, expected ({b},)"
        )
    if batch.done.dtype != np.bool_:
        raise SchemaError(f"done: dtype {batch.done.dtype}, expected bool")
    num_actions = logits.shape[-1]
    if batch.action.min() < 0 or batch.action.max() >= num_actions:
        raise SchemaError(
            f"action: value outside [0, {num_actions}) "
            f"(min {batch.action.min()}, max {batch.action.max()})"
        )
    if not np.all(np.isfinite(batch.reward)):
        raise SchemaError("reward: contains non-finite values")
    if not np.all(np.isfinite(logits)):
        raise SchemaError("policy_logits: contains non-finite values")
