"""V-trace value targets, policy-gradient advantages, and the training loss.

`vtrace_targets` runs the backward recursion; `vtrace_oracle` evaluates the
same quantity as an O(T²) definitional sum so the recursion can be checked
against it. Targets are constants: no gradient flows through them, only
through the action log-probabilities and the baseline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import NonFiniteError, entropy, log_softmax
from .rollout import SchemaError, TrainingBatch


@dataclass(frozen=True)
class VtraceConfig:
    discount: float = 0.99
    rho_bar: float = 1.0
    c_bar: float = 1.0
    baseline_cost: float = 0.5
    entropy_cost: float = 0.01
    pg_cost: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if not self.rho_bar >= self.c_bar > 0.0:
            raise ValueError(
                f"need rho_bar >= c_bar > 0, got {self.rho_bar}, {self.c_bar}"
            )


@dataclass(frozen=True)
class VtraceResult:
    vs: np.ndarray
    pg_advantages: np.ndarray
    clipped_rhos: np.ndarray


@dataclass(frozen=True)
class LossBundle:
    pg_loss: float
    baseline_loss: float
    entropy_loss: float
    total: float


def action_log_rhos(
    behavior_logits: np.ndarray, target_logits: np.ndarray, actions: np.ndarray
) -> np.ndarray:
    """log π_target(a|x) − log π_behavior(a|x), per (T, B) step."""
    if behavior_logits.shape != target_logits.shape:
        raise SchemaError(
            f"logits shapes differ: {behavior_logits.shape} vs {target_logits.shape}"
        )
    if actions.shape != behavior_logits.shape[:-1]:
        raise SchemaError(
            f"actions shape {actions.shape}, expected {behavior_logits.shape[:-1]}"
        )
    num_actions = behavior_logits.shape[-1]
    if actions.min() < 0 or actions.max() >= num_actions:
        raise SchemaError(f"actions outside [0, {num_actions})")
    idx = actions[..., None]
    target_logp = np.take_along_axis(log_softmax(target_logits), idx, axis=-1)[..., 0]
    behavior_logp = np.take_along_axis(log_softmax(behavior_logits), idx, axis=-1)[..., 0]
    return target_logp - behavior_logp


def _check_vtrace_inputs(log_rhos, discounts, rewards, values, bootstrap_value):
    shape = log_rhos.shape
    if len(shape) != 2:
        raise SchemaError(f"log_rhos must be (T, B), got {shape}")
    for name, arr in (("discounts", discounts), ("rewards", rewards), ("values", values)):
        if arr.shape != shape:
            raise SchemaError(f"{name} shape {arr.shape}, expected {shape}")
    if bootstrap_value.shape != (shape[1],):
        raise SchemaError(
            f"bootstrap_value shape {bootstrap_value.shape}, expected ({shape[1]},)"
        )
    for name, arr in (
        ("log_rhos", log_rhos),
        ("discounts", discounts),
        ("rewards", rewards),
        ("values", values),
        ("bootstrap_value", bootstrap_value),
    ):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"{name} contains non-finite values")


def vtrace_targets(
    log_rhos: np.ndarray,
    discounts: np.ndarray,
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: np.ndarray,
    cfg: VtraceConfig,
) -> VtraceResult:
    """Backward-recursion V-trace over (T, B) inputs.

    δ_t = ρ_t (r_t + γ_t V(x_{t+1}) − V(x_t)) with ρ_t = min(ρ̄, e^{log ρ_t});
    v_s = V(x_s) + δ_s + γ_s c_s (v_{s+1} − V(x_{s+1})), v_T = bootstrap;
    pg_advantage_s = ρ_s (r_s + γ_s v_{s+1} − V(x_s)).
    """
    _check_vtrace_inputs(log_rhos, discounts, rewards, values, bootstrap_value)
    if discounts.min() < 0.0:
        raise SchemaError("discounts must be non-negative")
    t_len = log_rhos.shape[0]

    rhos = np.exp(log_rhos)
    clipped_rhos = np.minimum(cfg.rho_bar, rhos)
    cs = np.minimum(cfg.c_bar, rhos)
    values_next = np.concatenate([values[1:], bootstrap_value[None, :]], axis=0)
    deltas = clipped_rhos * (rewards + discounts * values_next - values)

    vs_minus_v = np.zeros_like(values)
    acc = np.zeros_like(bootstrap_value)
    for t in range(t_len - 1, -1, -1):
        acc = deltas[t] + discounts[t] * cs[t] * acc
        vs_minus_v[t] = acc
    vs = vs_minus_v + values

    vs_next = np.concatenate([vs[1:], bootstrap_value[None, :]], axis=0)
    pg_advantages = clipped_rhos * (rewards + discounts * vs_next - values)
    return VtraceResult(vs=vs, pg_advantages=pg_advantages, clipped_rhos=clipped_rhos)


def vtrace_oracle(
    log_rhos: np.ndarray,
    discounts: np.ndarray,
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value: np.ndarray,
    cfg: VtraceConfig,
) -> VtraceResult:
    """Definitional O(T²) evaluation, no backward recursion.

    v_s = V(x_s) + Σ_{t≥s} (Π_{i=s}^{t−1} γ_i c_i) δ_t, evaluated term by term.
    """
    _check_vtrace_inputs(log_rhos, discounts, rewards, values, bootstrap_value)
    t_len, b_len = log_rhos.shape

    rhos = np.exp(log_rhos)
    clipped_rhos = np.minimum(cfg.rho_bar, rhos)
    cs = np.minimum(cfg.c_bar, rhos)

    vs = np.zeros_like(values)
    for b in range(b_len):
        for s in range(t_len):
            acc = float(values[s, b])
            prod = 1.0
            for t in range(s, t_len):
                v_next = float(values[t + 1, b]) if t + 1 < t_len else float(bootstrap_value[b])
                delta = float(clipped_rhos[t, b]) * (
                    float(rewards[t, b]) + float(discounts[t, b]) * v_next - float(values[t, b])
                )
                acc += prod * delta
                prod *= float(discounts[t, b]) * float(cs[t, b])
            vs[s, b] = acc

    vs_next = np.concatenate([vs[1:], bootstrap_value[None, :]], axis=0)
    pg_advantages = clipped_rhos * (rewards + discounts * vs_next - values)
    return VtraceResult(vs=vs, pg_advantages=pg_advantages, clipped_rhos=clipped_rhos)


def losses_from_targets(
    learner_logits: np.ndarray,
    learner_baseline: np.ndarray,
    actions: np.ndarray,
    targets: VtraceResult,
    cfg: VtraceConfig,
) -> tuple[LossBundle, np.ndarray, np.ndarray]:
    """Three-term loss and its exact gradients, with targets held constant.

    learner_logits: (T, B, A); learner_baseline: (T+1, B) — row T is the
    bootstrap row and receives zero gradient. Returns the bundle plus
    d(total)/d(logits) and d(total)/d(baseline).
    """
    t_len = learner_logits.shape[0]
    if learner_baseline.shape[0] != t_len + 1:
        raise SchemaError(
            f"baseline rows {learner_baseline.shape[0]}, expected {t_len + 1}"
        )
    values = learner_baseline[:-1]

    logp = log_softmax(learner_logits)
    pi = np.exp(logp)
    action_logp = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
    ent = entropy(learner_logits)

    pg_loss = float(-(targets.pg_advantages * action_logp).sum())
    baseline_loss = float(0.5 * ((targets.vs - values) ** 2).sum())
    entropy_loss = float(-ent.sum())
    total = (
        cfg.pg_cost * pg_loss
        + cfg.baseline_cost * baseline_loss
        + cfg.entropy_cost * entropy_loss
    )
    if not np.isfinite(total):
        raise NonFiniteError(
            f"non-finite loss: pg={pg_loss} baseline={baseline_loss} entropy={entropy_loss}"
        )

    onehot = np.zeros_like(pi)
    np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
    d_logits = cfg.pg_cost * targets.pg_advantages[..., None] * (pi - onehot)
    d_logits += cfg.entropy_cost * pi * (logp + ent[..., None])

    d_baseline = np.zeros_like(learner_baseline)
    d_baseline[:-1] = cfg.baseline_cost * (values - targets.vs)

    bundle = LossBundle(
        pg_loss=pg_loss,
        baseline_loss=baseline_loss,
        entropy_loss=entropy_loss,
        total=float(total),
    )
    return bundle, d_logits, d_baseline


def compute_losses(
    batch: TrainingBatch,
    learner_logits: np.ndarray,
    learner_baseline: np.ndarray,
    cfg: VtraceConfig,
) -> tuple[LossBundle, np.ndarray, np.ndarray, VtraceResult]:
    """Full learner loss for one batch.

    learner_logits (T, B, A) and learner_baseline (T+1, B) come from the
    current model on the batch observations. Rewards and done flags are read
    shifted by one row: row t+1 carries the outcome of the action at row t.
    Returns (bundle, d_logits, d_baseline, targets).
    """
    t_len = batch.unroll_length
    if learner_logits.shape != (t_len, batch.batch_size, batch.num_actions):
        raise SchemaError(
            f"learner_logits shape {learner_logits.shape}, expected "
            f"({t_len}, {batch.batch_size}, {batch.num_actions})"
        )
    actions = batch.action[:-1]
    behavior_logits = batch.policy_logits[:-1].astype(learner_logits.dtype)
    rewards = batch.reward[1:].astype(learner_baseline.dtype)
    discounts = (cfg.discount * ~batch.done[1:]).astype(learner_baseline.dtype)

    log_rhos = action_log_rhos(behavior_logits, learner_logits, actions)
    targets = vtrace_targets(
        log_rhos, discounts, rewards, learner_baseline[:-1], learner_baseline[-1], cfg
    )
    bundle, d_logits, d_baseline = losses_from_targets(
        learner_logits, learner_baseline, actions, targets, cfg
    )
    return bundle, d_logits, d_baseline, targets
