"""Policy/value MLP with exact analytic gradients, plus RMSProp.

Everything here is plain numpy: a shared relu torso feeding a policy-logits
head and a scalar baseline head. Gradients are hand-derived reverse mode so
the platform has no autodiff dependency; training runs in float32, the
gradient-check tests in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PARAM_FIELDS = ("W1", "b1", "Wp", "bp", "Wv", "bv")


class DimensionError(ValueError):
    """Array shapes inconsistent with the model or with each other."""


class NonFiniteError(ValueError):
    """A NaN/inf showed up where training must halt."""


@dataclass(frozen=True)
class ModelParams:
    """MLP parameters. Arrays are treated as immutable once constructed.

    W1: (hidden, obs_dim), b1: (hidden,), Wp: (num_actions, hidden),
    bp: (num_actions,), Wv: (1, hidden), bv: (1,). `version` increases by
    one on every optimizer step.
    """

    W1: np.ndarray
    b1: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    version: int = 0

    @property
    def obs_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def num_actions(self) -> int:
        return self.Wp.shape[0]

    def check_consistent(self) -> None:
        h = self.hidden
        shapes = {
            "W1": (h, self.obs_dim),
            "b1": (h,),
            "Wp": (self.num_actions, h),
            "bp": (self.num_actions,),
            "Wv": (1, h),
            "bv": (1,),
        }
        for name, want in shapes.items():
            got = getattr(self, name).shape
            if got != want:
                raise DimensionError(f"param {name}: shape {got}, expected {want}")
        for name in PARAM_FIELDS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteError(f"param {name} contains non-finite values")


@dataclass(frozen=True)
class GradientSet:
    """One gradient array per ModelParams field, same shapes."""

    W1: np.ndarray
    b1: np.ndarray
    Wp: np.ndarray
    bp: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray


@dataclass(frozen=True)
class RmsPropState:
    """Running mean of squared gradients plus hyperparameters."""

    g2: dict[str, np.ndarray]
    learning_rate: float = 0.005
    decay: float = 0.99
    epsilon: float = 0.01


def init_params(
    obs_dim: int,
    num_actions: int,
    hidden: int = 128,
    seed: int = 0,
    dtype=np.float32,
) -> ModelParams:
    """He-init torso, zero heads (uniform initial policy, zero baseline)."""
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(2.0 / obs_dim), size=(hidden, obs_dim)).astype(dtype)
    return ModelParams(
        W1=W1,
        b1=np.zeros(hidden, dtype=dtype),
        Wp=np.zeros((num_actions, hidden), dtype=dtype),
        bp=np.zeros(num_actions, dtype=dtype),
        Wv=np.zeros((1, hidden), dtype=dtype),
        bv=np.zeros(1, dtype=dtype),
        version=0,
    )


def init_rmsprop(
    params: ModelParams,
    learning_rate: float = 0.005,
    decay: float = 0.99,
    epsilon: float = 0.01,
) -> RmsPropState:
    g2 = {name: np.zeros_like(getattr(params, name)) for name in PARAM_FIELDS}
    return RmsPropState(g2=g2, learning_rate=learning_rate, decay=decay, epsilon=epsilon)


def mlp_forward(params: ModelParams, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Run obs (N, obs_dim) through the net.

    Returns (logits (N, num_actions), baseline (N,)).
    """
    if obs.ndim != 2 or obs.shape[1] != params.obs_dim:
        raise DimensionError(
            f"obs shape {obs.shape}, expected (N, {params.obs_dim})"
        )
    h = np.maximum(obs @ params.W1.T + params.b1, 0.0)
    logits = h @ params.Wp.T + params.bp
    baseline = (h @ params.Wv.T + params.bv)[:, 0]
    return logits, baseline


def mlp_backward(
    params: ModelParams,
    obs: np.ndarray,
    upstream_logits_grad: np.ndarray,
    upstream_baseline_grad: np.ndarray,
) -> GradientSet:
    """Exact gradient of sum(upstream ⊙ output) w.r.t. every parameter."""
    if obs.ndim != 2 or obs.shape[1] != params.obs_dim:
        raise DimensionError(f"obs shape {obs.shape}, expected (N, {params.obs_dim})")
    n = obs.shape[0]
    if upstream_logits_grad.shape != (n, params.num_actions):
        raise DimensionError(
            f"logits grad shape {upstream_logits_grad.shape}, "
            f"expected ({n}, {params.num_actions})"
        )
    if upstream_baseline_grad.shape != (n,):
        raise DimensionError(
            f"baseline grad shape {upstream_baseline_grad.shape}, expected ({n},)"
        )

    z1 = obs @ params.W1.T + params.b1
    h = np.maximum(z1, 0.0)
    g_v = upstream_baseline_grad[:, None]

    d_Wp = upstream_logits_grad.T @ h
    d_bp = upstream_logits_grad.sum(axis=0)
    d_Wv = g_v.T @ h
    d_bv = g_v.sum(axis=0)
    d_h = upstream_logits_grad @ params.Wp + g_v @ params.Wv
    d_z1 = d_h * (z1 > 0.0)
    d_W1 = d_z1.T @ obs
    d_b1 = d_z1.sum(axis=0)
    return GradientSet(W1=d_W1, b1=d_b1, Wp=d_Wp, bp=d_bp, Wv=d_Wv, bv=d_bv)


def mlp_forward_backward(
    params: ModelParams,
    obs: np.ndarray,
    loss_grads_fn,
) -> tuple[np.ndarray, np.ndarray, GradientSet]:
    """Forward pass plus backward sharing the activations (learner hot path).

    `loss_grads_fn(logits, baseline) -> (upstream_logits_grad,
    upstream_baseline_grad)`. Equivalent to mlp_forward followed by
    mlp_backward, without recomputing the hidden layer.
    """
    z1 = obs @ params.W1.T + params.b1
    h = np.maximum(z1, 0.0)
    logits = h @ params.Wp.T + params.bp
    baseline = (h @ params.Wv.T + params.bv)[:, 0]
    up_logits, up_baseline = loss_grads_fn(logits, baseline)
    g_v = up_baseline[:, None]
    d_h = up_logits @ params.Wp + g_v @ params.Wv
    d_z1 = d_h * (z1 > 0.0)
    grads = GradientSet(
        W1=d_z1.T @ obs,
        b1=d_z1.sum(axis=0),
        Wp=up_logits.T @ h,
        bp=up_logits.sum(axis=0),
        Wv=g_v.T @ h,
        bv=g_v.sum(axis=0),
    )
    return logits, baseline, grads


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Stabilized log-softmax over the last axis."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(logits: np.ndarray) -> np.ndarray:
    """Per-row policy entropy −Σ π log π over the last axis."""
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Categorical sample per row via Gumbel-max; returns int64 of logits.shape[:-1]."""
    noisy = logits + rng.gumbel(size=logits.shape)
    return np.argmax(noisy, axis=-1).astype(np.int64)


def clip_global_norm(grads: GradientSet, max_norm: float) -> tuple[GradientSet, float]:
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = float(
        np.sqrt(sum(float(np.sum(getattr(grads, f) ** 2)) for f in PARAM_FIELDS))
    )
    if max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    scaled = {f: getattr(grads, f) * scale for f in PARAM_FIELDS}
    return GradientSet(**scaled), total


def rmsprop_step(
    params: ModelParams, grads: GradientSet, state: RmsPropState
) -> tuple[ModelParams, RmsPropState]:
    """One RMSProp update (epsilon outside the root, no momentum).

    g2 ← decay·g2 + (1−decay)·grad²; param ← param − lr·grad/(√g2 + ε).
    Returns fresh params (version+1) and fresh state; inputs are not mutated.
    Non-finite gradients are rejected so the caller can halt training.
    """
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        if getattr(params, name).shape != g.shape:
            raise DimensionError(
                f"grad {name}: shape {g.shape}, expected {getattr(params, name).shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"grad {name} contains non-finite values")

    new_g2: dict[str, np.ndarray] = {}
    new_params: dict[str, np.ndarray] = {}
    for name in PARAM_FIELDS:
        g = getattr(grads, name)
        p = getattr(params, name)
        g2 = state.decay * state.g2[name] + (1.0 - state.decay) * g * g
        new_g2[name] = g2
        denom = np.sqrt(g2) + state.epsilon
        # denom can only be 0 where g is 0 too (and epsilon is 0): step is 0 there.
        step = np.divide(g, denom, out=np.zeros_like(g), where=denom != 0.0)
        new_params[name] = p - state.learning_rate * step
    return (
        replace(params, version=params.version + 1, **new_params),
        replace(state, g2=new_g2),
    )
