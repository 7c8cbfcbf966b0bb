import numpy as np
import pytest

from beastpipe.model import (
    DimensionError,
    GradientSet,
    ModelParams,
    NonFiniteError,
    PARAM_FIELDS,
    clip_global_norm,
    entropy,
    init_params,
    init_rmsprop,
    log_softmax,
    mlp_backward,
    mlp_forward,
    rmsprop_step,
    sample_actions,
)
from conftest import assert_grads_close, central_difference


def random_params(rng, obs_dim, hidden, num_actions, dtype=np.float64):
    return ModelParams(
        W1=rng.normal(size=(hidden, obs_dim)).astype(dtype),
        b1=rng.normal(size=hidden).astype(dtype),
        Wp=rng.normal(size=(num_actions, hidden)).astype(dtype),
        bp=rng.normal(size=num_actions).astype(dtype),
        Wv=rng.normal(size=(1, hidden)).astype(dtype),
        bv=rng.normal(size=1).astype(dtype),
    )


def well_separated_instance(rng, obs_dim, hidden, num_actions, n):
    """Params/obs kept away from the relu kink so finite differences behave."""
    while True:
        params = random_params(rng, obs_dim, hidden, num_actions)
        obs = rng.normal(size=(n, obs_dim))
        z1 = obs @ params.W1.T + params.b1
        if np.min(np.abs(z1)) > 1e-3:
            return params, obs


class TestMlpForward:
    def test_zero_params_zero_outputs(self, rng):
        params = init_params(3, 4, hidden=8, seed=0, dtype=np.float64)
        zero = ModelParams(**{f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS})
        logits, baseline = mlp_forward(zero, rng.normal(size=(5, 3)))
        assert np.all(logits == 0.0)
        assert np.all(baseline == 0.0)

    def test_hand_evaluated_chain(self):
        params = ModelParams(
            W1=np.array([[1.0]]),
            b1=np.array([0.0]),
            Wp=np.array([[2.0]]),
            bp=np.array([0.0]),
            Wv=np.array([[0.0]]),
            bv=np.array([0.0]),
        )
        logits, baseline = mlp_forward(params, np.array([[3.0]]))
        assert logits[0, 0] == pytest.approx(6.0)
        assert baseline[0] == pytest.approx(0.0)

    def test_relu_dead_zone_returns_bias(self):
        params = ModelParams(
            W1=np.array([[-1.0]]),
            b1=np.array([0.0]),
            Wp=np.array([[5.0]]),
            bp=np.array([0.7]),
            Wv=np.array([[3.0]]),
            bv=np.array([-0.2]),
        )
        logits, baseline = mlp_forward(params, np.array([[2.0]]))
        assert logits[0, 0] == pytest.approx(0.7)
        assert baseline[0] == pytest.approx(-0.2)

    def test_shape_mismatch_rejected(self, rng):
        params = init_params(3, 2, hidden=4, seed=0)
        with pytest.raises(DimensionError):
            mlp_forward(params, rng.normal(size=(5, 4)).astype(np.float32))


class TestMlpBackward:
    def test_zero_upstream_zero_grads(self, rng):
        params, obs = well_separated_instance(rng, 3, 4, 2, 5)
        grads = mlp_backward(params, obs, np.zeros((5, 2)), np.zeros(5))
        for f in PARAM_FIELDS:
            assert np.all(getattr(grads, f) == 0.0)

    def test_matches_finite_differences(self, rng):
        for _ in range(10):
            dims = rng.integers(1, 9, size=4)
            obs_dim, hidden, num_actions, n = (int(d) for d in dims)
            params, obs = well_separated_instance(rng, obs_dim, hidden, num_actions, n)
            up_l = rng.normal(size=(n, num_actions))
            up_b = rng.normal(size=n)
            analytic = mlp_backward(params, obs, up_l, up_b)

            def objective():
                logits, baseline = mlp_forward(params, obs)
                return float((up_l * logits).sum() + (up_b * baseline).sum())

            for name in PARAM_FIELDS:
                numeric = central_difference(objective, getattr(params, name))
                assert_grads_close(getattr(analytic, name), numeric)

    def test_fused_forward_backward_matches_separate_calls(self, rng):
        from beastpipe.model import mlp_forward_backward

        params, obs = well_separated_instance(rng, 4, 6, 3, 7)
        up_l = rng.normal(size=(7, 3))
        up_b = rng.normal(size=7)
        logits, baseline, grads = mlp_forward_backward(
            params, obs, lambda lg, bl: (up_l, up_b)
        )
        want_logits, want_baseline = mlp_forward(params, obs)
        want_grads = mlp_backward(params, obs, up_l, up_b)
        np.testing.assert_array_equal(logits, want_logits)
        np.testing.assert_array_equal(baseline, want_baseline)
        for f in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(grads, f), getattr(want_grads, f))

    def test_dead_relu_unit_gets_zero_gradient(self):
        params = ModelParams(
            W1=np.array([[-1.0], [1.0]]),
            b1=np.array([0.0, 0.0]),
            Wp=np.array([[1.0, 1.0]]),
            bp=np.array([0.0]),
            Wv=np.array([[1.0, 1.0]]),
            bv=np.array([0.0]),
        )
        obs = np.array([[2.0]])  # unit 0 pre-activation is -2: dead
        grads = mlp_backward(params, obs, np.ones((1, 1)), np.ones(1))
        assert grads.W1[0, 0] == 0.0
        assert grads.W1[1, 0] != 0.0


class TestLogSoftmaxEntropy:
    def test_uniform_two_actions(self):
        out = log_softmax(np.array([0.0, 0.0]))
        np.testing.assert_allclose(out, [-np.log(2)] * 2, atol=1e-12)

    def test_derived_values(self):
        out = log_softmax(np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [-0.31326169, -1.31326169], atol=1e-7)

    def test_large_logits_stay_finite(self):
        out = log_softmax(np.array([1000.0, 0.0]))
        assert np.all(np.isfinite(out))

    def test_rows_sum_to_one(self, rng):
        logits = rng.normal(scale=10.0, size=(50, 7))
        probs = np.exp(log_softmax(logits))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)

    def test_entropy_uniform_is_log_a(self):
        for a in (2, 3, 5, 11):
            assert entropy(np.zeros(a)) == pytest.approx(np.log(a), abs=1e-12)

    def test_entropy_near_deterministic(self):
        assert entropy(np.array([10.0, -10.0])) < 1e-3

    def test_entropy_bounds(self, rng):
        logits = rng.normal(scale=5.0, size=(200, 6))
        ent = entropy(logits)
        assert np.all(ent >= 0.0)
        assert np.all(ent <= np.log(6) + 1e-9)


class TestRmsProp:
    def test_zero_grad_keeps_params(self):
        params = init_params(2, 3, hidden=4, seed=1)
        state = init_rmsprop(params)
        zero = GradientSet(**{f: np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS})
        new_params, _ = rmsprop_step(params, zero, state)
        assert new_params.version == params.version + 1
        for f in PARAM_FIELDS:
            np.testing.assert_array_equal(getattr(new_params, f), getattr(params, f))

    def test_hand_evaluated_update(self):
        params = ModelParams(
            W1=np.array([[1.0]]),
            b1=np.zeros(1),
            Wp=np.zeros((1, 1)),
            bp=np.zeros(1),
            Wv=np.zeros((1, 1)),
            bv=np.zeros(1),
        )
        grads = GradientSet(
            W1=np.array([[1.0]]),
            b1=np.zeros(1),
            Wp=np.zeros((1, 1)),
            bp=np.zeros(1),
            Wv=np.zeros((1, 1)),
            bv=np.zeros(1),
        )
        state = init_rmsprop(params, learning_rate=0.1, decay=0.99, epsilon=0.0)
        new_params, new_state = rmsprop_step(params, grads, state)
        assert new_state.g2["W1"][0, 0] == pytest.approx(0.01)
        assert new_params.W1[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_repeated_steps_shrink(self):
        params = init_params(1, 2, hidden=1, seed=0, dtype=np.float64)
        state = init_rmsprop(params, learning_rate=0.1)
        g = GradientSet(
            W1=np.ones((1, 1)),
            b1=np.ones(1),
            Wp=np.ones((2, 1)),
            bp=np.ones(2),
            Wv=np.ones((1, 1)),
            bv=np.ones(1),
        )
        p1, state = rmsprop_step(params, g, state)
        p2, state = rmsprop_step(p1, g, state)
        step1 = abs(params.b1[0] - p1.b1[0])
        step2 = abs(p1.b1[0] - p2.b1[0])
        assert step2 < step1

    def test_nonfinite_grad_rejected(self):
        params = init_params(1, 2, hidden=1, seed=0)
        state = init_rmsprop(params)
        g = GradientSet(
            W1=np.array([[np.nan]], dtype=np.float32),
            b1=np.zeros(1, np.float32),
            Wp=np.zeros((2, 1), np.float32),
            bp=np.zeros(2, np.float32),
            Wv=np.zeros((1, 1), np.float32),
            bv=np.zeros(1, np.float32),
        )
        with pytest.raises(NonFiniteError):
            rmsprop_step(params, g, state)

    def test_epsilon_guards_division(self, rng):
        params = init_params(3, 2, hidden=4, seed=2)
        state = init_rmsprop(params, epsilon=0.01)
        g = GradientSet(
            **{
                f: rng.normal(size=getattr(params, f).shape).astype(np.float32)
                for f in PARAM_FIELDS
            }
        )
        new_params, _ = rmsprop_step(params, g, state)
        for f in PARAM_FIELDS:
            assert np.all(np.isfinite(getattr(new_params, f)))


class TestSamplingAndClipping:
    def test_sampling_respects_sharp_logits(self):
        rng = np.random.default_rng(7)
        logits = np.tile(np.array([10.0, -10.0]), (10_000, 1))
        actions = sample_actions(logits, rng)
        assert (actions == 0).mean() >= 0.999

    def test_sampling_reproducible_with_seed(self):
        logits = np.zeros((100, 4))
        a1 = sample_actions(logits, np.random.default_rng(3))
        a2 = sample_actions(logits, np.random.default_rng(3))
        np.testing.assert_array_equal(a1, a2)

    def test_clip_global_norm(self):
        g = GradientSet(
            W1=np.array([[3.0]]),
            b1=np.array([4.0]),
            Wp=np.zeros((1, 1)),
            bp=np.zeros(1),
            Wv=np.zeros((1, 1)),
            bv=np.zeros(1),
        )
        clipped, norm = clip_global_norm(g, 1.0)
        assert norm == pytest.approx(5.0)
        total = np.sqrt(clipped.W1[0, 0] ** 2 + clipped.b1[0] ** 2)
        assert total == pytest.approx(1.0)
        same, _ = clip_global_norm(g, 10.0)
        np.testing.assert_array_equal(same.W1, g.W1)
