import numpy as np
import pytest

from attention_kf.atkf import (
    AtkfState,
    FeatureWindow,
    FilterDivergenceError,
    atkf_run,
    atkf_step,
    backprop_through_time,
    run_batch,
    window_push,
    windows_from_history,
)
from attention_kf.nn import init_params
from attention_kf.system import (
    PARA_M,
    PARA_S,
    X0,
    generate_dataset,
    linear_model,
    noise_free_trajectory,
    simulate_trajectory,
    synthetic_model,
)


def constant_gain_params(K, s=4, m=2, n=2):
    """Parameters whose gain is ``K`` whatever the input."""
    p = init_params(m, n, s, 4, 4).zeros_like()
    p.out_b[:] = np.asarray(K, dtype=float).ravel()
    return p


def random_params(seed, s=2, d=4, transform="l2"):
    rng = np.random.default_rng(seed)
    p = init_params(2, 2, s, d, 6, seed=seed, feature_transform=transform)
    return p.with_flat(p.flat() + 0.1 * rng.standard_normal(p.flat().shape))


class TestWindow:
    def test_single_push(self):
        w = window_push(FeatureWindow.empty(4, 2, 2), [1.0, 2.0], [3.0, 4.0])
        np.testing.assert_array_equal(w.dx_history, [[0, 0], [0, 0], [0, 0], [1, 2]])
        np.testing.assert_array_equal(w.dy_history, [[0, 0], [0, 0], [0, 0], [3, 4]])
        assert w.size == 4

    def test_padding_displaced_and_evicted(self):
        w = FeatureWindow.empty(3, 1, 1)
        for v in range(1, 5):
            w = window_push(w, [v], [10 * v])
            if v == 3:
                assert np.all(w.dx_history != 0)
        np.testing.assert_array_equal(w.dx_history.ravel(), [2, 3, 4])
        np.testing.assert_array_equal(w.dy_history.ravel(), [20, 30, 40])

    def test_windows_from_history(self):
        dx = np.arange(1, 6, dtype=float)[:, None]
        dy = 10 * dx
        wx, wy = windows_from_history(dx, dy, 3)
        assert wx.shape == (5, 3, 1)
        np.testing.assert_array_equal(wx[0].ravel(), [0, 0, 1])
        np.testing.assert_array_equal(wx[4].ravel(), [3, 4, 5])
        np.testing.assert_array_equal(wy[1].ravel(), [0, 10, 20])


class TestStep:
    def test_hand_example(self):
        model = synthetic_model(PARA_M, 1.0, 1.0)
        p = constant_gain_params(0.5 * np.eye(2))
        state, x_hat, K, _ = atkf_step(model, p, AtkfState.initial([0.0, 0.0], p), [1.0, 1.0])
        np.testing.assert_array_equal(x_hat, [0.5, 0.5])
        np.testing.assert_array_equal(K, 0.5 * np.eye(2))
        assert state.step == 1
        np.testing.assert_array_equal(state.dx_prev, [0.5, 0.5])
        np.testing.assert_array_equal(state.window.dy_history[-1], [1.0, 1.0])

    def test_identity_gain_returns_observation(self):
        model = linear_model(np.diag([0.7, -0.4]), np.eye(2), np.eye(2), np.eye(2))
        ys = simulate_trajectory(model, X0, 12, 0).observations
        est = atkf_run(model, constant_gain_params(np.eye(2)), ys, X0)
        np.testing.assert_allclose(est, ys, rtol=0, atol=1e-15)

    def test_fold_equals_run(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(0, s=4, d=8)
        ys = simulate_trajectory(model, X0, 9, 1).observations
        state = AtkfState.initial(X0, p)
        folded = []
        for y in ys:
            state, x_hat, _, _ = atkf_step(model, p, state, y)
            folded.append(x_hat)
        np.testing.assert_array_equal(np.array(folded), atkf_run(model, p, ys, X0))

    def test_single_observation(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(1)
        y = [[0.4, 0.2]]
        _, x_hat, _, _ = atkf_step(model, p, AtkfState.initial(X0, p), y[0])
        np.testing.assert_array_equal(atkf_run(model, p, y, X0)[0], x_hat)

    def test_divergence_names_step(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = constant_gain_params([[np.inf, 0], [0, 1]])
        with pytest.raises(FilterDivergenceError, match="step 1"):
            atkf_run(model, p, np.ones((3, 2)), X0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            atkf_run(synthetic_model(), random_params(0), np.zeros((0, 2)), X0)


class TestRun:
    def test_zero_gain_is_model_rollout(self):
        model = synthetic_model(PARA_S, 0.0, 0.0)
        p = constant_gain_params(np.zeros((2, 2)))
        ys = simulate_trajectory(model, X0, 20, 0).observations
        np.testing.assert_array_equal(atkf_run(model, p, ys, X0), noise_free_trajectory(model, X0, 20))

    def test_zero_gain_ignores_observations(self):
        model = synthetic_model(PARA_S, 4.0, 4.0)
        p = constant_gain_params(np.zeros((2, 2)))
        ys = simulate_trajectory(model, X0, 20, 0).observations
        np.testing.assert_array_equal(atkf_run(model, p, ys, X0), noise_free_trajectory(model, X0, 20))

    def test_batch_equals_single(self):
        model = synthetic_model(PARA_S, 2.0, 2.0)
        p = random_params(2, s=4, d=8)
        ds = generate_dataset(model, X0, 4, 7, 0)
        batch = run_batch(model, p, ds.observations, X0)
        for b in range(4):
            np.testing.assert_allclose(batch[b], atkf_run(model, p, ds.observations[b], X0), rtol=1e-13, atol=1e-14)

    def test_bitwise_reproducible(self):
        model = synthetic_model(PARA_S, 2.0, 2.0)
        p = random_params(3)
        ys = simulate_trajectory(model, X0, 30, 4).observations
        assert atkf_run(model, p, ys, X0).tobytes() == atkf_run(model, p, ys, X0).tobytes()

    def test_trace_padding_and_update_identity(self):
        s = 4
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(4, s=s, d=8)
        ds = generate_dataset(model, X0, 2, 8, 1)
        est, tr = run_batch(model, p, ds.observations, X0, record=True)
        for k in range(1, 9):
            t = k - 1
            if k < s:
                pad = s - k
                assert np.all(tr.dx_windows[:, t, :pad] == 0)
                assert np.all(tr.dy_windows[:, t, :pad] == 0)
                assert np.all(tr.dy_windows[:, t, pad:] != 0)
            lhs = est[:, t] - tr.x_prior[:, t]
            rhs = np.einsum("bij,bj->bi", tr.gains[:, t], tr.innovation[:, t])
            np.testing.assert_allclose(lhs, rhs, atol=1e-14)
        # the recorded windows are the sliding windows of the feature histories
        dx = np.concatenate([np.zeros((2, 1, 2)), (est - tr.x_prior)[:, :-1]], axis=1)
        wx, wy = windows_from_history(dx, tr.innovation, s)
        np.testing.assert_array_equal(wx, tr.dx_windows)
        np.testing.assert_array_equal(wy, tr.dy_windows)


class TestBackpropThroughTime:
    @pytest.mark.parametrize("seed", range(3))
    def test_parameter_gradient_matches_finite_differences(self, seed):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(20 + seed)
        ds = generate_dataset(model, X0, 2, 5, seed)
        G = np.random.default_rng(seed).standard_normal((2, 5, 2))
        _, tr = run_batch(model, p, ds.observations, X0, record=True)
        g = backprop_through_time(model, tr, G)

        def obj(vec):
            return float(np.sum(G * run_batch(model, p.with_flat(vec), ds.observations, X0)))

        theta, h = p.flat(), 1e-6
        fd = np.array([(obj(theta + h * e) - obj(theta - h * e)) / (2 * h) for e in np.eye(len(theta))])
        assert np.abs(g.flat() - fd).max() / np.abs(fd).max() <= 1e-5

    def test_gain_gradients_single_step(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(5)
        Y = np.array([[[0.7, -0.3]]])
        _, tr = run_batch(model, p, Y, X0, record=True)
        G = np.array([[[1.5, -2.0]]])
        _, gk = backprop_through_time(model, tr, G, return_gain_grads=True)
        np.testing.assert_allclose(gk[0, 0], np.outer(G[0, 0], tr.innovation[0, 0]), rtol=1e-15)

    def test_non_finite_upstream_rejected(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        p = random_params(6)
        _, tr = run_batch(model, p, np.ones((1, 3, 2)), X0, record=True)
        G = np.zeros((1, 3, 2))
        G[0, 2, 0] = np.nan
        with pytest.raises(FilterDivergenceError, match="step 3"):
            backprop_through_time(model, tr, G)
