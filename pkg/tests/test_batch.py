import json

import numpy as np
import pytest

from attention_kf.batch import (
    BatchSingularityError,
    BatchSystem,
    LtvStep,
    PretrainData,
    assemble,
    batch_estimate,
    build_pretrain_data,
    build_pretrain_instance,
    information_matrix,
    ltv_steps,
    pretrain_data_to_json,
    smooth_trajectory,
)
from attention_kf.ltpwl import linearize_system
from attention_kf.system import (
    PARA_S,
    X0,
    Trajectory,
    generate_dataset,
    linear_model,
    noise_free_trajectory,
    simulate_trajectory,
    synthetic_model,
)

from oracles import kf_rts_smoother, random_spd


def random_ltv(rng, L, m=2, n=2, per_step_noise=False):
    steps = [LtvStep(rng.uniform(-1.2, 1.2, (m, m)), rng.uniform(-1, 1, (n, m)), rng.standard_normal(m),
                     rng.standard_normal(n)) for _ in range(L)]
    prior = (rng.standard_normal(m), random_spd(rng, m))
    if per_step_noise:
        Q = np.array([random_spd(rng, m) for _ in range(L)])
        R = np.array([random_spd(rng, n) for _ in range(L)])
    else:
        Q, R = random_spd(rng, m), random_spd(rng, n)
    return steps, prior, Q, R


def oracle(steps, prior, Q, R):
    L = len(steps)
    Qs = Q if np.ndim(Q) == 3 else [Q] * L
    Rs = R if np.ndim(R) == 3 else [R] * L
    return kf_rts_smoother([s.A for s in steps], [s.C for s in steps], [s.u for s in steps],
                           [s.ybar for s in steps], Qs, Rs, prior[0], prior[1])


class TestAgainstSmoother:
    @pytest.mark.parametrize("seed", range(20))
    def test_random_ltv(self, seed):
        rng = np.random.default_rng(seed)
        steps, prior, Q, R = random_ltv(rng, int(rng.integers(1, 21)))
        est = batch_estimate(assemble(steps, prior, Q, R))
        assert np.abs(est - oracle(steps, prior, Q, R)).max() <= 1e-8

    @pytest.mark.parametrize("seed", range(5))
    def test_per_step_noise(self, seed):
        rng = np.random.default_rng(100 + seed)
        steps, prior, Q, R = random_ltv(rng, 12, per_step_noise=True)
        est = batch_estimate(assemble(steps, prior, Q, R))
        assert np.abs(est - oracle(steps, prior, Q, R)).max() <= 1e-8

    def test_rectangular(self):
        rng = np.random.default_rng(3)
        steps, prior, Q, R = random_ltv(rng, 8, m=3, n=1)
        est = batch_estimate(assemble(steps, prior, Q, R))
        assert np.abs(est - oracle(steps, prior, Q, R)).max() <= 1e-8


class TestAssembly:
    def test_shapes_and_blocks(self):
        rng = np.random.default_rng(0)
        steps, prior, Q, R = random_ltv(rng, 3)
        sys = assemble(steps, prior, Q, R)
        assert sys.H.shape == (12, 6) and sys.W.shape == (12, 12) and sys.z.shape == (12,)
        assert sys.length == 3
        np.testing.assert_array_equal(sys.H[2:4, 0:2], -steps[0].A)
        np.testing.assert_array_equal(sys.H[6:8, 0:2], steps[0].C)
        np.testing.assert_array_equal(sys.z[:2], prior[0])
        np.testing.assert_array_equal(sys.z[2:4], steps[0].u)
        np.testing.assert_array_equal(sys.W[:2, :2], prior[1])

    def test_information_matrix_symmetric_pd(self):
        rng = np.random.default_rng(1)
        M, _ = information_matrix(assemble(*random_ltv(rng, 6)))
        np.testing.assert_allclose(M, M.T, atol=1e-10)
        assert np.linalg.eigvalsh(M).min() > 0

    def test_matches_weighted_least_squares(self):
        rng = np.random.default_rng(2)
        sys = assemble(*random_ltv(rng, 5))
        Li = np.linalg.inv(np.linalg.cholesky(sys.W))
        ref = np.linalg.lstsq(Li @ sys.H, Li @ sys.z, rcond=None)[0]
        np.testing.assert_allclose(batch_estimate(sys).ravel(), ref, atol=1e-9)

    def test_non_pd_noise_rejected(self):
        rng = np.random.default_rng(4)
        steps, prior, Q, R = random_ltv(rng, 3)
        with pytest.raises(ValueError, match="noise block"):
            assemble(steps, prior, Q, -np.eye(2))

    def test_singular_normal_matrix(self):
        # the second state column is unobserved and unconstrained
        H = np.array([[1.0, 0.0], [1.0, 0.0]])
        sys = BatchSystem(np.zeros(2), H, np.eye(2), (np.zeros(2), np.eye(2)), 2)
        with pytest.raises(BatchSingularityError, match="pivot 1"):
            batch_estimate(sys)

    def test_scalar_hand_solve(self):
        steps = [LtvStep(np.eye(1), np.eye(1), np.zeros(1), np.array([2.0]))]
        sys = assemble(steps, (np.zeros(1), np.eye(1)), np.eye(1), np.eye(1))
        np.testing.assert_array_equal(sys.H, [[1.0], [1.0]])
        np.testing.assert_array_equal(sys.W, np.eye(2))
        np.testing.assert_array_equal(sys.z, [0.0, 2.0])
        assert batch_estimate(sys)[0, 0] == pytest.approx(1.0, abs=1e-15)

    def test_benchmark_dimensions(self):
        rng = np.random.default_rng(6)
        sys = assemble(*random_ltv(rng, 10))
        assert sys.H.shape == (40, 20)

    def test_block_tridiagonal(self):
        rng = np.random.default_rng(7)
        M, _ = information_matrix(assemble(*random_ltv(rng, 8)))
        for i in range(8):
            for j in range(8):
                if abs(i - j) > 1:
                    assert np.abs(M[2 * i:2 * i + 2, 2 * j:2 * j + 2]).max() <= 1e-14

    def test_exact_on_noise_free_consistent_data(self):
        rng = np.random.default_rng(8)
        steps, prior, Q, R = random_ltv(rng, 10)
        x = [prior[0]]
        for k in range(9):
            x.append(steps[k].A @ x[-1] + steps[k].u)
        x = np.array(x)
        for k in range(10):
            steps[k].ybar = steps[k].C @ x[k]
        np.testing.assert_allclose(batch_estimate(assemble(steps, prior, Q, R)), x, atol=1e-10)

    def test_wrong_count_of_per_step_noise(self):
        rng = np.random.default_rng(5)
        steps, prior, _, R = random_ltv(rng, 4)
        with pytest.raises(ValueError):
            assemble(steps, prior, np.array([np.eye(2)] * 3), R)


class TestLinearization:
    def test_linear_model_offsets_vanish(self):
        model = linear_model(np.diag([0.5, -0.3]), np.diag([2.0, 1.0]), np.eye(2), np.eye(2))
        lin = linearize_system(model, noise_free_trajectory(model, [1.0, 1.0], 5))
        tr = simulate_trajectory(model, [1.0, 1.0], 6, 0)
        for st, y in zip(ltv_steps(lin, tr.states, tr.observations), tr.observations):
            np.testing.assert_allclose(st.u, 0, atol=1e-15)
            np.testing.assert_allclose(st.ybar, y, atol=1e-15)

    def test_linear_model_gives_exact_smoother(self):
        A, C = np.diag([0.9, 0.7]), np.diag([1.0, 2.0])
        model = linear_model(A, C, np.eye(2), 0.5 * np.eye(2))
        lin = linearize_system(model, [[0.0, 0.0], [1.0, 1.0]])
        tr = simulate_trajectory(model, X0, 10, 3)
        prior = (A @ np.asarray(X0), np.eye(2))
        est = smooth_trajectory(lin, tr, prior, model.Q, model.R)
        ref = kf_rts_smoother([A] * 10, [C] * 10, [np.zeros(2)] * 10, tr.observations, [model.Q] * 10,
                              [model.R] * 10, *prior)
        assert np.abs(est - ref).max() <= 1e-10

    def test_single_point_gives_constant_jacobian(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        lin = linearize_system(model, [X0])
        tr = simulate_trajectory(model, X0, 8, 2)
        for st in ltv_steps(lin, tr.states, tr.observations):
            np.testing.assert_array_equal(st.A, model.jac_f(np.asarray(X0)))
            np.testing.assert_array_equal(st.C, model.jac_h(np.asarray(X0)))

    def test_anchor_states_use_exact_jacobian(self):
        model = synthetic_model(PARA_S, 1.0, 1.0)
        pts = noise_free_trajectory(model, X0, 10)
        lin = linearize_system(model, pts)
        steps = ltv_steps(lin, pts, model.h(pts))
        for k in range(10):
            np.testing.assert_allclose(steps[k].A, model.jac_f(pts[k]), atol=1e-15)
            np.testing.assert_allclose(steps[k].u, model.f(pts[k]) - model.jac_f(pts[k]) @ pts[k], atol=1e-14)
            np.testing.assert_allclose(steps[k].ybar, model.jac_h(pts[k]) @ pts[k], atol=1e-14)


class TestPretrainData:
    def setup_method(self):
        self.model = synthetic_model(PARA_S, 1.0, 1.0)
        self.tr = simulate_trajectory(self.model, X0, 6, 1)

    def test_instance_features(self):
        xhat = self.tr.states + 0.1
        d = build_pretrain_instance(self.tr, xhat, self.model, 3, X0)
        prior0 = self.model.f(np.asarray(X0))
        np.testing.assert_array_equal(d.x_prior[0], prior0)
        np.testing.assert_array_equal(d.x_prior[2], self.model.f(xhat[1]))
        np.testing.assert_array_equal(d.innovation[0], self.tr.observations[0] - self.model.h(prior0))
        np.testing.assert_array_equal(d.target, self.tr.states)
        # first window is all zeros apart from the newest innovation
        np.testing.assert_array_equal(d.dx_window[0], np.zeros((3, 2)))
        np.testing.assert_array_equal(d.dy_window[0, :2], np.zeros((2, 2)))
        np.testing.assert_array_equal(d.dy_window[0, 2], d.innovation[0])
        # the step-3 window ends with Δx_2 = x̂_2 - prior_2
        np.testing.assert_allclose(d.dx_window[2, 2], xhat[1] - d.x_prior[1])

    def test_perfect_targets_reproduce_states(self):
        # when x̂ is the truth, prior + K·innovation with the right K recovers the state
        d = build_pretrain_instance(self.tr, self.tr.states, self.model, 4, X0)
        assert len(d) == 6
        assert d.dx_window.shape == (6, 4, 2) and d.dy_window.shape == (6, 4, 2)

    def test_dataset_concat_and_subset(self):
        ds = generate_dataset(self.model, X0, 3, 5, 0)
        lin = linearize_system(self.model, noise_free_trajectory(self.model, X0, 5))
        data = build_pretrain_data(ds, lin, self.model, 4, X0)
        assert len(data) == 15
        sub = data.subset(np.array([0, 14]))
        assert isinstance(sub, PretrainData) and len(sub) == 2
        doc = json.loads(pretrain_data_to_json(ds, data))
        assert len(doc["instances"]) == 3
        assert np.asarray(doc["instances"][0]["features"], dtype=object).shape[0] == 5

    def test_mismatched_xhat(self):
        with pytest.raises(ValueError):
            build_pretrain_instance(self.tr, np.zeros((5, 2)), self.model, 4, X0)
