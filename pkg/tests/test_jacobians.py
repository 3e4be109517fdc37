import numpy as np
import pytest

from aam_cgd.appearance import (BpoOperator, appearance_instance,
                                project_out)
from aam_cgd.jacobians import (NewtonTerms, blend_gradients, gn_hessian,
                               image_gradient, newton_terms_asymmetric,
                               newton_terms_bidirectional, second_gradient,
                               steepest_descent)

from conftest import bilinear_value, make_toy_shape_model
from oracles import (AsymmetricCost, BidirectionalCost, active_rows,
                     bilinear_vector, fd_gradient, fd_hessian,
                     interior_pixels, make_bilinear_appearance,
                     make_toy_state)


class TestImageGradient:
    def test_constant_image_zero_gradient(self, toy_engine):
        v = np.full(toy_engine.n_pixels, 3.3)
        gx, gy = image_gradient(v, toy_engine.frame)
        np.testing.assert_array_equal(gx, 0.0)
        np.testing.assert_array_equal(gy, 0.0)

    def test_linear_ramp_exact(self, toy_engine):
        frame = toy_engine.frame
        v = 2.0 * frame.positions[:, 0]
        gx, gy = image_gradient(v, frame)
        inner = interior_pixels(frame)
        np.testing.assert_allclose(gx[inner], 2.0, atol=1e-10)
        np.testing.assert_allclose(gy[inner], 0.0, atol=1e-10)

    def test_matches_full_grid_oracle(self, toy_engine):
        frame = toy_engine.frame
        rng = np.random.default_rng(3)
        full = rng.standard_normal((frame.height, frame.width))
        v = full[frame.mask]
        # Oracle: central differences on the unmasked rectangular grid.
        ox = np.zeros_like(full)
        oy = np.zeros_like(full)
        ox[:, 1:-1] = 0.5 * (full[:, 2:] - full[:, :-2])
        oy[1:-1, :] = 0.5 * (full[2:, :] - full[:-2, :])
        gx, gy = image_gradient(v, frame)
        inner = interior_pixels(frame)
        np.testing.assert_allclose(gx[inner], ox[frame.mask][inner],
                                   atol=1e-8)
        np.testing.assert_allclose(gy[inner], oy[frame.mask][inner],
                                   atol=1e-8)

    def test_multichannel(self, toy_engine):
        frame = toy_engine.frame
        v = np.concatenate([frame.positions[:, 0],
                            3.0 * frame.positions[:, 1]])
        gx, gy = image_gradient(v, frame)
        F = frame.n_pixels
        inner = interior_pixels(frame)
        np.testing.assert_allclose(gx[:F][inner], 1.0, atol=1e-10)
        np.testing.assert_allclose(gy[F:][inner], 3.0, atol=1e-10)


class TestSteepestDescent:
    def test_zero_gradient_zero_jacobian(self, toy_engine):
        F = toy_engine.n_pixels
        J = steepest_descent(np.zeros(F), np.zeros(F), toy_engine.dWdp)
        np.testing.assert_array_equal(J, 0.0)

    def test_blend_alpha_one_equals_image_flavor(self, toy_engine, rng):
        F = toy_engine.n_pixels
        gi = (rng.standard_normal(F), rng.standard_normal(F))
        ga = (rng.standard_normal(F), rng.standard_normal(F))
        blended = blend_gradients(gi, ga, alpha=1.0)
        np.testing.assert_array_equal(
            steepest_descent(*blended, toy_engine.dWdp),
            steepest_descent(*gi, toy_engine.dWdp))

    def test_esm_identity(self, toy_engine, rng):
        # Half/half blend equals the mean of the two one-sided Jacobians.
        F = toy_engine.n_pixels
        gi = (rng.standard_normal(F), rng.standard_normal(F))
        ga = (rng.standard_normal(F), rng.standard_normal(F))
        J_t = steepest_descent(*blend_gradients(gi, ga, 0.5),
                               toy_engine.dWdp)
        J_i = steepest_descent(*gi, toy_engine.dWdp)
        J_a = steepest_descent(*ga, toy_engine.dWdp)
        np.testing.assert_allclose(J_t, 0.5 * (J_i + J_a), atol=1e-12)

    def test_active_subset_matches_row_selection(self, toy_engine, rng):
        F = toy_engine.n_pixels
        g = (rng.standard_normal(2 * F), rng.standard_normal(2 * F))
        active = np.arange(0, F, 3)
        sub = steepest_descent(*g, toy_engine.dWdp, active=active)
        full = steepest_descent(*g, toy_engine.dWdp)
        rows = active_rows(toy_engine.frame, active, 2)
        np.testing.assert_array_equal(sub, full[rows])


class TestGnHessian:
    def test_orthonormal_columns_give_identity(self, rng):
        J, _ = np.linalg.qr(rng.standard_normal((60, 5)))
        np.testing.assert_allclose(gn_hessian(J), np.eye(5), atol=1e-12)

    def test_project_out_matches_dense(self, rng):
        app = _random_appearance(rng, dim=80, m=4)
        J = rng.standard_normal((80, 6))
        dense = np.eye(80) - app.basis @ app.basis.T
        np.testing.assert_allclose(gn_hessian(J, app), J.T @ dense @ J,
                                   atol=1e-9)

    def test_bpo_matches_dense(self, rng):
        app = _random_appearance(rng, dim=50, m=3)
        op = BpoOperator(app, rho=0.4)
        J = rng.standard_normal((50, 5))
        A, d = app.basis, op.d
        dense = (0.4 * A @ np.diag(1.0 / d) @ A.T
                 + op.ortho_weight * (np.eye(50) - A @ A.T))
        np.testing.assert_allclose(gn_hessian(J, op), J.T @ dense @ J,
                                   atol=1e-9)

    def test_psd(self, rng):
        for _ in range(5):
            J = rng.standard_normal((40, 6))
            app = _random_appearance(rng, dim=40, m=3)
            w = np.linalg.eigvalsh(gn_hessian(J, app))
            assert w.min() >= -1e-10


def _random_appearance(rng, dim, m):
    from aam_cgd.appearance import build_appearance_model
    latent = rng.standard_normal((3 * m + 4, m))
    basis = np.linalg.qr(rng.standard_normal((dim, m)))[0]
    data = rng.standard_normal(dim) + latent @ basis.T * 2.0
    return build_appearance_model(list(data), n_components=m)


class TestNewtonTermsAsymmetric:
    @pytest.fixture
    def setup(self, rng):
        state = make_toy_state(rng, v=6, n_modes=2, m=2, radius=4.2)
        active = interior_pixels(state.engine.frame, radius=2)
        assert active.size >= 15
        return state, active

    def _assemble(self, state, active, alpha):
        engine, app = state.engine, state.appearance
        frame = engine.frame
        rows = active_rows(frame, active, state.n_channels)
        model_vec = appearance_instance(app, state.c)
        r = (state.i_vec - model_vec)[rows]
        gi = image_gradient(state.i_vec, frame)
        gm = image_gradient(model_vec, frame)
        J_t = steepest_descent(*blend_gradients(gi, gm, alpha),
                               engine.dWdp, active=active)
        terms = newton_terms_asymmetric(
            app, frame, engine.dWdp, r,
            second_gradient(state.i_vec, frame),
            second_gradient(model_vec, frame),
            J_t, alpha, active=active)
        return terms, r, J_t, rows

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_full_hessian_matches_finite_differences(self, setup, alpha):
        state, active = setup
        terms, _, _, rows = self._assemble(state, active, alpha)
        cost = AsymmetricCost(state.engine, state.appearance, state.i_vec,
                              state.c, rows, alpha)
        m = state.appearance.n_components

        def f(x):
            return cost(x[:m], x[m:])

        x0 = np.zeros(m + state.engine.model.n_params)
        ref = fd_hessian(f, x0, step=1e-4)
        H = terms.full()
        scale = np.abs(ref).max()
        np.testing.assert_allclose(H, ref, atol=1e-3 * scale)

    def test_zero_residual_reduces_to_gauss_newton(self, setup):
        state, active = setup
        terms, r, J_t, _ = self._assemble(state, active, 0.5)
        zero_terms = newton_terms_asymmetric(
            state.appearance, state.engine.frame, state.engine.dWdp,
            np.zeros_like(r),
            second_gradient(state.i_vec, state.engine.frame),
            second_gradient(appearance_instance(state.appearance, state.c),
                            state.engine.frame),
            J_t, 0.5, active=active)
        np.testing.assert_allclose(zero_terms.pp, J_t.T @ J_t, atol=1e-10)

    def test_assembled_hessian_symmetric(self, setup):
        state, active = setup
        terms, _, _, _ = self._assemble(state, active, 0.3)
        H = terms.full()
        np.testing.assert_allclose(H, H.T, atol=1e-8)


class TestNewtonTermsBidirectional:
    @pytest.fixture
    def setup(self, rng):
        state = make_toy_state(rng, v=6, n_modes=2, m=2, radius=4.2)
        active = interior_pixels(state.engine.frame, radius=2)
        return state, active

    def _assemble(self, state, active, zero_residual=False):
        engine, app = state.engine, state.appearance
        frame = engine.frame
        rows = active_rows(frame, active, state.n_channels)
        model_vec = appearance_instance(app, state.c)
        r = (state.i_vec - model_vec)[rows]
        if zero_residual:
            r = np.zeros_like(r)
        gi = image_gradient(state.i_vec, frame)
        gm = image_gradient(model_vec, frame)
        J_i = steepest_descent(*gi, engine.dWdp, active=active)
        J_a = steepest_descent(*gm, engine.dWdp, active=active)
        terms = newton_terms_bidirectional(
            app, frame, engine.dWdp, r,
            second_gradient(state.i_vec, frame),
            second_gradient(model_vec, frame),
            J_i, J_a, active=active)
        return terms, r, J_i, J_a, rows

    def test_full_hessian_matches_finite_differences(self, setup):
        state, active = setup
        terms, _, _, _, rows = self._assemble(state, active)
        cost = BidirectionalCost(state.engine, state.appearance,
                                 state.i_vec, state.c, rows)
        m = state.appearance.n_components
        P = state.engine.model.n_params

        def f(x):
            return cost(x[:m], x[m:m + P], x[m + P:])

        ref = fd_hessian(f, np.zeros(m + 2 * P), step=1e-4)
        H = terms.full()
        scale = np.abs(ref).max()
        np.testing.assert_allclose(H, ref, atol=1e-3 * scale)

    def test_zero_residual_cross_block(self, setup):
        state, active = setup
        terms, _, J_i, J_a, _ = self._assemble(state, active,
                                               zero_residual=True)
        np.testing.assert_allclose(terms.pq, -J_i.T @ J_a, atol=1e-12)
        np.testing.assert_allclose(terms.cc,
                                   np.eye(state.appearance.n_components),
                                   atol=1e-12)

    def test_assembled_hessian_symmetric(self, setup):
        state, active = setup
        terms, _, _, _, _ = self._assemble(state, active)
        H = terms.full()
        np.testing.assert_allclose(H, H.T, atol=1e-8)


class TestGradientChecks:
    """Analytic J^T r against central finite differences of each cost."""

    @pytest.fixture
    def setup(self, rng):
        state = make_toy_state(rng, v=6, n_modes=2, m=2, radius=4.5)
        active = interior_pixels(state.engine.frame, radius=1)
        return state, active

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_ssd_asymmetric_dp(self, setup, alpha):
        state, active = setup
        engine, app = state.engine, state.appearance
        frame = engine.frame
        rows = active_rows(frame, active, 1)
        model_vec = appearance_instance(app, state.c)
        r = (state.i_vec - model_vec)[rows]
        gi = image_gradient(state.i_vec, frame)
        gm = image_gradient(model_vec, frame)
        J_t = steepest_descent(*blend_gradients(gi, gm, alpha),
                               engine.dWdp, active=active)
        analytic = J_t.T @ r
        cost = AsymmetricCost(engine, app, state.i_vec, state.c, rows,
                              alpha)
        m = app.n_components
        fd = fd_gradient(lambda dp: cost(np.zeros(m), dp),
                         np.zeros(engine.model.n_params))
        np.testing.assert_allclose(analytic, fd,
                                   rtol=1e-4, atol=1e-4 * np.abs(fd).max())

    def test_ssd_bidirectional_dp_dq(self, setup):
        state, active = setup
        engine, app = state.engine, state.appearance
        frame = engine.frame
        rows = active_rows(frame, active, 1)
        model_vec = appearance_instance(app, state.c)
        r = (state.i_vec - model_vec)[rows]
        gi = image_gradient(state.i_vec, frame)
        gm = image_gradient(model_vec, frame)
        J_i = steepest_descent(*gi, engine.dWdp, active=active)
        J_a = steepest_descent(*gm, engine.dWdp, active=active)
        cost = BidirectionalCost(engine, app, state.i_vec, state.c, rows)
        m = app.n_components
        P = engine.model.n_params
        fd_p = fd_gradient(lambda dp: cost(np.zeros(m), dp, np.zeros(P)),
                           np.zeros(P))
        fd_q = fd_gradient(lambda dq: cost(np.zeros(m), np.zeros(P), dq),
                           np.zeros(P))
        np.testing.assert_allclose(J_i.T @ r, fd_p, rtol=1e-4,
                                   atol=1e-4 * np.abs(fd_p).max())
        np.testing.assert_allclose(-J_a.T @ r, fd_q, rtol=1e-4,
                                   atol=1e-4 * np.abs(fd_q).max())

    def test_ssd_asymmetric_dc(self, setup):
        state, active = setup
        engine, app = state.engine, state.appearance
        rows = active_rows(engine.frame, active, 1)
        model_vec = appearance_instance(app, state.c)
        r = (state.i_vec - model_vec)[rows]
        A_act = app.basis[rows]
        cost = AsymmetricCost(engine, app, state.i_vec, state.c, rows, 0.5)
        m = app.n_components
        fd = fd_gradient(
            lambda dc: cost(dc, np.zeros(engine.model.n_params)),
            np.zeros(m))
        np.testing.assert_allclose(-A_act.T @ r, fd, rtol=1e-4,
                                   atol=1e-4 * max(np.abs(fd).max(), 1e-12))
