import numpy as np
import pytest

from helpers import dense_phi, random_mask, unvec, vec
from vsci.denoisers import IdentityDenoiser, ScaleShiftDenoiser, make_conv_residual
from vsci.fixed_point import FixedPointConfig, picard_solve
from vsci.maps import (
    AdmmState,
    DeGapMap,
    DeRnnMap,
    load_cell,
    make_gated_cell,
    pnp_admm_solve,
    pnp_admm_step,
    pnp_gap_solve,
    save_cell,
)
from vsci.sci import Measurement, forward, gap_project, init_estimate


def _instance(seed, h=4, w=4, b=3):
    mask = random_mask(seed, h, w, b)
    rng = np.random.default_rng(seed + 100)
    cube = rng.random((h, w, b))
    y = forward(mask, cube)
    return mask, cube, y


class TestDeGap:
    def test_identity_denoiser_output_is_consistent(self):
        mask, cube, y = _instance(0)
        fmap = DeGapMap(denoiser=IdentityDenoiser(), mask=mask, y=y)
        out = fmap.apply(np.zeros_like(cube))
        assert np.max(np.abs(forward(mask, out).data - y.data)) <= 1e-12

    def test_zero_denoiser_constant_map(self):
        mask, cube, y = _instance(1)
        fmap = DeGapMap(denoiser=ScaleShiftDenoiser(a=0.0), mask=mask, y=y)
        rng = np.random.default_rng(0)
        assert (fmap.apply(rng.random(cube.shape)) == 0).all()
        res = picard_solve(fmap.apply, init_estimate(mask, y), FixedPointConfig(tol=1e-12, max_iter=50))
        assert np.linalg.norm(res.x_hat) <= 1e-12

    def test_scale_half_fixed_point_matches_dense_solve(self):
        mask, cube, y = _instance(2, 3, 3, 2)
        fmap = DeGapMap(denoiser=ScaleShiftDenoiser(a=0.5), mask=mask, y=y)
        res = picard_solve(fmap.apply, init_estimate(mask, y),
                           FixedPointConfig(tol=1e-13, max_iter=500))
        phi = dense_phi(mask)
        n = phi.shape[1]
        m_null = np.eye(n) - phi.T @ np.linalg.inv(phi @ phi.T) @ phi
        c = phi.T @ np.linalg.inv(phi @ phi.T) @ y.data.ravel()
        x_star = np.linalg.solve(np.eye(n) - 0.5 * m_null, 0.5 * c)
        np.testing.assert_allclose(vec(res.x_hat), x_star, atol=1e-8)

    def test_consistent_fixed_point_identity(self):
        # if D fixes x and Phi x = y then f(x) = x exactly
        mask, cube, y = _instance(3)
        fmap = DeGapMap(denoiser=IdentityDenoiser(), mask=mask, y=y)
        x_hat = gap_project(mask, y, np.random.default_rng(1).random(cube.shape))
        np.testing.assert_allclose(fmap.apply(x_hat), x_hat, atol=1e-10)

    def test_vjp_input_matches_finite_differences(self):
        mask, cube, y = _instance(4, 4, 4, 2)
        den = make_conv_residual(0, channels=4, n_layers=2, init="smooth",
                                 gamma=0.3, noise_scale=0.05)
        fmap = DeGapMap(denoiser=den, mask=mask, y=y)
        rng = np.random.default_rng(2)
        x = rng.random(cube.shape)
        v = rng.standard_normal(cube.shape)
        analytic = fmap.vjp_input(x, v)
        h = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            fd[idx] = (np.sum(fmap.apply(xp) * v) - np.sum(fmap.apply(xm) * v)) / (2 * h)
        assert np.max(np.abs(analytic - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_grad_params_matches_denoiser_at_projected_point(self):
        mask, cube, y = _instance(5, 4, 4, 2)
        den = make_conv_residual(1, channels=4, n_layers=2, init="random", noise_scale=0.1)
        fmap = DeGapMap(denoiser=den, mask=mask, y=y)
        rng = np.random.default_rng(3)
        x = rng.random(cube.shape)
        v = rng.standard_normal(cube.shape)
        u = gap_project(mask, y, x)
        np.testing.assert_array_equal(fmap.grad_params(x, v), den.grad_params(u, v))


class TestDeRnn:
    def test_zero_cell_is_identity_and_solver_exits_immediately(self):
        mask, cube, y = _instance(6)
        fmap = DeRnnMap(cell=make_gated_cell(0), mask=mask, y=y)
        x = np.random.default_rng(0).random(cube.shape)
        np.testing.assert_array_equal(fmap.apply(x), x)
        res = picard_solve(fmap.apply, init_estimate(mask, y), FixedPointConfig())
        assert res.converged and res.iterations == 1

    def test_gamma_zero_identity_any_params(self):
        mask, cube, y = _instance(7)
        cell = make_gated_cell(1, init_scale=0.5, gamma=0.0)
        fmap = DeRnnMap(cell=cell, mask=mask, y=y)
        x = np.random.default_rng(1).random(cube.shape)
        np.testing.assert_array_equal(fmap.apply(x), x)

    def test_vjp_input_matches_finite_differences(self):
        mask, cube, y = _instance(8, 4, 4, 2)
        cell = make_gated_cell(2, channels=4, init_scale=0.3, gamma=0.2)
        fmap = DeRnnMap(cell=cell, mask=mask, y=y)
        rng = np.random.default_rng(4)
        x = rng.random(cube.shape)
        v = rng.standard_normal(cube.shape)
        analytic = fmap.vjp_input(x, v)
        h = 1e-6
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            fd[idx] = (np.sum(fmap.apply(xp) * v) - np.sum(fmap.apply(xm) * v)) / (2 * h)
        assert np.max(np.abs(analytic - fd)) <= 1e-6 * max(1.0, np.max(np.abs(fd)))

    def test_grad_params_matches_finite_differences(self):
        mask, cube, y = _instance(9, 4, 4, 2)
        cell = make_gated_cell(3, channels=2, init_scale=0.3, gamma=0.2)
        fmap = DeRnnMap(cell=cell, mask=mask, y=y)
        rng = np.random.default_rng(5)
        x = rng.random(cube.shape)
        v = rng.standard_normal(cube.shape)
        analytic = fmap.grad_params(x, v)
        theta = cell.flatten()
        h = 1e-6
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            for sign, store in ((+1, 0), (-1, 1)):
                t = theta.copy()
                t[i] += sign * h
                cell.unflatten(t)
                val = float(np.sum(fmap.apply(x) * v))
                if sign > 0:
                    up = val
                else:
                    fd[i] = (up - val) / (2 * h)
        cell.unflatten(theta)
        err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)
        assert err.max() <= 1e-5

    def test_cell_checkpoint_roundtrip(self, tmp_path):
        cell = make_gated_cell(4, channels=4, init_scale=0.2, gamma=0.15)
        prefix = str(tmp_path / "cell")
        save_cell(prefix, cell)
        back = load_cell(prefix)
        np.testing.assert_array_equal(back.flatten(), cell.flatten())
        assert back.gamma == cell.gamma


class TestPnpGap:
    def test_zero_schedule_psnr_constant_after_first(self):
        mask, cube, y = _instance(10, 6, 6, 2)
        res = pnp_gap_solve(mask, y, [0.0], 10, tol=0.0, psnr_ref=cube)
        assert len(set(res.trace.psnrs)) == 1

    def test_single_iteration_equals_projected_init(self):
        mask, cube, y = _instance(11)
        res = pnp_gap_solve(mask, y, [0.0], 1, tol=0.0)
        np.testing.assert_array_equal(res.x_hat, gap_project(mask, y, init_estimate(mask, y)))

    def test_schedule_cycles(self):
        mask, cube, y = _instance(12, 6, 6, 2)
        res = pnp_gap_solve(mask, y, [0.05, 0.01], 5, tv_iters=10, tol=0.0, psnr_ref=cube)
        assert res.iterations == 5


class TestPnpAdmm:
    def test_large_rho_keeps_x_near_z(self):
        mask, cube, y = _instance(13)
        rng = np.random.default_rng(7)
        v = rng.random(cube.shape)
        u = rng.standard_normal(cube.shape) * 0.1
        state = AdmmState(x=v.copy(), v=v, u=u, rho=1e8)
        new = pnp_admm_step(state, mask, y, IdentityDenoiser())
        z = v - u / 1e8
        assert np.linalg.norm(new.x - z) / np.linalg.norm(z) <= 1e-6

    def test_x_update_matches_dense_oracle(self):
        mask, cube, y = _instance(14, 3, 3, 2)
        rng = np.random.default_rng(8)
        v = rng.random(cube.shape)
        u = rng.standard_normal(cube.shape) * 0.2
        rho = 0.7
        state = AdmmState(x=v.copy(), v=v, u=u, rho=rho)
        new = pnp_admm_step(state, mask, y, IdentityDenoiser())
        phi = dense_phi(mask)
        n = phi.shape[1]
        z = vec(v - u / rho)
        x_dense = np.linalg.solve(phi.T @ phi + rho * np.eye(n),
                                  phi.T @ y.data.ravel() + rho * z)
        np.testing.assert_allclose(vec(new.x), x_dense, atol=1e-8)

    def test_identity_denoiser_u_stays_zero(self):
        mask, cube, y = _instance(15)
        x0 = init_estimate(mask, y)
        state = AdmmState(x=x0, v=x0.copy(), u=np.zeros_like(x0), rho=0.5)
        new = pnp_admm_step(state, mask, y, IdentityDenoiser())
        np.testing.assert_array_equal(new.v, new.x)
        np.testing.assert_array_equal(new.u, np.zeros_like(x0))

    def test_rho_must_be_positive(self):
        x = np.zeros((2, 2, 2))
        with pytest.raises(ValueError):
            AdmmState(x=x, v=x, u=x, rho=0.0)


class TestAdmmGapAgreement:
    def test_both_reach_measurement_consistency(self):
        mask, cube, y = _instance(16, 6, 6, 3)
        gap = pnp_gap_solve(mask, y, [0.0], 60, tol=0.0)
        admm = pnp_admm_solve(mask, y, IdentityDenoiser(), rho=0.1, max_iter=60, tol=0.0)
        for res in (gap, admm):
            assert np.max(np.abs(forward(mask, res.x_hat).data - y.data)) <= 1e-6
