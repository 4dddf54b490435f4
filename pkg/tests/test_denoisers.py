import numpy as np
import pytest

from vsci.conv import dense_conv_matrix
from vsci.denoisers import (
    ConvResidualDenoiser,
    IdentityDenoiser,
    ScaleShiftDenoiser,
    TvDenoiser,
    estimate_residual_lipschitz,
    load_denoiser,
    make_conv_residual,
    save_denoiser,
    spectral_normalize,
    tv_denoise,
    tv_energy,
)
from vsci.errors import UnsupportedDenoiserOpError


def _cube(shape, seed):
    return np.random.default_rng(seed).random(shape)


class TestBasicKinds:
    def test_identity(self):
        x = _cube((4, 4, 2), 0)
        d = IdentityDenoiser()
        np.testing.assert_array_equal(d.denoise(x), x)
        v = _cube((4, 4, 2), 1)
        np.testing.assert_array_equal(d.vjp_input(x, v), v)

    def test_scale_shift(self):
        x = _cube((4, 4, 2), 0)
        d = ScaleShiftDenoiser(a=0.5, b=0.0)
        np.testing.assert_allclose(d.denoise(x), 0.5 * x)
        v = _cube((4, 4, 2), 1)
        np.testing.assert_allclose(d.vjp_input(x, v), 0.5 * v)

    def test_tv_has_no_vjp(self):
        d = TvDenoiser(lam=0.1)
        with pytest.raises(UnsupportedDenoiserOpError):
            d.vjp_input(_cube((4, 4, 1), 0), _cube((4, 4, 1), 1))

    def test_nonfinite_input_rejected(self):
        x = _cube((4, 4, 2), 0)
        x[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            IdentityDenoiser().denoise(x)


class TestTv:
    def test_lam_zero_identity(self):
        x = _cube((6, 6, 2), 0)
        np.testing.assert_array_equal(tv_denoise(x, 0.0, 50), x)

    def test_constant_frame_unchanged(self):
        x = np.full((5, 5, 1), 0.7)
        np.testing.assert_allclose(tv_denoise(x, 0.5, 100), x, atol=1e-12)

    def test_step_edge_matches_coordinate_descent_oracle(self):
        # 8-pixel 1D step edge as a (1, 8, 1) frame
        sig = np.array([0.1, 0.1, 0.1, 0.1, 0.9, 0.9, 0.9, 0.9])
        x = sig.reshape(1, 8, 1)
        lam = 0.1
        out = tv_denoise(x, lam, 20000)
        e_out = tv_energy(out, x, lam)
        assert e_out <= tv_energy(x, x, lam) + 1e-12

        # Independent oracle: exact coordinate ascent on the box-constrained
        # dual QP  max_{|p|<=lam} p^T D x - 1/2 p^T D D^T p,  z = x - D^T p,
        # with the difference matrix written out explicitly. (The primal is a
        # coupled l1 problem where plain coordinate descent stalls, so the
        # brute-force sweep runs on the smooth dual instead.)
        n = 8
        dmat = np.zeros((n - 1, n))
        for i in range(n - 1):
            dmat[i, i], dmat[i, i + 1] = -1.0, 1.0
        gram = dmat @ dmat.T
        dx = dmat @ sig
        p = np.zeros(n - 1)
        for _ in range(100000):
            delta = 0.0
            for i in range(n - 1):
                rest = gram[i] @ p - gram[i, i] * p[i]
                new = np.clip((dx[i] - rest) / gram[i, i], -lam, lam)
                delta = max(delta, abs(new - p[i]))
                p[i] = new
            if delta < 1e-15:
                break
        z = sig - dmat.T @ p
        e_oracle = tv_energy(z.reshape(1, 8, 1), x, lam)
        assert abs(e_out - e_oracle) <= 1e-6

    def test_energy_never_worse_than_input(self):
        x = _cube((8, 8, 2), 3)
        out = tv_denoise(x, 0.05, 500)
        assert tv_energy(out, x, 0.05) <= tv_energy(x, x, 0.05) + 1e-12


class TestConvResidual:
    def test_zero_params_is_identity(self):
        d = make_conv_residual(0, channels=4, n_layers=2, init="zero", gamma=0.2)
        x = _cube((6, 6, 3), 0)
        np.testing.assert_array_equal(d.denoise(x), x)

    def test_vjp_input_matches_finite_differences(self):
        d = make_conv_residual(1, channels=4, n_layers=2, init="smooth",
                               gamma=0.3, noise_scale=0.05)
        x = _cube((5, 5, 2), 2)
        v = _cube((5, 5, 2), 3)
        analytic = d.vjp_input(x, v)
        h = 1e-5
        fd = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp = x.copy(); xp[idx] += h
            xm = x.copy(); xm[idx] -= h
            fd[idx] = (np.sum(d.denoise(xp) * v) - np.sum(d.denoise(xm) * v)) / (2 * h)
        err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)
        assert err.max() <= 1e-6

    def test_grad_params_matches_finite_differences(self):
        d = make_conv_residual(4, channels=4, n_layers=3, init="smooth",
                               gamma=0.2, noise_scale=0.05)
        x = _cube((5, 5, 2), 5)
        v = _cube((5, 5, 2), 6)
        analytic = d.grad_params(x, v)
        theta = d.get_theta()
        h = 1e-5
        fd = np.zeros_like(theta)
        for i in range(theta.size):
            tp = theta.copy(); tp[i] += h
            d.set_theta(tp)
            up = float(np.sum(d.denoise(x) * v))
            tm = theta.copy(); tm[i] -= h
            d.set_theta(tm)
            um = float(np.sum(d.denoise(x) * v))
            fd[i] = (up - um) / (2 * h)
        d.set_theta(theta)
        err = np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-8)
        assert err.max() <= 1e-6

    def test_grad_params_zero_cotangent(self):
        d = make_conv_residual(0, channels=4, n_layers=2)
        x = _cube((5, 5, 2), 0)
        np.testing.assert_array_equal(
            d.grad_params(x, np.zeros_like(x)), np.zeros(d.n_params())
        )

    def test_last_bias_grad_is_gamma_times_sum(self):
        d = make_conv_residual(2, channels=4, n_layers=2, gamma=0.25, init="random")
        x = _cube((5, 5, 2), 1)
        v = _cube((5, 5, 2), 2)
        grad = d.grad_params(x, v)
        assert abs(grad[-1] - 0.25 * v.sum()) <= 1e-10 * abs(v.sum())

    def test_flatten_unflatten_identity(self):
        d = make_conv_residual(3, channels=6, n_layers=3, init="random")
        theta = d.get_theta()
        d.set_theta(theta)
        np.testing.assert_array_equal(d.get_theta(), theta)


class TestSpectralNormalize:
    def test_small_kernel_unchanged(self):
        d = make_conv_residual(0, channels=4, n_layers=2, init="random",
                               noise_scale=0.01, sn_shape=(8, 8))
        before = [k.copy() for k in d.params.kernels]
        spectral_normalize(d.params, 30)
        for b, a in zip(before, d.params.kernels):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_scaled_kernel_comes_back_to_unit_norm(self):
        d = make_conv_residual(1, channels=4, n_layers=2, init="random",
                               noise_scale=0.05, sn_shape=(8, 8))
        d.params.kernels = [10.0 * k for k in d.params.kernels]
        spectral_normalize(d.params, 60)
        for k in d.params.kernels:
            sigma = np.linalg.svd(dense_conv_matrix(k, 8, 8), compute_uv=False)[0]
            assert 0.999 <= sigma <= 1.001

    def test_zero_kernel_stays_zero(self):
        d = make_conv_residual(0, channels=4, n_layers=2, init="zero", sn_shape=(8, 8))
        spectral_normalize(d.params, 10)
        for k in d.params.kernels:
            np.testing.assert_array_equal(k, np.zeros_like(k))

    def test_dense_sigma_bounded_after_normalize(self):
        # persistent-u protocol: the power vector is warm by the time a
        # 20-iteration validation normalize runs (training refines it every
        # step), so warm up once before asserting the bound
        d = make_conv_residual(5, channels=4, n_layers=3, init="random",
                               noise_scale=2.0, sn_shape=(8, 8))
        spectral_normalize(d.params, 20)
        spectral_normalize(d.params, 20)
        for k in d.params.kernels:
            sigma = np.linalg.svd(dense_conv_matrix(k, 8, 8), compute_uv=False)[0]
            assert sigma <= 1.0 + 1e-2


class TestResidualLipschitz:
    def test_identity_zero(self):
        assert estimate_residual_lipschitz(IdentityDenoiser(), 0, 8, (4, 4, 2)) == 0.0

    def test_scale_shift_analytic(self):
        eps = estimate_residual_lipschitz(ScaleShiftDenoiser(a=0.5), 0, 8, (4, 4, 2))
        assert abs(eps - 0.5) <= 1e-12

    def test_normalized_conv_bounded_by_norm_product(self):
        d = make_conv_residual(7, channels=4, n_layers=2, init="random",
                               noise_scale=1.0, gamma=0.1, sn_shape=(8, 8))
        spectral_normalize(d.params, 40)
        eps_hat = estimate_residual_lipschitz(d, 0, 32, (8, 8, 2))
        assert eps_hat <= 0.1 * (1 + 1e-2) ** 2

    def test_monotone_in_gamma(self):
        base = make_conv_residual(9, channels=4, n_layers=2, init="random",
                                  noise_scale=0.3, gamma=0.1)
        eps1 = estimate_residual_lipschitz(base, 0, 16, (6, 6, 2))
        base.params.gamma = 0.2
        eps2 = estimate_residual_lipschitz(base, 0, 16, (6, 6, 2))
        assert abs(eps2 - 2.0 * eps1) <= 1e-9 * eps2


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        d = make_conv_residual(11, channels=4, n_layers=2, init="random",
                               gamma=0.15, noise_scale=0.2)
        prefix = str(tmp_path / "ckpt")
        save_denoiser(prefix, d)
        d2 = load_denoiser(prefix)
        np.testing.assert_array_equal(d2.get_theta(), d.get_theta())
        assert d2.params.gamma == d.params.gamma
        x = _cube((6, 6, 3), 0)
        np.testing.assert_array_equal(d2.denoise(x), d.denoise(x))
