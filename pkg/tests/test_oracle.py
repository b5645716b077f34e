"""Moment-recursion kernels, their identities, and the quadrature engine."""

import math

import numpy as np
import pytest

from mgdm.likelihoods import LinearGaussianLikelihood, linearized_potential, quadratic_toy
from mgdm.moments import GaussianMoments
from mgdm.oracle import (
    GridSpec,
    OracleConfig,
    auto_grids,
    build_final_kernels,
    build_kernels,
    forward_init_moments,
    oracle_recursion,
    quadrature_joint,
)
from mgdm.priors import GaussianPrior, GmmPrior, exact_posterior
from mgdm.sampler import GibbsState, IndexDistribution, MgdmConfig, gibbs_step, mgdm_run_batch
from mgdm.schedule import gauss_log_density, make_schedule


def instance_2d():
    sched = make_schedule("linear", 1000)
    prior = GaussianPrior(mean=[1.0, -0.5], cov=[[1.0, 0.3], [0.3, 0.7]])
    lik = LinearGaussianLikelihood(A=[[1.0, 0.4], [0.0, 0.8]], y=[2.4, -1.6], sigma_y=0.5)
    return lik, prior, sched


def instance_1d(sigma_y=0.5):
    sched = make_schedule("linear", 1000)
    prior = GaussianPrior(mean=[0.3], cov=[[0.8]])
    lik = LinearGaussianLikelihood(A=[[1.1]], y=[0.7], sigma_y=sigma_y)
    return lik, prior, sched


def midpoint_sequence(ts):
    return tuple(max(2, ts[i - 2] // 2) for i in range(len(ts), 1, -1))


class TestBuildKernels:
    def test_rejects_bad_levels(self):
        lik, prior, sched = instance_2d()
        with pytest.raises(ValueError):
            build_kernels(prior, lik, sched, k=10, tau=1)
        with pytest.raises(ValueError):
            build_kernels(prior, lik, sched, k=10, tau=10)

    def test_rejects_unsupported_models(self):
        lik, prior, sched = instance_2d()
        mix = GmmPrior(weights=[1.0], means=[[0.0, 0.0]], covs=[np.eye(2)])
        with pytest.raises(TypeError):
            build_kernels(mix, lik, sched, k=10, tau=2)
        with pytest.raises(TypeError):
            build_kernels(prior, quadratic_toy(A=np.eye(2), y=[1.0, 1.0], sigma_y=1.0), sched, k=10, tau=2)

    def test_gamma_spd_on_random_instances(self):
        """Cholesky succeeds on Gamma_k for 100 random (tau, k) pairs."""
        lik, prior, sched = instance_2d()
        rng = np.random.default_rng(0)
        for _ in range(100):
            tau = int(rng.integers(2, 500))
            k = int(rng.integers(tau + 1, 1001))
            kern = build_kernels(prior, lik, sched, k=k, tau=tau)
            np.linalg.cholesky(kern.Gamma)

    def test_assembly_matches_direct_composition(self):
        """The completion-of-squares blocks (Psi, Gamma, J, K) reproduce
        B = Gamma J K, b = [c; d] + Gamma J [e; e], Gamma_k = Gamma."""
        lik, prior, sched = instance_2d()
        rng = np.random.default_rng(1)
        for _ in range(20):
            tau = int(rng.integers(2, 400))
            k = int(rng.integers(tau + 1, 1001))
            kern = build_kernels(prior, lik, sched, k=k, tau=tau)
            np.testing.assert_allclose(kern.gamma_assembled, kern.Gamma, atol=1e-8)
            np.testing.assert_allclose(kern.gamma_assembled @ kern.j_block @ kern.k_block, kern.B, atol=1e-8)
            bias = np.concatenate([kern.c, np.zeros(2)])
            bias = bias + kern.gamma_assembled @ kern.j_block @ np.concatenate([kern.e, kern.e])
            np.testing.assert_allclose(bias, kern.b, atol=1e-8)

    def test_flat_potential_limit(self):
        """sigma_y -> inf collapses the conditional to the bridge:
        Lambda -> bridge variance * I and e -> 0."""
        lik, prior, sched = instance_2d()
        flat = LinearGaussianLikelihood(A=lik.A, y=lik.y, sigma_y=1e9)
        tau, k = 120, 700
        kern = build_kernels(prior, flat, sched, k=k, tau=tau)
        p = sched.bridge_params(tau, k)
        np.testing.assert_allclose(kern.lam, p.variance * np.eye(2), atol=1e-10)
        np.testing.assert_allclose(kern.e, np.zeros(2), atol=1e-10)
        np.testing.assert_allclose(kern.M, p.mean_coeff_x0 * np.eye(2), atol=1e-10)
        np.testing.assert_allclose(kern.N, p.mean_coeff_xt * np.eye(2), atol=1e-10)

    def test_kernel_reproduces_simulated_regression(self):
        """B, Gamma, b match the moment regression of one exact-backend
        Gibbs repetition over 1e6 simulated transitions (3 sigma, block se)."""
        lik, prior, sched = instance_1d()
        tau, k, n = 150, 600, 1_000_000
        rng = np.random.default_rng(7)
        mean_in = np.array([0.4, 0.1])
        cov_in = np.array([[0.9, 0.2], [0.2, 1.3]])
        z = rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov_in).T + mean_in
        cfg = MgdmConfig(timesteps=(100, 1000), conditional="exact", denoise="exact")
        state = GibbsState(x0=z[:, :1], xs=np.zeros((n, 1)), xt=z[:, 1:], s=tau, t=k)
        out = gibbs_step(state, lik, prior, sched, cfg, rng)
        zp = np.concatenate([out.x0, out.xt], axis=1)
        kern = build_kernels(prior, lik, sched, k=k, tau=tau)

        blocks = 50
        size = n // blocks
        est_b, est_bias, est_gamma = [], [], []
        for i in range(blocks):
            sl = slice(i * size, (i + 1) * size)
            zi, zpi = z[sl], zp[sl]
            cov_zz = np.cov(zi.T)
            cross = (zpi - zpi.mean(0)).T @ (zi - zi.mean(0)) / (size - 1)
            b_hat = cross @ np.linalg.inv(cov_zz)
            est_b.append(b_hat)
            est_bias.append(zpi.mean(0) - b_hat @ zi.mean(0))
            est_gamma.append(np.cov(zpi.T) - b_hat @ cov_zz @ b_hat.T)
        for name, stack, target in (
            ("B", np.array(est_b), kern.B),
            ("b", np.array(est_bias), kern.b),
            ("Gamma", np.array(est_gamma), kern.Gamma),
        ):
            mean_est = stack.mean(0)
            se = stack.std(0, ddof=1) / math.sqrt(blocks)
            assert np.all(np.abs(mean_est - target) < 3 * se + 1e-9), name

    def test_completion_of_squares_against_quadrature(self):
        """Integrating the mid variable out of the three-factor product
        matches the assembled joint Gaussian pointwise to 1e-8 (1-D)."""
        lik, prior, sched = instance_1d()
        tau, k = 100, 500
        kern = build_kernels(prior, lik, sched, k=k, tau=tau)
        rng = np.random.default_rng(3)
        z_in = np.array([0.3, -0.2])  # (x0, xk)
        mu_x = kern.M @ z_in[:1] + kern.N @ z_in[1:] + kern.e
        from scipy.special import roots_hermitenorm

        nodes, weights = roots_hermitenorm(301)
        weights = weights / math.sqrt(2 * math.pi)
        x_tau = mu_x[0] + math.sqrt(kern.lam[0, 0]) * nodes
        joint_mean = kern.b + kern.B @ z_in
        joint_cov = kern.Gamma
        chol = np.linalg.cholesky(joint_cov)
        for _ in range(20):
            zp = joint_mean + rng.standard_normal(2) @ chol.T
            log_c = gauss_log_density(zp[:1], kern.C[0, 0] * x_tau[:, None] + kern.c, kern.Sigma_c[0, 0])
            log_d = gauss_log_density(zp[1:], kern.D[0, 0] * x_tau[:, None], kern.Sigma_d[0, 0])
            v = np.log(weights) + log_c + log_d
            peak = v.max()
            integral = peak + np.log(np.sum(np.exp(v - peak)))
            diff = zp - joint_mean
            sol = np.linalg.solve(joint_cov, diff)
            direct = -0.5 * (diff @ sol + 2 * math.log(2 * math.pi) + np.log(np.linalg.det(joint_cov)))
            np.testing.assert_allclose(integral, direct, atol=1e-8)


class TestInitKernel:
    def test_cross_covariance_is_alpha_scaled(self):
        """After the forward init kernel, Cov(x_0', x_k') = alpha_k V[x_0]."""
        _, prior, sched = instance_2d()
        x0 = GaussianMoments(mean=[0.2, -0.4], cov=[[0.5, 0.1], [0.1, 0.3]])
        k = 640
        out = forward_init_moments(prior, sched, k, x0)
        a = sched.alpha(k)
        np.testing.assert_allclose(out.cov[:2, 2:], a * x0.cov, atol=1e-14)
        np.testing.assert_allclose(out.mean[2:], a * x0.mean, atol=1e-14)
        v = sched.sigma2(0, k)
        np.testing.assert_allclose(out.cov[2:, 2:], v * np.eye(2) + a * a * x0.cov, atol=1e-14)


class TestFinalKernels:
    def test_inner_kernel_matches_quadrature(self):
        """x_s | x_t under g0-reweighted plugged bridge: Gauss-Hermite
        moments match (H_under, h_under, L_under) to 1e-8 (times (1, 2))."""
        lik, prior, sched = instance_1d()
        fk = build_final_kernels(prior, lik, sched, s=1, t=2)
        from scipy.special import roots_hermitenorm

        nodes, weights = roots_hermitenorm(301)
        weights = weights / math.sqrt(2 * math.pi)
        p = sched.bridge_params(1, 2)
        for x_t in (-0.7, 0.4, 1.5):
            m2 = prior.denoise(sched, 2, np.array([x_t])).value[0]
            mean_b = p.mean_coeff_x0 * m2 + p.mean_coeff_xt * x_t
            xs = mean_b + math.sqrt(p.variance) * nodes
            logw = np.log(weights) + lik.log_g0(xs[:, None])
            w = np.exp(logw - logw.max())
            w /= w.sum()
            q_mean = float(np.sum(w * xs))
            q_var = float(np.sum(w * xs**2)) - q_mean**2
            np.testing.assert_allclose(fk.H_under[0, 0] * x_t + fk.h_under[0], q_mean, atol=1e-8)
            np.testing.assert_allclose(fk.L_under[0, 0], q_var, atol=1e-8)

    def test_outer_kernel_is_denoiser_pushforward(self):
        lik, prior, sched = instance_1d()
        fk = build_final_kernels(prior, lik, sched, s=1, t=2)
        jac, bias = prior.denoiser_affine(sched, 1)
        np.testing.assert_allclose(fk.H, jac @ fk.H_under, atol=1e-14)
        np.testing.assert_allclose(fk.h, jac @ fk.h_under + bias, atol=1e-14)
        np.testing.assert_allclose(fk.L, jac @ fk.L_under @ jac.T, atol=1e-14)


class TestOracleRecursion:
    def test_validation(self):
        lik, prior, sched = instance_2d()
        with pytest.raises(ValueError):
            OracleConfig(timesteps=(10, 100), index_sequence=(2, 3))
        with pytest.raises(ValueError):
            OracleConfig(timesteps=(10, 100), index_sequence=(2,), R=0)
        cfg = OracleConfig(timesteps=(10, 500), index_sequence=(5,))
        with pytest.raises(ValueError):
            oracle_recursion(prior, lik, sched, cfg)

    def test_matches_simulation_moments(self):
        """Exact-backend driver replications agree with the recursion
        within Monte Carlo error (quick form of the flagship check)."""
        lik, prior, sched = instance_2d()
        from mgdm.sampler import make_timesteps

        ts = make_timesteps(10, 1000)
        seq = midpoint_sequence(ts)
        cfg = MgdmConfig(timesteps=ts, R=2, conditional="exact", denoise="exact",
                         index_dist=IndexDistribution(kind="fixed", values=seq))
        n = 30_000
        samples = mgdm_run_batch(lik, prior, sched, cfg, n, np.random.default_rng(19))
        om = oracle_recursion(prior, lik, sched, OracleConfig(timesteps=ts, index_sequence=seq, R=2))
        z = (samples.mean(0) - om.mean) / np.sqrt(np.diag(om.cov) / n)
        assert np.all(np.abs(z) < 4.0)
        emp_cov = np.cov(samples.T)
        se = np.sqrt(np.outer(np.diag(om.cov), np.diag(om.cov)) * 2.0 / n)
        assert np.all(np.abs(emp_cov - om.cov) < 4.0 * se)

    def test_replays_recorded_random_index_sequence(self):
        """Record the levels drawn by a seeded uniform-mix run, then
        replay them through the recursion: moments still agree."""
        lik, prior, sched = instance_2d()
        from mgdm.sampler import make_timesteps

        ts = make_timesteps(10, 1000)
        probe = MgdmConfig(timesteps=ts, R=1, conditional="exact", denoise="exact",
                           index_dist=IndexDistribution(kind="uniform-mix", tau=10))
        recorded: list[int] = []
        mgdm_run_batch(lik, prior, sched, probe, 1, np.random.default_rng(55), record_indices=recorded)
        seq = tuple(max(2, v) for v in recorded)
        cfg = MgdmConfig(timesteps=ts, R=1, conditional="exact", denoise="exact",
                         index_dist=IndexDistribution(kind="fixed", values=seq))
        n = 30_000
        samples = mgdm_run_batch(lik, prior, sched, cfg, n, np.random.default_rng(56))
        om = oracle_recursion(prior, lik, sched, OracleConfig(timesteps=ts, index_sequence=seq, R=1))
        z = (samples.mean(0) - om.mean) / np.sqrt(np.diag(om.cov) / n)
        assert np.all(np.abs(z) < 4.0)

    def test_matches_simulation_in_denoise_final_mode(self):
        """The denoiser-valued final kernel agrees between driver and
        recursion when both are configured to use it."""
        lik, prior, sched = instance_1d()
        from mgdm.sampler import make_timesteps

        ts = (2,) + tuple(make_timesteps(8, 1000, t1=120))
        seq = midpoint_sequence(ts)
        cfg = MgdmConfig(timesteps=ts, R=2, conditional="exact", denoise="exact",
                         index_dist=IndexDistribution(kind="fixed", values=seq),
                         final="denoise", final_s=1)
        n = 30_000
        samples = mgdm_run_batch(lik, prior, sched, cfg, n, np.random.default_rng(23))
        om = oracle_recursion(
            prior, lik, sched,
            OracleConfig(timesteps=ts, index_sequence=seq, R=2, final="denoise", final_s=1),
        )
        z = (samples.mean(0) - om.mean) / np.sqrt(np.diag(om.cov) / n)
        assert np.all(np.abs(z) < 4.0)
        assert abs(np.var(samples[:, 0]) / om.cov[0, 0] - 1.0) < 0.05

    def test_large_R_converges_to_posterior(self):
        """R = 200 on a fine-tailed grid: oracle moments within 1e-2
        relative Frobenius error of the conjugate posterior.  The floor is
        the tau = 2 backward-noise term, so the grid tail must be fine."""
        lik, prior, sched = instance_2d()
        post = exact_posterior(prior, lik)
        from mgdm.sampler import make_timesteps

        ts = make_timesteps(50, 1000, t1=4)
        seq = midpoint_sequence(ts)
        om = oracle_recursion(prior, lik, sched, OracleConfig(timesteps=ts, index_sequence=seq, R=200))
        rel_mean = np.linalg.norm(om.mean - post.mean) / np.linalg.norm(post.mean)
        rel_cov = np.linalg.norm(om.cov - post.cov) / np.linalg.norm(post.cov)
        assert rel_mean < 1e-2
        assert rel_cov < 1e-2

    def test_posterior_gap_nonincreasing_in_R(self):
        lik, prior, sched = instance_2d()
        post = exact_posterior(prior, lik)
        from mgdm.sampler import make_timesteps

        ts = make_timesteps(25, 1000)
        seq = midpoint_sequence(ts)
        gaps = []
        for r_val in (1, 4):
            om = oracle_recursion(prior, lik, sched, OracleConfig(timesteps=ts, index_sequence=seq, R=r_val))
            gaps.append(np.linalg.norm(om.cov - post.cov))
        assert gaps[1] <= gaps[0]

    def test_flat_potential_reduces_to_prior_only_recursion(self):
        """sigma_y -> inf: the output law equals an independently coded
        potential-free recursion (bridge conditional, exact denoising)."""
        lik, prior, sched = instance_2d()
        flat = LinearGaussianLikelihood(A=lik.A, y=lik.y, sigma_y=1e10)
        from mgdm.sampler import make_timesteps

        ts = make_timesteps(12, 1000)
        seq = midpoint_sequence(ts)
        R = 3
        om = oracle_recursion(prior, flat, sched, OracleConfig(timesteps=ts, index_sequence=seq, R=R))

        d = prior.dim
        eye = np.eye(d)
        jac_n, bias_n = prior.denoiser_affine(sched, ts[-1])
        mean = np.concatenate([bias_n, np.zeros(d)])
        cov = np.block([[jac_n @ jac_n.T, jac_n], [jac_n.T, eye]])
        K = len(ts)
        for i in range(K, 1, -1):
            t_i = ts[i - 1]
            tau = seq[K - i]
            if i < K:
                p = sched.bridge_params(t_i, ts[i])
                f_mat = np.block([[eye, np.zeros((d, d))], [p.mean_coeff_x0 * eye, p.mean_coeff_xt * eye]])
                mean = f_mat @ mean
                cov = f_mat @ cov @ f_mat.T
                cov[d:, d:] += p.variance * eye
            pb = sched.bridge_params(tau, t_i)
            c_mat, c_bias = prior.denoiser_affine(sched, tau)
            sigma_c = prior.posterior_x0_cov(sched, tau)
            ratio = sched.alpha_ratio(tau, t_i)
            big_b = np.block(
                [
                    [pb.mean_coeff_x0 * c_mat, pb.mean_coeff_xt * c_mat],
                    [pb.mean_coeff_x0 * ratio * eye, pb.mean_coeff_xt * ratio * eye],
                ]
            )
            big_bias = np.concatenate([c_bias, np.zeros(d)])
            lam = pb.variance * eye
            gam = np.block(
                [
                    [c_mat @ lam @ c_mat.T + sigma_c, ratio * c_mat @ lam],
                    [ratio * lam @ c_mat.T, ratio**2 * lam + sched.sigma2(tau, t_i) * eye],
                ]
            )
            for _ in range(R):
                mean = big_bias + big_b @ mean
                cov = big_b @ cov @ big_b.T + gam
        np.testing.assert_allclose(om.mean, mean[:d], atol=1e-8)
        np.testing.assert_allclose(om.cov, cov[:d, :d], atol=1e-8)


class TestQuadratureJoint:
    def test_rejects_multivariate(self):
        lik, prior, sched = instance_2d()
        grids = (GridSpec(-5, 5), GridSpec(-5, 5), GridSpec(-5, 5))
        with pytest.raises(ValueError):
            quadrature_joint(lik, prior, sched, 100, 500, grids)

    def test_rejects_coarse_grid(self):
        with pytest.raises(ValueError):
            GridSpec(-5, 5, n=128)

    def test_pair_marginal_normalized(self):
        lik, prior, sched = instance_1d()
        s, t = 60, 400
        joint = quadrature_joint(lik, prior, sched, s, t, auto_grids(lik, prior, sched, s, t))
        dens = joint.pair_marginal(("x0", "xs"))
        mass = joint.grids["x0"].weights @ dens @ joint.grids["xs"].weights
        np.testing.assert_allclose(mass, 1.0, atol=1e-6)
        for axis in ("x0", "xs", "xt"):
            np.testing.assert_allclose(joint.mass(axis), 1.0, atol=1e-6)

    def test_marginal_moments_match_analytic(self):
        """All three grid marginals match the closed-form Gaussian moments
        of the extended target to 1e-6."""
        lik, prior, sched = instance_1d()
        s, t = 60, 400
        joint = quadrature_joint(lik, prior, sched, s, t, auto_grids(lik, prior, sched, s, t, n=1024))

        a_hat, offset = linearized_potential(lik, prior, sched, s)
        mean_s, cov_s = prior.marginal_moments(sched, s)
        prec = np.linalg.inv(cov_s) + a_hat.T @ a_hat / lik.sigma_y**2
        var_s = 1.0 / prec[0, 0]
        m_s = var_s * (mean_s[0] / cov_s[0, 0] + (a_hat[0, 0] * (lik.y[0] - offset[0])) / lik.sigma_y**2)

        gain, const, var0 = prior.backward_moments(sched, 0, s)
        m_0 = gain[0, 0] * m_s + const[0]
        var_x0 = gain[0, 0] ** 2 * var_s + var0[0, 0]
        ratio = sched.alpha_ratio(s, t)
        m_t = ratio * m_s
        var_t = ratio**2 * var_s + sched.sigma2(s, t)

        for axis, m_ref, v_ref in (("x0", m_0, var_x0), ("xs", m_s, var_s), ("xt", m_t, var_t)):
            m_grid, v_grid = joint.moments(axis)
            np.testing.assert_allclose(m_grid, m_ref, atol=1e-6)
            np.testing.assert_allclose(v_grid, v_ref, atol=1e-6)

    def test_gmm_prior_supported(self):
        prior = GmmPrior(weights=[0.5, 0.5], means=[[-1.0], [1.0]], covs=[[[0.3]], [[0.3]]])
        lik = LinearGaussianLikelihood(A=[[1.0]], y=[0.4], sigma_y=0.3)
        sched = make_schedule("linear", 1000)
        grids = (GridSpec(-6, 6, 768),) * 3
        joint = quadrature_joint(lik, prior, sched, 60, 400, grids)
        for axis in ("x0", "xs", "xt"):
            np.testing.assert_allclose(joint.mass(axis), 1.0, atol=1e-6)

    def test_flat_potential_xt_marginal_is_smoothed_prior(self):
        lik, prior, sched = instance_1d(sigma_y=1e8)
        s, t = 60, 400
        joint = quadrature_joint(lik, prior, sched, s, t, auto_grids(lik, prior, sched, s, t, n=1024))
        pts, dens = joint.marginal("xt")
        ref = np.exp(prior.marginal_log_density(sched, t, pts[:, None]))
        np.testing.assert_allclose(dens, ref, atol=1e-8)
