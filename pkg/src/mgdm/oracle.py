"""Exact verification oracles for the Gaussian linear-inverse setting.

With a Gaussian prior and a linear-Gaussian observation every update of
the guided Gibbs sampler is affine-Gaussian, so the law of the driver's
output is a Gaussian whose moments follow a closed recursion:

  * an init kernel mapping the time-0 state to the joint (x_0, x_k),
  * one 2d x 2d affine kernel per Gibbs repetition (B_k, Gamma_k, b_k),
  * a final affine kernel (H, h, L) for the denoiser-valued last step.

The recursion mirrors the artifact's driver exactly (same x_t
initialization bridging, same exact-backend conditional and backward
draws), so simulated moments and oracle moments agree by construction.

A trapezoid-rule quadrature engine for the 1-D extended target
pibar(x_0, x_s, x_t) provides a second, dumber oracle for densities and
marginal moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .likelihoods import LinearGaussianLikelihood, log_g_hat
from .moments import GaussianMoments
from .priors import GaussianPrior, spd_inverse
from .schedule import NoiseSchedule
from .vi import conditional_coefficients

__all__ = [
    "GaussianMoments",
    "OracleKernels",
    "FinalKernels",
    "OracleConfig",
    "build_kernels",
    "build_final_kernels",
    "forward_init_moments",
    "oracle_recursion",
    "GridSpec",
    "QuadratureJoint",
    "quadrature_joint",
    "auto_grids",
]


@dataclass(frozen=True)
class OracleKernels:
    """All matrices of one Gibbs-repetition kernel at levels (tau, k).

    The per-repetition update of the joint state z = (x_0, x_k) is
    z' = b + B z + Gamma^{1/2} xi.  ``B``, ``b``, ``Gamma`` come from
    direct composition of the three conditional draws; ``psi``,
    ``gamma_assembled``, ``j_block``, ``k_block`` are the
    completion-of-squares assembly of the same objects (equal up to
    roundoff, asserted by tests).
    """

    k: int
    tau: int
    # conditional pibar(x_tau | x_0, x_k) = N(M x_0 + N x_k + e, lam)
    lam: np.ndarray
    M: np.ndarray
    N: np.ndarray
    e: np.ndarray
    # denoising draw x_0' ~ N(C x_tau + c, Sigma_c)
    C: np.ndarray
    c: np.ndarray
    Sigma_c: np.ndarray
    # noising draw x_k' ~ N(D x_tau, Sigma_d)
    D: np.ndarray
    Sigma_d: np.ndarray
    # one-repetition joint kernel
    B: np.ndarray
    b: np.ndarray
    Gamma: np.ndarray
    # completion-of-squares assembly
    psi: np.ndarray
    gamma_assembled: np.ndarray
    j_block: np.ndarray
    k_block: np.ndarray


@dataclass(frozen=True)
class FinalKernels:
    """Affine law of the last denoiser-valued step.

    Inner kernel: x_s | x_t ~ N(H_under x_t + h_under, L_under), the
    g0-reweighted bridge started from the plugged denoiser mean at t.
    Outer: x_0 = m_s(x_s), giving x_0 | x_t ~ N(H x_t + h, L).
    """

    s: int
    t: int
    H_under: np.ndarray
    h_under: np.ndarray
    L_under: np.ndarray
    H: np.ndarray
    h: np.ndarray
    L: np.ndarray


def _require_gaussian_linear(prior, likelihood) -> None:
    if not isinstance(prior, GaussianPrior):
        raise TypeError("the moment oracle requires a Gaussian prior")
    if not isinstance(likelihood, LinearGaussianLikelihood):
        raise TypeError("the moment oracle requires a linear-Gaussian likelihood")


def build_kernels(
    prior: GaussianPrior,
    likelihood: LinearGaussianLikelihood,
    schedule: NoiseSchedule,
    k: int,
    tau: int,
) -> OracleKernels:
    """Assemble the one-repetition kernel matrices at levels (tau, k)."""
    _require_gaussian_linear(prior, likelihood)
    if not 2 <= tau < k:
        raise ValueError(f"need 2 <= tau < k, got tau={tau}, k={k}")
    d = prior.dim
    eye = np.eye(d)

    M, N, e, lam = conditional_coefficients(likelihood, prior, schedule, tau, k)
    C, c = prior.denoiser_affine(schedule, tau)
    Sigma_c = prior.posterior_x0_cov(schedule, tau)
    D = schedule.alpha_ratio(tau, k) * eye
    Sigma_d = schedule.sigma2(tau, k) * eye

    # Direct composition of the three Gaussian draws.
    B = np.block([[C @ M, C @ N], [D @ M, D @ N]])
    b = np.concatenate([C @ e + c, D @ e])
    Gamma = np.block(
        [
            [C @ lam @ C.T + Sigma_c, C @ lam @ D.T],
            [D @ lam @ C.T, D @ lam @ D.T + Sigma_d],
        ]
    )
    Gamma = 0.5 * (Gamma + Gamma.T)

    # Completion-of-squares assembly of the same kernel.
    sc_inv = spd_inverse(Sigma_c)
    sd_inv = spd_inverse(Sigma_d)
    lam_inv = spd_inverse(lam)
    psi = spd_inverse(lam_inv + C.T @ sc_inv @ C + D.T @ sd_inv @ D)
    gamma_inv = np.block(
        [
            [sc_inv - sc_inv @ C @ psi @ C.T @ sc_inv, -sc_inv @ C @ psi @ D.T @ sd_inv],
            [-sd_inv @ D @ psi @ C.T @ sc_inv, sd_inv - sd_inv @ D @ psi @ D.T @ sd_inv],
        ]
    )
    gamma_assembled = spd_inverse(gamma_inv)
    zeros = np.zeros((d, d))
    j_block = np.block(
        [[sc_inv @ C @ psi @ lam_inv, zeros], [zeros, sd_inv @ D @ psi @ lam_inv]]
    )
    k_block = np.block([[M, N], [M, N]])

    return OracleKernels(
        k=k,
        tau=tau,
        lam=lam,
        M=M,
        N=N,
        e=e,
        C=C,
        c=c,
        Sigma_c=Sigma_c,
        D=D,
        Sigma_d=Sigma_d,
        B=B,
        b=b,
        Gamma=Gamma,
        psi=psi,
        gamma_assembled=gamma_assembled,
        j_block=j_block,
        k_block=k_block,
    )


def build_final_kernels(
    prior: GaussianPrior,
    likelihood: LinearGaussianLikelihood,
    schedule: NoiseSchedule,
    s: int = 1,
    t: int = 2,
) -> FinalKernels:
    """Final-step kernel: g0-reweighted plugged bridge t -> s, then m_s."""
    _require_gaussian_linear(prior, likelihood)
    if not 1 <= s < t:
        raise ValueError(f"need 1 <= s < t, got s={s}, t={t}")
    d = prior.dim
    a_mat, y, s2 = likelihood.A, likelihood.y, likelihood.sigma_y**2
    p = schedule.bridge_params(s, t)
    jac_t, bias_t = prior.denoiser_affine(schedule, t)
    jac_s, bias_s = prior.denoiser_affine(schedule, s)

    L_under = spd_inverse(np.eye(d) / p.variance + a_mat.T @ a_mat / s2)
    H_under = L_under @ ((p.mean_coeff_x0 / p.variance) * jac_t + (p.mean_coeff_xt / p.variance) * np.eye(d))
    h_under = L_under @ (a_mat.T @ y / s2 + (p.mean_coeff_x0 / p.variance) * bias_t)
    H = jac_s @ H_under
    h = jac_s @ h_under + bias_s
    L = jac_s @ L_under @ jac_s.T
    return FinalKernels(s=s, t=t, H_under=H_under, h_under=h_under, L_under=L_under, H=H, h=h, L=0.5 * (L + L.T))


def forward_init_moments(prior: GaussianPrior, schedule: NoiseSchedule, k: int, x0: GaussianMoments) -> GaussianMoments:
    """Init kernel: keep x_0, draw x_k from the forward kernel q(. | x_0).

    Joint moments of (x_0', x_k'): the cross block is alpha_k V[x_0].
    """
    d = x0.dim
    a = schedule.alpha(k)
    v = schedule.sigma2(0, k)
    mean = np.concatenate([x0.mean, a * x0.mean])
    cov = np.block(
        [[x0.cov, a * x0.cov], [a * x0.cov, v * np.eye(d) + a * a * x0.cov]]
    )
    return GaussianMoments(mean=mean, cov=cov)


@dataclass(frozen=True)
class OracleConfig:
    """Deterministic replay plan for the moment recursion.

    ``index_sequence`` lists the auxiliary level used at each outer step,
    ordered for i = K down to 2 (K - 1 entries).  Random index
    distributions are rejected by construction: averaging over levels
    breaks the Gaussianity of the output law, so callers replay recorded
    sequences instead.  ``final`` = "sample" mirrors the driver's default
    output (the last backward draw); "denoise" appends the denoiser-valued
    final kernel at (final_s, t_2).
    """

    timesteps: tuple[int, ...]
    index_sequence: tuple[int, ...]
    R: int = 1
    final: str = "sample"
    final_s: int = 1

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        seq = tuple(int(s) for s in self.index_sequence)
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "index_sequence", seq)
        if len(ts) < 2 or any(b <= a for a, b in zip(ts, ts[1:])) or ts[0] <= 1:
            raise ValueError("timesteps must be strictly increasing with t_1 > 1")
        if len(seq) != len(ts) - 1:
            raise ValueError(f"index_sequence needs {len(ts) - 1} entries, got {len(seq)}")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.final not in ("sample", "denoise"):
            raise ValueError(f"unknown final mode {self.final!r}")


def oracle_recursion(
    prior: GaussianPrior,
    likelihood: LinearGaussianLikelihood,
    schedule: NoiseSchedule,
    config: OracleConfig,
) -> GaussianMoments:
    """Exact output moments of the driver under the exact backends.

    Tracks the joint Gaussian of (x_0, x_t-carried), pushing it through
    the standard-normal init + denoiser, the per-step bridge
    initialization, R repetition kernels per step, and the configured
    final convention.
    """
    _require_gaussian_linear(prior, likelihood)
    ts = config.timesteps
    if ts[-1] != schedule.T:
        raise ValueError(f"t_K={ts[-1]} must equal the schedule horizon T={schedule.T}")
    K = len(ts)
    d = prior.dim
    eye = np.eye(d)

    # x_{t_K} ~ N(0, I); x_0 = m_{t_K}(x_{t_K}); joint over (x_0, x_carried).
    jac_n, bias_n = prior.denoiser_affine(schedule, ts[-1])
    mean = np.concatenate([bias_n, np.zeros(d)])
    cov = np.block([[jac_n @ jac_n.T, jac_n], [jac_n.T, eye]])

    for i in range(K, 1, -1):
        t_i = ts[i - 1]
        tau = config.index_sequence[K - i]
        if not 1 <= tau < t_i:
            raise ValueError(f"index {tau} invalid for step at t={t_i}")
        if i < K:
            p = schedule.bridge_params(t_i, ts[i])
            f_mat = np.block(
                [[eye, np.zeros((d, d))], [p.mean_coeff_x0 * eye, p.mean_coeff_xt * eye]]
            )
            mean = f_mat @ mean
            cov = f_mat @ cov @ f_mat.T
            cov[d:, d:] += p.variance * eye
        kern = build_kernels(prior, likelihood, schedule, k=t_i, tau=tau)
        for _ in range(config.R):
            mean = kern.b + kern.B @ mean
            cov = kern.B @ cov @ kern.B.T + kern.Gamma
            cov = 0.5 * (cov + cov.T)

    if config.final == "denoise":
        fk = build_final_kernels(prior, likelihood, schedule, s=config.final_s, t=ts[1])
        mean_t, cov_t = mean[d:], cov[d:, d:]
        out_mean = fk.H @ mean_t + fk.h
        out_cov = fk.H @ cov_t @ fk.H.T + fk.L
        return GaussianMoments(mean=out_mean, cov=0.5 * (out_cov + out_cov.T))
    return GaussianMoments(mean=mean[:d], cov=cov[:d, :d])


# -- 1-D quadrature engine ----------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid on [lo, hi] with n points, trapezoid weights."""

    lo: float
    hi: float
    n: int = 512

    def __post_init__(self):
        if self.hi <= self.lo:
            raise ValueError("need hi > lo")
        if self.n < 512:
            raise ValueError("quadrature grids need at least 512 points per axis")

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n)

    @property
    def weights(self) -> np.ndarray:
        dx = (self.hi - self.lo) / (self.n - 1)
        w = np.full(self.n, dx)
        w[0] = w[-1] = 0.5 * dx
        return w


class QuadratureJoint:
    """Normalized trapezoid-rule representation of pibar(x_0, x_s, x_t), d = 1.

    The joint factors as F1(x_0, x_s) * F2(x_s, x_t) with
    F1 = p_0(x_0) q(x_s | x_0) ghat_s(x_s) and F2 = q(x_t | x_s), so all
    marginals reduce to matrix contractions; the full cube is available
    through :meth:`log_joint` without ever being materialized.
    """

    AXES = ("x0", "xs", "xt")

    def __init__(self, likelihood, prior, schedule: NoiseSchedule, s: int, t: int, grids):
        if prior.dim != 1:
            raise ValueError("quadrature_joint supports d = 1 only")
        if not 1 <= s < t:
            raise ValueError(f"need 1 <= s < t, got s={s}, t={t}")
        self.s, self.t = s, t
        self.grids = dict(zip(self.AXES, grids))
        g0, gs, gt = (self.grids[a] for a in self.AXES)
        x0 = g0.points[:, None]
        xs = gs.points[None, :]
        xt = gt.points[None, :]

        from .schedule import gauss_log_density

        log_prior = prior.log_density(g0.points[:, None, None])[:, 0]
        ratio_s = schedule.alpha_ratio(0, s)
        var_s = schedule.sigma2(0, s)
        log_fwd_s = gauss_log_density((xs - ratio_s * x0)[..., None], np.zeros(1), var_s)
        log_pot = log_g_hat(likelihood, prior, schedule, s, gs.points[:, None, None]).log_value[:, 0]
        self._log_f1 = log_prior[:, None] + log_fwd_s + log_pot[None, :]

        ratio_t = schedule.alpha_ratio(s, t)
        var_t = schedule.sigma2(s, t)
        self._log_f2 = gauss_log_density((xt - ratio_t * xs.T)[..., None], np.zeros(1), var_t)

        logw0 = np.log(g0.weights)
        logws = np.log(gs.weights)
        logwt = np.log(gt.weights)
        # column/row contractions: a_j = int F1 dx0, b_j = int F2 dxt
        self._log_a = _logsumexp_axis(self._log_f1 + logw0[:, None], axis=0)
        self._log_b = _logsumexp_axis(self._log_f2 + logwt[None, :], axis=1)
        self.log_z = float(_logsumexp_axis(logws + self._log_a + self._log_b, axis=0))

    def log_joint(self, x0_idx, xs_idx, xt_idx) -> np.ndarray:
        """Normalized log density at grid index triples."""
        return self._log_f1[x0_idx, xs_idx] + self._log_f2[xs_idx, xt_idx] - self.log_z

    def marginal(self, axis: str):
        """(points, density) of a 1-D marginal, normalized on the grid."""
        if axis == "x0":
            logs = _logsumexp_axis(
                self._log_f1 + (np.log(self.grids["xs"].weights) + self._log_b)[None, :], axis=1
            )
            return self.grids["x0"].points, np.exp(logs - self.log_z)
        if axis == "xs":
            logs = self._log_a + self._log_b
            return self.grids["xs"].points, np.exp(logs - self.log_z)
        if axis == "xt":
            logs = _logsumexp_axis(
                self._log_f2 + (np.log(self.grids["xs"].weights) + self._log_a)[:, None], axis=0
            )
            return self.grids["xt"].points, np.exp(logs - self.log_z)
        raise ValueError(f"unknown axis {axis!r}")

    def pair_marginal(self, axes: tuple[str, str]):
        """Normalized density on the (x0, xs) or (xs, xt) sub-grid."""
        if axes == ("x0", "xs"):
            logs = self._log_f1 + self._log_b[None, :] - self.log_z
        elif axes == ("xs", "xt"):
            logs = self._log_a[:, None] + self._log_f2 - self.log_z
        else:
            raise ValueError("pair_marginal supports ('x0','xs') and ('xs','xt')")
        return np.exp(logs)

    def moments(self, axis: str) -> tuple[float, float]:
        pts, dens = self.marginal(axis)
        w = self.grids[axis].weights
        mean = float(np.sum(w * pts * dens))
        var = float(np.sum(w * pts**2 * dens)) - mean**2
        return mean, var

    def mass(self, axis: str) -> float:
        pts, dens = self.marginal(axis)
        return float(np.sum(self.grids[axis].weights * dens))


def quadrature_joint(likelihood, prior, schedule: NoiseSchedule, s: int, t: int, grids) -> QuadratureJoint:
    """Build the normalized 1-D quadrature view of pibar(x_0, x_s, x_t)."""
    return QuadratureJoint(likelihood, prior, schedule, s, t, grids)


def auto_grids(likelihood, prior, schedule: NoiseSchedule, s: int, t: int, n: int = 512, width: float = 10.0):
    """Grids wide enough for the joint's effective support (d = 1).

    Centers cover the prior mean and, when available in closed form, the
    posterior mean; each axis spans ``width`` standard deviations of its
    smoothed marginal.
    """
    from .priors import GmmPrior, exact_posterior

    if isinstance(prior, GmmPrior):
        mean0 = float(np.sum(prior.weights * prior.means[:, 0]))
        second = float(np.sum(prior.weights * (prior.covs[:, 0, 0] + prior.means[:, 0] ** 2)))
        sd0 = math.sqrt(second - mean0**2)
    else:
        mean0 = float(prior.mean[0])
        sd0 = math.sqrt(float(prior.cov[0, 0]))
    centers = [mean0]
    if isinstance(likelihood, LinearGaussianLikelihood) and isinstance(prior, GaussianPrior):
        centers.append(float(exact_posterior(prior, likelihood).mean[0]))

    def span(level: int) -> GridSpec:
        a = 1.0 if level == 0 else schedule.alpha(level)
        v = 0.0 if level == 0 else schedule.sigma2(0, level)
        spread = math.sqrt(a * a * sd0 * sd0 + v)
        return GridSpec(a * min(centers) - width * spread, a * max(centers) + width * spread, n)

    return (span(0), span(s), span(t))


def _logsumexp_axis(v: np.ndarray, axis: int) -> np.ndarray:
    peak = np.max(v, axis=axis, keepdims=True)
    out = peak.squeeze(axis) + np.log(np.sum(np.exp(v - peak), axis=axis))
    return out
