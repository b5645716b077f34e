"""Analytic diffusion priors: Gaussian and Gaussian mixture.

Both families admit closed forms for everything the sampler and its
oracles need: the denoiser m_t(x) = E[X_0 | X_t = x] and its Jacobian,
the score of the smoothed marginal p_t = N(alpha_t m, alpha_t^2 Sigma + v_t I)
(convolution of the prior with the forward kernel, v_t = sigma2_{t|0}),
exact backward transitions p_{s|t}, and the conjugate Bayesian posterior
for linear-Gaussian observations.

Covariances are factorized once (Cholesky); conditioning uses triangular
solves, never explicit inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from .schedule import NoiseSchedule

__all__ = [
    "GaussianPrior",
    "GmmPrior",
    "DenoiserOutput",
    "exact_posterior",
    "prior_to_json",
    "prior_from_json",
    "spd_inverse",
]

_MIN_EIGVAL = 1e-12


@dataclass(frozen=True)
class DenoiserOutput:
    """Denoiser value m_t(x_t) and Jacobian d m_t / d x_t.

    The Jacobian is symmetric PSD for both prior families (it is a
    rescaled posterior covariance of X_0 given X_t).  For batched input
    of shape (..., d) the value has shape (..., d) and the Jacobian
    (..., d, d).
    """

    value: np.ndarray
    jacobian: np.ndarray


def _validate_spd(cov: np.ndarray, what: str) -> np.ndarray:
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    if cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{what} must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ValueError(f"{what} must be symmetric")
    if np.min(np.linalg.eigvalsh(cov)) < _MIN_EIGVAL:
        raise ValueError(f"{what} must have eigenvalues >= {_MIN_EIGVAL}")
    return cov


def _chol_logdet(chol: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diagonal(chol))))


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log N(x; mean, L L^T) for x of shape (..., d)."""
    d = mean.shape[0]
    diff = np.asarray(x, dtype=np.float64) - mean
    flat = diff.reshape(-1, d)
    z = solve_triangular(chol, flat.T, lower=True).T.reshape(diff.shape)
    quad = np.sum(z**2, axis=-1)
    return -0.5 * (quad + d * np.log(2.0 * np.pi) + _chol_logdet(chol))


@dataclass(frozen=True)
class GaussianPrior:
    """Gaussian prior N(mean, cov) with SPD covariance."""

    mean: np.ndarray
    cov: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = _validate_spd(self.cov, "prior covariance")
        if cov.shape[0] != mean.shape[0]:
            raise ValueError("mean and cov dimensions disagree")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_chol", np.linalg.cholesky(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    # -- smoothed marginal p_t ---------------------------------------------

    def marginal_moments(self, schedule: NoiseSchedule, t: int):
        """Mean and covariance of p_t = N(alpha_t m, abar_t Sigma + v_t I)."""
        a = schedule.alpha(t)
        v = schedule.sigma2(0, t)
        return a * self.mean, (a * a) * self.cov + v * np.eye(self.dim)

    def marginal_log_density(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray):
        mean, cov = self.marginal_moments(schedule, t)
        return _mvn_logpdf(x_t, mean, np.linalg.cholesky(cov))

    def score(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> np.ndarray:
        """Score of p_t; rejects t = 0 (the Tweedie route needs v_t > 0)."""
        if t == 0:
            raise ValueError("score is defined for t >= 1")
        mean, cov = self.marginal_moments(schedule, t)
        chol = np.linalg.cholesky(cov)
        diff = np.asarray(x_t, dtype=np.float64) - mean
        return -_solve_cols(chol, diff)

    # -- denoiser ------------------------------------------------------------

    def denoiser_affine(self, schedule: NoiseSchedule, t: int):
        """(J_t, b_t) with m_t(x) = J_t x + b_t.

        J_t = alpha_t Sigma S_t^{-1} and b_t = v_t S_t^{-1} m where
        S_t = abar_t Sigma + v_t I; equivalent to the resolvent form
        Sigma_{0|t}((alpha_t / v_t) x + Sigma^{-1} m).
        """
        if t == 0:
            raise ValueError("denoiser is defined for t >= 1")
        a = schedule.alpha(t)
        v = schedule.sigma2(0, t)
        s_t = (a * a) * self.cov + v * np.eye(self.dim)
        chol = np.linalg.cholesky(s_t)
        jac = a * _solve_spd_mat(chol, self.cov).T  # Sigma S_t^{-1}, symmetric
        bias = v * _solve_spd_mat(chol, self.mean[:, None])[:, 0]
        return 0.5 * (jac + jac.T), bias

    def posterior_x0_cov(self, schedule: NoiseSchedule, t: int) -> np.ndarray:
        """Cov[X_0 | X_t] = Sigma_{0|t} = v_t Sigma S_t^{-1}."""
        if t == 0:
            raise ValueError("needs t >= 1")
        a = schedule.alpha(t)
        v = schedule.sigma2(0, t)
        s_t = (a * a) * self.cov + v * np.eye(self.dim)
        chol = np.linalg.cholesky(s_t)
        out = v * _solve_spd_mat(chol, self.cov).T
        return 0.5 * (out + out.T)

    def denoise(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> DenoiserOutput:
        jac, bias = self.denoiser_affine(schedule, t)
        x_t = np.asarray(x_t, dtype=np.float64)
        value = x_t @ jac.T + bias
        return DenoiserOutput(value=value, jacobian=np.broadcast_to(jac, x_t.shape + (self.dim,)))

    # -- exact backward transition p_{s|t} ------------------------------------

    def backward_moments(self, schedule: NoiseSchedule, s: int, t: int):
        """(G, g, V): p_{s|t}(x_t; .) = N(G x_t + g, V), for 0 <= s < t."""
        if not 0 <= s < t:
            raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
        a_s, a_t = schedule.alpha(s), schedule.alpha(t)
        _, s_s = self.marginal_moments(schedule, s)
        _, s_t = self.marginal_moments(schedule, t)
        ratio = a_t / a_s
        chol_t = np.linalg.cholesky(s_t)
        cross = ratio * s_s  # Cov(X_s, X_t)
        gain = _solve_spd_mat(chol_t, cross.T).T  # cross S_t^{-1}
        mean_const = a_s * self.mean - gain @ (a_t * self.mean)
        var = s_s - gain @ cross.T
        return gain, mean_const, 0.5 * (var + var.T)

    def backward_sample(
        self, schedule: NoiseSchedule, s: int, t: int, x_t: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        gain, mean_const, var = self.backward_moments(schedule, s, t)
        x_t = np.asarray(x_t, dtype=np.float64)
        mean = x_t @ gain.T + mean_const
        root = _psd_root(var)
        return mean + rng.standard_normal(mean.shape) @ root.T

    def log_density(self, x: np.ndarray):
        return _mvn_logpdf(x, self.mean, self._chol)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + rng.standard_normal((n, self.dim)) @ self._chol.T

    def moments(self):
        from .moments import GaussianMoments

        return GaussianMoments(mean=self.mean, cov=self.cov)


@dataclass(frozen=True)
class GmmPrior:
    """Gaussian mixture prior sum_j w_j N(m_j, Sigma_j)."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        if np.any(w < 0.0) or abs(float(w.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1 within 1e-12")
        if means.shape[0] != w.shape[0] or covs.shape[0] != w.shape[0]:
            raise ValueError("weights, means, covs must agree on the number of components")
        for j in range(covs.shape[0]):
            _validate_spd(covs[j], f"component {j} covariance")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    def _component_marginals(self, schedule: NoiseSchedule, t: int):
        a = schedule.alpha(t)
        v = schedule.sigma2(0, t)
        eye = np.eye(self.dim)
        covs_t = (a * a) * self.covs + v * eye
        chols = np.linalg.cholesky(covs_t)
        return a * self.means, chols

    def component_log_densities(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> np.ndarray:
        """log w_j + log N(x_t; alpha_t m_j, S_{t,j}); shape (..., J)."""
        means_t, chols = self._component_marginals(schedule, t)
        parts = [
            np.log(self.weights[j]) + _mvn_logpdf(x_t, means_t[j], chols[j])
            for j in range(self.n_components)
        ]
        return np.stack(parts, axis=-1)

    def responsibilities(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> np.ndarray:
        logs = self.component_log_densities(schedule, t, x_t)
        logs = logs - logs.max(axis=-1, keepdims=True)
        num = np.exp(logs)
        return num / num.sum(axis=-1, keepdims=True)

    def marginal_log_density(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray):
        logs = self.component_log_densities(schedule, t, x_t)
        peak = logs.max(axis=-1)
        out = peak + np.log(np.sum(np.exp(logs - peak[..., None]), axis=-1))
        return float(out) if np.ndim(out) == 0 else out

    def score(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> np.ndarray:
        if t == 0:
            raise ValueError("score is defined for t >= 1")
        resp, comp_scores = self._resp_and_scores(schedule, t, np.asarray(x_t, dtype=np.float64))
        return np.sum(resp[..., None] * comp_scores, axis=-2)

    def _resp_and_scores(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray):
        """Responsibilities (..., J) and per-component scores (..., J, d)."""
        means_t, chols = self._component_marginals(schedule, t)
        resp = self.responsibilities(schedule, t, x_t)
        scores = np.stack(
            [-_solve_cols(chols[j], x_t - means_t[j]) for j in range(self.n_components)],
            axis=-2,
        )
        return resp, scores

    def denoise(self, schedule: NoiseSchedule, t: int, x_t: np.ndarray) -> DenoiserOutput:
        """Responsibility-weighted combination of component denoisers.

        The Jacobian carries the responsibility-gradient term
        (v_t / alpha_t) Cov_r[score_j], which makes it the rescaled
        posterior covariance of X_0 given X_t.
        """
        if t == 0:
            raise ValueError("denoiser is defined for t >= 1")
        a = schedule.alpha(t)
        v = schedule.sigma2(0, t)
        x_t = np.asarray(x_t, dtype=np.float64)
        resp, scores = self._resp_and_scores(schedule, t, x_t)
        # Per-component Tweedie: m_{t,j}(x) = (x + v * score_j) / alpha.
        comp_values = (x_t[..., None, :] + v * scores) / a
        value = np.sum(resp[..., None] * comp_values, axis=-2)

        comp_jacs = []
        eye = np.eye(self.dim)
        for j in range(self.n_components):
            s_tj = (a * a) * self.covs[j] + v * eye
            jac_j = a * _solve_spd_mat(np.linalg.cholesky(s_tj), self.covs[j]).T
            comp_jacs.append(0.5 * (jac_j + jac_j.T))
        comp_jacs = np.stack(comp_jacs)  # (J, d, d)

        mix_jac = np.einsum("...j,jab->...ab", resp, comp_jacs)
        mean_score = np.sum(resp[..., None] * scores, axis=-2)
        second = np.einsum("...j,...ja,...jb->...ab", resp, scores, scores)
        second -= mean_score[..., :, None] * mean_score[..., None, :]
        jac = mix_jac + (v / a) * second
        return DenoiserOutput(value=value, jacobian=jac)

    def backward_sample(
        self, schedule: NoiseSchedule, s: int, t: int, x_t: np.ndarray, rng: np.random.Generator
    ) -> np.ndarray:
        """Exact draw from p_{s|t}: component by responsibility at time t,
        then the component's Gaussian backward conditional."""
        if not 0 <= s < t:
            raise ValueError(f"need 0 <= s < t, got s={s}, t={t}")
        x_t = np.asarray(x_t, dtype=np.float64)
        squeeze = x_t.ndim == 1
        x_batch = x_t[None] if squeeze else x_t
        resp = self.responsibilities(schedule, t, x_batch)
        u = rng.random(resp.shape[:-1] + (1,))
        comp = np.sum(u > np.cumsum(resp, axis=-1), axis=-1)

        out = np.empty_like(x_batch)
        eps = rng.standard_normal(x_batch.shape)
        for j in range(self.n_components):
            mask = comp == j
            if not np.any(mask):
                continue
            part = GaussianPrior(self.means[j], self.covs[j])
            gain, mean_const, var = part.backward_moments(schedule, s, t)
            mean = x_batch[mask] @ gain.T + mean_const
            out[mask] = mean + eps[mask] @ _psd_root(var).T
        return out[0] if squeeze else out

    def log_density(self, x: np.ndarray):
        parts = [
            np.log(self.weights[j]) + _mvn_logpdf(x, self.means[j], np.linalg.cholesky(self.covs[j]))
            for j in range(self.n_components)
        ]
        logs = np.stack(parts, axis=-1)
        peak = logs.max(axis=-1)
        out = peak + np.log(np.sum(np.exp(logs - peak[..., None]), axis=-1))
        return float(out) if np.ndim(out) == 0 else out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j in range(self.n_components):
            mask = comp == j
            k = int(mask.sum())
            if k == 0:
                continue
            chol = np.linalg.cholesky(self.covs[j])
            out[mask] = self.means[j] + rng.standard_normal((k, self.dim)) @ chol.T
        return out

    def moments(self):
        """Overall mixture mean and covariance."""
        from .moments import GaussianMoments

        mean = self.weights @ self.means
        second = np.einsum("j,jab->ab", self.weights, self.covs)
        second += np.einsum("j,ja,jb->ab", self.weights, self.means, self.means)
        return GaussianMoments(mean=mean, cov=second - np.outer(mean, mean))


def exact_posterior(prior, likelihood):
    """Exact Bayesian posterior for a linear-Gaussian observation model.

    Gaussian prior -> conjugate Gaussian posterior; GMM prior -> GMM
    posterior with conjugate components reweighted by their evidence.
    Rejects nonlinear likelihoods (no closed form exists).
    """
    from .likelihoods import LinearGaussianLikelihood

    if not isinstance(likelihood, LinearGaussianLikelihood):
        raise TypeError("exact_posterior requires a linear-Gaussian likelihood")
    a_mat, y, s2 = likelihood.A, likelihood.y, likelihood.sigma_y**2

    if isinstance(prior, GaussianPrior):
        mean, cov = _conjugate_update(prior.mean, prior.cov, a_mat, y, s2)
        return GaussianPrior(mean=mean, cov=cov)
    if isinstance(prior, GmmPrior):
        means, covs, logw = [], [], []
        for j in range(prior.n_components):
            mean, cov = _conjugate_update(prior.means[j], prior.covs[j], a_mat, y, s2)
            means.append(mean)
            covs.append(cov)
            ev_cov = s2 * np.eye(a_mat.shape[0]) + a_mat @ prior.covs[j] @ a_mat.T
            logw.append(
                np.log(prior.weights[j]) + _mvn_logpdf(y, a_mat @ prior.means[j], np.linalg.cholesky(ev_cov))
            )
        logw = np.asarray(logw)
        w = np.exp(logw - logw.max())
        w /= w.sum()
        return GmmPrior(weights=w, means=np.stack(means), covs=np.stack(covs))
    raise TypeError(f"unsupported prior type {type(prior).__name__}")


def _conjugate_update(mean, cov, a_mat, y, s2):
    prec_prior = spd_inverse(cov)
    prec = prec_prior + a_mat.T @ a_mat / s2
    post_cov = spd_inverse(prec)
    post_mean = post_cov @ (prec_prior @ mean + a_mat.T @ y / s2)
    return post_mean, post_cov


def prior_to_json(prior) -> dict:
    if isinstance(prior, GaussianPrior):
        return {
            "kind": "gaussian",
            "means": [prior.mean.tolist()],
            "covariances": [prior.cov.reshape(-1).tolist()],
        }
    if isinstance(prior, GmmPrior):
        return {
            "kind": "gmm",
            "weights": prior.weights.tolist(),
            "means": prior.means.tolist(),
            "covariances": [c.reshape(-1).tolist() for c in prior.covs],
        }
    raise TypeError(f"unsupported prior type {type(prior).__name__}")


def prior_from_json(obj: dict):
    kind = obj["kind"]
    means = np.asarray(obj["means"], dtype=np.float64)
    d = means.shape[1]
    covs = np.asarray([np.reshape(c, (d, d)) for c in obj["covariances"]])
    if kind == "gaussian":
        return GaussianPrior(mean=means[0], cov=covs[0])
    if kind == "gmm":
        return GmmPrior(weights=np.asarray(obj["weights"], dtype=np.float64), means=means, covs=covs)
    raise ValueError(f"unknown prior kind {kind!r}")


# -- shared linear algebra helpers -------------------------------------------


def _solve_cols(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(L L^T)^{-1} b for b of shape (..., d), via triangular solves."""
    d = chol.shape[0]
    flat = np.asarray(b, dtype=np.float64).reshape(-1, d)
    y = solve_triangular(chol, flat.T, lower=True)
    sol = solve_triangular(chol.T, y, lower=False).T
    return sol.reshape(np.shape(b))


def _solve_spd_mat(chol: np.ndarray, b_mat: np.ndarray) -> np.ndarray:
    """(L L^T)^{-1} B for a (d, k) matrix B, via triangular solves."""
    b_mat = np.asarray(b_mat, dtype=np.float64)
    y = solve_triangular(chol, b_mat, lower=True)
    return solve_triangular(chol.T, y, lower=False)


def _psd_root(cov: np.ndarray) -> np.ndarray:
    """Matrix square root of a PSD matrix, tolerant to tiny negative eigs."""
    cov = 0.5 * (cov + cov.T)
    w, q = np.linalg.eigh(cov)
    return q * np.sqrt(np.clip(w, 0.0, None))


def spd_inverse(mat: np.ndarray) -> np.ndarray:
    """Symmetrized inverse of an SPD matrix via its Cholesky factor."""
    mat = 0.5 * (mat + np.asarray(mat).T)
    out = _solve_spd_mat(np.linalg.cholesky(mat), np.eye(mat.shape[0]))
    return 0.5 * (out + out.T)
