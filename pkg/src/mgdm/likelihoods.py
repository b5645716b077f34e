"""Observation models and guidance potentials.

``log_g0`` is the data log-likelihood log g(y | x).  The guidance
potential at noise level s plugs the denoiser into it:

    log ghat_s(x_s) = log g(y | m_s(x_s)),

with analytic gradient Jac(m_s)^T grad log g evaluated at m_s(x_s).
For a Gaussian prior and linear observation the smoothed potential
g_t = E[g(y | X_0) | x_t] is also available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .priors import GaussianPrior
from .schedule import NoiseSchedule

__all__ = [
    "LinearGaussianLikelihood",
    "NonlinearLikelihood",
    "PotentialEval",
    "quadratic_toy",
    "log_g_hat",
    "exact_log_g_t",
    "linearized_potential",
    "likelihood_to_json",
    "likelihood_from_json",
]

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class PotentialEval:
    """Value and gradient of a log potential at the query point(s)."""

    log_value: np.ndarray | float
    gradient: np.ndarray


@dataclass(frozen=True)
class LinearGaussianLikelihood:
    """y = A x + noise with noise ~ N(0, sigma_y^2 I)."""

    A: np.ndarray
    y: np.ndarray
    sigma_y: float

    def __post_init__(self):
        a_mat = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        y = np.atleast_1d(np.asarray(self.y, dtype=np.float64))
        object.__setattr__(self, "A", a_mat)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "sigma_y", float(self.sigma_y))
        if self.sigma_y <= 0.0:
            raise ValueError("sigma_y must be positive")
        if np.any(np.isnan(a_mat)):
            raise ValueError("A contains NaN entries")
        if a_mat.shape[0] != y.shape[0]:
            raise ValueError(f"A has {a_mat.shape[0]} rows but y has {y.shape[0]} entries")

    @property
    def dim_obs(self) -> int:
        return self.y.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.A.T

    def log_g0(self, x: np.ndarray):
        """log N(y; A x, sigma_y^2 I); x of shape (..., d)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[-1]}, expected {self.dim}")
        resid = self.y - self.forward(x)
        out = -0.5 * (
            np.sum(resid**2, axis=-1) / self.sigma_y**2
            + self.dim_obs * (_LOG_2PI + 2.0 * np.log(self.sigma_y))
        )
        return float(out) if np.ndim(out) == 0 else out

    def grad_log_g0(self, x: np.ndarray) -> np.ndarray:
        resid = self.y - self.forward(x)
        return resid @ self.A / self.sigma_y**2

    def to_json(self) -> dict:
        return {"kind": "linear", "A": self.A.tolist(), "y": self.y.tolist(), "sigma_y": self.sigma_y}


@dataclass(frozen=True)
class NonlinearLikelihood:
    """y = F(x) + noise with a differentiable forward map.

    ``forward_map(x)`` maps (..., d) -> (..., d_y); ``vjp(x, u)`` returns
    Jac_F(x)^T u with u of shape (..., d_y).  ``A`` optionally records the
    linear part of a parameterized map for serialization.
    """

    forward_map: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]
    y: np.ndarray
    sigma_y: float
    tag: str = "nonlinear"
    A: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=np.float64)))
        object.__setattr__(self, "sigma_y", float(self.sigma_y))
        if self.sigma_y <= 0.0:
            raise ValueError("sigma_y must be positive")

    @property
    def dim_obs(self) -> int:
        return self.y.shape[0]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_map(np.asarray(x, dtype=np.float64))

    def log_g0(self, x: np.ndarray):
        resid = self.y - self.forward(x)
        out = -0.5 * (
            np.sum(resid**2, axis=-1) / self.sigma_y**2
            + self.dim_obs * (_LOG_2PI + 2.0 * np.log(self.sigma_y))
        )
        return float(out) if np.ndim(out) == 0 else out

    def grad_log_g0(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        resid = self.y - self.forward(x)
        return self.vjp(x, resid / self.sigma_y**2)


def quadratic_toy(A: np.ndarray, y: np.ndarray, sigma_y: float) -> NonlinearLikelihood:
    """Componentwise-quadratic forward map F(x) = (A x)^2.

    Smooth, cheap, and non-log-concave; a desk-scale stand-in for
    phase-retrieval-like observations.
    """
    a_mat = np.atleast_2d(np.asarray(A, dtype=np.float64))

    def fwd(x):
        return (x @ a_mat.T) ** 2

    def vjp(x, u):
        return (2.0 * (x @ a_mat.T) * u) @ a_mat

    return NonlinearLikelihood(forward_map=fwd, vjp=vjp, y=y, sigma_y=sigma_y, tag="quadratic", A=a_mat)


def likelihood_to_json(likelihood) -> dict:
    if isinstance(likelihood, LinearGaussianLikelihood):
        return likelihood.to_json()
    if isinstance(likelihood, NonlinearLikelihood) and likelihood.tag == "quadratic":
        return {
            "kind": "quadratic",
            "A": np.asarray(likelihood.A).tolist(),
            "y": likelihood.y.tolist(),
            "sigma_y": likelihood.sigma_y,
        }
    raise TypeError(f"cannot serialize likelihood {type(likelihood).__name__}")


def likelihood_from_json(obj: dict):
    kind = obj["kind"]
    if kind == "linear":
        return LinearGaussianLikelihood(A=np.asarray(obj["A"]), y=np.asarray(obj["y"]), sigma_y=obj["sigma_y"])
    if kind == "quadratic":
        return quadratic_toy(A=np.asarray(obj["A"]), y=np.asarray(obj["y"]), sigma_y=obj["sigma_y"])
    raise ValueError(f"unknown likelihood kind {kind!r}")


def log_g_hat(likelihood, prior, schedule: NoiseSchedule, s: int, x_s: np.ndarray) -> PotentialEval:
    """Evaluate log ghat_s(x_s) = log g0(m_s(x_s)) and its gradient.

    The gradient is Jac(m_s)^T grad log g0 at m_s(x_s); both factors are
    analytic through the prior's denoiser.  Rejects s = 0 (use log_g0).
    """
    if s == 0:
        raise ValueError("ghat_s needs s >= 1; evaluate log_g0 directly at s = 0")
    den = prior.denoise(schedule, s, x_s)
    log_value = likelihood.log_g0(den.value)
    grad_g0 = likelihood.grad_log_g0(den.value)
    gradient = np.einsum("...ab,...a->...b", den.jacobian, grad_g0)
    return PotentialEval(log_value=log_value, gradient=gradient)


def exact_log_g_t(likelihood, prior, schedule: NoiseSchedule, t: int, x_t: np.ndarray):
    """Closed-form smoothed potential log g_t(x_t) = log E[g0(X_0) | x_t].

    Only the linear-Gaussian likelihood + Gaussian prior pair admits this
    integral in closed form: N(y; A m_t(x_t), sigma_y^2 I + A Cov_{0|t} A^T).
    """
    if not isinstance(likelihood, LinearGaussianLikelihood):
        raise TypeError("exact_log_g_t requires a linear-Gaussian likelihood")
    if not isinstance(prior, GaussianPrior):
        raise TypeError("exact_log_g_t requires a Gaussian prior")
    den = prior.denoise(schedule, t, x_t)
    cov_0t = prior.posterior_x0_cov(schedule, t)
    obs_cov = likelihood.sigma_y**2 * np.eye(likelihood.dim_obs) + likelihood.A @ cov_0t @ likelihood.A.T
    chol = np.linalg.cholesky(obs_cov)
    resid = likelihood.y - den.value @ likelihood.A.T
    d_obs = likelihood.dim_obs
    flat = resid.reshape(-1, d_obs)
    z = np.linalg.solve(chol, flat.T).T.reshape(resid.shape)
    out = -0.5 * (
        np.sum(z**2, axis=-1) + d_obs * _LOG_2PI + 2.0 * np.sum(np.log(np.diagonal(chol)))
    )
    return float(out) if np.ndim(out) == 0 else out


def linearized_potential(likelihood, prior, schedule: NoiseSchedule, s: int):
    """(A_hat_s, a_s) with ghat_s(x) = N(y; A_hat_s x + a_s, sigma_y^2 I).

    Exact for a Gaussian prior with a linear-Gaussian likelihood, where
    the denoiser is affine: A_hat_s = A Jac(m_s), a_s = A bias(m_s).
    """
    if not isinstance(likelihood, LinearGaussianLikelihood):
        raise TypeError("linearized_potential requires a linear-Gaussian likelihood")
    if not isinstance(prior, GaussianPrior):
        raise TypeError("linearized_potential requires a Gaussian prior")
    jac, bias = prior.denoiser_affine(schedule, s)
    return likelihood.A @ jac, likelihood.A @ bias
