"""Distributional discrepancy measures for the acceptance tests.

All measures are nonnegative, zero on identical inputs, and (for the
sliced variant) deterministic given the projection seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .moments import GaussianMoments

__all__ = [
    "SampleSet",
    "gaussian_kl",
    "wasserstein1_1d",
    "sliced_wasserstein2",
]


@dataclass(frozen=True)
class SampleSet:
    """An (N, d) sample matrix plus provenance for reproducibility."""

    samples: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        arr = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        object.__setattr__(self, "samples", arr)
        if arr.shape[0] < 1:
            raise ValueError("need at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def _as_samples(x) -> np.ndarray:
    if isinstance(x, SampleSet):
        return x.samples
    return SampleSet(samples=x).samples


def gaussian_kl(p: GaussianMoments, q: GaussianMoments) -> float:
    """Closed-form KL(N_p || N_q); rejects non-SPD covariances."""
    if p.dim != q.dim:
        raise ValueError("dimension mismatch")
    d = p.dim
    try:
        chol_q = np.linalg.cholesky(q.cov)
        chol_p = np.linalg.cholesky(p.cov)
    except np.linalg.LinAlgError as err:
        raise ValueError("gaussian_kl needs SPD covariances") from err
    solve = np.linalg.solve
    trace = float(np.trace(solve(chol_q.T, solve(chol_q, p.cov))))
    diff = q.mean - p.mean
    z = solve(chol_q, diff)
    quad = float(z @ z)
    logdet_q = 2.0 * float(np.sum(np.log(np.diagonal(chol_q))))
    logdet_p = 2.0 * float(np.sum(np.log(np.diagonal(chol_p))))
    return 0.5 * (trace + quad - d + logdet_q - logdet_p)


def wasserstein1_1d(a, b) -> float:
    """W1 between two equal-size 1-D samples: mean |sorted difference|."""
    xa, xb = _as_samples(a), _as_samples(b)
    if xa.shape[1] != 1 or xb.shape[1] != 1:
        raise ValueError("wasserstein1_1d needs d = 1")
    if xa.shape[0] != xb.shape[0]:
        raise ValueError("wasserstein1_1d needs equal sample counts")
    return float(np.mean(np.abs(np.sort(xa[:, 0]) - np.sort(xb[:, 0]))))


def _w2_sq_1d(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Squared 1-D W2 per row of two (m, N) sorted-sample blocks."""
    return np.mean((np.sort(u, axis=1) - np.sort(v, axis=1)) ** 2, axis=1)


def sliced_wasserstein2(a, b, n_projections: int = 512, rng: np.random.Generator | None = None) -> float:
    """Sliced W2, scaled by sqrt(d) so a pure translation by c scores ||c||.

    Projects both sets on ``n_projections`` random unit directions and
    root-means the squared 1-D W2 values.  Unequal sample counts are
    compared through interpolated quantiles.
    """
    xa, xb = _as_samples(a), _as_samples(b)
    if xa.shape[1] != xb.shape[1]:
        raise ValueError("dimension mismatch")
    d = xa.shape[1]
    if rng is None:
        rng = np.random.default_rng(0)
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = xa @ dirs.T  # (Na, m)
    pb = xb @ dirs.T
    if xa.shape[0] == xb.shape[0]:
        w2sq = _w2_sq_1d(pa.T, pb.T)
    else:
        grid = (np.arange(max(xa.shape[0], xb.shape[0])) + 0.5) / max(xa.shape[0], xb.shape[0])
        qa = np.quantile(pa, grid, axis=0).T
        qb = np.quantile(pb, grid, axis=0).T
        w2sq = np.mean((qa - qb) ** 2, axis=1)
    return float(np.sqrt(d * np.mean(w2sq)))
