"""Mixture-guided Gibbs posterior sampler and the DPS baseline.

One outer step at diffusion time t picks an auxiliary level s < t, then
alternates the three conditional updates of the extended target over
(x_0, x_s, x_t):

    x_s  <-  conditional ghat_s * bridge   (exact draw, VI fit, or VI+MH)
    x_t  <-  forward kernel q(. | x_s)                        (noising)
    x_0  <-  backward denoising from level s       (exact or few-step DDPM)

The driver carries a running time-0 state across outer steps, initializes
each step's x_t by bridging between that state and the previous x_t, and
returns the running state.  All state arrays may carry leading batch axes,
so many independent chains run vectorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import vi as vi_mod
from .schedule import NoiseSchedule
from .vi import ViConfig

__all__ = [
    "GibbsState",
    "IndexDistribution",
    "ViPhaseSchedule",
    "MgdmConfig",
    "make_timesteps",
    "sample_index",
    "ddpm_denoise",
    "gibbs_step",
    "mgdm_run",
    "mgdm_run_batch",
    "dps_run",
]

CONDITIONAL_BACKENDS = ("exact", "vi", "vi-mh")
DENOISE_BACKENDS = ("ddpm", "exact")


@dataclass(frozen=True)
class GibbsState:
    """Current (x_0, x_s, x_t) block at levels 1 <= s < t <= T.

    Arrays share a trailing dimension d and may carry leading batch axes.
    """

    x0: np.ndarray
    xs: np.ndarray
    xt: np.ndarray
    s: int
    t: int

    def __post_init__(self):
        if not 1 <= self.s < self.t:
            raise ValueError(f"need 1 <= s < t, got s={self.s}, t={self.t}")


@dataclass(frozen=True)
class IndexDistribution:
    """How the auxiliary level s is chosen at outer step i (of K, counting down).

    kinds:
      "uniform-mix":   Uniform{tau..t_prev} for the first (1 - late_fraction)
                       of the steps, deterministically t_prev for the last
                       late_fraction (the i <= floor(K * late_fraction) tail).
      "near-zero":     Uniform{1..floor(t_i / 5)}.
      "fixed-midpoint": s = max(2, t_prev // 2), deterministic.
      "explicit":      categorical with given weights over s = 1..len(weights),
                       restricted to s < t_i and renormalized.
      "fixed":         s = values[K - i], a recorded per-step sequence.
    """

    kind: str = "uniform-mix"
    tau: int = 10
    late_fraction: float = 0.25
    weights: tuple[float, ...] | None = None
    values: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("uniform-mix", "near-zero", "fixed-midpoint", "explicit", "fixed"):
            raise ValueError(f"unknown index distribution kind {self.kind!r}")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if self.kind == "explicit":
            if self.weights is None:
                raise ValueError("explicit kind needs weights")
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise ValueError("weights must be a simplex")
        if self.kind == "fixed" and self.values is None:
            raise ValueError("fixed kind needs values")


def sample_index(
    dist: IndexDistribution, i: int, t_i: int, t_prev: int, K: int, rng: np.random.Generator
) -> int:
    """Draw the auxiliary level s for outer step i (i runs K down to 2)."""
    if dist.kind == "uniform-mix":
        if t_prev < dist.tau:
            raise ValueError(f"uniform-mix needs t_prev >= tau, got t_prev={t_prev} < tau={dist.tau}")
        if i <= math.floor(K * dist.late_fraction):
            return t_prev
        return int(rng.integers(dist.tau, t_prev + 1))
    if dist.kind == "near-zero":
        hi = max(1, min(t_i - 1, t_i // 5))
        return int(rng.integers(1, hi + 1))
    if dist.kind == "fixed-midpoint":
        return max(2, t_prev // 2)
    if dist.kind == "explicit":
        w = np.asarray(dist.weights, dtype=np.float64)
        support = np.arange(1, min(len(w), t_i - 1) + 1)
        mass = w[: len(support)]
        total = mass.sum()
        if total <= 0.0:
            raise ValueError("explicit weights put no mass below t_i")
        return int(rng.choice(support, p=mass / total))
    if dist.kind == "fixed":
        return int(dist.values[K - i])
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class ViPhaseSchedule:
    """Per-phase learning rate and gradient-step budget over the outer loop.

    With i counting down from K: the earliest quarter (i >= floor(3K/4))
    uses the damped learning rate; the final quarter (i <= floor(K/4))
    uses the enlarged step budget.  Defaults follow the reference
    hyperparameters (eta 0.01 early / 0.03 later, G 20 late / 5 otherwise).
    """

    eta_early: float = 0.01
    eta: float = 0.03
    steps_late: int = 20
    steps: int = 5
    mc_samples_per_step: int = 1

    def resolve(self, i: int, K: int) -> ViConfig:
        lr = self.eta_early if i >= math.floor(3 * K / 4) else self.eta
        g = self.steps_late if i <= math.floor(K / 4) else self.steps
        return ViConfig(steps=g, learning_rate=lr, mc_samples_per_step=self.mc_samples_per_step)

    @staticmethod
    def constant(eta: float, steps: int, mc_samples_per_step: int = 1) -> "ViPhaseSchedule":
        return ViPhaseSchedule(
            eta_early=eta, eta=eta, steps_late=steps, steps=steps, mc_samples_per_step=mc_samples_per_step
        )


@dataclass(frozen=True)
class MgdmConfig:
    """Configuration of one sampler run.

    ``timesteps`` is the strictly increasing grid (t_1 .. t_K) with
    t_1 > 1 and t_K = T.  ``conditional`` picks the x_s backend
    ("exact" | "vi" | "vi-mh"); ``denoise`` picks the x_0 backend
    ("ddpm" | "exact").  The exact backends exist for the linear-Gaussian
    model only and make the run an exact Gibbs chain, which the
    Gaussian-case oracle reproduces in closed form.
    """

    timesteps: tuple[int, ...]
    R: int = 1
    M: int = 20
    vi: ViPhaseSchedule = field(default_factory=ViPhaseSchedule)
    index_dist: IndexDistribution = field(default_factory=IndexDistribution)
    conditional: str = "vi"
    denoise: str = "ddpm"
    mh_steps: int = 0
    final: str = "sample"
    final_s: int = 1

    def __post_init__(self):
        ts = tuple(int(t) for t in self.timesteps)
        object.__setattr__(self, "timesteps", ts)
        if len(ts) < 2:
            raise ValueError("need K >= 2 timesteps")
        if ts[0] <= 1:
            raise ValueError("t_1 must be > 1")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timesteps must be strictly increasing")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.M < 1:
            raise ValueError("M must be >= 1")
        if self.conditional not in CONDITIONAL_BACKENDS:
            raise ValueError(f"unknown conditional backend {self.conditional!r}")
        if self.denoise not in DENOISE_BACKENDS:
            raise ValueError(f"unknown denoise backend {self.denoise!r}")
        if self.conditional == "vi-mh" and self.mh_steps < 1:
            raise ValueError("vi-mh backend needs mh_steps >= 1")
        if self.final not in ("sample", "denoise"):
            raise ValueError(f"unknown final mode {self.final!r}")
        if self.final == "denoise" and not 1 <= self.final_s < ts[1]:
            raise ValueError("denoise final needs 1 <= final_s < t_2")

    @property
    def K(self) -> int:
        return len(self.timesteps)

    def validate_against(self, schedule: NoiseSchedule) -> None:
        if self.timesteps[-1] != schedule.T:
            raise ValueError(f"t_K={self.timesteps[-1]} must equal the schedule horizon T={schedule.T}")


def make_timesteps(K: int, T: int, t1: int | None = None) -> tuple[int, ...]:
    """Evenly spaced integer grid of K timesteps ending exactly at T."""
    if K < 2:
        raise ValueError("need K >= 2")
    if t1 is None:
        t1 = max(2, round(T / K))
    grid = np.unique(np.round(np.linspace(t1, T, K)).astype(int))
    if len(grid) != K:
        raise ValueError(f"cannot place {K} distinct timesteps between {t1} and {T}")
    return tuple(int(t) for t in grid)


def ddpm_denoise(
    prior, schedule: NoiseSchedule, x_s: np.ndarray, s: int, M: int, rng: np.random.Generator
) -> np.ndarray:
    """Few-step DDPM estimate of x_0 from x_s.

    Runs the bridge transitions with the plugged denoiser over M
    sub-steps 0 = s_0 < ... < s_M = s and returns the denoiser value at
    the lowest positive level (the degenerate s_0 = 0 bridge is skipped,
    matching the convention that the final sample is m_1(x_1)).
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if s < 1:
        raise ValueError("s must be >= 1")
    grid = np.unique(np.round(np.linspace(0, s, M + 1)).astype(int))
    x = np.asarray(x_s, dtype=np.float64)
    for j in range(len(grid) - 1, 1, -1):
        hi, lo = int(grid[j]), int(grid[j - 1])
        x0_hat = prior.denoise(schedule, hi, x).value
        x = schedule.bridge_sample(x0_hat, x, lo, hi, rng)
    return prior.denoise(schedule, int(grid[1]), x).value


def _draw_conditional(state: GibbsState, likelihood, prior, schedule, config, vi_config, rng):
    s, t = state.s, state.t
    if config.conditional == "exact":
        coef_x0, coef_xt, shift, lam = vi_mod.conditional_coefficients(likelihood, prior, schedule, s, t)
        mean = state.x0 @ coef_x0.T + state.xt @ coef_xt.T + shift
        root = np.linalg.cholesky(lam)
        return mean + rng.standard_normal(mean.shape) @ root.T
    params = vi_mod.fit_variational(likelihood, prior, schedule, s, t, state.x0, state.xt, vi_config, rng)
    draw = params.sample(rng)
    if config.conditional == "vi-mh":
        draw = vi_mod.mh_correct(
            likelihood, prior, schedule, s, t, state.x0, state.xt, draw, params, config.mh_steps, rng
        )
    return draw


def gibbs_step(
    state: GibbsState,
    likelihood,
    prior,
    schedule: NoiseSchedule,
    config: MgdmConfig,
    rng: np.random.Generator,
    vi_config: ViConfig | None = None,
) -> GibbsState:
    """One deterministic-scan sweep of the three conditionals.

    Leaves (s, t) unchanged.  ``vi_config`` overrides the phase schedule
    when the caller (the driver) has already resolved it.
    """
    if vi_config is None:
        vi_config = ViConfig(
            steps=config.vi.steps,
            learning_rate=config.vi.eta,
            mc_samples_per_step=config.vi.mc_samples_per_step,
        )
    xs = _draw_conditional(state, likelihood, prior, schedule, config, vi_config, rng)
    xt = schedule.forward_sample(xs, state.s, state.t, rng)
    if config.denoise == "exact":
        x0 = prior.backward_sample(schedule, 0, state.s, xs, rng)
    else:
        x0 = ddpm_denoise(prior, schedule, xs, state.s, config.M, rng)
    return replace(state, x0=x0, xs=xs, xt=xt)


def _mgdm_core(
    likelihood,
    prior,
    schedule: NoiseSchedule,
    config: MgdmConfig,
    rng: np.random.Generator,
    shape: tuple[int, ...],
    record_indices: list[int] | None = None,
):
    config.validate_against(schedule)
    ts = config.timesteps
    K = config.K

    x_tk = rng.standard_normal(shape)
    x0_star = prior.denoise(schedule, ts[-1], x_tk).value
    x_prev = x_tk  # the x_t state carried from the previous outer step

    for i in range(K, 1, -1):
        t_i = ts[i - 1]
        t_prev_grid = ts[i - 2]
        s = sample_index(config.index_dist, i, t_i, t_prev_grid, K, rng)
        if record_indices is not None:
            record_indices.append(s)
        x0 = x0_star
        if i == K:
            xt = x_tk
        else:
            xt = schedule.bridge_sample(x0_star, x_prev, t_i, ts[i], rng)
        state = GibbsState(x0=x0, xs=np.zeros(shape), xt=xt, s=s, t=t_i)
        vi_config = config.vi.resolve(i, K)
        for _ in range(config.R):
            state = gibbs_step(state, likelihood, prior, schedule, config, rng, vi_config=vi_config)
        x0_star = state.x0
        x_prev = state.xt

    if config.final == "denoise":
        # Denoiser-valued last step: draw x_s from the g0-reweighted
        # plugged bridge below t_2, then return m_s(x_s) deterministically.
        from .oracle import build_final_kernels

        fk = build_final_kernels(prior, likelihood, schedule, s=config.final_s, t=ts[1])
        mean = x_prev @ fk.H_under.T + fk.h_under
        x_s = mean + rng.standard_normal(shape) @ np.linalg.cholesky(fk.L_under).T
        return prior.denoise(schedule, config.final_s, x_s).value
    return x0_star


def mgdm_run(
    likelihood,
    prior,
    schedule: NoiseSchedule,
    config: MgdmConfig,
    rng: np.random.Generator,
    record_indices: list[int] | None = None,
) -> np.ndarray:
    """One posterior sample: the running time-0 state after the outer loop.

    Pass ``record_indices`` to capture the realized auxiliary levels (one
    per outer step), e.g. to replay them through the moment oracle.
    """
    return _mgdm_core(likelihood, prior, schedule, config, rng, (prior.dim,), record_indices)


def mgdm_run_batch(
    likelihood,
    prior,
    schedule: NoiseSchedule,
    config: MgdmConfig,
    n_chains: int,
    rng: np.random.Generator,
    record_indices: list[int] | None = None,
) -> np.ndarray:
    """n_chains independent runs, vectorized; the auxiliary level at each
    outer step is shared across chains (required for oracle replay)."""
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    return _mgdm_core(likelihood, prior, schedule, config, rng, (n_chains, prior.dim), record_indices)


def dps_run(
    likelihood,
    prior,
    schedule: NoiseSchedule,
    K: int,
    zeta: float,
    rng: np.random.Generator,
    n_chains: int | None = None,
) -> np.ndarray:
    """Guided DDPM baseline: backward bridge transitions with the exact
    denoiser plus zeta * grad log ghat_t added to each transition mean.

    zeta = 0 reduces to unconditional DDPM sampling from the prior.
    """
    from .likelihoods import log_g_hat

    if zeta < 0.0:
        raise ValueError("zeta must be >= 0")
    ts = make_timesteps(K, schedule.T)
    shape = (prior.dim,) if n_chains is None else (n_chains, prior.dim)
    x = rng.standard_normal(shape)
    for j in range(len(ts) - 1, 0, -1):
        t, s = ts[j], ts[j - 1]
        x0_hat = prior.denoise(schedule, t, x).value
        p = schedule.bridge_params(s, t)
        mean = p.mean_coeff_x0 * x0_hat + p.mean_coeff_xt * x
        if zeta > 0.0:
            mean += zeta * log_g_hat(likelihood, prior, schedule, t, x).gradient
        x = mean + math.sqrt(p.variance) * rng.standard_normal(shape)
    return prior.denoise(schedule, ts[0], x).value
