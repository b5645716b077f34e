"""Experiment harness: seeded runs, sweeps, and oracle comparisons.

Configs are JSON documents; every output embeds the config hash and the
master seed so a result file can be reproduced exactly from itself.
Per-run randomness comes from ``SeedSequence((master_seed, run_index))``
(or ``(master_seed, combo_index, run_index)`` inside sweeps), so runs are
independent streams and insensitive to execution order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .likelihoods import likelihood_from_json
from .metrics import SampleSet, sliced_wasserstein2, wasserstein1_1d
from .moments import GaussianMoments
from .oracle import OracleConfig, oracle_recursion
from .priors import GaussianPrior, GmmPrior, exact_posterior, prior_from_json
from .sampler import (
    IndexDistribution,
    MgdmConfig,
    ViPhaseSchedule,
    dps_run,
    make_timesteps,
    mgdm_run,
    mgdm_run_batch,
)
from .schedule import NoiseSchedule, make_schedule

__all__ = [
    "ExperimentConfig",
    "load_config",
    "config_hash",
    "build_problem",
    "build_mgdm_config",
    "run_experiment",
    "run_sweep",
    "run_oracle",
    "compare_to_oracle",
    "smoke_config",
]

log = logging.getLogger("mgdm")


# -- config plumbing ----------------------------------------------------------


def load_config(path: str | Path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _build_prior(spec: dict):
    if "covariances" in spec:
        return prior_from_json(spec)
    kind = spec["kind"]
    if kind == "gaussian":
        return GaussianPrior(mean=np.asarray(spec["mean"]), cov=np.asarray(spec["cov"]))
    if kind == "gmm":
        return GmmPrior(
            weights=np.asarray(spec["weights"]),
            means=np.asarray(spec["means"]),
            covs=np.asarray(spec["covs"]),
        )
    raise ValueError(f"unknown prior kind {kind!r}")


def _build_schedule(spec: dict) -> NoiseSchedule:
    if "alphas" in spec:
        return NoiseSchedule.from_json(spec)
    return make_schedule(spec.get("family", "linear"), int(spec["T"]), alpha_end=spec.get("alpha_end", 0.01))


def build_problem(config: dict):
    prior = _build_prior(config["prior"])
    likelihood = likelihood_from_json(config["likelihood"])
    schedule = _build_schedule(config["schedule"])
    return prior, likelihood, schedule


def _build_index_dist(spec: dict | None) -> IndexDistribution:
    if spec is None:
        return IndexDistribution()
    kw = dict(spec)
    if "weights" in kw and kw["weights"] is not None:
        kw["weights"] = tuple(kw["weights"])
    if "values" in kw and kw["values"] is not None:
        kw["values"] = tuple(kw["values"])
    return IndexDistribution(**kw)


_BACKENDS = {
    "exact": {"conditional": "exact", "denoise": "exact"},
    "vi": {"conditional": "vi", "denoise": "ddpm"},
    "vi-mh": {"conditional": "vi-mh", "denoise": "ddpm"},
}


def build_mgdm_config(sampler_spec: dict, schedule: NoiseSchedule, backend: str | None = None) -> MgdmConfig:
    spec = dict(sampler_spec)
    backend = backend or spec.get("backend", "vi")
    if backend not in _BACKENDS:
        raise ValueError(f"unknown backend {backend!r}; choose from {sorted(_BACKENDS)}")
    timesteps = spec.get("timesteps")
    if timesteps is None:
        timesteps = make_timesteps(int(spec.get("K", 100)), schedule.T)
    vi_spec = spec.get("vi", {})
    vi = ViPhaseSchedule(**vi_spec) if vi_spec else ViPhaseSchedule()
    return MgdmConfig(
        timesteps=tuple(timesteps),
        R=int(spec.get("R", 1)),
        M=int(spec.get("M", 20)),
        vi=vi,
        index_dist=_build_index_dist(spec.get("index")),
        mh_steps=int(spec.get("mh_steps", 0)),
        final=spec.get("final", "sample"),
        final_s=int(spec.get("final_s", 1)),
        **_BACKENDS[backend],
    )


def _run_seed(master_seed: int, *indices: int) -> int:
    return int(np.random.SeedSequence((master_seed, *indices)).generate_state(1)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated view of a JSON experiment config.

    Construction builds every referenced object once, so malformed
    sections fail fast with readable errors instead of mid-run.
    """

    raw: dict
    n_runs: int
    master_seed: int

    @classmethod
    def from_dict(cls, config: dict) -> "ExperimentConfig":
        if "master_seed" not in config:
            raise ValueError("config needs a 'master_seed'")
        sampler = config.get("sampler")
        if not isinstance(sampler, dict):
            raise ValueError("config needs a 'sampler' section")
        _, _, schedule = build_problem(config)
        if sampler.get("algorithm", "mgdm") == "mgdm":
            build_mgdm_config(sampler, schedule).validate_against(schedule)
        n_runs = int(config.get("n_runs", 1))
        if n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        return cls(raw=config, n_runs=n_runs, master_seed=int(config["master_seed"]))


# -- single runs ---------------------------------------------------------------


def _execute_run(config: dict, run_idx: int, combo_idx: int | None = None) -> dict:
    prior, likelihood, schedule = build_problem(config)
    sampler_spec = config["sampler"]
    indices = (combo_idx, run_idx) if combo_idx is not None else (run_idx,)
    seed = _run_seed(int(config["master_seed"]), *indices)
    rng = np.random.default_rng(seed)
    algorithm = sampler_spec.get("algorithm", "mgdm")
    if algorithm == "dps":
        sample = dps_run(
            likelihood, prior, schedule, K=int(sampler_spec.get("K", 100)),
            zeta=float(sampler_spec.get("zeta", 1.0)), rng=rng,
        )
        r_val, g_val, index_kind = 0, 0, "none"
    elif algorithm == "mgdm":
        mcfg = build_mgdm_config(sampler_spec, schedule)
        sample = mgdm_run(likelihood, prior, schedule, mcfg, rng)
        r_val, g_val, index_kind = mcfg.R, mcfg.vi.steps, mcfg.index_dist.kind
    else:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if not np.all(np.isfinite(sample)):
        raise RuntimeError(f"run {run_idx} produced non-finite values")
    row = {"run_id": run_idx, "seed": seed, "R": r_val, "G": g_val, "index_dist": index_kind}
    for j, v in enumerate(np.atleast_1d(sample)):
        row[f"x0_{j}"] = float(v)
    try:
        post = exact_posterior(prior, likelihood)
        row["log_post"] = float(post.log_density(np.atleast_1d(sample)))
    except TypeError:
        row["log_post"] = float("nan")
    return row


def _worker(payload):
    config, run_idx, combo_idx = payload
    return _execute_run(config, run_idx, combo_idx)


def _collect_runs(config: dict, n_runs: int, jobs: int, combo_idx: int | None = None) -> list[dict]:
    payloads = [(config, r, combo_idx) for r in range(n_runs)]
    if jobs <= 1:
        rows = [_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_worker, payloads))
    rows.sort(key=lambda r: r["run_id"])
    return rows


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def _aggregate(config: dict, rows: list[dict], seed_tag: int) -> dict:
    prior, likelihood, _ = build_problem(config)
    d = prior.dim
    samples = np.asarray([[row[f"x0_{j}"] for j in range(d)] for row in rows])
    agg: dict = {
        "n_runs": len(rows),
        "mean": samples.mean(axis=0).tolist(),
        "cov": np.atleast_2d(np.cov(samples.T, bias=False)).tolist() if len(rows) > 1 else None,
    }
    try:
        post = exact_posterior(prior, likelihood)
    except TypeError:
        return agg
    rng = np.random.default_rng(_run_seed(seed_tag, 999_983))
    ref = post.sample(max(len(rows), 1024), rng)
    post_moments = post.moments()
    post_mean, post_cov = post_moments.mean, post_moments.cov
    agg["posterior_mean"] = np.asarray(post_mean).tolist()
    agg["mean_error"] = float(np.linalg.norm(samples.mean(axis=0) - post_mean))
    if len(rows) > 1:
        emp_cov = np.atleast_2d(np.cov(samples.T, bias=False))
        agg["cov_error_fro"] = float(np.linalg.norm(emp_cov - post_cov))
    agg["sliced_w2"] = float(
        sliced_wasserstein2(SampleSet(samples), SampleSet(ref), rng=np.random.default_rng(_run_seed(seed_tag, 999_979)))
    )
    if d == 1:
        ref_eq = post.sample(len(rows), np.random.default_rng(_run_seed(seed_tag, 999_961)))
        agg["w1"] = float(wasserstein1_1d(SampleSet(samples), SampleSet(ref_eq)))
    return agg


def run_experiment(config: dict, out_dir: str | Path, jobs: int = 1) -> dict:
    """Execute ``n_runs`` seeded runs, write results.csv + summary.json."""
    checked = ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = _collect_runs(config, checked.n_runs, jobs)
    d = sum(1 for key in rows[0] if key.startswith("x0_"))
    columns = ["run_id", "seed", "R", "G", "index_dist"] + [f"x0_{j}" for j in range(d)] + ["log_post"]
    _write_csv(out / "results.csv", rows, columns)
    summary = {
        "config": config,
        "config_hash": config_hash(config),
        "master_seed": int(config["master_seed"]),
        "aggregate": _aggregate(config, rows, int(config["master_seed"])),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    log.info("wrote %s and summary.json (%d runs)", out / "results.csv", checked.n_runs)
    return summary


def run_sweep(config: dict, out_dir: str | Path, jobs: int = 1) -> dict:
    """Cross-product sweep over sampler axes (R / G / index kinds)."""
    ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sweep = config.get("sweep", {})
    if not sweep:
        raise ValueError("sweep config needs a 'sweep' section")
    r_values = sweep.get("R", [config["sampler"].get("R", 1)])
    g_values = sweep.get("G", [None])
    index_kinds = sweep.get("index", [None])
    combos = [(r, g, ix) for r in r_values for g in g_values for ix in index_kinds]

    agg_rows = []
    for combo_idx, (r_val, g_val, index_kind) in enumerate(combos):
        cfg = json.loads(json.dumps(config))
        cfg["sampler"]["R"] = int(r_val)
        if g_val is not None:
            vi = cfg["sampler"].setdefault("vi", {})
            vi["steps"] = int(g_val)
            vi["steps_late"] = int(g_val)
        if index_kind is not None:
            cfg["sampler"]["index"] = {"kind": index_kind}
        rows = _collect_runs(cfg, int(config.get("n_runs", 1)), jobs, combo_idx=combo_idx)
        agg = _aggregate(cfg, rows, int(config["master_seed"]) + combo_idx)
        agg_rows.append(
            {
                "combo_id": combo_idx,
                "R": int(r_val),
                "G": -1 if g_val is None else int(g_val),
                "index_dist": index_kind or config["sampler"].get("index", {}).get("kind", "uniform-mix"),
                "n_runs": agg["n_runs"],
                "mean_error": agg.get("mean_error", float("nan")),
                "sliced_w2": agg.get("sliced_w2", float("nan")),
            }
        )
    for prev, cur in zip(agg_rows, agg_rows[1:]):
        cur["sw2_nonincreasing"] = bool(cur["sliced_w2"] <= prev["sliced_w2"] + 1e-12)
    if agg_rows:
        agg_rows[0]["sw2_nonincreasing"] = ""
    columns = ["combo_id", "R", "G", "index_dist", "n_runs", "mean_error", "sliced_w2", "sw2_nonincreasing"]
    _write_csv(out / "sweep.csv", agg_rows, columns)
    summary = {
        "config": config,
        "config_hash": config_hash(config),
        "master_seed": int(config["master_seed"]),
        "rows": agg_rows,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


# -- oracle paths ---------------------------------------------------------------


def _fixed_index_sequence(config: dict, schedule: NoiseSchedule) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Resolve (timesteps, per-step index sequence) from the config.

    Random index kinds are realized once with the master seed and
    recorded, matching the rule that the oracle replays a concrete
    sequence rather than averaging over the index distribution.
    """
    mcfg = build_mgdm_config(config["sampler"], schedule)
    ts = mcfg.timesteps
    K = len(ts)
    dist = mcfg.index_dist
    if dist.kind == "fixed":
        seq = tuple(int(v) for v in dist.values)
        if len(seq) != K - 1:
            raise ValueError(f"fixed index sequence needs {K - 1} entries")
        return ts, seq
    from .sampler import sample_index

    rng = np.random.default_rng(_run_seed(int(config["master_seed"]), 424_243))
    seq = tuple(sample_index(dist, i, ts[i - 1], ts[i - 2], K, rng) for i in range(K, 1, -1))
    return ts, seq


def run_oracle(config: dict, out_dir: str | Path) -> dict:
    """Evaluate the moment recursion and write oracle.json."""
    ExperimentConfig.from_dict(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    prior, likelihood, schedule = build_problem(config)
    ts, seq = _fixed_index_sequence(config, schedule)
    ocfg = OracleConfig(
        timesteps=ts,
        index_sequence=seq,
        R=int(config["sampler"].get("R", 1)),
        final=config["sampler"].get("final", "sample"),
        final_s=int(config["sampler"].get("final_s", 1)),
    )
    moments = oracle_recursion(prior, likelihood, schedule, ocfg)
    report = {
        "mean": moments.mean.tolist(),
        "cov": moments.cov.tolist(),
        "index_sequence": list(seq),
        "timesteps": list(ts),
        "config_hash": config_hash(config),
        "master_seed": int(config["master_seed"]),
    }
    with open(out / "oracle.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def compare_to_oracle(config: dict, out_dir: str | Path, measure_vi_error: bool = False) -> dict:
    """Batched runs vs the moment oracle: per-coordinate z-scores, 3-sigma rule.

    Requires the exact backend (the oracle does not model the VI
    conditional); pass ``measure_vi_error`` to run the VI backend anyway
    and report its discrepancy without a pass/fail verdict.
    """
    backend = config["sampler"].get("backend", "vi")
    if backend != "exact" and not measure_vi_error:
        raise ValueError(
            "compare_to_oracle requires backend='exact'; use measure_vi_error=True to "
            "report the discrepancy of an approximate backend instead"
        )
    n_runs = int(config.get("n_runs", 0))
    if n_runs < 2:
        raise ValueError("compare_to_oracle needs n_runs >= 2 for z-scores")
    prior, likelihood, schedule = build_problem(config)
    ts, seq = _fixed_index_sequence(config, schedule)
    sampler_spec = dict(config["sampler"])
    sampler_spec["timesteps"] = list(ts)
    sampler_spec["index"] = {"kind": "fixed", "values": list(seq)}
    mcfg = build_mgdm_config(sampler_spec, schedule, backend=backend)

    rng = np.random.default_rng(_run_seed(int(config["master_seed"]), 77_377))
    samples = mgdm_run_batch(likelihood, prior, schedule, mcfg, n_runs, rng)
    ocfg = OracleConfig(
        timesteps=ts, index_sequence=seq, R=mcfg.R,
        final=mcfg.final, final_s=mcfg.final_s,
    )
    oracle = oracle_recursion(prior, likelihood, schedule, ocfg)

    emp_mean = samples.mean(axis=0)
    emp_cov = np.atleast_2d(np.cov(samples.T, bias=False))
    report: dict = {
        "config_hash": config_hash(config),
        "master_seed": int(config["master_seed"]),
        "n_runs": n_runs,
        "backend": backend,
        "index_sequence": list(seq),
        "timesteps": list(ts),
        "oracle_mean": oracle.mean.tolist(),
        "oracle_cov": oracle.cov.tolist(),
        "empirical_mean": emp_mean.tolist(),
        "empirical_cov": emp_cov.tolist(),
    }
    if measure_vi_error and backend != "exact":
        report["mean_rel_error"] = float(
            np.linalg.norm(emp_mean - oracle.mean) / max(np.linalg.norm(oracle.mean), 1e-300)
        )
        report["cov_rel_error_fro"] = float(
            np.linalg.norm(emp_cov - oracle.cov) / max(np.linalg.norm(oracle.cov), 1e-300)
        )
        report["passed"] = None
    else:
        se_mean = np.sqrt(np.diag(oracle.cov) / n_runs)
        z_mean = (emp_mean - oracle.mean) / se_mean
        boot_rng = np.random.default_rng(_run_seed(int(config["master_seed"]), 77_381))
        n_boot = 200
        boots = np.empty((n_boot,) + emp_cov.shape)
        for b in range(n_boot):
            idx = boot_rng.integers(0, n_runs, size=n_runs)
            boots[b] = np.cov(samples[idx].T, bias=False)
        se_cov = boots.std(axis=0, ddof=1)
        z_cov = (emp_cov - oracle.cov) / se_cov
        report["z_mean"] = z_mean.tolist()
        report["z_cov"] = z_cov.tolist()
        report["passed"] = bool(np.all(np.abs(z_mean) < 3.0) and np.all(np.abs(z_cov) < 3.0))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    return report


def smoke_config() -> dict:
    """Tiny 1-D end-to-end config used by the smoke subcommand and tests."""
    return {
        "prior": {"kind": "gaussian", "mean": [0.0], "cov": [[1.0]]},
        "likelihood": {"kind": "linear", "A": [[1.0]], "y": [1.0], "sigma_y": 0.5},
        "schedule": {"family": "linear", "T": 200},
        "sampler": {
            "algorithm": "mgdm",
            "K": 10,
            "R": 1,
            "M": 5,
            "backend": "vi",
            "index": {"kind": "uniform-mix", "tau": 5},
            "vi": {"eta_early": 0.1, "eta": 0.1, "steps_late": 10, "steps": 10},
        },
        "n_runs": 10,
        "master_seed": 7,
    }
