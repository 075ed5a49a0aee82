"""End-to-end estimation pipeline and the replicated benchmark harness.

`estimate_values` runs the full pipeline on one dataset: basis construction,
moment targets, ridge-level cross-validation, the kernel projection, the
tolerance scan with the dual solve, and every requested estimator with its
intervals. `run_benchmark` repeats that over seeded replications, checkpoints
each finished replication to a JSON-lines file so interrupted runs resume
where they stopped, and writes a metrics table (CSV), sorted per-replication
records (JSON), a manifest, and diagnostic figures.

Replication r of a run with base seed s draws all randomness from
SeedSequence((s, r)), so results do not depend on scheduling or worker count.
"""
from __future__ import annotations

import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import Dataset, import_dataset, export_dataset
from .envs import (LinearGaussianEnv, Policy, BernoulliPolicy, ConstantActionPolicy,
                   target_policy, simulate, monte_carlo_truth, default_horizon)
from .basis import default_basis_size, build_basis, compute_features, target_moments
from .projection import (StateActionEncoder, median_pairwise_distance, cv_select_mu,
                         krr_fit_multi, krr_predict)
from .balancing import (quadratic_rho, DualProblem, solve_dual, min_feasible_delta,
                        naive_features, gram_min_eigenvalue, balance_residuals,
                        InfeasibleBalanceError)
from . import estimators as est

ALL_METHODS = ("balanced", "naive", "q_sieve", "fqe", "pdis", "aug")
ENVS = {"linear_gaussian": LinearGaussianEnv}


def make_env(name: str):
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None


def make_policy(spec: str) -> Policy:
    """Parse a policy spec: pi1..pi4, uniform, bernoulli:<p>, always:<a>."""
    if spec in ("pi1", "pi2", "pi3", "pi4"):
        return target_policy(spec)
    if spec == "uniform":
        return BernoulliPolicy(0.5)
    if spec.startswith("bernoulli:"):
        return BernoulliPolicy(float(spec.split(":", 1)[1]))
    if spec.startswith("always:"):
        return ConstantActionPolicy(int(spec.split(":", 1)[1]))
    raise ValueError(f"cannot parse policy spec {spec!r}")


@dataclass
class PipelineOptions:
    """Tuning knobs of the estimation pipeline; defaults match the benchmark."""

    num_basis: int | None = None
    degree: int = 3
    mu_grid: list | None = None
    cv_folds: int = 5
    delta_grid: list | None = None
    moment_draws: int = 100000
    solver_tol: float = 1e-8
    solver_max_iter: int = 50000
    alpha: float = 0.05
    ci_inflation: float = 1.2
    fqe_iters: int = 500

    @classmethod
    def from_dict(cls, payload: dict | None) -> "PipelineOptions":
        payload = dict(payload or {})
        known = {f for f in cls.__dataclass_fields__}
        bad = set(payload) - known
        if bad:
            raise ValueError(f"unknown pipeline options {sorted(bad)}")
        return cls(**payload)


@dataclass
class PipelineResult:
    """Records (JSON-ready) plus in-memory artifacts for further analysis."""

    records: dict
    weights: np.ndarray | None = None
    naive_weights: np.ndarray | None = None
    basis: object = None
    beta: np.ndarray | None = None
    moments: np.ndarray | None = None


def _weight_stats(solution, gamma):
    w = solution.weights
    excess = float(np.max(np.maximum(np.abs(solution.residuals) - solution.delta, 0.0)))
    return {
        "iterations": int(solution.iterations),
        "converged": bool(solution.converged),
        "message": solution.message,
        "max_residual_excess": excess,
        "mean_weight": float(np.mean(w)),
        "min_weight": float(np.min(w)),
        "max_weight": float(np.max(w)),
    }


def estimate_values(dataset: Dataset, env, behavior: Policy | None, target: Policy,
                    gamma: float, methods=("balanced",), options: PipelineOptions | None = None,
                    moment_seed=0, cv_seed=1, basis=None) -> PipelineResult:
    """Run the pipeline on one dataset and return per-method records.

    `basis` overrides the data-driven spline basis (tabular runs pass the
    indicator basis). `behavior` is only needed by the pdis method.
    """
    options = options or PipelineOptions()
    methods = list(methods)
    unknown = set(methods) - set(ALL_METHODS)
    if unknown:
        raise ValueError(f"unknown methods {sorted(unknown)}")
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")

    result = PipelineResult(records={})
    need_basis = [m for m in methods if m != "pdis"]

    B = Phi = moments = beta = None
    if need_basis:
        if basis is None:
            K = options.num_basis or default_basis_size(dataset.n, dataset.T)
            basis = build_basis(dataset, K, options.degree)
        result.basis = basis
        B, Phi = compute_features(dataset, basis, target)
        moments = target_moments(basis, target, env.sample_reference, gamma,
                                 n_draws=options.moment_draws, seed=moment_seed)
        result.moments = moments
        beta = est.q_sieve_fit(B, Phi, dataset.rewards, gamma)
        result.beta = beta

    def intervals(value, weights):
        plain = est.confidence_interval(value, weights, dataset.rewards, B, Phi, beta,
                                        gamma, alpha=options.alpha, inflation=1.0)
        adj = est.confidence_interval(value, weights, dataset.rewards, B, Phi, beta,
                                      gamma, alpha=options.alpha, inflation=options.ci_inflation)
        return plain, adj

    balanced_weights = None
    if "balanced" in methods or "aug" in methods:
        encoder = StateActionEncoder.fit(dataset, target.num_actions)
        X = encoder.encode(dataset.states, dataset.actions)
        sigma = median_pairwise_distance(X)
        mu, _ = cv_select_mu(dataset, basis, target, mu_grid=options.mu_grid,
                             folds=options.cv_folds, seed=cv_seed, encoder=encoder, sigma=sigma)
        model = krr_fit_multi(X, Phi, mu, sigma)
        Lhat = B - gamma * krr_predict(model, X)
        scan = min_feasible_delta(Lhat, moments, quadratic_rho(), grid=options.delta_grid,
                                  tol=options.solver_tol, max_iter=options.solver_max_iter)
        balanced_weights = scan.solution.weights
        result.weights = balanced_weights
        value = est.weighted_value(balanced_weights, dataset.rewards)
        plain, adj = intervals(value, balanced_weights)
        diag = _weight_stats(scan.solution, gamma)
        diag.update({
            "delta": float(scan.delta),
            "mu": float(mu),
            "kernel_sigma": float(sigma),
            "action_scale": float(encoder.action_scale),
            "gram_floor": gram_min_eigenvalue(Lhat),
            "attempts": [[float(d), bool(ok)] for d, ok in scan.attempts],
        })
        if "balanced" in methods:
            result.records["balanced"] = {
                "value": value, "sigma": plain.sigma,
                "ci": [plain.lower, plain.upper],
                "ci_adjusted": [adj.lower, adj.upper],
                "diagnostics": diag,
            }

    if "naive" in methods:
        Ltilde = naive_features(dataset, basis, target, gamma)
        scan = min_feasible_delta(Ltilde, moments, quadratic_rho(), grid=options.delta_grid,
                                  tol=options.solver_tol, max_iter=options.solver_max_iter)
        w = scan.solution.weights
        result.naive_weights = w
        value = est.weighted_value(w, dataset.rewards)
        plain, adj = intervals(value, w)
        diag = _weight_stats(scan.solution, gamma)
        diag.update({
            "delta": float(scan.delta),
            "gram_floor": gram_min_eigenvalue(Ltilde),
            "attempts": [[float(d), bool(ok)] for d, ok in scan.attempts],
        })
        result.records["naive"] = {
            "value": value, "sigma": plain.sigma,
            "ci": [plain.lower, plain.upper],
            "ci_adjusted": [adj.lower, adj.upper],
            "diagnostics": diag,
        }

    if "q_sieve" in methods:
        result.records["q_sieve"] = {
            "value": est.sieve_value(moments, beta),
            "sigma": None, "ci": None, "ci_adjusted": None, "diagnostics": {},
        }

    if "fqe" in methods:
        fqe_beta, iters, ok = est.fqe_fit(B, Phi, dataset.rewards, gamma,
                                          max_iter=options.fqe_iters)
        result.records["fqe"] = {
            "value": est.sieve_value(moments, fqe_beta),
            "sigma": None, "ci": None, "ci_adjusted": None,
            "diagnostics": {"iterations": int(iters), "converged": bool(ok)},
        }

    if "pdis" in methods:
        if behavior is None:
            raise ValueError("pdis needs the behavior policy")
        result.records["pdis"] = {
            "value": est.pdis_value(dataset, behavior, target, gamma),
            "sigma": None, "ci": None, "ci_adjusted": None, "diagnostics": {},
        }

    if "aug" in methods:
        result.records["aug"] = {
            "value": est.augmented_value(moments, beta, balanced_weights,
                                         dataset.rewards, B, Phi, gamma),
            "sigma": None, "ci": None, "ci_adjusted": None, "diagnostics": {},
        }

    return result


# ---------------------------------------------------------------------------
# replicated benchmark


@dataclass
class ExperimentConfig:
    env: str = "linear_gaussian"
    behavior: str = "uniform"
    target: str = "pi4"
    n: int = 40
    T: int = 50
    gamma: float = 0.9
    replications: int = 100
    base_seed: int = 20240817
    methods: tuple = ("balanced", "naive", "q_sieve", "fqe", "pdis", "aug")
    truth_paths: int = 100000
    truth_seed: int = 12345
    workers: int = 1
    options: PipelineOptions = field(default_factory=PipelineOptions)

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        payload = dict(payload)
        opts = PipelineOptions.from_dict(payload.pop("options", None))
        known = {f for f in cls.__dataclass_fields__}
        bad = set(payload) - known
        if bad:
            raise ValueError(f"unknown config keys {sorted(bad)}")
        cfg = cls(**payload, options=opts)
        cfg.methods = tuple(cfg.methods)
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["methods"] = list(self.methods)
        return out


def run_replication(config: ExperimentConfig, rep: int) -> dict:
    """One fully seeded replication; independent of every other one."""
    ss = np.random.SeedSequence((config.base_seed, rep))
    data_seed, moment_seed, cv_seed = ss.spawn(3)
    env = make_env(config.env)
    behavior = make_policy(config.behavior)
    target = make_policy(config.target)
    dataset = simulate(env, behavior, config.n, config.T, seed=data_seed)
    result = estimate_values(dataset, env, behavior, target, config.gamma,
                             methods=config.methods, options=config.options,
                             moment_seed=moment_seed, cv_seed=cv_seed)
    return {"rep": rep, "methods": result.records}


def _replication_worker(payload):
    config_dict, rep = payload
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(1)
    except Exception:
        pass
    return run_replication(ExperimentConfig.from_dict(config_dict), rep)


def compute_truth(config: ExperimentConfig, cache_path=None):
    """Simulated truth for the configured target, cached to JSON when a path
    is given and reused when the cache key matches."""
    key = {
        "env": config.env, "target": config.target, "gamma": config.gamma,
        "paths": config.truth_paths, "horizon": default_horizon(config.gamma),
        "seed": config.truth_seed,
    }
    if cache_path is not None and os.path.exists(cache_path):
        with open(cache_path) as fh:
            cached = json.load(fh)
        if cached.get("key") == key:
            return cached["value"], cached["se"]
    value, se = monte_carlo_truth(make_env(config.env), make_policy(config.target),
                                  config.gamma, n_paths=config.truth_paths,
                                  seed=config.truth_seed)
    if cache_path is not None:
        with open(cache_path, "w") as fh:
            json.dump({"key": key, "value": value, "se": se}, fh, indent=1)
    return value, se


def aggregate_metrics(records: list, truth: float, methods) -> list[dict]:
    """Per-method error and interval summaries across replications.

    Squared errors are reported times 1000 and interval lengths times 100,
    matching the usual presentation at this problem scale. Methods without
    intervals leave those cells empty.
    """
    rows = []
    by_rep = sorted(records, key=lambda r: r["rep"])
    for method in methods:
        entries = [r["methods"][method] for r in by_rep if method in r["methods"]]
        if not entries:
            continue
        values = np.array([e["value"] for e in entries])
        sq = (values - truth) ** 2
        row = {
            "method": method,
            "reps": len(entries),
            "mse_x1000": 1000.0 * float(sq.mean()),
            "mse_se_x1000": 1000.0 * float(sq.std(ddof=1) / math.sqrt(len(sq))) if len(sq) > 1 else None,
            "mese_x1000": 1000.0 * float(np.median(sq)),
        }
        for label, cikey in (("", "ci"), ("adjusted_", "ci_adjusted")):
            cis = [e[cikey] for e in entries if e.get(cikey) is not None]
            if cis:
                lo = np.array([c[0] for c in cis])
                hi = np.array([c[1] for c in cis])
                lengths = hi - lo
                row[f"{label}ecp"] = float(np.mean((lo <= truth) & (truth <= hi)))
                row[f"{label}al_x100"] = 100.0 * float(lengths.mean())
                row[f"{label}al_se_x100"] = (100.0 * float(lengths.std(ddof=1) / math.sqrt(len(lengths)))
                                             if len(lengths) > 1 else None)
            else:
                row[f"{label}ecp"] = None
                row[f"{label}al_x100"] = None
                row[f"{label}al_se_x100"] = None
        rows.append(row)
    return rows


METRIC_COLUMNS = ["method", "reps", "mse_x1000", "mse_se_x1000", "mese_x1000",
                  "ecp", "al_x100", "al_se_x100",
                  "adjusted_ecp", "adjusted_al_x100", "adjusted_al_se_x100"]


def write_metrics_csv(rows: list[dict], path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            out = []
            for col in METRIC_COLUMNS:
                v = row.get(col)
                if v is None:
                    out.append("")
                elif isinstance(v, float):
                    out.append(repr(v))
                else:
                    out.append(v)
            writer.writerow(out)


def render_figures(records: list, truth: float, methods, outdir) -> list[str]:
    """Write diagnostic figures next to the metrics table.

    squared_errors.png: per-method spread of squared errors (log scale).
    ci_coverage.png: per-replication intervals of the first interval-carrying
    method against the simulated truth.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_rep = sorted(records, key=lambda r: r["rep"])
    written = []

    data, labels = [], []
    for method in methods:
        vals = [r["methods"][method]["value"] for r in by_rep if method in r["methods"]]
        if vals:
            sq = (np.array(vals) - truth) ** 2
            data.append(np.maximum(sq, 1e-12))
            labels.append(method)
    if data:
        fig, ax = plt.subplots(figsize=(1.5 + 1.1 * len(data), 4.0))
        ax.boxplot(data, tick_labels=labels, whis=(5, 95))
        ax.set_yscale("log")
        ax.set_ylabel("squared error")
        ax.set_title("squared error by estimator")
        ax.grid(True, axis="y", alpha=0.3)
        fig.tight_layout()
        path = os.path.join(outdir, "squared_errors.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)

    ci_method = next((m for m in methods
                      if any(m in r["methods"] and r["methods"][m].get("ci") for r in by_rep)), None)
    if ci_method is not None:
        entries = [(r["rep"], r["methods"][ci_method]) for r in by_rep if ci_method in r["methods"]]
        entries = entries[:50]
        reps = [e[0] for e in entries]
        vals = np.array([e[1]["value"] for e in entries])
        los = np.array([e[1]["ci"][0] for e in entries])
        his = np.array([e[1]["ci"][1] for e in entries])
        covered = (los <= truth) & (truth <= his)
        fig, ax = plt.subplots(figsize=(8.0, 4.0))
        colors = np.where(covered, "tab:blue", "tab:red")
        for x, v, lo, hi, c in zip(range(len(reps)), vals, los, his, colors):
            ax.plot([x, x], [lo, hi], color=c, lw=1.5)
            ax.plot(x, v, "o", color=c, ms=3)
        ax.axhline(truth, color="k", lw=1, ls="--", label="simulated truth")
        ax.set_xlabel("replication")
        ax.set_ylabel("value")
        ax.set_title(f"{ci_method}: 95% intervals, first {len(reps)} replications")
        ax.legend(loc="best")
        fig.tight_layout()
        path = os.path.join(outdir, "ci_coverage.png")
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


@dataclass
class BenchmarkResult:
    truth: float
    truth_se: float
    records: list
    table: list
    output_dir: str
    elapsed: float


def run_benchmark(config: ExperimentConfig, output_dir, resume: bool = True,
                  progress=None) -> BenchmarkResult:
    """Run all replications with checkpointing and write every artifact.

    Artifacts in `output_dir`: config.json, truth.json, checkpoint.jsonl
    (append-only, one line per finished replication), records.json (sorted),
    table.csv, manifest.json, and the figures. Rerunning after an
    interruption skips finished replications; the final outputs are identical
    to an uninterrupted run.
    """
    t0 = time.time()
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, "config.json"), "w") as fh:
        json.dump(config.to_dict(), fh, indent=1)

    truth, truth_se = compute_truth(config, os.path.join(output_dir, "truth.json"))

    checkpoint = os.path.join(output_dir, "checkpoint.jsonl")
    records = []
    if resume and os.path.exists(checkpoint):
        with open(checkpoint) as fh:
            for line in fh:
                if line.strip():
                    records.append(json.loads(line))
    elif os.path.exists(checkpoint):
        os.remove(checkpoint)
    done = {r["rep"] for r in records}
    todo = [r for r in range(config.replications) if r not in done]

    def note(msg):
        if progress:
            progress(msg)

    with open(checkpoint, "a") as ck:
        if config.workers <= 1:
            for rep in todo:
                rec = run_replication(config, rep)
                ck.write(json.dumps(rec) + "\n")
                ck.flush()
                records.append(rec)
                note(f"replication {rep} done ({len(records)}/{config.replications})")
        else:
            payloads = [(config.to_dict(), rep) for rep in todo]
            with ProcessPoolExecutor(max_workers=config.workers) as pool:
                futures = [pool.submit(_replication_worker, p) for p in payloads]
                for fut in as_completed(futures):
                    rec = fut.result()
                    ck.write(json.dumps(rec) + "\n")
                    ck.flush()
                    records.append(rec)
                    note(f"replication {rec['rep']} done ({len(records)}/{config.replications})")

    records.sort(key=lambda r: r["rep"])
    with open(os.path.join(output_dir, "records.json"), "w") as fh:
        json.dump(records, fh)
    table = aggregate_metrics(records, truth, config.methods)
    write_metrics_csv(table, os.path.join(output_dir, "table.csv"))
    figures = render_figures(records, truth, config.methods, output_dir)
    elapsed = time.time() - t0
    manifest = {
        "config": config.to_dict(),
        "truth": truth,
        "truth_se": truth_se,
        "replications_done": len(records),
        "elapsed_seconds": elapsed,
        "figures": [os.path.basename(f) for f in figures],
        "versions": {
            "python": sys.version.split()[0],
            "numpy": np.__version__,
        },
    }
    with open(os.path.join(output_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return BenchmarkResult(truth=truth, truth_se=truth_se, records=records,
                           table=table, output_dir=str(output_dir), elapsed=elapsed)
