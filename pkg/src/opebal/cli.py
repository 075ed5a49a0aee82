"""Command-line front end.

Subcommands:
  truth      simulate the normalized value of a policy to high precision
  simulate   roll a logged dataset and write it as CSV
  estimate   run the estimation pipeline on a dataset CSV
  benchmark  replicate the pipeline from a JSON config, with checkpoint/resume
  diagnose   conditioning and balance diagnostics for a dataset, including the
             duplicate state-action probe contrasting raw and projected rows
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .data import import_dataset, export_dataset
from .envs import simulate, monte_carlo_truth
from .basis import default_basis_size, build_basis, compute_features, target_moments
from .projection import StateActionEncoder, median_pairwise_distance, cv_select_mu, krr_fit_multi, krr_predict
from .balancing import quadratic_rho, min_feasible_delta, naive_features, gram_min_eigenvalue
from .harness import (ExperimentConfig, PipelineOptions, estimate_values, make_env,
                      make_policy, run_benchmark)


def _write_json(payload, path):
    if path is None:
        json.dump(payload, sys.stdout, indent=1)
        sys.stdout.write("\n")
    else:
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def cmd_truth(args):
    env = make_env(args.env)
    policy = make_policy(args.policy)
    value, se = monte_carlo_truth(env, policy, args.gamma, n_paths=args.paths,
                                  horizon=args.horizon, seed=args.seed)
    _write_json({"env": args.env, "policy": args.policy, "gamma": args.gamma,
                 "paths": args.paths, "seed": args.seed, "value": value,
                 "standard_error": se}, args.out)


def cmd_simulate(args):
    env = make_env(args.env)
    behavior = make_policy(args.behavior)
    dataset = simulate(env, behavior, args.n, args.T, seed=args.seed)
    export_dataset(dataset, args.out)
    print(f"wrote {dataset.n} trajectories of length {dataset.T} to {args.out}")


def cmd_estimate(args):
    env = make_env(args.env)
    behavior = make_policy(args.behavior)
    target = make_policy(args.target)
    dataset = import_dataset(args.data, ragged=args.ragged)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    options = PipelineOptions()
    if args.num_basis:
        options.num_basis = args.num_basis
    result = estimate_values(dataset, env, behavior, target, args.gamma,
                             methods=methods, options=options,
                             moment_seed=args.seed, cv_seed=args.seed + 1)
    payload = {"target": args.target, "gamma": args.gamma, "n": dataset.n,
               "T": dataset.T, "methods": result.records}
    _write_json(payload, args.out)
    for method, rec in result.records.items():
        line = f"{method:9s} value={rec['value']:+.4f}"
        if rec.get("ci"):
            line += f"  ci=[{rec['ci'][0]:+.4f}, {rec['ci'][1]:+.4f}]"
        print(line, file=sys.stderr)


def cmd_benchmark(args):
    config = ExperimentConfig.from_json(args.config)
    if args.workers is not None:
        config.workers = args.workers
    if args.replications is not None:
        config.replications = args.replications
    result = run_benchmark(config, args.out, resume=not args.fresh,
                           progress=(lambda m: print(m, file=sys.stderr)) if args.verbose else None)
    print(f"truth {result.truth:+.5f} (se {result.truth_se:.5f}); "
          f"{len(result.records)} replications in {result.elapsed:.1f}s; "
          f"artifacts in {result.output_dir}")
    for row in result.table:
        print(f"  {row['method']:9s} mse_x1000={row['mse_x1000']:.3f}"
              + (f" ecp={row['ecp']:.2f}" if row.get("ecp") is not None else ""))


def cmd_diagnose(args):
    env = make_env(args.env)
    target = make_policy(args.target)
    dataset = import_dataset(args.data, ragged=args.ragged)
    K = args.num_basis or default_basis_size(dataset.n, dataset.T)
    basis = build_basis(dataset, K)
    B, Phi = compute_features(dataset, basis, target)
    moments = target_moments(basis, target, env.sample_reference, args.gamma, seed=args.seed)
    encoder = StateActionEncoder.fit(dataset, target.num_actions)
    X = encoder.encode(dataset.states, dataset.actions)
    sigma = median_pairwise_distance(X)
    mu, _ = cv_select_mu(dataset, basis, target, seed=args.seed + 1,
                         encoder=encoder, sigma=sigma)
    model = krr_fit_multi(X, Phi, mu, sigma)
    Ghat = krr_predict(model, X)
    Lhat = B - args.gamma * Ghat
    Ltilde = naive_features(dataset, basis, target, args.gamma)
    scan = min_feasible_delta(Lhat, moments, quadratic_rho())

    print(f"dataset: n={dataset.n} T={dataset.T} d={dataset.d}")
    print(f"basis size: {basis.K} (requested {K})")
    print(f"kernel bandwidth: {sigma:.4f}  action scale: {encoder.action_scale:.4f}")
    print(f"selected ridge mu: {mu:g}")
    print(f"gram floor, projected: {gram_min_eigenvalue(Lhat):.3e}")
    print(f"gram floor, raw:       {gram_min_eigenvalue(Ltilde):.3e}")
    print(f"selected delta: {scan.delta:.3e} (converged={scan.solution.converged}, "
          f"{scan.solution.iterations} iterations)")
    w = scan.solution.weights
    excess = float(np.max(np.maximum(np.abs(scan.solution.residuals) - scan.solution.delta, 0.0)))
    print(f"weights: mean={w.mean():+.6f} min={w.min():+.3f} max={w.max():+.3f}")
    print(f"max residual excess over delta: {excess:.2e}")

    # duplicate state-action probe: two transitions borrowed from the data but
    # forced to share one (s, a); raw rows react to the next state, projected
    # rows cannot.
    s = dataset.states[:1]
    a = dataset.actions[:1]
    nxt1, nxt2 = dataset.next_states[0:1], dataset.next_states[1:2]
    b_row = basis.evaluate_batch(s, a)
    raw1 = b_row - args.gamma * basis.expected_batch(nxt1, target.probs_batch(nxt1))
    raw2 = b_row - args.gamma * basis.expected_batch(nxt2, target.probs_batch(nxt2))
    proj_row = b_row - args.gamma * krr_predict(model, encoder.encode(s, a))
    raw_gap = float(np.max(np.abs(raw1 - raw2)))
    proj_gap = float(np.max(np.abs(proj_row - (b_row - args.gamma * krr_predict(model, encoder.encode(s, a))))))
    print("duplicate (s, a) probe with two different next states:")
    print(f"  raw row gap:       {raw_gap:.4f}  (reacts to the next state)")
    print(f"  projected row gap: {proj_gap:.4f}  (reads only (s, a), so always zero)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="opebal",
                                     description="Off-policy value estimation via balanced weights")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("truth", help="simulate a policy value to high precision")
    p.add_argument("--env", default="linear_gaussian")
    p.add_argument("--policy", required=True)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--paths", type=int, default=100000)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("simulate", help="write a logged dataset as CSV")
    p.add_argument("--env", default="linear_gaussian")
    p.add_argument("--behavior", default="uniform")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate a policy value from a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--env", default="linear_gaussian")
    p.add_argument("--behavior", default="uniform")
    p.add_argument("--target", required=True)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--methods", default="balanced")
    p.add_argument("--num-basis", type=int, default=None)
    p.add_argument("--ragged", choices=["error", "truncate"], default="error")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("benchmark", help="replicate the pipeline from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--replications", type=int, default=None)
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("diagnose", help="conditioning and balance diagnostics")
    p.add_argument("--data", required=True)
    p.add_argument("--env", default="linear_gaussian")
    p.add_argument("--target", required=True)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--num-basis", type=int, default=None)
    p.add_argument("--ragged", choices=["error", "truncate"], default="error")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_diagnose)

    args = parser.parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
