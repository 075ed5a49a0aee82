"""Off-policy evaluation of stationary policies in discounted MDPs using
balancing weights built on kernel-projected sieve features."""

from .data import Dataset, from_trajectories, import_dataset, export_dataset
from .envs import (LinearGaussianEnv, TabularEnv, Policy, BernoulliPolicy,
                   ConstantActionPolicy, QuadrantPolicy, SmoothExpPolicy, TablePolicy,
                   target_policy, simulate, monte_carlo_truth, default_horizon,
                   exact_policy_value, exact_visitation_ratio, CoverageError, igc_reward)
from .basis import (default_basis_size, KnotVector, quantile_knots, eval_bspline,
                    TensorSplineBasis, IndicatorBasis, build_basis, compute_features,
                    target_moments)
from .projection import (median_pairwise_distance, StateActionEncoder, gaussian_gram,
                         KRRModel, krr_fit_multi, krr_predict, cv_select_mu,
                         fit_projection, project_features, trajectory_folds,
                         DEFAULT_MU_GRID)
from .balancing import (RhoFamily, quadratic_rho, DualProblem, DualSolution,
                        UnboundedDualError, InfeasibleBalanceError, balance_residuals,
                        solve_dual, default_delta_grid, MinDeltaResult,
                        min_feasible_delta, naive_features, gram_min_eigenvalue)
from .estimators import (weighted_value, q_sieve_fit, q_values, sieve_value,
                         IntervalEstimate, confidence_interval, augmented_value,
                         pdis_value, fqe_fit)
from .harness import (PipelineOptions, PipelineResult, estimate_values,
                      ExperimentConfig, run_replication, compute_truth,
                      aggregate_metrics, write_metrics_csv, render_figures,
                      run_benchmark, BenchmarkResult, make_env, make_policy,
                      ALL_METHODS, METRIC_COLUMNS)

__version__ = "0.1.0"
