import numpy as np
import pytest

from conftest import TARGET_TABLE, fixed_tabular_env, random_policy_table, random_tabular_env
from opebal import (
    BernoulliPolicy,
    ConstantActionPolicy,
    LinearGaussianEnv,
    TablePolicy,
    augmented_value,
    confidence_interval,
    exact_policy_value,
    exact_visitation_ratio,
    fqe_fit,
    pdis_value,
    q_sieve_fit,
    q_values,
    sieve_value,
    simulate,
    weighted_value,
)

Z_975 = 1.959963984540054


def population_system(env, table):
    """Indicator feature system under the exact transition law.

    Rows and columns are laid out as k = state * num_actions + action, so the
    design is the identity and the next-state block is P(s'|s,a) pi(a'|s').
    """
    S, A = env.num_states, env.num_actions
    B = np.eye(S * A)
    Phi = (env.transitions[:, :, :, None] * table[None, None, :, :]).reshape(S * A, S * A)
    return B, Phi, env.rewards.ravel()


def true_q_table(env, table, gamma):
    # state-value route: v = (I - gamma P_pi)^{-1} r_pi, then one backup
    P_pi = np.einsum("sa,saj->sj", table, env.transitions)
    r_pi = (table * env.rewards).sum(axis=1)
    v = np.linalg.solve(np.eye(env.num_states) - gamma * P_pi, r_pi)
    return env.rewards + gamma * env.transitions @ v


def tabular_moments(env, table, gamma):
    return ((1.0 - gamma) * env.reference[:, None] * table).ravel()


# ---------------------------------------------------------------------------
# weighted averages


def test_unit_weights_recover_mean_reward():
    rng = np.random.default_rng(0)
    r = rng.normal(size=50)
    assert weighted_value(np.ones(50), r) == pytest.approx(r.mean(), abs=1e-15)


def test_weighted_value_linear_in_rewards():
    rng = np.random.default_rng(1)
    w = rng.uniform(0.1, 2.0, size=30)
    r1, r2 = rng.normal(size=30), rng.normal(size=30)
    combo = weighted_value(w, 0.6 * r1 - 1.7 * r2)
    assert combo == pytest.approx(0.6 * weighted_value(w, r1) - 1.7 * weighted_value(w, r2),
                                  abs=1e-12)


def test_weighted_value_shape_mismatch():
    with pytest.raises(ValueError, match="align"):
        weighted_value(np.ones(4), np.ones(5))


def test_oracle_weights_are_unbiased():
    # exact visitation ratios make the weighted reward average unbiased for
    # the normalized policy value; check the replication mean to 3 SE
    env = fixed_tabular_env()
    target = TablePolicy(TARGET_TABLE)
    behavior = BernoulliPolicy(0.5)
    gamma, T = 0.9, 25
    truth = exact_policy_value(env, target, gamma)
    ratio = exact_visitation_ratio(env, target, behavior, gamma, T)
    estimates = []
    for rep in range(200):
        dataset = simulate(env, behavior, 20, T, seed=np.random.SeedSequence((551, rep)))
        idx = np.rint(dataset.states[:, 0]).astype(int)
        estimates.append(weighted_value(ratio[idx, dataset.actions], dataset.rewards))
    err = np.mean(estimates) - truth
    se = np.std(estimates, ddof=1) / np.sqrt(len(estimates))
    assert abs(err) < 3.0 * se


# ---------------------------------------------------------------------------
# linear-sieve Q fit


def test_population_fixed_point_matches_state_value_route():
    gamma = 0.9
    rng = np.random.default_rng(17)
    envs = [(fixed_tabular_env(), TARGET_TABLE)]
    envs += [(random_tabular_env(rng), random_policy_table(rng)) for _ in range(5)]
    for env, table in envs:
        B, Phi, r = population_system(env, table)
        beta = q_sieve_fit(B, Phi, r, gamma, ridge=0.0)
        Q = true_q_table(env, table, gamma)
        assert np.max(np.abs(beta.reshape(env.num_states, env.num_actions) - Q)) < 1e-8


def test_gamma_zero_reduces_to_least_squares():
    rng = np.random.default_rng(23)
    B = rng.normal(size=(60, 5))
    r = rng.normal(size=60)
    beta = q_sieve_fit(B, rng.normal(size=(60, 5)), r, gamma=0.0, ridge=0.0)
    ref, *_ = np.linalg.lstsq(B, r, rcond=None)
    assert np.max(np.abs(beta - ref)) < 1e-8


def test_constant_reward_gives_constant_q():
    env = fixed_tabular_env()
    gamma = 0.9
    B, Phi, _ = population_system(env, TARGET_TABLE)
    r = np.full(B.shape[0], 0.7)
    beta = q_sieve_fit(B, Phi, r, gamma, ridge=0.0)
    assert np.max(np.abs(beta - 0.7 / (1.0 - gamma))) < 1e-8
    value = sieve_value(tabular_moments(env, TARGET_TABLE, gamma), beta)
    assert value == pytest.approx(0.7, abs=1e-10)


def test_plug_in_value_matches_exact_policy_value():
    env = fixed_tabular_env()
    gamma = 0.9
    B, Phi, r = population_system(env, TARGET_TABLE)
    beta = q_sieve_fit(B, Phi, r, gamma, ridge=0.0)
    value = sieve_value(tabular_moments(env, TARGET_TABLE, gamma), beta)
    assert value == pytest.approx(exact_policy_value(env, TablePolicy(TARGET_TABLE), gamma),
                                  abs=1e-8)


def test_singular_system_escalates_to_solution():
    rng = np.random.default_rng(29)
    B = rng.normal(size=(40, 4))
    B[:, 3] = B[:, 1]
    r = rng.normal(size=40)
    beta = q_sieve_fit(B, np.zeros((40, 4)), r, gamma=0.0, ridge=0.0)
    assert np.isfinite(beta).all()
    ref, *_ = np.linalg.lstsq(B, r, rcond=None)
    # coefficients are non-unique; the fitted values are
    assert np.max(np.abs(B @ beta - B @ ref)) < 1e-5


def test_q_values_product():
    B = np.array([[1.0, 2.0], [0.0, 1.0]])
    assert np.array_equal(q_values(B, np.array([3.0, -1.0])), np.array([1.0, -1.0]))


def test_sieve_value_is_dot():
    assert sieve_value(np.array([0.2, 0.8]), np.array([5.0, -1.0])) == pytest.approx(0.2, abs=1e-15)
    assert sieve_value(np.array([0.2, 0.8]), np.zeros(2)) == 0.0


# ---------------------------------------------------------------------------
# confidence intervals


def test_interval_matches_hand_computation():
    w = np.array([1.0, 2.0, 0.5, 1.5])
    r = np.array([0.3, -0.1, 0.7, 0.2])
    B = np.array([[1.0, 0.0], [0.5, 1.0], [0.2, 0.3], [1.0, 1.0]])
    Phi = np.array([[0.4, 0.6], [1.0, 0.2], [0.0, 0.9], [0.3, 0.3]])
    beta = np.array([0.8, -0.4])
    gamma = 0.9
    sq = 0.0
    for i in range(4):
        q = B[i, 0] * beta[0] + B[i, 1] * beta[1]
        q_next = Phi[i, 0] * beta[0] + Phi[i, 1] * beta[1]
        sq += (w[i] * (r[i] + gamma * q_next - q)) ** 2
    sigma = np.sqrt(sq / 4.0)
    half = Z_975 * sigma / 2.0
    est = confidence_interval(0.25, w, r, B, Phi, beta, gamma)
    assert est.value == 0.25 and est.alpha == 0.05 and est.inflation == 1.0
    assert est.sigma == pytest.approx(sigma, abs=1e-12)
    assert est.lower == pytest.approx(0.25 - half, abs=1e-9)
    assert est.upper == pytest.approx(0.25 + half, abs=1e-9)


def test_inflation_scales_half_width():
    rng = np.random.default_rng(31)
    w = rng.uniform(0.5, 1.5, size=20)
    r = rng.normal(size=20)
    B = rng.normal(size=(20, 3))
    Phi = rng.normal(size=(20, 3))
    beta = rng.normal(size=3)
    base = confidence_interval(0.1, w, r, B, Phi, beta, 0.9)
    wide = confidence_interval(0.1, w, r, B, Phi, beta, 0.9, inflation=1.2)
    assert wide.sigma == base.sigma
    assert (wide.upper - wide.lower) == pytest.approx(1.2 * (base.upper - base.lower), abs=1e-12)


def test_zero_weights_collapse_interval():
    r = np.ones(6)
    B = np.ones((6, 2))
    est = confidence_interval(0.4, np.zeros(6), r, B, B, np.ones(2), 0.9)
    assert est.sigma == 0.0
    assert est.lower == est.upper == 0.4


def test_half_width_scales_with_sample_size():
    rng = np.random.default_rng(37)
    w = rng.uniform(0.5, 1.5, size=25)
    r = rng.normal(size=25)
    B = rng.normal(size=(25, 3))
    Phi = rng.normal(size=(25, 3))
    beta = rng.normal(size=3)
    small = confidence_interval(0.0, w, r, B, Phi, beta, 0.9)
    big = confidence_interval(0.0, np.tile(w, 4), np.tile(r, 4),
                              np.tile(B, (4, 1)), np.tile(Phi, (4, 1)), beta, 0.9)
    assert big.sigma == pytest.approx(small.sigma, abs=1e-12)
    assert (small.upper - small.lower) == pytest.approx(2.0 * (big.upper - big.lower), abs=1e-12)


# ---------------------------------------------------------------------------
# augmented estimator


def test_zero_weights_reduce_to_plug_in():
    rng = np.random.default_rng(41)
    B = rng.normal(size=(15, 3))
    Phi = rng.normal(size=(15, 3))
    beta = rng.normal(size=3)
    moments = rng.normal(size=3)
    aug = augmented_value(moments, beta, np.zeros(15), rng.normal(size=15), B, Phi, 0.9)
    assert aug == sieve_value(moments, beta)


def test_zero_beta_reduces_to_weighted_value():
    rng = np.random.default_rng(43)
    w = rng.uniform(0.1, 2.0, size=15)
    r = rng.normal(size=15)
    B = rng.normal(size=(15, 3))
    aug = augmented_value(np.ones(3), np.zeros(3), w, r, B, B, 0.9)
    assert aug == pytest.approx(weighted_value(w, r), abs=1e-15)


def test_exact_q_correction_vanishes():
    # the Bellman residual of the population fixed point is identically zero,
    # so augmentation leaves the plug-in untouched whatever the weights
    env = fixed_tabular_env()
    gamma = 0.9
    B, Phi, r = population_system(env, TARGET_TABLE)
    beta = q_sieve_fit(B, Phi, r, gamma, ridge=0.0)
    moments = tabular_moments(env, TARGET_TABLE, gamma)
    w = np.random.default_rng(47).uniform(0.0, 3.0, size=B.shape[0])
    aug = augmented_value(moments, beta, w, r, B, Phi, gamma)
    assert aug == pytest.approx(sieve_value(moments, beta), abs=1e-10)


# ---------------------------------------------------------------------------
# per-decision importance sampling


def test_matching_policies_give_discounted_return():
    env = LinearGaussianEnv()
    pol = BernoulliPolicy(0.5)
    dataset = simulate(env, pol, 30, 6, seed=11)
    gamma = 0.9
    rew = dataset.rewards.reshape(30, 6)
    expected = (1.0 - gamma) * np.mean(rew @ gamma ** np.arange(6))
    assert pdis_value(dataset, pol, pol, gamma) == pytest.approx(expected, abs=1e-12)


def test_loop_oracle_matches_vectorized():
    env = fixed_tabular_env()
    behavior = BernoulliPolicy(0.5)
    target = TablePolicy(TARGET_TABLE)
    n, T, gamma = 25, 4, 0.8
    dataset = simulate(env, behavior, n, T, seed=77)
    states = dataset.states.reshape(n, T, 1)
    actions = dataset.actions.reshape(n, T)
    rewards = dataset.rewards.reshape(n, T)
    expected = 0.0
    for i in range(n):
        ratio = 1.0
        for t in range(T):
            s = states[i, t][None, :]
            a = actions[i, t]
            ratio *= target.probs_batch(s)[0, a] / behavior.probs_batch(s)[0, a]
            expected += gamma ** t * ratio * rewards[i, t]
    expected *= (1.0 - gamma) / n
    assert pdis_value(dataset, behavior, target, gamma) == pytest.approx(expected, abs=1e-12)


def test_zero_probability_action_raises():
    env = fixed_tabular_env()
    dataset = simulate(env, BernoulliPolicy(0.5), 10, 5, seed=3)
    assert (dataset.actions == 1).any()
    with pytest.raises(ValueError, match="zero probability"):
        pdis_value(dataset, ConstantActionPolicy(0), TablePolicy(TARGET_TABLE), 0.9)


# ---------------------------------------------------------------------------
# fitted Q iteration


def test_gamma_zero_converges_immediately():
    rng = np.random.default_rng(5)
    B = rng.normal(size=(40, 4))
    Phi = rng.normal(size=(40, 4))
    r = rng.normal(size=40) + 1.0
    beta, iters, converged = fqe_fit(B, Phi, r, gamma=0.0, ridge=0.0)
    assert converged and iters <= 2
    ref, *_ = np.linalg.lstsq(B, r, rcond=None)
    assert np.max(np.abs(beta - ref)) < 1e-8


def test_iterates_contract_geometrically():
    env = fixed_tabular_env()
    B, Phi, r = population_system(env, TARGET_TABLE)
    gamma = 0.9
    betas = [fqe_fit(B, Phi, r, gamma, ridge=0.0, max_iter=k, tol=0.0)[0] for k in range(1, 7)]
    gaps = [float(np.max(np.abs(b - a))) for a, b in zip(betas, betas[1:])]
    assert gaps[0] > 0.0
    for g1, g2 in zip(gaps, gaps[1:]):
        assert g2 <= gamma * g1 + 1e-12


def test_fixed_point_matches_bellman_solve():
    env = fixed_tabular_env()
    B, Phi, r = population_system(env, TARGET_TABLE)
    gamma = 0.9
    direct = q_sieve_fit(B, Phi, r, gamma, ridge=0.0)
    beta, _, converged = fqe_fit(B, Phi, r, gamma, ridge=0.0, tol=1e-12)
    assert converged
    assert np.max(np.abs(beta - direct)) < 1e-6


def test_unconverged_flag():
    env = fixed_tabular_env()
    B, Phi, r = population_system(env, TARGET_TABLE)
    beta, iters, converged = fqe_fit(B, Phi, r, 0.9, ridge=0.0, max_iter=3, tol=1e-12)
    assert iters == 3 and not converged
    assert np.isfinite(beta).all()


# ---------------------------------------------------------------------------
# pipeline consistency


def test_value_error_shrinks_with_sample_size(tabular_consistency):
    med = {nT: float(np.median(tabular_consistency["value_errors"][nT]))
           for nT in tabular_consistency["sizes"]}
    assert med[500] > med[2000] > med[8000]
