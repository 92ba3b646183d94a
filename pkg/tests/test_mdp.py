import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import (
    advantage_sup_by_enumeration,
    occupancy_by_enumeration,
    q_by_enumeration,
    random_mdp,
    random_policy,
    value_by_enumeration,
)
from tabular_imitation.environments import A1, A2, build_recoverability_env, make_env, smooth_expert
from tabular_imitation.mdp import (
    Policy,
    PolicySequence,
    TabularMDP,
    Trajectory,
    advantage_span,
    advantage_sup,
    density_ratio_sup,
    disagreement,
    empirical_state_frequencies,
    exact_occupancy,
    mismatch_value_tables,
    on_policy_mismatch,
    performance_difference,
    policy_from_dict,
    policy_value,
    policy_value_average_form,
    ratio_table,
    rollout,
    rollouts,
    trajectories_from_csv,
    trajectories_to_csv,
    validate_mdp,
    value_tables,
)


def always(action, S=2, A=2):
    return Policy.deterministic([action] * S, A)


def two_state(P01=(1.0, 0.0), cost=(0.0, 0.0)):
    P = np.zeros((2, 2, 2))
    P[:, :, 0] = 1.0
    P[0, 0] = P01
    return TabularMDP(P, np.array(cost), np.array([1.0, 0.0]), 3)


class TestValidation:
    def test_well_formed(self, recov1):
        assert validate_mdp(recov1.mdp) == []

    def test_row_deficit_named(self):
        m = two_state(P01=(0.5, 0.4))
        msgs = validate_mdp(m)
        assert len(msgs) == 1
        assert "s=0, a=0" in msgs[0] and "deficit 0.1" in msgs[0]

    def test_cost_out_of_range_named(self):
        m = two_state(cost=(0.0, 1.2))
        msgs = validate_mdp(m)
        assert len(msgs) == 1 and "state 1" in msgs[0]

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            TabularMDP(np.ones((2, 2)), np.zeros(2), np.array([1.0, 0.0]), 3)
        with pytest.raises(ValueError):
            TabularMDP(np.full((2, 1, 2), 0.5), np.zeros(2), np.array([1.0, 0.0]), 0)

    def test_arrays_are_read_only(self, recov1):
        with pytest.raises(ValueError):
            recov1.mdp.cost[0] = 5.0

    def test_json_round_trip(self, recov1):
        m = recov1.mdp
        back = TabularMDP.from_json(m.to_json())
        assert np.array_equal(back.transition, m.transition)
        assert back.horizon == 3 and set(m.to_dict()) == {
            "num_states", "num_actions", "transition", "cost", "initial_dist", "horizon"}


class TestOccupancy:
    def test_recov1_hand_values(self, recov1):
        rho = exact_occupancy(recov1.mdp, recov1.expert).per_step
        assert np.allclose(rho[0], [1.0, 0.0], atol=1e-12)
        assert np.allclose(rho[1], [0.9, 0.1], atol=1e-12)
        assert np.allclose(rho[2], [0.91, 0.09], atol=1e-12)

    def test_matches_trajectory_enumeration(self, recov1):
        for pol in (recov1.expert, always(A1), always(A2), Policy.uniform(2, 2)):
            assert np.allclose(exact_occupancy(recov1.mdp, pol).per_step,
                               occupancy_by_enumeration(recov1.mdp, pol), atol=1e-12)

    def test_policy_sequence(self, recov1):
        seq = PolicySequence((always(A2), recov1.expert, recov1.expert))
        rho = exact_occupancy(recov1.mdp, seq).per_step
        assert np.allclose(rho[1], [0.0, 1.0])
        assert np.allclose(rho[2], [1.0, 0.0])

    def test_dimension_mismatch(self, recov1):
        with pytest.raises(ValueError):
            exact_occupancy(recov1.mdp, Policy.uniform(3, 2))
        with pytest.raises(ValueError):
            exact_occupancy(recov1.mdp, PolicySequence((always(A1),) * 2))

    @pytest.mark.parametrize("name", ["one_step", "k_step", "unrecoverable", "latching"])
    def test_normalisation_every_env(self, name):
        b = make_env(name, 12)
        for pol in (b.expert, Policy.uniform(b.mdp.num_states, 2)):
            rho = exact_occupancy(b.mdp, pol).per_step
            assert np.allclose(rho.sum(axis=1), 1.0, atol=1e-10)


class TestRollouts:
    def test_deterministic_mdp_single_path(self):
        P = np.zeros((3, 1, 3))
        P[0, 0, 1] = P[1, 0, 2] = P[2, 0, 0] = 1.0
        m = TabularMDP(P, np.zeros(3), np.array([1.0, 0, 0]), 4)
        pol = Policy.deterministic([0, 0, 0], 1)
        for seed in (0, 1, 99):
            tr = rollout(m, pol, np.random.default_rng(seed))
            assert tr.states.tolist() == [0, 1, 2, 0]

    def test_same_seed_same_trajectory(self, recov1):
        a = rollout(recov1.mdp, recov1.expert, np.random.default_rng(7))
        b = rollout(recov1.mdp, recov1.expert, np.random.default_rng(7))
        assert a == b

    def test_recov1_slip_frequency(self, recov1):
        states, _ = rollouts(recov1.mdp, recov1.expert, 100_000, np.random.default_rng(0))
        freq = np.mean(states[:, 1] == 1)
        assert abs(freq - 0.1) <= 0.01

    @pytest.mark.parametrize("n", [1_000, 10_000, 100_000])
    def test_monte_carlo_l1(self, n):
        b = make_env("k_step", 6, k=3, slip=0.2)
        S = b.mdp.num_states
        states, _ = rollouts(b.mdp, b.expert, n, np.random.default_rng(n))
        emp = empirical_state_frequencies(states, S)
        exact = exact_occupancy(b.mdp, b.expert).per_step
        assert np.max(np.abs(emp - exact).sum(axis=1)) <= 5 * np.sqrt(S / n)

    def test_csv_round_trip(self, recov1):
        trajs = [rollout(recov1.mdp, recov1.expert, np.random.default_rng(i), seed_id=i) for i in range(3)]
        text = trajectories_to_csv(trajs)
        assert text.splitlines()[0] == "seed,t,s,a"
        back = sorted(trajectories_from_csv(text), key=lambda tr: tr.seed_id)
        assert back == trajs


class TestValue:
    def test_zero_and_unit_cost(self):
        rng = np.random.default_rng(1)
        m = random_mdp(rng, 4, 3, 6)
        pol = random_policy(rng, 4, 3)
        zero = TabularMDP(m.transition, np.zeros(4), m.initial_dist, 6)
        one = TabularMDP(m.transition, np.ones(4), m.initial_dist, 6)
        assert policy_value(zero, pol) == 0.0
        assert policy_value(one, pol) == pytest.approx(6.0, abs=1e-12)

    def test_recov1_expert(self, recov1):
        assert policy_value(recov1.mdp, recov1.expert) == pytest.approx(0.19, abs=1e-12)
        assert value_by_enumeration(recov1.mdp, recov1.expert) == pytest.approx(0.19, abs=1e-12)

    def test_two_formulas_agree(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            m = random_mdp(rng, 5, 3, 7)
            pol = random_policy(rng, 5, 3)
            assert abs(policy_value(m, pol) - policy_value_average_form(m, pol)) <= 1e-10

    def test_terminal_q_is_cost(self, recov1):
        q = value_tables(recov1.mdp, recov1.expert).q
        assert np.allclose(q[-1], recov1.mdp.cost[:, None])

    def test_expert_advantage_zero(self, recov1):
        adv = value_tables(recov1.mdp, recov1.expert).adv
        acts = recov1.expert.actions
        assert np.allclose(adv[:, np.arange(2), acts], 0.0)

    def test_q_matches_enumeration(self, recov1):
        q = value_tables(recov1.mdp, recov1.expert).q
        for t in range(3):
            for s in range(2):
                for a in range(2):
                    assert q[t, s, a] == pytest.approx(q_by_enumeration(recov1.mdp, recov1.expert, t, s, a), abs=1e-12)


class TestPerformanceDifference:
    def test_identical_policies(self, recov1):
        assert performance_difference(recov1.mdp, recov1.expert, recov1.expert) == (0.0, 0.0)

    def test_recov1_always_a1(self, recov1):
        lhs, rhs = performance_difference(recov1.mdp, always(A1), recov1.expert)
        assert abs(lhs - rhs) <= 1e-9 and lhs > 0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 8), st.integers(2, 4), st.integers(1, 10))
    def test_identity_random(self, seed, S, A, T):
        rng = np.random.default_rng(seed)
        m = random_mdp(rng, S, A, T, sparse=bool(seed % 2))
        learner = random_policy(rng, S, A)
        if seed % 3 == 0:
            learner = PolicySequence(tuple(random_policy(rng, S, A) for _ in range(T)))
        lhs, rhs = performance_difference(m, learner, random_policy(rng, S, A))
        assert abs(lhs - rhs) <= 1e-9


class TestMismatchAndRatios:
    def test_mismatch_identical_and_opposite(self, recov1):
        assert on_policy_mismatch(recov1.mdp, recov1.expert, recov1.expert) == 0.0
        flipped = Policy.deterministic(1 - recov1.expert.actions, 2)
        assert on_policy_mismatch(recov1.mdp, flipped, recov1.expert) == pytest.approx(1.0)

    def test_always_a1_mismatch_is_bad_state_mass(self, recov1):
        d = exact_occupancy(recov1.mdp, always(A1)).average
        assert on_policy_mismatch(recov1.mdp, always(A1), recov1.expert) == pytest.approx(d[1], abs=1e-12)

    def test_disagreement_tv(self):
        assert disagreement(np.array([0.3, 0.7]), np.array([1.0, 0.0])) == pytest.approx(0.7)
        assert disagreement(np.array([0.0, 1.0]), np.array([0.0, 1.0])) == 0.0

    def test_ratio_conventions(self):
        r = ratio_table(np.array([0.0, 0.2, 0.8]), np.array([0.0, 0.0, 0.4]))
        assert r[0] == 1.0 and np.isinf(r[1]) and r[2] == pytest.approx(2.0)

    def test_density_ratio_identical(self, recov1):
        assert density_ratio_sup(recov1.mdp, recov1.expert, recov1.expert) == 1.0

    def test_density_ratio_infinite_off_support(self):
        b = build_recoverability_env("unrecoverable", T=4, slip=0.0)
        assert np.isinf(density_ratio_sup(b.mdp, always(A2), b.expert))

    def test_density_ratio_smoothed_matches_division(self, recov1):
        sm = smooth_expert(recov1, 0.1)
        lo = exact_occupancy(sm.mdp, always(A1)).per_step
        eo = exact_occupancy(sm.mdp, sm.expert).per_step
        c = density_ratio_sup(sm.mdp, always(A1), sm.expert)
        assert np.isfinite(c)
        brute = max(lo[t, s] / eo[t, s] for t in range(3) for s in range(2) if eo[t, s] > 0)
        assert c == pytest.approx(brute, abs=1e-12)


class TestAdvantage:
    def test_zero_cost(self):
        rng = np.random.default_rng(3)
        m = random_mdp(rng, 4, 2, 5)
        m0 = TabularMDP(m.transition, np.zeros(4), m.initial_dist, 5)
        assert advantage_sup(m0, random_policy(rng, 4, 2)) == 0.0

    def test_recov1_matches_enumeration(self, recov1):
        assert advantage_sup(recov1.mdp, recov1.expert) == pytest.approx(
            advantage_sup_by_enumeration(recov1.mdp, recov1.expert), abs=1e-12)

    def test_span_equals_sup_for_deterministic_optimal_expert(self, recov1):
        assert advantage_span(recov1.mdp, recov1.expert) == pytest.approx(advantage_sup(recov1.mdp, recov1.expert))

    def test_mismatch_cost_advantage_at_most_one(self):
        for name in ("one_step", "k_step", "unrecoverable", "latching"):
            b = make_env(name, 8)
            adv = mismatch_value_tables(b.mdp, b.expert).adv
            assert adv.max() <= 1.0 + 1e-12

    def test_random_instances_match_enumeration(self):
        rng = np.random.default_rng(4)
        for _ in range(5):
            m = random_mdp(rng, 3, 2, 3)
            ex = random_policy(rng, 3, 2)
            assert advantage_sup(m, ex) == pytest.approx(advantage_sup_by_enumeration(m, ex), abs=1e-10)
            learner = random_policy(rng, 3, 2)
            lo, eo = occupancy_by_enumeration(m, learner), occupancy_by_enumeration(m, ex)
            brute = max(lo[t, s] / eo[t, s] for t in range(3) for s in range(3))
            assert density_ratio_sup(m, learner, ex) == pytest.approx(brute, rel=1e-10)


def test_policy_serialisation(recov1):
    seq = PolicySequence((always(A1), always(A2), recov1.expert))
    back = policy_from_dict(seq.to_dict())
    assert all(np.array_equal(a.action_dist, b.action_dist) for a, b in zip(seq.per_step, back.per_step))
    assert np.array_equal(policy_from_dict(recov1.expert.to_dict()).action_dist, recov1.expert.action_dist)


def test_policy_violations():
    assert Policy(np.array([[0.5, 0.6]])).violations()
    assert Policy(np.array([[1.2, -0.2]])).violations()
    assert Policy.uniform(3, 2).violations() == []


def test_trajectory_fields():
    tr = Trajectory(((1, 0, 1), (2, 1, 0)), seed_id=4)
    assert tr.states.tolist() == [0, 1] and tr.actions.tolist() == [1, 0]
