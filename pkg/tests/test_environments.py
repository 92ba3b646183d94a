import numpy as np
import pytest

from tabular_imitation.demonstrations import exact_demo
from tabular_imitation.environments import (
    A1,
    A2,
    BRAKE,
    ENV_SCHEMAS,
    EnumerationTooLarge,
    EnvBundle,
    StateAggregationClass,
    build_latching_env,
    build_recoverability_env,
    expert_in_class,
    feasible_policies,
    latching_cell_features,
    make_env,
    smooth_expert,
)
from tabular_imitation.learners import minimize_ipm_step, train_bc
from tabular_imitation.losses import FunctionClass
from tabular_imitation.mdp import Policy, exact_occupancy, on_policy_mismatch, validate_mdp


@pytest.mark.parametrize("name,params", [
    ("one_step", {}),
    ("one_step", {"alias": 0.07, "slip": 0.015}),
    ("k_step", {"k": 4}),
    ("unrecoverable", {"alias": 0.001, "slip": 0.0005}),
    ("latching", {}),
    ("latching", {"learner_class": "prev_only", "signal_noise": 0.0}),
])
def test_builders_are_well_formed(name, params):
    b = make_env(name, 7, **params)
    assert validate_mdp(b.mdp) == []
    assert b.expert.violations() == []
    assert b.learner_class.num_states == b.mdp.num_states
    assert b.label in ("easy", "goldilocks", "hard")


def test_schemas_cover_registry():
    assert set(ENV_SCHEMAS) == {"one_step", "k_step", "unrecoverable", "latching"}
    with pytest.raises(KeyError):
        make_env("nope", 5)
    with pytest.raises(ValueError):
        make_env("one_step", 5, bogus=1)


def test_k1_reproduces_one_step():
    a = build_recoverability_env("one_step", 6, slip=0.2)
    b = build_recoverability_env("k_step", 6, slip=0.2, k=1)
    assert np.array_equal(a.mdp.transition, b.mdp.transition)
    assert np.array_equal(a.mdp.cost, b.mdp.cost)
    assert np.array_equal(a.expert.action_dist, b.expert.action_dist)


def test_invalid_parameters():
    with pytest.raises(ValueError):
        build_recoverability_env("k_step", 5, k=0)
    with pytest.raises(ValueError):
        build_recoverability_env("one_step", 1)
    with pytest.raises(ValueError):
        build_recoverability_env("one_step", 5, slip=0.7)
    with pytest.raises(ValueError):
        build_latching_env(5, signal_noise=0.9)
    with pytest.raises(ValueError):
        build_latching_env(5, 0.1, learner_class="weird")


def test_k_step_recovery_takes_k_steps():
    k = 3
    b = build_recoverability_env("k_step", 12, slip=0.0, k=k)
    # Force one mistake at t=1, then follow the expert.
    from tabular_imitation.mdp import PolicySequence

    seq = PolicySequence((Policy.deterministic([A2] * (k + 1), 2),) + (b.expert,) * 11)
    rho = exact_occupancy(b.mdp, seq).per_step
    home = rho[:, 0]
    assert home[1:k + 1].max() == 0.0 and home[k + 1] == pytest.approx(1.0)


def test_unrecoverable_absorbs():
    b = build_recoverability_env("unrecoverable", 8, slip=0.0)
    rho = exact_occupancy(b.mdp, Policy.deterministic([A2, A2], 2)).per_step
    assert np.allclose(rho[1:, 1], 1.0)


def test_regime_labels():
    assert build_recoverability_env("one_step", 5).label == "easy"
    assert make_env("one_step", 5, alias=0.07, slip=0.015).label == "goldilocks"
    assert make_env("one_step", 5, learner_class="single_cell").label == "goldilocks"
    assert make_env("unrecoverable", 5, alias=0.001, slip=0.0005).label == "goldilocks"
    assert make_env("unrecoverable", 5, alias=0.001, slip=0.0).label == "hard"
    assert make_env("latching", 10).label == "goldilocks"


def test_class_helpers():
    cls = StateAggregationClass(np.array([0, 1, 1, 0]))
    assert cls.num_cells == 2 and cls.members(1).tolist() == [1, 2]
    assert cls.contains(cls.policy(np.array([[1.0, 0.0], [0.3, 0.7]])))
    assert not cls.contains(Policy.deterministic([0, 0, 1, 0], 2))
    assert StateAggregationClass.single_cell(4).coarsens(cls)
    assert not cls.coarsens(StateAggregationClass.single_cell(4))
    with pytest.raises(ValueError):
        StateAggregationClass(np.array([0, 2]))


def test_feasible_policy_enumeration():
    assert len(list(feasible_policies(StateAggregationClass.single_cell(3), 2))) == 2
    assert len(list(feasible_policies(StateAggregationClass.singleton(3), 2))) == 8
    with pytest.raises(EnumerationTooLarge):
        next(feasible_policies(StateAggregationClass.singleton(21), 2))


def test_smoothing():
    b = build_recoverability_env("one_step", 4)
    assert smooth_expert(b, 0.0) is b
    uni = smooth_expert(b, 1.0)
    assert np.allclose(uni.expert.action_dist, 0.5)
    half = smooth_expert(b, 0.2)
    assert np.allclose(half.expert.action_dist[0], [0.9, 0.1])
    with pytest.raises(ValueError):
        smooth_expert(b, 1.5)


def test_bundle_json_round_trip():
    b = make_env("k_step", 6, k=2, alias=0.07, slip=0.015)
    back = EnvBundle.from_json(b.to_json())
    assert np.array_equal(back.mdp.transition, b.mdp.transition)
    assert np.array_equal(back.learner_class.cell_of, b.learner_class.cell_of)
    assert back.label == b.label and back.params == b.params and back.name == "k_step"


def test_one_step_recoverable_in_one_step():
    """From any learner distribution with at least the expert's bad mass, one step restores rho*_{t+1}."""
    b = build_recoverability_env("one_step", 6, slip=0.1)
    S = b.mdp.num_states
    cls = StateAggregationClass.singleton(S)
    fc = FunctionClass.full(S)
    rho_star = exact_occupancy(b.mdp, b.expert).per_step
    for t in range(1, 6):
        for p_bad in (rho_star[t - 1, 1], 0.3, 1.0):
            _, val = minimize_ipm_step(b.mdp, np.array([1 - p_bad, p_bad]), rho_star[t], cls, fc, t)
            assert val <= 1e-9


class TestLatching:
    def test_features_and_classes(self):
        b = make_env("latching", 10)
        feats = latching_cell_features(b)
        assert sorted(feats) == [(0, 0), (0, 1), (1, 0), (1, 1)]
        po = make_env("latching", 10, learner_class="prev_only")
        assert [f[1] for f in latching_cell_features(po)] == [None, None]

    def test_expert_repeats_its_action(self):
        b = make_env("latching", 40, signal_noise=0.3)
        rho = exact_occupancy(b.mdp, b.expert).per_step
        S = b.mdp.num_states
        prev = (np.arange(S) // 2) % 2
        same = b.expert.actions == prev
        assert float(np.mean(rho[1:] @ same)) > 0.8

    def test_bc_copies_previous_action_without_signal(self):
        b = make_env("latching", 40, learner_class="prev_only", signal_noise=0.3)
        pol = train_bc(exact_demo(b), b.learner_class).policy
        feats = latching_cell_features(b)
        chosen = pol.action_dist[[int(b.learner_class.members(c)[0]) for c in range(2)]].argmax(axis=1)
        assert [int(a) for a in chosen] == [f[0] for f in feats]

    def test_bc_recovers_expert_with_full_state(self):
        b = make_env("latching", 20, learner_class="singleton", signal_noise=0.0)
        assert b.label == "easy" and expert_in_class(b)
        pol = train_bc(exact_demo(b), b.learner_class).policy
        assert on_policy_mismatch(b.mdp, pol, b.expert) == 0.0

    def test_red_phase_brakes(self):
        b = build_latching_env(4, 0.0, phase_len=2)
        assert b.expert.actions[0] == BRAKE and b.expert.actions[2 * 2 * 2] == A1
