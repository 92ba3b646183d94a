"""Episodic finite-horizon tabular MDPs.

Exact occupancy recursion, seeded rollouts, policy evaluation by backward
induction, and the constants that enter imitation-learning regret bounds
(density ratio, advantage bound, on-policy mismatch).

Timesteps are 1..T in the public vocabulary; arrays are indexed 0..T-1.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np

ROW_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite-horizon MDP with state-only costs in [0, 1]."""

    transition: np.ndarray  # (S, A, S)
    cost: np.ndarray  # (S,)
    initial_dist: np.ndarray  # (S,)
    horizon: int

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        c = np.asarray(self.cost, dtype=float)
        rho0 = np.asarray(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S = P.shape[0]
        if c.shape != (S,) or rho0.shape != (S,):
            raise ValueError("cost and initial_dist must be vectors over S")
        if int(self.horizon) < 1:
            raise ValueError("horizon must be a positive integer")
        for name, arr in (("transition", P), ("cost", c), ("initial_dist", rho0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "horizon", int(self.horizon))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    def with_horizon(self, horizon: int) -> "TabularMDP":
        return TabularMDP(self.transition, self.cost, self.initial_dist, horizon)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "transition": self.transition.tolist(),
            "cost": self.cost.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "horizon": self.horizon,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMDP":
        m = cls(
            transition=np.array(doc["transition"], dtype=float),
            cost=np.array(doc["cost"], dtype=float),
            initial_dist=np.array(doc["initial_dist"], dtype=float),
            horizon=int(doc["horizon"]),
        )
        if (m.num_states, m.num_actions) != (doc["num_states"], doc["num_actions"]):
            raise ValueError("num_states/num_actions disagree with transition shape")
        return m

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class Policy:
    """Stationary stochastic policy, one action distribution per state."""

    action_dist: np.ndarray  # (S, A)
    class_tag: Optional[object] = None  # StateAggregationClass it was trained in

    def __post_init__(self):
        pi = np.array(self.action_dist, dtype=float)
        if pi.ndim != 2:
            raise ValueError("action_dist must be a matrix (S, A)")
        pi.setflags(write=False)
        object.__setattr__(self, "action_dist", pi)

    @classmethod
    def deterministic(cls, actions: Sequence[int], num_actions: int, class_tag=None) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        pi = np.zeros((len(actions), num_actions))
        pi[np.arange(len(actions)), actions] = 1.0
        return cls(pi, class_tag)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int, class_tag=None) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions), class_tag)

    @property
    def num_states(self) -> int:
        return self.action_dist.shape[0]

    @property
    def num_actions(self) -> int:
        return self.action_dist.shape[1]

    @property
    def is_deterministic(self) -> bool:
        return bool(np.all((self.action_dist == 0.0) | (self.action_dist == 1.0)))

    @property
    def actions(self) -> np.ndarray:
        """Greedy action per state (lowest index on ties)."""
        return np.argmax(self.action_dist, axis=1)

    def violations(self) -> list[str]:
        out = []
        pi = self.action_dist
        for s in np.flatnonzero(np.any(pi < 0, axis=1)):
            out.append(f"policy row {s} has negative entries")
        for s in np.flatnonzero(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL):
            out.append(f"policy row {s} sums to {pi[s].sum():.15g}")
        return out

    def to_dict(self) -> dict:
        return {"kind": "stationary", "action_dist": self.action_dist.tolist()}


@dataclass(frozen=True, eq=False)
class PolicySequence:
    """Non-stationary policy: one Policy per timestep 1..T."""

    per_step: tuple

    def __post_init__(self):
        object.__setattr__(self, "per_step", tuple(self.per_step))
        if not self.per_step:
            raise ValueError("PolicySequence needs at least one step")

    def __len__(self) -> int:
        return len(self.per_step)

    @property
    def num_states(self) -> int:
        return self.per_step[0].num_states

    @property
    def num_actions(self) -> int:
        return self.per_step[0].num_actions

    def to_dict(self) -> dict:
        return {
            "kind": "sequence",
            "per_step": [p.action_dist.tolist() for p in self.per_step],
        }


AnyPolicy = Union[Policy, PolicySequence]


def policy_from_dict(doc: dict) -> AnyPolicy:
    if doc.get("kind") == "sequence":
        return PolicySequence(tuple(Policy(np.array(a)) for a in doc["per_step"]))
    return Policy(np.array(doc["action_dist"]))


def policy_tensor(p: AnyPolicy, m: TabularMDP) -> np.ndarray:
    """Stack a policy into a (T, S, A) array for the MDP's horizon."""
    S, A, T = m.num_states, m.num_actions, m.horizon
    if isinstance(p, PolicySequence):
        if len(p) != T:
            raise ValueError(f"policy sequence has length {len(p)}, horizon is {T}")
        out = np.stack([q.action_dist for q in p.per_step])
    else:
        out = np.broadcast_to(p.action_dist, (T,) + p.action_dist.shape)
    if out.shape[1:] != (S, A):
        raise ValueError(f"policy shape {out.shape[1:]} does not match MDP ({S}, {A})")
    return out


@dataclass(frozen=True, eq=False)
class OccupancyProfile:
    per_step: np.ndarray  # (T, S), row t is rho_{t+1}
    average: np.ndarray  # (S,)

    @classmethod
    def from_per_step(cls, per_step: np.ndarray) -> "OccupancyProfile":
        per_step = np.asarray(per_step, dtype=float)
        return cls(per_step, per_step.mean(axis=0))

    @property
    def horizon(self) -> int:
        return self.per_step.shape[0]


@dataclass(frozen=True, eq=False)
class ValueTables:
    q: np.ndarray  # (T, S, A)
    v: np.ndarray  # (T + 1, S), v[T] == 0
    adv: np.ndarray  # (T, S, A)


@dataclass(frozen=True)
class Trajectory:
    steps: tuple  # ((t, s, a), ...) with t = 1..T
    seed_id: int = 0

    @property
    def states(self) -> np.ndarray:
        return np.array([s for _, s, _ in self.steps], dtype=int)

    @property
    def actions(self) -> np.ndarray:
        return np.array([a for _, _, a in self.steps], dtype=int)


def validate_mdp(m: TabularMDP) -> list[str]:
    """Return one human-readable message per violated invariant."""
    out = []
    P, c, rho0 = m.transition, m.cost, m.initial_dist
    neg = np.argwhere(P < 0)
    for s, a, s2 in neg:
        out.append(f"transition[{s},{a},{s2}] is negative ({P[s, a, s2]:.6g})")
    sums = P.sum(axis=2)
    for s, a in np.argwhere(np.abs(sums - 1.0) > ROW_TOL):
        out.append(
            f"transition row (s={s}, a={a}) sums to {sums[s, a]:.12g}, deficit {1.0 - sums[s, a]:.12g}"
        )
    for s in np.flatnonzero((c < 0) | (c > 1)):
        out.append(f"cost at state {s} is {c[s]:.6g}, outside [0, 1]")
    if np.any(rho0 < 0):
        out.append("initial_dist has negative entries")
    if abs(rho0.sum() - 1.0) > ROW_TOL:
        out.append(f"initial_dist sums to {rho0.sum():.12g}")
    return out


def exact_occupancy(m: TabularMDP, p: AnyPolicy) -> OccupancyProfile:
    pi = policy_tensor(p, m)
    rho = np.zeros((m.horizon, m.num_states))
    rho[0] = m.initial_dist
    for t in range(m.horizon - 1):
        rho[t + 1] = np.einsum("s,sa,sax->x", rho[t], pi[t], m.transition)
    return OccupancyProfile.from_per_step(rho)


def push_forward(m: TabularMDP, rho: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """Next-state distribution from state distribution `rho` under action rule `pi` (S, A)."""
    return np.einsum("s,sa,sax->x", rho, pi, m.transition)


def rollouts(m: TabularMDP, p: AnyPolicy, n: int, rng: np.random.Generator):
    """Sample n trajectories at once; returns (states, actions), each (n, T) int arrays."""
    pi = policy_tensor(p, m)
    T, S = m.horizon, m.num_states
    states = np.empty((n, T), dtype=int)
    actions = np.empty((n, T), dtype=int)
    s = _sample_rows(np.broadcast_to(m.initial_dist, (n, S)), rng)
    for t in range(T):
        states[:, t] = s
        a = _sample_rows(pi[t][s], rng)
        actions[:, t] = a
        if t + 1 < T:
            s = _sample_rows(m.transition[s, a], rng)
    return states, actions


def _sample_rows(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def rollout(m: TabularMDP, p: AnyPolicy, rng: np.random.Generator, seed_id: int = 0) -> Trajectory:
    states, actions = rollouts(m, p, 1, rng)
    steps = tuple((t + 1, int(s), int(a)) for t, (s, a) in enumerate(zip(states[0], actions[0])))
    return Trajectory(steps, seed_id)


def trajectories_to_csv(trajs: Iterable[Trajectory]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "t", "s", "a"])
    for tr in trajs:
        for t, s, a in tr.steps:
            w.writerow([tr.seed_id, t, s, a])
    return buf.getvalue()


def trajectories_from_csv(text: str) -> list[Trajectory]:
    rows: dict[int, list] = {}
    for row in csv.DictReader(io.StringIO(text)):
        rows.setdefault(int(row["seed"]), []).append((int(row["t"]), int(row["s"]), int(row["a"])))
    return [Trajectory(tuple(sorted(steps)), seed) for seed, steps in rows.items()]


def empirical_state_frequencies(states: np.ndarray, num_states: int) -> np.ndarray:
    """Per-timestep visit frequencies from an (n, T) array of sampled states."""
    n, T = states.shape
    out = np.zeros((T, num_states))
    for t in range(T):
        out[t] = np.bincount(states[:, t], minlength=num_states) / n
    return out


def policy_value(m: TabularMDP, p: AnyPolicy) -> float:
    occ = exact_occupancy(m, p)
    return float(np.sum(occ.per_step @ m.cost))


def policy_value_average_form(m: TabularMDP, p: AnyPolicy) -> float:
    occ = exact_occupancy(m, p)
    return float(m.horizon * occ.average @ m.cost)


def value_tables(m: TabularMDP, p: AnyPolicy) -> ValueTables:
    pi = policy_tensor(p, m)
    T, S, A = m.horizon, m.num_states, m.num_actions
    q = np.zeros((T, S, A))
    v = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        q[t] = m.cost[:, None] + m.transition @ v[t + 1]
        v[t] = np.sum(pi[t] * q[t], axis=1)
    adv = q - v[:T, :, None]
    return ValueTables(q, v, adv)


def performance_difference(m: TabularMDP, learner: AnyPolicy, expert: AnyPolicy) -> tuple[float, float]:
    """(J(learner) - J(expert), sum_t E_{rho_t^learner}[A^expert_t(s, learner_t)])."""
    lhs = policy_value(m, learner) - policy_value(m, expert)
    adv = value_tables(m, expert).adv
    rho = exact_occupancy(m, learner).per_step
    pi = policy_tensor(learner, m)
    rhs = float(np.einsum("ts,tsa,tsa->", rho, pi, adv))
    return lhs, rhs


def mismatch_value_tables(m: TabularMDP, expert: AnyPolicy) -> ValueTables:
    """Expert value tables under the mismatch cost 1 - pi*(a|s) instead of the stored cost."""
    pi = policy_tensor(expert, m)
    T, S, A = m.horizon, m.num_states, m.num_actions
    q = np.zeros((T, S, A))
    v = np.zeros((T + 1, S))
    for t in range(T - 1, -1, -1):
        q[t] = (1.0 - pi[t]) + m.transition @ v[t + 1]
        v[t] = np.sum(pi[t] * q[t], axis=1)
    return ValueTables(q, v, q - v[:T, :, None])


def disagreement(pi: np.ndarray, pi_star: np.ndarray) -> np.ndarray:
    """Total-variation disagreement 1 - sum_a min(pi, pi*) along the last axis.

    Reduces to the 0-1 indicator when both rules are deterministic.
    """
    return np.clip(1.0 - np.minimum(pi, pi_star).sum(axis=-1), 0.0, 1.0)


def mismatch_cost(m: TabularMDP, learner: AnyPolicy, expert: AnyPolicy) -> np.ndarray:
    """Policy-dependent mismatch cost view, shape (T, S)."""
    return disagreement(policy_tensor(learner, m), policy_tensor(expert, m))


def on_policy_mismatch(m: TabularMDP, learner: AnyPolicy, expert: AnyPolicy) -> float:
    rho = exact_occupancy(m, learner).per_step
    return float(np.sum(rho * mismatch_cost(m, learner, expert)) / m.horizon)


def ratio_table(learner_rho: np.ndarray, expert_rho: np.ndarray) -> np.ndarray:
    """Elementwise ratio with 0/0 -> 1 and x/0 -> +inf."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = learner_rho / expert_rho
    r = np.where(expert_rho > 0, r, np.where(learner_rho > 0, np.inf, 1.0))
    return r


def density_ratio_sup(m: TabularMDP, learner: AnyPolicy, expert: AnyPolicy) -> float:
    r = ratio_table(exact_occupancy(m, learner).per_step, exact_occupancy(m, expert).per_step)
    return float(np.max(r))


def advantage_sup(m: TabularMDP, expert: AnyPolicy) -> float:
    return float(np.max(value_tables(m, expert).adv))


def advantage_span(m: TabularMDP, expert: AnyPolicy) -> float:
    """max_{t,s} (max_a A - min_a A); equals advantage_sup for a deterministic optimal expert."""
    adv = value_tables(m, expert).adv
    return float(np.max(adv.max(axis=2) - adv.min(axis=2)))
