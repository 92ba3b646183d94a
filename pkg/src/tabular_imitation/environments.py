"""Environment zoo spanning the realizable, bounded-ratio and unbounded-ratio regimes.

State layouts
-------------
Recoverability family (``one_step``, ``k_step``, ``unrecoverable``): state 0 is the
home state s1 (cost 0, expert plays a1); states 1..k form the bad region (cost 1,
expert plays a2). From s1, a1 stays with probability ``1 - slip - alias`` and a2
is always a mistake.

* ``one_step``/``k_step``: the bad region is a chain; a2 moves one step toward s1
  and a1 stays put. Slips and mistakes land at the far end of the chain, so the
  expert needs k steps to recover. ``alias > 0`` adds a decoy state (cost 0,
  expert a1 returns home, a2 drops to the far end of the chain) that the default
  learner class merges with the chain.
* ``unrecoverable``: state 1 is absorbing. ``alias > 0`` adds a brink state
  (cost 1, expert a2 returns home, a1 falls into the absorbing state) that the
  default learner class merges with s1.

Latching environment: state = (light phase, previous executed action, observed
light). The expert brakes on red and goes on green; the learner class sees only
(observed light, previous action).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .mdp import Policy, TabularMDP, density_ratio_sup, policy_tensor

A1, A2 = 0, 1
GO, BRAKE = 0, 1
MAX_ENUMERATION = 2**20


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StateAggregationClass:
    """Policies constant on the cells of a state partition."""

    cell_of: np.ndarray

    def __post_init__(self):
        cells = np.asarray(self.cell_of, dtype=int)
        if cells.ndim != 1 or cells.size == 0:
            raise ValueError("cell_of must be a nonempty vector")
        uniq = np.unique(cells)
        if not np.array_equal(uniq, np.arange(uniq.size)):
            raise ValueError("cell ids must be contiguous 0..num_cells-1")
        cells.setflags(write=False)
        object.__setattr__(self, "cell_of", cells)

    @property
    def num_cells(self) -> int:
        return int(self.cell_of.max()) + 1

    @property
    def num_states(self) -> int:
        return self.cell_of.size

    @classmethod
    def singleton(cls, num_states: int) -> "StateAggregationClass":
        return cls(np.arange(num_states))

    @classmethod
    def single_cell(cls, num_states: int) -> "StateAggregationClass":
        return cls(np.zeros(num_states, dtype=int))

    def members(self, cell: int) -> np.ndarray:
        return np.flatnonzero(self.cell_of == cell)

    def indicator(self) -> np.ndarray:
        """(num_cells, S) membership matrix."""
        out = np.zeros((self.num_cells, self.num_states))
        out[self.cell_of, np.arange(self.num_states)] = 1.0
        return out

    def expand(self, cell_rows: np.ndarray) -> np.ndarray:
        """Broadcast per-cell rows (num_cells, A) to per-state rows (S, A)."""
        return np.asarray(cell_rows)[self.cell_of]

    def policy(self, cell_rows: np.ndarray) -> Policy:
        return Policy(self.expand(cell_rows), class_tag=self)

    def contains(self, p: Policy, tol: float = 1e-12) -> bool:
        rows = p.action_dist
        for c in range(self.num_cells):
            block = rows[self.members(c)]
            if np.max(np.abs(block - block[0])) > tol:
                return False
        return True

    def coarsens(self, other: "StateAggregationClass") -> bool:
        """True if every cell of `other` lies inside one cell of self."""
        for c in range(other.num_cells):
            if np.unique(self.cell_of[other.members(c)]).size > 1:
                return False
        return True


@dataclass(frozen=True, eq=False)
class EnvBundle:
    mdp: TabularMDP
    expert: Policy
    learner_class: StateAggregationClass
    label: str  # easy | goldilocks | hard
    params: dict = field(default_factory=dict)
    name: str = ""

    def with_horizon(self, horizon: int) -> "EnvBundle":
        return replace(self, mdp=self.mdp.with_horizon(horizon), params={**self.params, "T": horizon})

    def with_class(self, cls: StateAggregationClass) -> "EnvBundle":
        b = replace(self, learner_class=cls)
        return replace(b, label=regime_label(b.mdp, b.expert, cls))

    def to_dict(self) -> dict:
        doc = self.mdp.to_dict()
        doc.update(
            name=self.name,
            expert=self.expert.action_dist.tolist(),
            cell_of=self.learner_class.cell_of.tolist(),
            label=self.label,
            params=self.params,
        )
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "EnvBundle":
        return cls(
            mdp=TabularMDP.from_dict(doc),
            expert=Policy(np.array(doc["expert"], dtype=float)),
            learner_class=StateAggregationClass(np.array(doc["cell_of"], dtype=int)),
            label=doc["label"],
            params=dict(doc.get("params", {})),
            name=doc.get("name", ""),
        )

    @classmethod
    def from_json(cls, text: str) -> "EnvBundle":
        return cls.from_dict(json.loads(text))


def regime_label(m: TabularMDP, expert: Policy, cls: StateAggregationClass) -> str:
    """easy if the expert is class-feasible, hard if some class policy reaches a
    (t, s) the expert never visits, goldilocks otherwise."""
    if cls.contains(expert):
        return "easy"
    # The class-uniform policy reaches every (t, s) that any policy can reach.
    explorer = Policy.uniform(m.num_states, m.num_actions, class_tag=cls)
    if np.isinf(density_ratio_sup(m, explorer, expert)):
        return "hard"
    return "goldilocks"


def _check_prob(name: str, x: float, hi: float = 1.0):
    if not 0.0 <= x <= hi:
        raise ValueError(f"{name} must lie in [0, {hi}], got {x}")


def build_recoverability_env(
    kind: str,
    T: int,
    slip: float = 0.1,
    k: int = 1,
    alias: float = 0.0,
) -> EnvBundle:
    """Build one of the three recoverability MDPs (see module docstring)."""
    if T < 2:
        raise ValueError("horizon T must be at least 2")
    _check_prob("slip", slip, 0.5)
    _check_prob("alias", alias, 0.5)
    if slip + alias > 1.0:
        raise ValueError("slip + alias must not exceed 1")
    if kind == "one_step":
        k = 1
    elif kind == "k_step":
        if k < 1:
            raise ValueError("k must be a positive integer")
    elif kind == "unrecoverable":
        k = 1
    else:
        raise ValueError(f"unknown recoverability kind {kind!r}")

    has_alias = alias > 0
    S = 1 + k + int(has_alias)
    far = k
    extra = k + 1
    P = np.zeros((S, 2, S))
    cost = np.ones(S)
    cost[0] = 0.0
    expert = np.full(S, A2)
    expert[0] = A1

    P[0, A1, 0] = 1.0 - slip - alias
    P[0, A1, far] += slip
    P[0, A2, far] = 1.0
    if kind == "unrecoverable":
        P[1, :, 1] = 1.0
        if has_alias:
            P[0, A1, extra] += alias
            P[extra, A2, 0] = 1.0  # brink: expert steps back home
            P[extra, A1, 1] = 1.0
        cells = np.arange(S)
        if has_alias:
            cells = np.array([0, 1, 0])
    else:
        for j in range(1, k + 1):
            P[j, A2, j - 1] = 1.0
            P[j, A1, j] = 1.0
        if has_alias:
            P[0, A1, extra] += alias
            P[extra, A1, 0] = 1.0  # decoy: looks like the chain, expert goes home with a1
            P[extra, A2, far] = 1.0
            cost[extra] = 0.0
            expert[extra] = A1
        cells = np.minimum(np.arange(S), 1)

    rho0 = np.zeros(S)
    rho0[0] = 1.0
    m = TabularMDP(P, cost, rho0, T)
    pol = Policy.deterministic(expert, 2)
    cls = StateAggregationClass(cells)
    params = {"kind": kind, "T": T, "slip": slip, "k": k, "alias": alias}
    return EnvBundle(m, pol, cls, regime_label(m, pol, cls), params, name=kind)


def build_latching_env(
    T: int,
    signal_noise: float,
    slip: float = 0.05,
    phase_len: int = 8,
    learner_class: str = "signal_prev",
) -> EnvBundle:
    """Red/green light cycle with previous-action state augmentation.

    `slip` is the chance the executed action differs from the chosen one; it is
    what the previous-action feature records. `learner_class` is one of
    ``signal_prev`` (observed light x previous action), ``prev_only`` or
    ``singleton``.
    """
    if T < 1:
        raise ValueError("horizon T must be positive")
    _check_prob("signal_noise", signal_noise, 0.5)
    _check_prob("slip", slip, 0.5)
    if phase_len < 1:
        raise ValueError("phase_len must be positive")
    period = 2 * phase_len
    S = period * 4

    def sid(phase, prev, obs):
        return (phase * 2 + prev) * 2 + obs

    def correct(phase):
        return BRAKE if phase < phase_len else GO  # red first

    P = np.zeros((S, 2, S))
    cost = np.zeros(S)
    expert = np.zeros(S, dtype=int)
    signal_of = np.zeros(S, dtype=int)
    prev_of = np.zeros(S, dtype=int)
    for phase, prev, obs in itertools.product(range(period), range(2), range(2)):
        s = sid(phase, prev, obs)
        expert[s] = correct(phase)
        cost[s] = float(prev != correct((phase - 1) % period))
        signal_of[s], prev_of[s] = obs, prev
        nxt = (phase + 1) % period
        light = correct(nxt)
        for a in range(2):
            for executed, pe in ((a, 1.0 - slip), (1 - a, slip)):
                for seen, po in ((light, 1.0 - signal_noise), (1 - light, signal_noise)):
                    P[s, a, sid(nxt, executed, seen)] += pe * po
    rho0 = np.zeros(S)
    start_prev = correct(period - 1)
    rho0[sid(0, start_prev, correct(0))] += 1.0 - signal_noise
    rho0[sid(0, start_prev, 1 - correct(0))] += signal_noise

    if learner_class == "signal_prev":
        cells = prev_of * 2 + signal_of
    elif learner_class == "prev_only":
        cells = prev_of.copy()
    elif learner_class == "singleton":
        cells = np.arange(S)
    else:
        raise ValueError(f"unknown latching learner class {learner_class!r}")
    m = TabularMDP(P, cost, rho0, T)
    pol = Policy.deterministic(expert, 2)
    cls = StateAggregationClass(cells)
    params = {
        "T": T,
        "signal_noise": signal_noise,
        "slip": slip,
        "phase_len": phase_len,
        "learner_class": learner_class,
    }
    return EnvBundle(m, pol, cls, regime_label(m, pol, cls), params, name="latching")


def latching_cell_features(bundle: EnvBundle) -> list[tuple[int, Optional[int]]]:
    """(previous action, observed signal or None) for each learner cell."""
    cls = bundle.learner_class
    kind = bundle.params["learner_class"]
    out = []
    for c in range(cls.num_cells):
        s = int(cls.members(c)[0])
        prev, obs = (s // 2) % 2, s % 2
        out.append((prev, obs if kind != "prev_only" else None))
    return out


def smooth_expert(bundle: EnvBundle, eta: float) -> EnvBundle:
    """Mix the expert with the uniform policy: (1 - eta) pi* + eta / |A|."""
    _check_prob("eta", eta)
    if eta == 0.0:
        return bundle
    A = bundle.mdp.num_actions
    mixed = Policy((1.0 - eta) * bundle.expert.action_dist + eta / A)
    label = regime_label(bundle.mdp, mixed, bundle.learner_class)
    return replace(bundle, expert=mixed, label=label, params={**bundle.params, "eta": eta})


def feasible_policies(cls: StateAggregationClass, num_actions: int) -> Iterator[Policy]:
    """All deterministic policies constant on the cells of `cls`."""
    count = num_actions**cls.num_cells
    if count > MAX_ENUMERATION:
        raise EnumerationTooLarge(f"{count} class-feasible policies exceed the limit {MAX_ENUMERATION}")
    eye = np.eye(num_actions)
    for combo in itertools.product(range(num_actions), repeat=cls.num_cells):
        yield cls.policy(eye[list(combo)])


def expert_in_class(bundle: EnvBundle) -> bool:
    return bundle.learner_class.contains(bundle.expert)


ENV_SCHEMAS = {
    "one_step": {"T": "int >= 2", "slip": "float in [0, 0.5]", "alias": "float in [0, 0.5]"},
    "k_step": {"T": "int >= 2", "slip": "float in [0, 0.5]", "k": "int >= 1 (1 reproduces one_step)", "alias": "float in [0, 0.5]"},
    "unrecoverable": {"T": "int >= 2", "slip": "float in [0, 0.5]", "alias": "float in [0, 0.5]"},
    "latching": {
        "T": "int >= 1",
        "signal_noise": "float in [0, 0.5]",
        "slip": "float in [0, 0.5]",
        "phase_len": "int >= 1",
        "learner_class": "signal_prev | prev_only | singleton",
    },
}


def make_env(name: str, T: int, **params) -> EnvBundle:
    """Registry constructor used by configs and sweeps.

    Extra keys: ``eta`` (expert smoothing) and ``learner_class`` (``singleton`` or
    ``single_cell`` overrides the default aggregation for recoverability envs).
    """
    params = dict(params)
    eta = float(params.pop("eta", 0.0))
    override = None
    if name in ("one_step", "k_step", "unrecoverable"):
        override = params.pop("learner_class", None)
        unknown = set(params) - {"slip", "k", "alias"}
        if unknown:
            raise ValueError(f"unknown parameters for {name}: {sorted(unknown)}")
        bundle = build_recoverability_env(name, T, **params)
    elif name == "latching":
        unknown = set(params) - {"signal_noise", "slip", "phase_len", "learner_class"}
        if unknown:
            raise ValueError(f"unknown parameters for latching: {sorted(unknown)}")
        params.setdefault("signal_noise", 0.3)
        bundle = build_latching_env(T, **params)
    else:
        raise KeyError(f"unknown environment {name!r}")
    if override == "singleton":
        bundle = bundle.with_class(StateAggregationClass.singleton(bundle.mdp.num_states))
    elif override == "single_cell":
        bundle = bundle.with_class(StateAggregationClass.single_cell(bundle.mdp.num_states))
    elif override not in (None, "default"):
        raise ValueError(f"unknown learner_class {override!r}")
    if override is not None:
        bundle = replace(bundle, params={**bundle.params, "learner_class": override})
    return smooth_expert(bundle, eta)


def expert_tensor(bundle: EnvBundle) -> np.ndarray:
    return policy_tensor(bundle.expert, bundle.mdp)
