"""Cached expert demonstrations: sampled trajectories or exact occupancy."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .environments import EnvBundle
from .mdp import (
    OccupancyProfile,
    Policy,
    Trajectory,
    exact_occupancy,
    rollouts,
    trajectories_from_csv,
    trajectories_to_csv,
)


@dataclass(frozen=True, eq=False)
class DemoSource:
    mode: str  # "sampled" | "exact"
    num_states: int
    num_actions: int
    horizon: int
    trajectories: tuple = ()
    train_ids: tuple = ()
    validation_ids: tuple = ()
    occupancy: Optional[OccupancyProfile] = None
    expert_rule: Optional[Policy] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.mode == "sampled":
            if not self.train_ids:
                raise ValueError("sampled demonstrations need at least one training trajectory")
        elif self.mode == "exact":
            if self.occupancy is None or self.expert_rule is None:
                raise ValueError("exact demonstrations need occupancy and expert_rule")
        else:
            raise ValueError(f"unknown demo mode {self.mode!r}")

    @property
    def is_exact(self) -> bool:
        return self.mode == "exact"

    def split(self, which: str = "train") -> list[Trajectory]:
        ids = set(self.train_ids if which == "train" else self.validation_ids)
        return [tr for tr in self.trajectories if tr.seed_id in ids]

    def _arrays(self, which: str = "train"):
        trajs = self.split(which)
        states = np.array([tr.states for tr in trajs], dtype=int).reshape(len(trajs), self.horizon)
        actions = np.array([tr.actions for tr in trajs], dtype=int).reshape(len(trajs), self.horizon)
        return states, actions

    def state_action_weights(self, which: str = "train") -> np.ndarray:
        """(T, S, A) array of P(s*_t = s, a*_t = a) under the demonstrations."""
        T, S, A = self.horizon, self.num_states, self.num_actions
        if self.is_exact:
            return self.occupancy.per_step[:, :, None] * self.expert_rule.action_dist[None]
        states, actions = self._arrays(which)
        out = np.zeros((T, S, A))
        n = states.shape[0]
        if n == 0:
            return out
        for t in range(T):
            np.add.at(out[t], (states[:, t], actions[:, t]), 1.0 / n)
        return out

    def state_occupancy(self) -> np.ndarray:
        """(T, S) expert state distribution used by the losses."""
        if self.is_exact:
            return self.occupancy.per_step
        return self.state_action_weights().sum(axis=2)

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "n": len(self.trajectories),
            "seed": self.seed,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "horizon": self.horizon,
            "split": {"train": list(self.train_ids), "validation": list(self.validation_ids)},
        }

    def to_files(self) -> tuple[str, str]:
        """(trajectory CSV, manifest JSON) for sampled demonstrations."""
        if self.is_exact:
            raise ValueError("exact demonstrations have no trajectory rows")
        return trajectories_to_csv(self.trajectories), json.dumps(self.manifest(), sort_keys=True)

    @classmethod
    def from_files(cls, csv_text: str, manifest_text: str) -> "DemoSource":
        doc = json.loads(manifest_text)
        trajs = sorted(trajectories_from_csv(csv_text), key=lambda tr: tr.seed_id)
        return cls(
            mode="sampled",
            num_states=doc["num_states"],
            num_actions=doc["num_actions"],
            horizon=doc["horizon"],
            trajectories=tuple(trajs),
            train_ids=tuple(doc["split"]["train"]),
            validation_ids=tuple(doc["split"]["validation"]),
            seed=doc["seed"],
        )


def collect_demos(
    bundle: EnvBundle,
    n: int,
    rng: np.random.Generator,
    train_fraction: float = 0.8,
    seed: Optional[int] = None,
) -> DemoSource:
    """Roll out the expert n times and split by whole trajectory."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    m = bundle.mdp
    states, actions = rollouts(m, bundle.expert, n, rng)
    trajs = tuple(
        Trajectory(tuple((t + 1, int(s), int(a)) for t, (s, a) in enumerate(zip(states[i], actions[i]))), i)
        for i in range(n)
    )
    n_train = max(1, int(round(train_fraction * n)))
    order = rng.permutation(n)
    train = tuple(sorted(int(i) for i in order[:n_train]))
    val = tuple(sorted(int(i) for i in order[n_train:]))
    return DemoSource(
        mode="sampled",
        num_states=m.num_states,
        num_actions=m.num_actions,
        horizon=m.horizon,
        trajectories=trajs,
        train_ids=train,
        validation_ids=val,
        seed=seed,
    )


def exact_demo(bundle: EnvBundle) -> DemoSource:
    m = bundle.mdp
    return DemoSource(
        mode="exact",
        num_states=m.num_states,
        num_actions=m.num_actions,
        horizon=m.horizon,
        occupancy=exact_occupancy(m, bundle.expert),
        expert_rule=bundle.expert,
    )


def empirical_occupancy(d: DemoSource, smoothing: float = 0.0, which: str = "train") -> OccupancyProfile:
    """Per-timestep state frequencies with add-lambda smoothing."""
    if d.is_exact:
        raise ValueError("empirical_occupancy needs sampled demonstrations")
    states, _ = d._arrays(which)
    counts = np.zeros((d.horizon, d.num_states))
    for t in range(d.horizon):
        counts[t] = np.bincount(states[:, t], minlength=d.num_states)
    counts += smoothing
    return OccupancyProfile.from_per_step(counts / counts.sum(axis=1, keepdims=True))
