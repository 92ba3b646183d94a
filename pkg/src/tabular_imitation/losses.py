"""Covariate-shift corrected imitation losses.

Density-ratio reweighting, integral probability metrics over partition-constant
moment functions, the per-state doubly robust loss, and the inherent Bellman
error of a function class.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .demonstrations import DemoSource
from .environments import StateAggregationClass
from .mdp import (
    AnyPolicy,
    OccupancyProfile,
    Policy,
    PolicySequence,
    TabularMDP,
    policy_tensor,
    push_forward,
    ratio_table,
)

MAX_IBE_CELLS = 20


class HardRegimeError(RuntimeError):
    """Learner visits a state the demonstrations never cover and no clip is set."""


@dataclass(frozen=True, eq=False)
class FunctionClass:
    """Functions constant on the cells of a partition, valued in [0, 1]."""

    partition: StateAggregationClass
    per_timestep: Optional[tuple] = None  # partitions for t = 1..T

    @classmethod
    def full(cls, num_states: int) -> "FunctionClass":
        return cls(StateAggregationClass.singleton(num_states))

    @classmethod
    def constant(cls, num_states: int) -> "FunctionClass":
        return cls(StateAggregationClass.single_cell(num_states))

    def at(self, t: int) -> StateAggregationClass:
        """Partition F_t for 1-indexed timestep t."""
        if self.per_timestep is None:
            return self.partition
        return self.per_timestep[min(t, len(self.per_timestep)) - 1]


@dataclass(frozen=True, eq=False)
class RatioEstimate:
    per_step: np.ndarray  # (T, S)
    alpha: float
    clip: Optional[float]
    gamma_bound: Optional[float]

    @property
    def has_infinite(self) -> bool:
        return bool(np.any(np.isinf(self.per_step)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "s", "value"])
        for t, row in enumerate(self.per_step, start=1):
            for s, v in enumerate(row):
                w.writerow([t, s, repr(float(v))])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class IpmResult:
    value: float
    witness: np.ndarray  # per cell, in [0, 1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "value"])
        for c, v in enumerate(self.witness):
            w.writerow([c, repr(float(v))])
        w.writerow(["ipm", repr(self.value)])
        return buf.getvalue()


def _per_step(x: Union[OccupancyProfile, np.ndarray]) -> np.ndarray:
    return x.per_step if isinstance(x, OccupancyProfile) else np.asarray(x, dtype=float)


def estimate_density_ratio(
    learner_occ: Union[OccupancyProfile, np.ndarray],
    expert_occ: Union[OccupancyProfile, np.ndarray],
    alpha: float = 1.0,
    clip: Optional[float] = None,
    true_learner_occ=None,
    true_expert_occ=None,
) -> RatioEstimate:
    """r_t(s) = (rho_t^learner(s) / rho_t^expert(s)) ** alpha, then capped at `clip`.

    gamma_bound is max_t E_{s ~ rho*_t} |r_t(s) - true ratio|; the truth defaults
    to the input occupancies themselves.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    lo, eo = _per_step(learner_occ), _per_step(expert_occ)
    if lo.shape != eo.shape:
        raise ValueError(f"occupancy shapes differ: {lo.shape} vs {eo.shape}")
    raw = ratio_table(lo, eo)
    if alpha == 0.0:
        r = np.ones_like(raw)
    else:
        r = raw**alpha
    if clip is not None:
        r = np.minimum(r, clip)
    tl = lo if true_learner_occ is None else _per_step(true_learner_occ)
    te = eo if true_expert_occ is None else _per_step(true_expert_occ)
    truth = ratio_table(tl, te)
    support = te > 0
    gap = np.where(support, np.abs(np.where(support, r, 0.0) - np.where(support, truth, 0.0)), 0.0)
    gamma = float(np.max(np.sum(te * gap, axis=1)))
    return RatioEstimate(r, float(alpha), clip, gamma)


def _step_rule(policy: AnyPolicy, t: int) -> np.ndarray:
    if isinstance(policy, PolicySequence):
        return policy.per_step[t - 1].action_dist
    return policy.action_dist


def _weighted(weights: np.ndarray, ratio_row: np.ndarray) -> np.ndarray:
    """weights (S, ...) times ratio per state, with zero weight absorbing inf."""
    r = np.asarray(ratio_row, dtype=float).reshape((-1,) + (1,) * (weights.ndim - 1))
    with np.errstate(invalid="ignore"):
        return np.where(weights > 0, weights * r, 0.0)


def loss_cov(policy: AnyPolicy, demo: DemoSource, ratio: Optional[RatioEstimate], t: int) -> float:
    """Ratio-weighted expected 0-1 disagreement with the demonstrated action at step t."""
    W = demo.state_action_weights()[t - 1]
    if ratio is not None:
        W = _weighted(W, ratio.per_step[t - 1])
    pi = _step_rule(policy, t)
    return float(np.sum(W * (1.0 - pi)))


def bc_loss(policy: AnyPolicy, demo: DemoSource) -> float:
    """Classification loss pooled over all demonstrated (s*, a*) pairs."""
    return float(np.mean([loss_cov(policy, demo, None, t) for t in range(1, demo.horizon + 1)]))


def ipm_distance(p: np.ndarray, q: np.ndarray, fclass: Union[FunctionClass, StateAggregationClass]) -> IpmResult:
    """max over partition-constant f in [0,1] of <f, p - q>; closed form per cell."""
    part = fclass.partition if isinstance(fclass, FunctionClass) else fclass
    diff = np.asarray(p, dtype=float) - np.asarray(q, dtype=float)
    if diff.shape != (part.num_states,):
        raise ValueError("distributions must live on the partitioned state space")
    agg = np.bincount(part.cell_of, weights=diff, minlength=part.num_cells)
    witness = (agg > 0).astype(float)
    return IpmResult(float(np.sum(np.maximum(agg, 0.0))), witness)


def loss_fail(
    m: TabularMDP,
    policy: AnyPolicy,
    demo: DemoSource,
    learner_occ_t: np.ndarray,
    fclass: FunctionClass,
    t: int,
) -> IpmResult:
    """Next-state moment mismatch between the pushed-forward learner and rho*_{t+1}."""
    part = fclass.at(min(t + 1, m.horizon))
    if t >= m.horizon:
        return IpmResult(0.0, np.zeros(part.num_cells))
    nxt = push_forward(m, np.asarray(learner_occ_t, dtype=float), _step_rule(policy, t))
    return ipm_distance(nxt, demo.state_occupancy()[t], part)


def demonstrated_next_states(m: TabularMDP, demo: DemoSource, t: int):
    """Per-state demonstrated mass and next-state distribution under the demonstrated actions."""
    W = demo.state_action_weights()[t - 1]
    mass = W.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        q = np.where(mass[:, None] > 0, W / mass[:, None], 0.0)
    nxt = np.einsum("sa,sax->sx", q, m.transition)
    return mass, nxt


def per_state_ipm(m: TabularMDP, pi: np.ndarray, targets: np.ndarray, part: StateAggregationClass) -> np.ndarray:
    """Per-state IPM between P(.|s, pi(s)) and targets[s]."""
    learner_next = np.einsum("sa,sax->sx", pi, m.transition)
    diff = learner_next - targets
    agg = diff @ part.indicator().T
    return np.sum(np.maximum(agg, 0.0), axis=1)


def loss_cov_fail(
    m: TabularMDP,
    policy: AnyPolicy,
    demo: DemoSource,
    ratio: Optional[RatioEstimate],
    fclass: FunctionClass,
    t: int,
) -> float:
    """Ratio-weighted per-state next-state IPM against the demonstrated action."""
    if t >= m.horizon:
        return 0.0
    mass, targets = demonstrated_next_states(m, demo, t)
    w = mass if ratio is None else _weighted(mass, ratio.per_step[t - 1])
    vals = per_state_ipm(m, _step_rule(policy, t), targets, fclass.at(t + 1))
    on = w > 0
    return float(np.sum(w[on] * vals[on]))


def bellman_backup_matrix(m: TabularMDP, expert: AnyPolicy, t: int) -> np.ndarray:
    """(S, S) matrix M with (B*_t g)(s) = M[s] @ g."""
    pi = policy_tensor(expert, m)[t - 1]
    return np.einsum("sa,sax->sx", pi, m.transition)


def _ibe_step(M: np.ndarray, part_now: StateAggregationClass, part_next: StateAggregationClass) -> float:
    if part_now.num_cells == part_now.num_states:
        return 0.0  # every B g is representable exactly
    J = part_next.num_cells
    if J > MAX_IBE_CELLS:
        raise ValueError(f"{J} cells exceed the vertex-enumeration limit {MAX_IBE_CELLS}")
    # Cell-aggregated backup: (B g)(s) = sum_j g_j * K[s, j].
    K = M @ part_next.indicator().T
    ind = part_now.indicator().astype(bool)
    best = 0.0
    chunk = 1 << min(J, 14)
    bits = np.arange(J)
    for start in range(0, 1 << J, chunk):
        idx = np.arange(start, min(start + chunk, 1 << J))
        G = ((idx[:, None] >> bits) & 1).astype(float)  # (n, J)
        BG = G @ K.T  # (n, S)
        for cell in ind:
            vals = BG[:, cell]
            half = 0.5 * (vals.max(axis=1) - vals.min(axis=1))
            best = max(best, float(half.max()))
    return best


def inherent_bellman_error(m: TabularMDP, expert: AnyPolicy, fclass: FunctionClass) -> float:
    """max_t max_{g in F_{t+1}} min_{f in F_t} ||f - B*_t g||_inf by vertex enumeration.

    The inner minimum over a partition class is the half-range of B*_t g on each
    cell; the midrange stays inside [0, 1] because B*_t g does.
    """
    stationary = isinstance(expert, Policy) and fclass.per_timestep is None
    if stationary:
        if m.horizon < 2:
            return 0.0
        return _ibe_step(bellman_backup_matrix(m, expert, 1), fclass.partition, fclass.partition)
    best = 0.0
    for t in range(1, m.horizon):
        M = bellman_backup_matrix(m, expert, t)
        best = max(best, _ibe_step(M, fclass.at(t), fclass.at(t + 1)))
    return best


def value_in_class(values: np.ndarray, part: StateAggregationClass, tol: float = 1e-9) -> bool:
    """Whether a value function, up to an additive shift, is a member of the class."""
    v = np.asarray(values, dtype=float)
    if v.max() - v.min() > 1.0 + tol:
        return False
    for c in range(part.num_cells):
        block = v[part.members(c)]
        if block.max() - block.min() > tol:
            return False
    return True


def ratios_along(
    learner_rho: np.ndarray,
    demo: DemoSource,
    alpha: float,
    clip: Optional[float],
    truth: Optional[Sequence[np.ndarray]] = None,
) -> RatioEstimate:
    """Ratio estimate against the demonstrations' expert occupancy."""
    expert_rho = demo.state_occupancy()
    kw = {}
    if truth is not None:
        kw = {"true_learner_occ": truth[0], "true_expert_occ": truth[1]}
    return estimate_density_ratio(learner_rho, expert_rho, alpha, clip, **kw)


def check_finite(ratio: RatioEstimate, demo: DemoSource, learner_rho: np.ndarray):
    """Abort when the learner reaches a state the expert data never covers."""
    if ratio.clip is not None or not ratio.has_infinite:
        return
    bad = np.argwhere(np.isinf(ratio.per_step) & (learner_rho > 0))
    if bad.size:
        t, s = bad[0]
        raise HardRegimeError(
            f"density ratio is infinite at t={t + 1}, s={s}: learner visits a state absent from the "
            "expert data (hard regime); set a clip to proceed"
        )
