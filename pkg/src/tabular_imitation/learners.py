"""Learners: behavioural cloning, forward and iterative ratio-corrected training, DAgger.

Classification steps are weighted majority votes per learner cell. Moment-matching
steps are solved exactly as linear programs over per-cell action distributions.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .demonstrations import DemoSource
from .environments import EnvBundle, StateAggregationClass
from .losses import (
    FunctionClass,
    RatioEstimate,
    check_finite,
    demonstrated_next_states,
    estimate_density_ratio,
    loss_cov,
    loss_cov_fail,
    loss_fail,
)
from .mdp import (
    AnyPolicy,
    Policy,
    PolicySequence,
    TabularMDP,
    _sample_rows,
    empirical_state_frequencies,
    exact_occupancy,
    mismatch_cost,
    on_policy_mismatch,
    policy_tensor,
    rollouts,
)

LOSS_KINDS = ("cov", "fail", "cov_fail")
TIE_TOL = 1e-12


class LpFailure(RuntimeError):
    pass


@dataclass
class WeightedClassificationProblem:
    """Accumulated (state, action) weights; solved by a weighted vote per cell."""

    cls: StateAggregationClass
    weights: np.ndarray  # (S, A)

    @classmethod
    def empty(cls, part: StateAggregationClass, num_actions: int) -> "WeightedClassificationProblem":
        return cls(part, np.zeros((part.num_states, num_actions)))

    def add(self, w: np.ndarray) -> None:
        self.weights = self.weights + w

    def cell_weights(self) -> np.ndarray:
        return self.cls.indicator() @ self.weights

    def solve(self) -> Policy:
        """Heaviest action per cell, lowest index on ties, uniform on empty cells."""
        agg = self.cell_weights()
        C, A = agg.shape
        rows = np.full((C, A), 1.0 / A)
        for c in range(C):
            w = agg[c]
            if not np.any(w > 0):
                continue
            top = w.max()
            best = int(np.flatnonzero(w >= top - TIE_TOL * max(1.0, abs(top)))[0])
            rows[c] = 0.0
            rows[c, best] = 1.0
        return self.cls.policy(rows)

    def loss(self, policy: Policy) -> float:
        return float(np.sum(self.weights * (1.0 - policy.action_dist)))


@dataclass
class IpmBlock:
    """One term w * max_f <f, push(pi) - target> of a moment-matching objective.

    coef[s, a, j] is the mass that playing a at s sends into function-class cell j.
    """

    coef: np.ndarray  # (S, A, J)
    target: np.ndarray  # (J,)
    weight: float = 1.0


@dataclass
class AggregatedLossDataset:
    """Follow-the-leader accumulator over training iterations."""

    classification: WeightedClassificationProblem
    blocks: dict = field(default_factory=dict)
    iterations: int = 0

    def add_block(self, key, block: IpmBlock) -> None:
        # Blocks with equal keys share coef and target, so only weights add up.
        if key in self.blocks:
            self.blocks[key].weight += block.weight
        else:
            self.blocks[key] = block

    def solve(self) -> Policy:
        if not self.blocks:
            return self.classification.solve()
        return solve_ipm_program(list(self.blocks.values()), self.classification.cls, self.classification.weights)


@dataclass
class TrainReport:
    algorithm: str
    policy: AnyPolicy
    train_loss: float
    per_step_loss: np.ndarray
    iterations: list = field(default_factory=list)  # dicts: iteration, validation, loss
    chosen_iteration: int = 1
    interactive: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "train_loss", "validation", "chosen"])
        if not self.iterations:
            w.writerow([1, repr(self.train_loss), "", 1])
        for row in self.iterations:
            w.writerow([row["iteration"], repr(row["loss"]), repr(row["validation"]),
                        int(row["iteration"] == self.chosen_iteration)])
        return buf.getvalue()

    def policy_json(self) -> str:
        return json.dumps({"algorithm": self.algorithm, "policy": self.policy.to_dict()}, sort_keys=True)


def _cell_coef(coef: np.ndarray, part: StateAggregationClass) -> np.ndarray:
    return np.einsum("cs,saj->caj", part.indicator(), coef)


def solve_ipm_program(
    blocks: list[IpmBlock],
    part: StateAggregationClass,
    class_weights: Optional[np.ndarray] = None,
) -> Policy:
    """Minimise sum_b w_b * sum_j (K_b pi - target_b)_j^+ over class policies.

    Optional (S, A) classification weights add the linear term sum W (1 - pi).
    """
    A = blocks[0].coef.shape[1]
    C = part.num_cells
    n_pi = C * A
    Ks = [_cell_coef(b.coef, part) for b in blocks]
    sizes = [b.target.size for b in blocks]
    n_z = sum(sizes)
    c = np.zeros(n_pi + n_z)
    if class_weights is not None:
        c[:n_pi] -= (part.indicator() @ class_weights).ravel()
    rows, cols, vals, rhs = [], [], [], []
    off = 0
    for K, b, J in zip(Ks, blocks, sizes):
        c[n_pi + off:n_pi + off + J] = b.weight
        flat = K.reshape(n_pi, J)
        nz_i, nz_j = np.nonzero(flat)
        rows.extend((off + nz_j).tolist())
        cols.extend(nz_i.tolist())
        vals.extend(flat[nz_i, nz_j].tolist())
        rows.extend(range(off, off + J))
        cols.extend(range(n_pi + off, n_pi + off + J))
        vals.extend([-1.0] * J)
        rhs.extend(b.target.tolist())
        off += J
    A_ub = sparse.csr_matrix((vals, (rows, cols)), shape=(n_z, n_pi + n_z))
    eq_rows = np.repeat(np.arange(C), A)
    A_eq = sparse.csr_matrix((np.ones(n_pi), (eq_rows, np.arange(n_pi))), shape=(C, n_pi + n_z))
    res = linprog(
        c, A_ub=A_ub, b_ub=np.array(rhs), A_eq=A_eq, b_eq=np.ones(C),
        bounds=[(0.0, 1.0)] * n_pi + [(0.0, None)] * n_z, method="highs",
    )
    if res.status != 0:
        raise LpFailure(f"moment-matching LP failed: {res.message}")
    pi = np.clip(res.x[:n_pi].reshape(C, A), 0.0, 1.0)
    pi /= pi.sum(axis=1, keepdims=True)
    touched = np.zeros(C, dtype=bool)
    for K in Ks:
        touched |= np.any(K != 0, axis=(1, 2))
    if class_weights is not None:
        touched |= (part.indicator() @ class_weights).sum(axis=1) > 0
    pi[~touched] = 1.0 / A
    return part.policy(pi)


def ipm_block_value(block: IpmBlock, policy: Policy) -> float:
    pushed = np.einsum("sa,saj->j", policy.action_dist, block.coef)
    return float(block.weight * np.sum(np.maximum(pushed - block.target, 0.0)))


def fail_block(m: TabularMDP, rho_t: np.ndarray, expert_next: np.ndarray, part_next: StateAggregationClass) -> IpmBlock:
    ind = part_next.indicator()
    coef = rho_t[:, None, None] * (m.transition @ ind.T)
    return IpmBlock(coef, ind @ expert_next, 1.0)


def cov_fail_blocks(m: TabularMDP, demo: DemoSource, ratio_row: Optional[np.ndarray], part_next, t: int):
    """((state, target) key, block) pairs of the per-state loss at step t."""
    mass, targets = demonstrated_next_states(m, demo, t)
    w = mass if ratio_row is None else mass * np.where(mass > 0, ratio_row, 0.0)
    ind = part_next.indicator()
    agg_next = m.transition @ ind.T  # (S, A, J)
    out = []
    for s in np.flatnonzero(w > 0):
        coef = np.zeros_like(agg_next)
        coef[s] = agg_next[s]
        target = ind @ targets[s]
        key = (int(s), part_next.cell_of.tobytes(), target.tobytes())
        out.append((key, IpmBlock(coef, target, float(w[s]))))
    return out


def minimize_ipm_step(
    m: TabularMDP,
    rho_t: np.ndarray,
    expert_next: np.ndarray,
    cls: StateAggregationClass,
    fclass: FunctionClass,
    t: int,
) -> tuple[Policy, float]:
    """Class policy minimising the next-state IPM to rho*_{t+1} from learner distribution rho_t."""
    block = fail_block(m, np.asarray(rho_t, dtype=float), np.asarray(expert_next, dtype=float), fclass.at(t + 1))
    pol = solve_ipm_program([block], cls)
    return pol, ipm_block_value(block, pol)


def train_bc(demo: DemoSource, cls: StateAggregationClass) -> TrainReport:
    """Behavioural cloning: weighted majority over all demonstrated pairs."""
    W = demo.state_action_weights()
    prob = WeightedClassificationProblem(cls, W.sum(axis=0))
    pol = prob.solve()
    per_step = np.array([loss_cov(pol, demo, None, t) for t in range(1, demo.horizon + 1)])
    return TrainReport("bc", pol, float(per_step.mean()), per_step)


def _check_loss(loss: str):
    if loss not in LOSS_KINDS:
        raise ValueError(f"unknown loss {loss!r}; expected one of {LOSS_KINDS}")


def _ratio_row(rho_t, expert_t, alpha, clip) -> RatioEstimate:
    return estimate_density_ratio(rho_t[None], expert_t[None], alpha, clip)


def _learner_occupancy(bundle: EnvBundle, policy: AnyPolicy, n_rollouts, rng) -> np.ndarray:
    if n_rollouts is None:
        return exact_occupancy(bundle.mdp, policy).per_step
    states, _ = rollouts(bundle.mdp, policy, n_rollouts, rng)
    return empirical_state_frequencies(states, bundle.mdp.num_states)


def forward_train(
    bundle: EnvBundle,
    demo: DemoSource,
    loss: str = "cov",
    fclass: Optional[FunctionClass] = None,
    alpha: float = 1.0,
    clip: Optional[float] = None,
    n_rollouts: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrainReport:
    """Train one class policy per timestep, rolling the learner forward in between.

    The last step has no next state, so the moment-matching losses fall back to
    the ratio-weighted classification there.
    """
    _check_loss(loss)
    m, cls = bundle.mdp, bundle.learner_class
    S, A, T = m.num_states, m.num_actions, m.horizon
    fclass = fclass or FunctionClass.full(S)
    expert_rho = demo.state_occupancy()
    W = demo.state_action_weights()
    if n_rollouts is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        particles = np.searchsorted(np.cumsum(m.initial_dist), rng.random(n_rollouts) * m.initial_dist.sum(), side="right")
        particles = np.minimum(particles, S - 1)
    rho = m.initial_dist.copy()
    steps, losses = [], []
    for t in range(1, T + 1):
        ratio = None
        if loss in ("cov", "cov_fail"):
            ratio = _ratio_row(rho, expert_rho[t - 1], alpha, clip)
            check_finite(ratio, demo, rho[None])
        if loss == "fail" and t < T:
            pol, _ = minimize_ipm_step(m, rho, expert_rho[t], cls, fclass, t)
        elif loss == "cov_fail" and t < T:
            blocks = [b for _, b in cov_fail_blocks(m, demo, ratio.per_step[0], fclass.at(t + 1), t)]
            pol = solve_ipm_program(blocks, cls) if blocks else WeightedClassificationProblem.empty(cls, A).solve()
            step_loss = sum(ipm_block_value(b, pol) for b in blocks)
        else:
            w = W[t - 1] if ratio is None else W[t - 1] * np.where(W[t - 1] > 0, ratio.per_step[0][:, None], 0.0)
            pol = WeightedClassificationProblem(cls, w).solve()
        steps.append(pol)
        # Losses are reported at the learner's own distribution.
        if loss == "cov":
            losses.append(_cov_at(pol, W[t - 1], ratio.per_step[0]))
        elif loss == "fail":
            losses.append(loss_fail(m, pol, demo, rho, fclass, t).value)
        else:
            losses.append(step_loss if t < T else 0.0)
        if t < T:
            if n_rollouts is None:
                rho = np.einsum("s,sa,sax->x", rho, pol.action_dist, m.transition)
            else:
                particles = _advance(m, pol, particles, rng)
                rho = np.bincount(particles, minlength=S) / n_rollouts
    per_step = np.array(losses)
    return TrainReport(f"alice_{loss}_forward", PolicySequence(tuple(steps)), float(per_step.max()), per_step)


def _advance(m: TabularMDP, pol: Policy, particles: np.ndarray, rng) -> np.ndarray:
    a = _sample_rows(pol.action_dist[particles], rng)
    return _sample_rows(m.transition[particles, a], rng)


def _cov_at(pol: Policy, W_t: np.ndarray, ratio_row: np.ndarray) -> float:
    w = W_t * np.where(W_t > 0, ratio_row[:, None], 0.0)
    return float(np.sum(w * (1.0 - pol.action_dist)))


def alice_losses(
    bundle: EnvBundle,
    demo: DemoSource,
    policy: AnyPolicy,
    loss: str,
    fclass: Optional[FunctionClass] = None,
    alpha: float = 1.0,
    clip: Optional[float] = None,
) -> tuple[np.ndarray, RatioEstimate]:
    """Per-step training loss of `policy` at its own exact occupancy, plus the ratio used."""
    _check_loss(loss)
    m = bundle.mdp
    fclass = fclass or FunctionClass.full(m.num_states)
    rho = exact_occupancy(m, policy).per_step
    truth = (rho, exact_occupancy(m, bundle.expert).per_step)
    ratio = estimate_density_ratio(rho, demo.state_occupancy(), alpha, clip, *truth)
    out = np.zeros(m.horizon)
    for t in range(1, m.horizon + 1):
        if loss == "cov":
            out[t - 1] = loss_cov(policy, demo, ratio, t)
        elif loss == "fail":
            out[t - 1] = loss_fail(m, policy, demo, rho[t - 1], fclass, t).value
        else:
            out[t - 1] = loss_cov_fail(m, policy, demo, ratio, fclass, t)
    return out, ratio


def validation_metric(bundle: EnvBundle, demo: DemoSource, policy: AnyPolicy) -> float:
    """On-policy mismatch in exact mode, held-out demonstration disagreement in sampled mode."""
    if demo.is_exact or not demo.validation_ids:
        return on_policy_mismatch(bundle.mdp, policy, bundle.expert)
    W = demo.state_action_weights("validation")
    return float(np.sum(W * (1.0 - policy_tensor(policy, bundle.mdp))) / demo.horizon)


def _pick(records: list[dict]) -> int:
    best = min(r["validation"] for r in records)
    return next(r["iteration"] for r in records if r["validation"] <= best + TIE_TOL)


def iterative_train(
    bundle: EnvBundle,
    demo: DemoSource,
    loss: str = "cov",
    fclass: Optional[FunctionClass] = None,
    iterations: int = 10,
    alpha: float = 1.0,
    clip: Optional[float] = None,
    n_rollouts: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    ratio_mode: str = "per_step",
) -> TrainReport:
    """Stationary learner trained by follow-the-leader on losses collected at each iterate.

    Starts from behavioural cloning and returns the iterate with the best
    validation metric among all N + 1 candidates. ``ratio_mode="average"`` uses
    one ratio of time-averaged occupancies for every step.
    """
    _check_loss(loss)
    if ratio_mode not in ("per_step", "average"):
        raise ValueError(f"ratio_mode must be per_step or average, got {ratio_mode!r}")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    m, cls = bundle.mdp, bundle.learner_class
    S, A, T = m.num_states, m.num_actions, m.horizon
    fclass = fclass or FunctionClass.full(S)
    if n_rollouts is not None and rng is None:
        rng = np.random.default_rng(0)
    expert_rho = demo.state_occupancy()
    W = demo.state_action_weights()
    data = AggregatedLossDataset(WeightedClassificationProblem.empty(cls, A))
    policies = [train_bc(demo, cls).policy]
    for _ in range(iterations):
        rho = _learner_occupancy(bundle, policies[-1], n_rollouts, rng)
        if ratio_mode == "average":
            avg = estimate_density_ratio(rho.mean(axis=0)[None], expert_rho.mean(axis=0)[None], alpha, clip)
            ratio = RatioEstimate(np.repeat(avg.per_step, T, axis=0), alpha, clip, None)
        else:
            ratio = estimate_density_ratio(rho, expert_rho, alpha, clip)
        if loss in ("cov", "cov_fail"):
            check_finite(ratio, demo, rho)
        if loss == "cov":
            r = np.where(W > 0, ratio.per_step[:, :, None], 0.0)
            data.classification.add(np.sum(W * r, axis=0))
        elif loss == "fail":
            k = len(policies)
            for t in range(1, T):
                data.add_block((k, t), fail_block(m, rho[t - 1], expert_rho[t], fclass.at(t + 1)))
        else:
            for t in range(1, T):
                for key, block in cov_fail_blocks(m, demo, ratio.per_step[t - 1], fclass.at(t + 1), t):
                    data.add_block(key, block)
        data.iterations += 1
        policies.append(data.solve())
    records = []
    for i, pol in enumerate(policies, start=1):
        per_step, _ = alice_losses(bundle, demo, pol, loss, fclass, alpha, clip)
        records.append({"iteration": i, "validation": validation_metric(bundle, demo, pol), "loss": float(per_step.max())})
    chosen = _pick(records)
    pol = policies[chosen - 1]
    per_step, _ = alice_losses(bundle, demo, pol, loss, fclass, alpha, clip)
    return TrainReport(f"alice_{loss}_iterative", pol, float(per_step.max()), per_step, records, chosen)


def train_dagger(
    bundle: EnvBundle,
    demo: Optional[DemoSource] = None,
    iterations: int = 10,
    n_rollouts: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> TrainReport:
    """Dataset aggregation with pure learner roll-in and expert relabelling."""
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    m, cls, expert = bundle.mdp, bundle.learner_class, bundle.expert
    S, A, T = m.num_states, m.num_actions, m.horizon
    if n_rollouts is not None and rng is None:
        rng = np.random.default_rng(0)
    data = WeightedClassificationProblem.empty(cls, A)
    if demo is not None:
        data.add(demo.state_action_weights().sum(axis=0))
    policies = [data.solve()]
    for _ in range(iterations):
        rho = _learner_occupancy(bundle, policies[-1], n_rollouts, rng)
        data.add(rho.sum(axis=0)[:, None] * expert.action_dist)
        policies.append(data.solve())
    records = []
    for i, pol in enumerate(policies, start=1):
        mm = on_policy_mismatch(m, pol, expert)
        records.append({"iteration": i, "validation": mm, "loss": mm})
    chosen = _pick(records)
    pol = policies[chosen - 1]
    rho = exact_occupancy(m, pol).per_step
    per_step = np.sum(rho * mismatch_cost(m, pol, expert), axis=1)
    return TrainReport("dagger", pol, float(per_step.mean()), per_step, records, chosen, interactive=True)
