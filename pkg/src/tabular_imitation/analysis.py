"""Horizon sweeps, regret-scaling fits and numerical checks of the regret bounds."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .demonstrations import DemoSource, collect_demos, exact_demo
from .environments import EnvBundle, StateAggregationClass, make_env
from .learners import (
    LpFailure,
    TrainReport,
    alice_losses,
    forward_train,
    iterative_train,
    minimize_ipm_step,
    train_bc,
    train_dagger,
    validation_metric,
)
from .losses import FunctionClass, HardRegimeError, bc_loss, inherent_bellman_error, value_in_class
from .mdp import (
    advantage_span,
    density_ratio_sup,
    exact_occupancy,
    on_policy_mismatch,
    policy_value,
    value_tables,
)

ALGORITHMS = ("bc", "dagger", "alice_cov", "alice_fail", "alice_cov_fail")
THEOREMS = ("bc_quadratic", "dagger_linear", "bc_goldilocks", "alice_cov", "alice_fail", "alice_cov_fail")
SWEEP_COLUMNS = (
    "env", "params", "T", "algo", "seed", "regret", "mismatch", "epsilon", "gamma", "C", "u", "ibe",
    "bound_thm", "bound_rhs", "holds", "slack",
)
FIT_COLUMNS = ("env", "algo", "beta", "intercept", "r2", "n_points", "n_excluded")
HOLD_TOL = 1e-9
ALPHA_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
ZERO_REGRET = 1e-12


class NotApplicable(ValueError):
    """The theorem's standing assumptions fail for this run."""


@dataclass(frozen=True)
class AlgoSpec:
    name: str
    training: str = "forward"  # forward | iterative, for the ratio-corrected learners
    fclass: str = "full"  # full | learner | constant
    alpha: Optional[float] = None  # None: 1 in exact mode, tuned on ALPHA_GRID in sampled mode
    clip: Optional[float] = None
    iterations: int = 10

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.name!r}; expected one of {ALGORITHMS}")
        if self.training not in ("forward", "iterative"):
            raise ValueError(f"training must be forward or iterative, got {self.training!r}")
        if self.fclass not in ("full", "learner", "constant"):
            raise ValueError(f"fclass must be full, learner or constant, got {self.fclass!r}")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")

    @property
    def label(self) -> str:
        if self.name in ("bc", "dagger"):
            return self.name
        tag = "fwd" if self.training == "forward" else "it"
        return f"{self.name}_{tag}"

    @property
    def loss(self) -> Optional[str]:
        return self.name[len("alice_"):] if self.name.startswith("alice_") else None

    def function_class(self, bundle: EnvBundle) -> FunctionClass:
        S = bundle.mdp.num_states
        if self.fclass == "learner":
            return FunctionClass(bundle.learner_class)
        if self.fclass == "constant":
            return FunctionClass.constant(S)
        return FunctionClass.full(S)


@dataclass
class RunResult:
    bundle: EnvBundle
    spec: AlgoSpec
    demo: DemoSource
    report: TrainReport
    seed: int = 0
    alpha: float = 1.0  # ratio exponent actually used


@dataclass(frozen=True)
class Measurements:
    """Everything a bound check needs, measured on one trained policy."""

    T: int
    regret: float
    mismatch: float  # on-policy disagreement averaged over t
    eps_bc: float  # expert-distribution classification loss
    eps_alice: Optional[float]  # max_t of the training loss at the learner's own distribution
    gamma: float
    C: float
    u: float
    ibe: Optional[float]
    value_in_fclass: Optional[bool]
    recoverability: Optional[float] = None  # max_t best unrestricted next-state IPM from the learner's rho_t


@dataclass(frozen=True)
class BoundCheck:
    theorem: str
    epsilon: float
    rhs: float
    holds: bool
    slack: float


def run_algorithm(
    bundle: EnvBundle,
    spec: AlgoSpec,
    demo: Optional[DemoSource] = None,
    mode: str = "exact",
    seed: int = 0,
    n_demos: int = 200,
    n_rollouts: int = 100,
) -> RunResult:
    """Train one algorithm; demonstrations are exact or sampled from `seed`."""
    rng = np.random.default_rng(seed)
    if demo is None:
        demo = exact_demo(bundle) if mode == "exact" else collect_demos(bundle, n_demos, rng, seed=seed)
    rollouts_n = None if mode == "exact" else n_rollouts
    cls = bundle.learner_class
    alpha = 1.0 if spec.alpha is None else spec.alpha
    if spec.name == "bc":
        report = train_bc(demo, cls)
    elif spec.name == "dagger":
        report = train_dagger(bundle, demo, spec.iterations, rollouts_n, rng)
    elif spec.alpha is None and mode == "sampled" and spec.loss in ("cov", "cov_fail"):
        report, alpha = _tune_alpha(bundle, spec, demo, rollouts_n, seed)
    else:
        report = _train_alice(bundle, spec, demo, alpha, rollouts_n, rng)
    return RunResult(bundle, spec, demo, report, seed, alpha)


def _train_alice(bundle, spec, demo, alpha, rollouts_n, rng) -> TrainReport:
    kw = dict(fclass=spec.function_class(bundle), alpha=alpha, clip=spec.clip, n_rollouts=rollouts_n, rng=rng)
    if spec.training == "forward":
        return forward_train(bundle, demo, spec.loss, **kw)
    return iterative_train(bundle, demo, spec.loss, iterations=spec.iterations, **kw)


def _tune_alpha(bundle, spec, demo, rollouts_n, seed) -> tuple[TrainReport, float]:
    """Pick the ratio exponent with the best held-out validation metric.

    Candidates that hit an infinite ratio are skipped; alpha = 0 never does.
    """
    best = None
    for k, alpha in enumerate(ALPHA_GRID):
        try:
            rep = _train_alice(bundle, spec, demo, alpha, rollouts_n, np.random.default_rng([seed, k]))
        except HardRegimeError:
            continue
        score = validation_metric(bundle, demo, rep.policy)
        if best is None or score < best[0] - 1e-12:
            best = (score, rep, alpha)
    return best[1], best[2]


def measure(run: RunResult) -> Measurements:
    b, spec, pol = run.bundle, run.spec, run.report.policy
    m, expert = b.mdp, b.expert
    regret = policy_value(m, pol) - policy_value(m, expert)
    eps_alice = ibe = in_f = recov = None
    gamma = 0.0
    if spec.loss is not None:
        fc = spec.function_class(b)
        per_step, ratio = alice_losses(b, run.demo, pol, spec.loss, fc, run.alpha, spec.clip)
        eps_alice = float(per_step.max())
        gamma = float(ratio.gamma_bound)
        if spec.loss in ("fail", "cov_fail"):
            in_f = _values_in_class(b, fc)
            if spec.loss == "fail":
                ibe = inherent_bellman_error(m, expert, fc)
                recov = recoverability_level(b, pol, fc, run.demo)
    return Measurements(
        T=m.horizon,
        regret=float(regret),
        mismatch=on_policy_mismatch(m, pol, expert),
        eps_bc=_expert_loss(b, pol),
        eps_alice=eps_alice,
        gamma=gamma,
        C=density_ratio_sup(m, pol, expert),
        u=advantage_span(m, expert),
        ibe=ibe,
        value_in_fclass=in_f,
        recoverability=recov,
    )


def recoverability_level(bundle: EnvBundle, policy, fc: FunctionClass, demo: DemoSource) -> float:
    """How far an unrestricted policy must stay from the expert's next-state moments.

    Measured along the learner's own state distributions; zero means every step
    is one-step recoverable with respect to the moment class.
    """
    m = bundle.mdp
    rho = exact_occupancy(m, policy).per_step
    expert_rho = demo.state_occupancy()
    free = StateAggregationClass.singleton(m.num_states)
    worst = 0.0
    for t in range(1, m.horizon):
        _, val = minimize_ipm_step(m, rho[t - 1], expert_rho[t], free, fc, t)
        worst = max(worst, val)
    return worst


def _expert_loss(bundle: EnvBundle, policy) -> float:
    """Time-averaged E_{rho*_t}[1 - sum_a pi(a|s) pi*(a|s)] on the exact expert distribution."""
    return bc_loss(policy, exact_demo(bundle))


def _values_in_class(bundle: EnvBundle, fc: FunctionClass) -> bool:
    v = value_tables(bundle.mdp, bundle.expert).v
    T = bundle.mdp.horizon
    return all(value_in_class(v[t], fc.at(t + 1)) for t in range(1, T))


def applicable_theorems(spec: AlgoSpec) -> tuple[str, ...]:
    return {
        "bc": ("bc_quadratic", "bc_goldilocks"),
        "dagger": ("bc_quadratic", "dagger_linear"),
        "alice_cov": ("alice_cov",),
        "alice_fail": ("alice_fail",),
        "alice_cov_fail": ("alice_cov_fail",),
    }[spec.name]


def bound_rhs(theorem: str, ms: Measurements) -> tuple[float, float]:
    """(epsilon used, right-hand side) of a theorem; raises NotApplicable if assumptions fail."""
    T, u, C = ms.T, ms.u, ms.C
    if theorem == "bc_quadratic":
        return ms.mismatch, T * T * ms.mismatch
    if theorem == "dagger_linear":
        return ms.mismatch, u * T * ms.mismatch
    if theorem == "bc_goldilocks":
        eps = ms.eps_bc
        quad = T * T * eps
        if math.isinf(C):
            return eps, quad
        return eps, min(T * C * u * eps, quad)
    if theorem not in THEOREMS:
        raise ValueError(f"unknown theorem {theorem!r}")
    if ms.eps_alice is None:
        raise ValueError(f"{theorem} needs a ratio-corrected training loss")
    eps = ms.eps_alice
    if math.isinf(C) and theorem != "alice_fail":
        raise NotApplicable("learner reaches states outside the expert's support")
    if theorem == "alice_cov":
        return eps, T * u * (eps + ms.gamma)
    if not ms.value_in_fclass:
        raise NotApplicable("expert value function is not representable in the moment class")
    if theorem == "alice_fail":
        if ms.ibe is None:
            raise ValueError("alice_fail needs the inherent Bellman error")
        return eps, 2.0 * T * (eps + ms.ibe)
    return eps, T * (eps + u * ms.gamma)


def verify_bound(theorem: str, ms: Measurements) -> BoundCheck:
    eps, rhs = bound_rhs(theorem, ms)
    slack = rhs - ms.regret
    return BoundCheck(theorem, float(eps), float(rhs), bool(slack >= -HOLD_TOL), float(slack))


@dataclass
class SweepRow:
    env: str
    params: str
    T: int
    algo: str
    seed: int
    regret: float
    mismatch: float
    epsilon: float
    gamma: float
    C: float
    u: float
    ibe: float
    bound_thm: str
    bound_rhs: float
    holds: str  # "true" | "false" | "n/a"
    slack: float


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _row_key(r: SweepRow):
    return (r.env, r.params, r.T, r.algo, r.seed, r.bound_thm)


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    errors: list = field(default_factory=list)  # (env, T, algo, seed, message)

    def sorted_rows(self) -> list[SweepRow]:
        return sorted(self.rows, key=_row_key)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.sorted_rows():
            w.writerow([_fmt(getattr(r, c)) for c in SWEEP_COLUMNS])
        return buf.getvalue()

    def errors_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["env", "T", "algo", "seed", "message"])
        w.writerows(sorted(self.errors))
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"sweep CSV columns must be {SWEEP_COLUMNS}")
        rows = []
        for d in reader:
            rows.append(SweepRow(
                env=d["env"], params=d["params"], T=int(d["T"]), algo=d["algo"], seed=int(d["seed"]),
                regret=float(d["regret"]), mismatch=float(d["mismatch"]), epsilon=float(d["epsilon"]),
                gamma=float(d["gamma"]), C=float(d["C"]), u=float(d["u"]), ibe=float(d["ibe"]),
                bound_thm=d["bound_thm"], bound_rhs=float(d["bound_rhs"]), holds=d["holds"], slack=float(d["slack"]),
            ))
        return cls(rows)

    def violations(self) -> list[SweepRow]:
        return [r for r in self.rows if r.holds == "false"]

    def regrets(self, env: str, algo: str) -> dict[int, list[float]]:
        """Regret per horizon, one value per distinct seed."""
        out: dict[int, dict[int, float]] = {}
        for r in self.rows:
            if r.env == env and r.algo == algo:
                out.setdefault(r.T, {})[r.seed] = r.regret
        return {T: list(v.values()) for T, v in sorted(out.items())}


def rows_for_run(env: str, params: dict, run: RunResult, theorems: bool = True) -> list[SweepRow]:
    ms = measure(run)
    base = dict(
        env=env,
        params=json.dumps(params, sort_keys=True),
        T=ms.T,
        algo=run.spec.label,
        seed=run.seed,
        regret=ms.regret,
        mismatch=ms.mismatch,
        gamma=ms.gamma,
        C=ms.C,
        u=ms.u,
        ibe=ms.ibe if ms.ibe is not None else 0.0,
    )
    default_eps = ms.eps_alice if ms.eps_alice is not None else ms.eps_bc
    if not theorems:
        return [SweepRow(**base, epsilon=default_eps, bound_thm="none", bound_rhs=float("nan"), holds="n/a",
                         slack=float("nan"))]
    rows = []
    for thm in applicable_theorems(run.spec):
        try:
            chk = verify_bound(thm, ms)
        except NotApplicable:
            rows.append(SweepRow(**base, epsilon=default_eps, bound_thm=thm, bound_rhs=float("nan"), holds="n/a",
                                 slack=float("nan")))
            continue
        rows.append(SweepRow(**base, epsilon=chk.epsilon, bound_thm=thm, bound_rhs=chk.rhs,
                             holds="true" if chk.holds else "false", slack=chk.slack))
    return rows


def horizon_sweep(
    env: str,
    params: dict,
    T_list: Sequence[int],
    algorithms: Sequence[AlgoSpec],
    seeds: Sequence[int] = (0,),
    mode: str = "exact",
    theorems: bool = True,
    n_demos: int = 200,
    n_rollouts: int = 100,
    factory: Callable[..., EnvBundle] = make_env,
    min_horizons: int = 4,
    on_run: Optional[Callable[[RunResult], None]] = None,
) -> SweepResult:
    """Train every algorithm at every (horizon, seed) and record regret plus bound checks."""
    T_list = list(T_list)
    if len(T_list) < min_horizons or T_list != sorted(T_list):
        raise ValueError(f"T_list must be sorted ascending with at least {min_horizons} horizons")
    if mode not in ("exact", "sampled"):
        raise ValueError(f"mode must be exact or sampled, got {mode!r}")
    seeds = list(seeds)
    if mode == "exact":
        seeds = seeds[:1]  # exact mode has no randomness: one row per (T, algorithm)
    result = SweepResult()
    for T in T_list:
        bundle = factory(env, T, **params)
        for seed in seeds:
            demo = None
            if mode == "sampled":
                demo = collect_demos(bundle, n_demos, np.random.default_rng(seed), seed=seed)
            for spec in algorithms:
                try:
                    run = run_algorithm(bundle, spec, demo, mode, seed, n_demos, n_rollouts)
                except (HardRegimeError, LpFailure) as exc:
                    result.errors.append((env, T, spec.label, seed, str(exc)))
                    continue
                if on_run is not None:
                    on_run(run)
                result.rows.extend(rows_for_run(env, params, run, theorems))
    return result


@dataclass(frozen=True)
class ExponentFit:
    env: str
    algo: str
    beta: float
    intercept: float
    r_squared: float
    T_range: tuple
    n_points: int
    n_excluded: int

    def row(self) -> list:
        return [self.env, self.algo, repr(self.beta), repr(self.intercept), repr(self.r_squared),
                self.n_points, self.n_excluded]


def fit_power_law(T: Sequence[float], regret: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares (slope, intercept, r^2) of log regret against log T."""
    x, y = np.log(np.asarray(T, dtype=float)), np.log(np.asarray(regret, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def fit_scaling_exponent(sweep: SweepResult, algorithm: str, env: str) -> ExponentFit:
    """Fit regret ~ T^beta on mean regret per horizon; rows at or below 1e-12 are excluded."""
    per_T = sweep.regrets(env, algorithm)
    Ts, regs, excluded = [], [], 0
    for T, vals in per_T.items():
        r = float(np.mean(vals))
        if r <= ZERO_REGRET:
            excluded += 1
            continue
        Ts.append(T)
        regs.append(r)
    if len(Ts) < 4:
        raise ValueError(f"{algorithm} on {env}: only {len(Ts)} positive-regret horizons, need 4")
    beta, intercept, r2 = fit_power_law(Ts, regs)
    return ExponentFit(env, algorithm, beta, intercept, r2, tuple(Ts), len(Ts), excluded)


def fits_to_csv(fits: Sequence[ExponentFit]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIT_COLUMNS)
    for f in fits:
        w.writerow(f.row())
    return buf.getvalue()


def plot_rows(sweep: SweepResult) -> list[list]:
    """(env, algo, T, log T, log regret) per positive-regret horizon."""
    out = []
    seen = sorted({(r.env, r.algo) for r in sweep.rows})
    for env, algo in seen:
        for T, vals in sweep.regrets(env, algo).items():
            r = float(np.mean(vals))
            if r > ZERO_REGRET:
                out.append([env, algo, T, repr(math.log(T)), repr(math.log(r))])
    return out


# Environment presets used by the bound suite and the scaling experiments.
SEPARATION_ONE_STEP = {"slip": 0.015, "alias": 0.07}
SEPARATION_K_STEP = {"slip": 0.015, "alias": 0.07}
SEPARATION_UNRECOVERABLE = {"slip": 0.0005, "alias": 0.001}
LATCHING_DEFAULT = {"signal_noise": 0.3, "slip": 0.05}
SMOOTHED_RECOV = {"slip": 0.1, "eta": 0.1, "learner_class": "single_cell"}

GOLDILOCKS_SUITE = (
    ("one_step", SMOOTHED_RECOV),
    ("one_step", SEPARATION_ONE_STEP),
    ("k_step", {**SEPARATION_K_STEP, "k": 2}),
    ("unrecoverable", SEPARATION_UNRECOVERABLE),
    ("latching", LATCHING_DEFAULT),
)


def suite_algorithms() -> list[AlgoSpec]:
    specs = [AlgoSpec("bc"), AlgoSpec("dagger")]
    for name in ("alice_cov", "alice_fail", "alice_cov_fail"):
        for training in ("forward", "iterative"):
            specs.append(AlgoSpec(name, training))
    return specs


def spec_to_dict(spec: AlgoSpec) -> dict:
    return asdict(spec)
