"""Data-sharing experiment driver: method definitions, single runs, and sweeps.

A run takes a labeled dataset d0 and a reward-free dataset d1, annotates d1
according to the method, and hands the union to the pessimistic solver:

    pds            lower-confidence reward (prediction minus ellipsoid width)
    uds            zero reward everywhere
    reward_predict plain clamped prediction
    oracle         true rewards (diagnostic upper baseline)
    no_share       drops d1 entirely

Suboptimality is measured against the exact optimal policy, reported both
in expectation over the initial distribution and as the worst state. Sweeps
re-run the grid cell by cell; dataset seeds derive from the cell coordinates
only, so every method inside a cell sees identical data, and parallel
execution returns exactly the serial results.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from pdslab.data import OfflineDataset, coverage_coefficient, mix_datasets, sample_dataset
from pdslab.mdp import LinearMdp, Policy, evaluate_policy, solve_optimal
from pdslab.pevi import PeviConfig, pevi_solve, theorem_beta
from pdslab.reward import fit_reward, relabel

QUALITIES = ("expert", "medium", "random")
_EPS_GREEDY = {"expert": 0.05, "medium": 0.3}

CSV_HEADER = "method,n0,n1,c0,c1,gamma,d,seed,subopt_mean,subopt_max,vhat_start,wall_ms"


class MethodId(Enum):
    PDS = "pds"
    UDS = "uds"
    REWARD_PREDICT = "reward_predict"
    ORACLE = "oracle"
    NO_SHARE = "no_share"


_RELABEL_MODE = {
    MethodId.PDS: "pds",
    MethodId.UDS: "uds",
    MethodId.REWARD_PREDICT: "predict",
    MethodId.ORACLE: "oracle",
}


def behavior_policy(mdp: LinearMdp, quality: str, optimal: Policy | None = None) -> Policy:
    """Dataset-quality presets: expert/medium mix the optimal policy with
    uniform exploration (epsilon 0.05 / 0.3), random is uniform."""
    if quality not in QUALITIES:
        raise ValueError(f"quality must be one of {QUALITIES}, got {quality!r}")
    if quality == "random":
        return Policy.uniform(mdp.num_states, mdp.num_actions)
    if optimal is None:
        optimal = solve_optimal(mdp)[0]
    return optimal.mixed_with_uniform(_EPS_GREEDY[quality])


@dataclass(frozen=True)
class RewardSettings:
    nu: float = 1.0
    delta: float = 0.1
    alpha_mode: str = "lemma"


@dataclass(frozen=True)
class PeviSettings:
    lambda_reg: float = 1.0
    delta: float = 0.1
    c: float = 1.0
    beta_override: float | None = None
    tol: float | None = None
    max_sweeps: int | None = None

    def config_for(self, mdp: LinearMdp, n_total: int) -> PeviConfig:
        if self.beta_override is not None:
            beta = self.beta_override
        else:
            beta = theorem_beta(mdp.dim, n_total, mdp.gamma, mdp.r_max, self.delta, self.c)
        return PeviConfig.for_mdp(
            mdp.gamma, mdp.r_max, beta, lambda_reg=self.lambda_reg,
            tol=self.tol, max_sweeps=self.max_sweeps,
        )


@dataclass(frozen=True)
class RunResult:
    method: MethodId
    n0: int
    n1: int
    c0_dagger: float
    c1_dagger: float
    gamma: float
    dim: int
    seed: int
    subopt_mean: float
    subopt_max: float
    v_hat_start: float
    wall_time_ms: float
    converged: bool
    policy_actions: tuple = ()

    def __post_init__(self):
        if self.subopt_mean < -1e-8 or self.subopt_max < -1e-8:
            raise ValueError(
                f"negative suboptimality beyond oracle tolerance: {self.subopt_mean}"
            )

    def csv_row(self) -> str:
        return ",".join([
            self.method.value,
            str(self.n0),
            str(self.n1),
            repr(self.c0_dagger),
            repr(self.c1_dagger),
            repr(self.gamma),
            str(self.dim),
            str(self.seed),
            repr(self.subopt_mean),
            repr(self.subopt_max),
            repr(self.v_hat_start),
            f"{self.wall_time_ms:.3f}",
        ])


def run_method(
    mdp: LinearMdp,
    d0: OfflineDataset,
    d1: OfflineDataset | None,
    method: MethodId,
    reward_cfg: RewardSettings = RewardSettings(),
    pevi_cfg: PeviSettings = PeviSettings(),
    seed: int = 0,
    oracle: tuple | None = None,
) -> RunResult:
    """Execute one method on one dataset pair and measure exact suboptimality.

    oracle, if given, is a precomputed (optimal_policy, optimal_values) pair;
    sweeps pass it to avoid re-solving the same MDP hundreds of times.
    """
    start = time.perf_counter()
    method = MethodId(method)
    if not d0.labeled or len(d0) == 0:
        raise ValueError("run_method requires nonempty labeled d0")
    if d1 is None:
        if method is not MethodId.NO_SHARE:
            raise ValueError(f"{method.value} needs an unlabeled dataset (may be empty)")
    elif d1.labeled:
        raise ValueError("d1 must be reward-free")

    if oracle is None:
        oracle = solve_optimal(mdp)
    optimal_policy, optimal_values = oracle

    model = fit_reward(
        d0, mdp.features, nu=reward_cfg.nu, delta=reward_cfg.delta,
        r_max=mdp.r_max, alpha_mode=reward_cfg.alpha_mode,
    )
    if method is MethodId.NO_SHARE or d1 is None or len(d1) == 0:
        train = d0
    else:
        annotated = relabel(
            d1, model, mdp.features, mode=_RELABEL_MODE[method],
            mdp=mdp if method is MethodId.ORACLE else None,
        )
        train = mix_datasets(d0, annotated)

    solution = pevi_solve(train, mdp.features, pevi_cfg.config_for(mdp, len(train)))
    achieved = evaluate_policy(mdp, solution.policy)
    gaps = optimal_values.v - achieved.v

    c0 = coverage_coefficient(d0, mdp, optimal_policy).c_dagger
    c1 = (
        coverage_coefficient(d1, mdp, optimal_policy).c_dagger
        if d1 is not None and len(d1) > 0 else 0.0
    )
    wall_ms = (time.perf_counter() - start) * 1e3
    return RunResult(
        method=method,
        n0=len(d0),
        n1=0 if d1 is None else len(d1),
        c0_dagger=c0,
        c1_dagger=c1,
        gamma=mdp.gamma,
        dim=mdp.dim,
        seed=seed,
        subopt_mean=float(mdp.init_dist @ gaps),
        subopt_max=float(gaps.max()),
        v_hat_start=float(mdp.init_dist @ solution.v_hat),
        wall_time_ms=wall_ms,
        converged=solution.converged,
        policy_actions=tuple(int(a) for a in np.argmax(solution.policy.probs, axis=1)),
    )


@dataclass(frozen=True)
class SweepGrid:
    n0_values: tuple
    n1_values: tuple
    methods: tuple
    seeds: tuple
    labeled_quality: str = "medium"
    unlabeled_quality: str = "expert"
    noise: bool | float = False
    horizon_reset: int = 100
    reward: RewardSettings = field(default_factory=RewardSettings)
    pevi: PeviSettings = field(default_factory=PeviSettings)

    def __post_init__(self):
        if not self.n0_values or not self.n1_values or not self.methods or not self.seeds:
            raise ValueError("grid axes must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if any(n < 1 for n in self.n0_values):
            raise ValueError("n0 values must be >= 1")
        if any(n < 0 for n in self.n1_values):
            raise ValueError("n1 values must be >= 0")
        for q in (self.labeled_quality, self.unlabeled_quality):
            if q not in QUALITIES:
                raise ValueError(f"quality must be one of {QUALITIES}, got {q!r}")
        object.__setattr__(self, "methods", tuple(MethodId(m) for m in self.methods))


@dataclass(frozen=True)
class SweepReport:
    results: tuple
    failures: tuple


def _cell_seeds(seed: int, n0: int, n1: int, grid: SweepGrid) -> tuple[int, int]:
    # dataset randomness is keyed by the cell coordinates alone; the method
    # axis must never perturb the data it is compared on
    key = [
        int(seed), int(n0), int(n1),
        QUALITIES.index(grid.labeled_quality),
        QUALITIES.index(grid.unlabeled_quality),
    ]
    state = np.random.SeedSequence(key).generate_state(2)
    return int(state[0]), int(state[1])


def _run_cell(mdp: LinearMdp, grid: SweepGrid, n0: int, n1: int, seed: int, oracle, behaviors):
    d0_seed, d1_seed = _cell_seeds(seed, n0, n1, grid)
    pi0, pi1 = behaviors
    d0 = sample_dataset(mdp, pi0, n=n0, horizon_reset=grid.horizon_reset,
                        labeled=True, seed=d0_seed, noise=grid.noise)
    if n1 > 0:
        d1 = sample_dataset(mdp, pi1, n=n1, horizon_reset=grid.horizon_reset,
                            labeled=False, seed=d1_seed)
    else:
        d1 = OfflineDataset([], [], None, [], labeled=False,
                            num_states=mdp.num_states, num_actions=mdp.num_actions)
    out, failures = [], []
    for method in grid.methods:
        try:
            out.append(run_method(mdp, d0, d1, method, grid.reward, grid.pevi,
                                  seed=seed, oracle=oracle))
        except Exception as exc:  # cell failures are data, not crashes
            failures.append({
                "method": method.value, "n0": n0, "n1": n1, "seed": seed,
                "error": f"{type(exc).__name__}: {exc}",
            })
    return out, failures


def sweep(mdp: LinearMdp, grid: SweepGrid) -> SweepReport:
    """Run every (n0, n1, seed) cell of the grid, all methods per cell."""
    oracle = solve_optimal(mdp)
    behaviors = (
        behavior_policy(mdp, grid.labeled_quality, oracle[0]),
        behavior_policy(mdp, grid.unlabeled_quality, oracle[0]),
    )
    cells = [
        (n0, n1, seed)
        for n0 in grid.n0_values
        for n1 in grid.n1_values
        for seed in grid.seeds
    ]
    threads = max(1, int(os.environ.get("PDSLAB_THREADS", "1")))
    if threads == 1:
        outcomes = [_run_cell(mdp, grid, n0, n1, seed, oracle, behaviors)
                    for n0, n1, seed in cells]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_run_cell, mdp, grid, n0, n1, seed, oracle, behaviors)
                       for n0, n1, seed in cells]
            outcomes = [f.result() for f in futures]  # preserves grid order

    results, failures = [], []
    for out, fails in outcomes:
        results.extend(out)
        failures.extend(fails)
    return SweepReport(results=tuple(results), failures=tuple(failures))


def results_to_csv(results) -> str:
    lines = [CSV_HEADER]
    lines.extend(r.csv_row() for r in results)
    return "\n".join(lines) + "\n"


def _group_stats(results, column):
    groups: dict = {}
    for r in results:
        groups.setdefault((r.method, getattr(r, column)), []).append(r.subopt_mean)
    return {
        key: (float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0)
        for key, vals in groups.items()
    }


def markdown_summary(results, column: str = "n1") -> str:
    """Method-by-column table of mean +/- std suboptimality.

    Per column, the best mean among methods without true-reward access is
    bolded, along with every such method within one pooled standard
    deviation of it (ties bold together).
    """
    results = list(results)
    if not results:
        raise ValueError("no results to summarize")
    stats = _group_stats(results, column)
    methods = sorted({r.method for r in results}, key=lambda m: m.value)
    col_values = sorted({getattr(r, column) for r in results})

    bold = set()
    for val in col_values:
        contenders = [m for m in methods if m is not MethodId.ORACLE and (m, val) in stats]
        if not contenders:
            continue
        best = min(stats[(m, val)][0] for m in contenders)
        variances = [stats[(m, val)][1] ** 2 for m in contenders]
        pooled = float(np.sqrt(np.mean(variances)))
        for m in contenders:
            if stats[(m, val)][0] <= best + pooled:
                bold.add((m, val))

    header = "| method | " + " | ".join(f"{column}={v}" for v in col_values) + " |"
    sep = "|" + "---|" * (len(col_values) + 1)
    lines = [header, sep]
    for m in methods:
        cells = []
        for val in col_values:
            if (m, val) not in stats:
                cells.append("-")
                continue
            mean, std = stats[(m, val)]
            text = f"{mean:.4f} ± {std:.4f}"
            cells.append(f"**{text}**" if (m, val) in bold else text)
        lines.append(f"| {m.value} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"
