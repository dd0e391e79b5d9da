"""Offline dataset sampling, mixing, and exact coverage computation.

Datasets are columnar (state/action/reward/next_state arrays) and immutable
by convention. The coverage coefficient follows the generalized-eigenvalue
reading: the largest C with  (1/N) sum phi phi^T  >=  C * Sigma_{pi*,s}
for every start state s, where Sigma is the (1-gamma)-normalized discounted
occupancy second moment, computed exactly from a linear solve.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pdslab.mdp import LinearMdp, Policy

SIGMA_RANGE_CUTOFF = 1e-10  # eigenvalues of Sigma below this are treated as null space
DEFAULT_NOISE_FRACTION = 0.1  # sigma = 0.1 * r_max when noise is requested without a scale


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float | None
    next_state: int


class OfflineDataset:
    """Ordered transition records with an explicit labeled flag.

    rewards is None for fully reward-free data; otherwise a float array in
    which NaN marks individual missing labels (mixing labeled with
    unlabeled data produces such partial labelings).
    """

    def __init__(
        self,
        states,
        actions,
        rewards,
        next_states,
        labeled: bool,
        num_states: int,
        num_actions: int,
        source_tag: str = "",
        seed: int | None = None,
        mdp_hash: str | None = None,
    ):
        states = np.array(states, dtype=np.int64, copy=True)
        actions = np.array(actions, dtype=np.int64, copy=True)
        next_states = np.array(next_states, dtype=np.int64, copy=True)
        n = states.shape[0]
        if not (actions.shape[0] == next_states.shape[0] == n):
            raise ValueError("state/action/next_state arrays must share length")
        if n > 0:
            if states.min() < 0 or states.max() >= num_states or next_states.min() < 0 or next_states.max() >= num_states:
                raise ValueError("state id out of range")
            if actions.min() < 0 or actions.max() >= num_actions:
                raise ValueError("action id out of range")
        if rewards is not None:
            rewards = np.array(rewards, dtype=float, copy=True)
            if rewards.shape[0] != n:
                raise ValueError("rewards length mismatch")
            finite = rewards[~np.isnan(rewards)]
            if finite.size and finite.min() < -1e-12:
                raise ValueError("rewards must be nonnegative")
        if labeled and n > 0 and (rewards is None or np.isnan(rewards).any()):
            raise ValueError("labeled dataset requires a reward on every transition")
        for a in (states, actions, next_states):
            a.setflags(write=False)
        if rewards is not None:
            rewards = np.clip(rewards, 0.0, None)
            rewards.setflags(write=False)
        self.states = states
        self.actions = actions
        self.rewards = rewards
        self.next_states = next_states
        self.labeled = bool(labeled)
        self.num_states = int(num_states)
        self.num_actions = int(num_actions)
        self.source_tag = source_tag
        self.seed = seed
        self.mdp_hash = mdp_hash

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def transitions(self) -> tuple[Transition, ...]:
        rs = self.rewards
        return tuple(
            Transition(
                int(self.states[i]),
                int(self.actions[i]),
                None if rs is None or np.isnan(rs[i]) else float(rs[i]),
                int(self.next_states[i]),
            )
            for i in range(len(self))
        )

    def feature_rows(self, mdp: LinearMdp) -> np.ndarray:
        """phi(s_tau, a_tau) stacked into an (N, d) matrix."""
        if mdp.num_states < self.num_states or mdp.num_actions < self.num_actions:
            raise ValueError("dataset shape exceeds mdp shape")
        return mdp.features.phi[self.states, self.actions]

    def with_rewards(self, rewards, labeled: bool = True, source_tag: str | None = None) -> "OfflineDataset":
        return OfflineDataset(
            self.states,
            self.actions,
            rewards,
            self.next_states,
            labeled=labeled,
            num_states=self.num_states,
            num_actions=self.num_actions,
            source_tag=self.source_tag if source_tag is None else source_tag,
            seed=self.seed,
            mdp_hash=self.mdp_hash,
        )

    @classmethod
    def from_transitions(
        cls, transitions, num_states: int, num_actions: int, **kwargs
    ) -> "OfflineDataset":
        ts = list(transitions)
        rewards = None
        if any(t.reward is not None for t in ts):
            rewards = np.array(
                [np.nan if t.reward is None else float(t.reward) for t in ts]
            )
        labeled = kwargs.pop("labeled", bool(ts) and all(t.reward is not None for t in ts))
        return cls(
            [t.state for t in ts],
            [t.action for t in ts],
            rewards,
            [t.next_state for t in ts],
            labeled=labeled,
            num_states=num_states,
            num_actions=num_actions,
            **kwargs,
        )


@dataclass(frozen=True)
class CoverageReport:
    c_dagger: float
    gram: np.ndarray                  # (1/N) sum phi phi^T, (d, d)
    per_start_state_values: np.ndarray  # (S,), min generalized eigenvalue per start


def _draw(cumulative: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cumulative, u, side="right"))
    return min(idx, cumulative.shape[0] - 1)


def sample_dataset(
    mdp: LinearMdp,
    behavior: Policy,
    n: int,
    horizon_reset: int = 100,
    labeled: bool = True,
    seed: int = 0,
    noise: bool | float = False,
) -> OfflineDataset:
    """Roll out `behavior`, resetting to the initial distribution every
    horizon_reset steps, until n transitions are collected.

    Rewards are the exact <phi, theta> values; pass noise=True for additive
    uniform noise at the default scale 0.1*r_max, or a float for an explicit
    half-width. Noisy rewards are clipped back to [0, r_max]. Unlabeled
    sampling strips rewards entirely.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if horizon_reset < 1:
        raise ValueError(f"horizon_reset must be >= 1, got {horizon_reset}")
    if behavior.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("behavior policy shape does not match mdp")
    sigma = (DEFAULT_NOISE_FRACTION * mdp.r_max if noise is True else float(noise)) if noise else 0.0
    if sigma < 0:
        raise ValueError(f"noise half-width must be nonnegative, got {noise}")

    rng = np.random.default_rng(seed)
    num_resets = -(-n // horizon_reset)
    reset_u = rng.random(num_resets)
    step_u = rng.random((n, 2))

    cum_init = np.cumsum(mdp.init_dist)
    cum_pi = np.cumsum(behavior.probs, axis=1)
    cum_p = np.cumsum(mdp.transitions, axis=2)

    states = np.empty(n, dtype=np.int64)
    actions = np.empty(n, dtype=np.int64)
    next_states = np.empty(n, dtype=np.int64)
    s = 0
    for t in range(n):
        if t % horizon_reset == 0:
            s = _draw(cum_init, reset_u[t // horizon_reset])
        a = _draw(cum_pi[s], step_u[t, 0])
        sp = _draw(cum_p[s, a], step_u[t, 1])
        states[t], actions[t], next_states[t] = s, a, sp
        s = sp

    rewards = None
    if labeled:
        rewards = mdp.rewards[states, actions].copy()
        if sigma > 0:
            rewards += rng.uniform(-sigma, sigma, size=n)
            rewards = np.clip(rewards, 0.0, mdp.r_max)
    return OfflineDataset(
        states,
        actions,
        rewards,
        next_states,
        labeled=labeled,
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        seed=seed,
        mdp_hash=mdp.content_hash(),
    )


def mix_datasets(a: OfflineDataset, b: OfflineDataset) -> OfflineDataset:
    """Concatenate a then b; the labeled flag is the conjunction."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("mix_datasets requires nonempty datasets")
    if (a.num_states, a.num_actions) != (b.num_states, b.num_actions):
        raise ValueError(
            f"dataset shapes differ: ({a.num_states},{a.num_actions}) vs "
            f"({b.num_states},{b.num_actions})"
        )
    rewards = None
    if a.rewards is not None or b.rewards is not None:
        ra = a.rewards if a.rewards is not None else np.full(len(a), np.nan)
        rb = b.rewards if b.rewards is not None else np.full(len(b), np.nan)
        rewards = np.concatenate([ra, rb])
    return OfflineDataset(
        np.concatenate([a.states, b.states]),
        np.concatenate([a.actions, b.actions]),
        rewards,
        np.concatenate([a.next_states, b.next_states]),
        labeled=a.labeled and b.labeled,
        num_states=a.num_states,
        num_actions=a.num_actions,
        source_tag=f"{a.source_tag}+{b.source_tag}",
        mdp_hash=a.mdp_hash if a.mdp_hash == b.mdp_hash else None,
    )


def occupancy_second_moment(mdp: LinearMdp, policy: Policy, start_state: int) -> np.ndarray:
    """Sigma_{pi,s} = (1-gamma) * sum_t gamma^t E_pi[phi phi^T | s_0 = s].

    The discounted state occupancy kappa solves the adjoint linear system
    (I - gamma P_pi^T) kappa = (1-gamma) e_s; the second moment is then the
    kappa-weighted average of the per-state feature outer products. Exact,
    no sampling.
    """
    if not (0 <= start_state < mdp.num_states):
        raise ValueError(f"start state {start_state} out of range")
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError("policy shape does not match mdp")
    S = mdp.num_states
    p_pi = np.einsum("sa,sae->se", policy.probs, mdp.transitions)
    e = np.zeros(S)
    e[start_state] = 1.0 - mdp.gamma
    kappa = np.linalg.solve(np.eye(S) - mdp.gamma * p_pi.T, e)
    phi = mdp.features.phi
    per_state = np.einsum("sa,sad,saf->sdf", policy.probs, phi, phi)
    return np.tensordot(kappa, per_state, axes=1)


def _min_generalized_eig(m: np.ndarray, sigma: np.ndarray) -> float:
    """Largest C with m - C*sigma >= 0, restricted to range(sigma).

    Null-space directions of sigma impose no constraint; if sigma has no
    range at all the constraint is vacuous and the value is +inf.
    """
    w, u = np.linalg.eigh(sigma)
    keep = w > SIGMA_RANGE_CUTOFF
    if not keep.any():
        return np.inf
    basis = u[:, keep] / np.sqrt(w[keep])
    reduced = basis.T @ m @ basis
    return max(0.0, float(np.linalg.eigvalsh(reduced).min()))


def coverage_coefficient(dataset: OfflineDataset, mdp: LinearMdp, optimal: Policy) -> CoverageReport:
    """C-dagger of the dataset against the optimal occupancy from every start state."""
    if len(dataset) == 0:
        raise ValueError("coverage_coefficient requires a nonempty dataset")
    feats = dataset.feature_rows(mdp)
    gram = feats.T @ feats / len(dataset)
    per_start = np.array(
        [
            _min_generalized_eig(gram, occupancy_second_moment(mdp, optimal, s))
            for s in range(mdp.num_states)
        ]
    )
    c = float(np.min(per_start))
    if not np.isfinite(c):
        c = np.inf
    return CoverageReport(c_dagger=max(0.0, c), gram=gram, per_start_state_values=per_start)


# ---- exact-frequency fixtures ----------------------------------------------


def _largest_remainder_counts(probs: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to `total` proportional to probs (largest remainder)."""
    raw = probs * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def quantize_transitions(mdp: LinearMdp, denominator: int) -> LinearMdp:
    """Tabular MDP with every transition probability snapped to k/denominator.

    Only defined for one-hot (tabular) feature maps, where mu rows are the
    transition distributions themselves. Used to build datasets whose
    empirical frequencies match the model exactly.
    """
    if denominator < 1:
        raise ValueError("denominator must be >= 1")
    _require_onehot(mdp)
    mu = np.stack(
        [_largest_remainder_counts(row, denominator) / denominator for row in mdp.mu]
    )
    return LinearMdp(
        features=mdp.features,
        mu=mu,
        theta=mdp.theta,
        gamma=mdp.gamma,
        r_max=mdp.r_max,
        init_dist=mdp.init_dist,
        seed=mdp.seed,
    )


def exhaustive_dataset(mdp: LinearMdp, visits_per_pair: int) -> OfflineDataset:
    """Every (s,a) visited exactly visits_per_pair times with next-state
    counts exactly proportional to P(.|s,a).

    Requires visits_per_pair * P to be integral (see quantize_transitions);
    rewards are the exact noiseless values.
    """
    if visits_per_pair < 1:
        raise ValueError("visits_per_pair must be >= 1")
    raw = mdp.transitions * visits_per_pair
    counts = np.rint(raw).astype(np.int64)
    if np.abs(raw - counts).max() > 1e-9:
        raise ValueError(
            "visits_per_pair * P must be integral; quantize the MDP first"
        )
    states, actions, next_states = [], [], []
    for s in range(mdp.num_states):
        for a in range(mdp.num_actions):
            for sp in range(mdp.num_states):
                c = counts[s, a, sp]
                if c > 0:
                    states.extend([s] * c)
                    actions.extend([a] * c)
                    next_states.extend([sp] * c)
    states = np.array(states, dtype=np.int64)
    actions = np.array(actions, dtype=np.int64)
    return OfflineDataset(
        states,
        actions,
        mdp.rewards[states, actions],
        next_states,
        labeled=True,
        num_states=mdp.num_states,
        num_actions=mdp.num_actions,
        source_tag="exhaustive",
        mdp_hash=mdp.content_hash(),
    )


def _require_onehot(mdp: LinearMdp) -> None:
    phi = mdp.features.matrix()
    onehot = (phi.sum(axis=1) == 1.0) & (np.count_nonzero(phi, axis=1) == 1)
    if not onehot.all():
        raise ValueError("operation requires one-hot (tabular) features")


# ---- serialization ----------------------------------------------------------


def header_path(path: str | Path) -> Path:
    return Path(str(path) + ".header.json")


def write_jsonl(dataset: OfflineDataset, path: str | Path) -> None:
    """One {"s","a","r","sp"} object per line plus a sidecar header file."""
    path = Path(path)
    rs = dataset.rewards
    with path.open("w") as fh:
        for i in range(len(dataset)):
            r = None if rs is None or np.isnan(rs[i]) else float(rs[i])
            fh.write(
                json.dumps(
                    {
                        "s": int(dataset.states[i]),
                        "a": int(dataset.actions[i]),
                        "r": r,
                        "sp": int(dataset.next_states[i]),
                    }
                )
                + "\n"
            )
    header = {
        "mdp_hash": dataset.mdp_hash,
        "seed": dataset.seed,
        "behavior": dataset.source_tag,
        "labeled": dataset.labeled,
        "num_states": dataset.num_states,
        "num_actions": dataset.num_actions,
        "n": len(dataset),
    }
    header_path(path).write_text(json.dumps(header) + "\n")


def parse_jsonl_line(line: str, lineno: int) -> tuple[int, int, float | None, int]:
    try:
        doc = json.loads(line)
        s, a, sp = int(doc["s"]), int(doc["a"]), int(doc["sp"])
        r = doc["r"]
        r = None if r is None else float(r)
    except (ValueError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed transition at line {lineno}: {exc}") from exc
    return s, a, r, sp


def read_jsonl(path: str | Path) -> OfflineDataset:
    """Read a transition file; uses the sidecar header when present."""
    path = Path(path)
    states, actions, rewards, next_states = [], [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            s, a, r, sp = parse_jsonl_line(line, lineno)
            states.append(s)
            actions.append(a)
            rewards.append(np.nan if r is None else r)
            next_states.append(sp)
    meta = {}
    hp = header_path(path)
    if hp.exists():
        meta = json.loads(hp.read_text())
    n_states = meta.get("num_states", (max(states + next_states) + 1) if states else 1)
    n_actions = meta.get("num_actions", (max(actions) + 1) if actions else 1)
    rewards_arr = np.array(rewards) if rewards else None
    all_labeled = bool(states) and not np.isnan(rewards_arr).any() if rewards_arr is not None else False
    return OfflineDataset(
        states,
        actions,
        None if rewards_arr is None or np.isnan(rewards_arr).all() else rewards_arr,
        next_states,
        labeled=meta.get("labeled", all_labeled),
        num_states=n_states,
        num_actions=n_actions,
        source_tag=meta.get("behavior", ""),
        seed=meta.get("seed"),
        mdp_hash=meta.get("mdp_hash"),
    )
