"""Finite linear MDPs with explicit feature factorization.

The model is the discounted linear MDP: transition and reward factor through
a known feature map phi : S x A -> R^d as

    P(s'|s,a) = <phi(s,a), mu(s')>,      r(s,a) = <phi(s,a), theta>,

with ||phi(s,a)||_2 <= 1, rewards in [0, r_max], and discount gamma in [0,1).
Everything here is finite and exact: policy evaluation is a direct linear
solve, optimal values come from value iteration plus a policy-iteration
polish, so downstream modules can treat these as ground truth.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KERNEL_ROW_TOL = 1e-10     # transition rows must sum to 1 within this
KERNEL_ENTRY_TOL = 1e-12   # entries may undershoot 0 by at most this
REWARD_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class FeatureMap:
    """Feature table phi[s, a] in R^d with ||phi(s,a)||_2 <= 1."""

    phi: np.ndarray  # (S, A, d)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.ndim != 3:
            raise ValueError(f"phi must be (S, A, d), got shape {phi.shape}")
        if min(phi.shape) < 1:
            raise ValueError(f"empty feature table: shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi contains non-finite entries")
        norms = np.linalg.norm(phi, axis=2)
        if norms.max() > 1.0 + 1e-9:
            s, a = np.unravel_index(np.argmax(norms), norms.shape)
            raise ValueError(
                f"||phi({s},{a})||_2 = {norms[s, a]:.12g} exceeds 1"
            )
        object.__setattr__(self, "phi", _readonly(phi))

    @property
    def num_states(self) -> int:
        return self.phi.shape[0]

    @property
    def num_actions(self) -> int:
        return self.phi.shape[1]

    @property
    def dim(self) -> int:
        return self.phi.shape[2]

    def vector(self, s: int, a: int) -> np.ndarray:
        """phi(s,a) as a read-only d-vector."""
        if not (0 <= s < self.num_states and 0 <= a < self.num_actions):
            raise ValueError(f"state-action ({s},{a}) out of range")
        return self.phi[s, a]

    def matrix(self) -> np.ndarray:
        """All features stacked row-major into an (S*A, d) matrix."""
        return self.phi.reshape(-1, self.dim)


@dataclass(frozen=True)
class LinearMdp:
    """A finite linear MDP (Definition-style factorization, discounted).

    mu has one row per feature dimension; column s' stacks the measure
    weights so that P(s'|s,a) = phi(s,a) @ mu[:, s'].
    """

    features: FeatureMap
    mu: np.ndarray       # (d, S), entries in [0, 1]
    theta: np.ndarray    # (d,), ||theta|| <= sqrt(d) * r_max
    gamma: float
    r_max: float
    init_dist: np.ndarray  # (S,), probability over start states
    seed: int | None = None
    feature_scale: float = 1.0  # bookkeeping for rescaled constructions

    def __post_init__(self):
        S, A, d = self.features.phi.shape
        mu = np.asarray(self.mu, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        init = np.asarray(self.init_dist, dtype=float)
        if mu.shape != (d, S):
            raise ValueError(f"mu must be ({d},{S}), got {mu.shape}")
        if theta.shape != (d,):
            raise ValueError(f"theta must be ({d},), got {theta.shape}")
        if init.shape != (S,):
            raise ValueError(f"init_dist must be ({S},), got {init.shape}")
        if not (0.0 <= self.gamma < 1.0):
            raise ValueError(f"gamma must be in [0,1), got {self.gamma}")
        if not self.r_max > 0:
            raise ValueError(f"r_max must be positive, got {self.r_max}")

        if mu.min() < -KERNEL_ENTRY_TOL or mu.max() > 1.0 + 1e-9:
            raise ValueError("mu entries must lie in [0, 1]")
        mu = np.clip(mu, 0.0, None)

        tnorm = np.linalg.norm(theta)
        cap = np.sqrt(d) * self.r_max
        if tnorm > cap * (1 + 1e-9):
            raise ValueError(f"||theta|| = {tnorm:.12g} exceeds sqrt(d)*r_max = {cap:.12g}")

        # Derived transition kernel, with floating-point hygiene: entries in
        # [-1e-12, 0) are clamped to 0 and each row renormalized.
        p = np.einsum("sad,de->sae", self.features.phi, mu)
        if p.min() < -KERNEL_ENTRY_TOL:
            raise ValueError(f"negative transition probability {p.min():.3e}")
        p = np.clip(p, 0.0, None)
        row_sums = p.sum(axis=2)
        if np.abs(row_sums - 1.0).max() > KERNEL_ROW_TOL:
            bad = np.abs(row_sums - 1.0).max()
            raise ValueError(f"transition rows must sum to 1 within 1e-10 (off by {bad:.3e})")
        p = p / row_sums[:, :, None]

        r = self.features.phi @ theta
        if r.min() < -REWARD_TOL or r.max() > self.r_max + REWARD_TOL:
            raise ValueError(
                f"rewards <phi,theta> must lie in [0, r_max]; saw [{r.min():.6g}, {r.max():.6g}]"
            )
        r = np.clip(r, 0.0, self.r_max)

        # Stored verbatim (not renormalized) so serialization round-trips
        # bit for bit; samplers tolerate the <=1e-9 mass slack.
        if init.min() < 0 or abs(init.sum() - 1.0) > 1e-9:
            raise ValueError("init_dist must be a probability vector")

        object.__setattr__(self, "mu", _readonly(mu))
        object.__setattr__(self, "theta", _readonly(theta))
        object.__setattr__(self, "init_dist", _readonly(init))
        object.__setattr__(self, "_p_table", _readonly(p))
        object.__setattr__(self, "_r_table", _readonly(r))

    @property
    def num_states(self) -> int:
        return self.features.num_states

    @property
    def num_actions(self) -> int:
        return self.features.num_actions

    @property
    def dim(self) -> int:
        return self.features.dim

    @property
    def v_max(self) -> float:
        return self.r_max / (1.0 - self.gamma)

    @property
    def transitions(self) -> np.ndarray:
        """P[s, a, s'], shape (S, A, S)."""
        return self._p_table

    @property
    def rewards(self) -> np.ndarray:
        """r[s, a] = <phi(s,a), theta>, shape (S, A)."""
        return self._r_table

    # ---- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "dim": self.dim,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "phi": self.features.phi.ravel().tolist(),
            "mu": self.mu.ravel().tolist(),
            "theta": self.theta.tolist(),
            "init_dist": self.init_dist.tolist(),
            "seed": self.seed,
            "feature_scale": self.feature_scale,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "LinearMdp":
        S = int(doc["num_states"])
        A = int(doc["num_actions"])
        d = int(doc["dim"])
        phi = np.asarray(doc["phi"], dtype=float).reshape(S, A, d)
        return cls(
            features=FeatureMap(phi),
            mu=np.asarray(doc["mu"], dtype=float).reshape(d, S),
            theta=np.asarray(doc["theta"], dtype=float),
            gamma=float(doc["gamma"]),
            r_max=float(doc["r_max"]),
            init_dist=np.asarray(doc["init_dist"], dtype=float),
            seed=doc.get("seed"),
            feature_scale=float(doc.get("feature_scale", 1.0)),
        )

    def content_hash(self) -> str:
        """Stable short hash of the serialized MDP (used by dataset headers)."""
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_mdp(mdp: LinearMdp, path: str | Path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()) + "\n")


def load_mdp(path: str | Path) -> LinearMdp:
    return LinearMdp.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Policy:
    """Row-stochastic action distribution per state."""

    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2:
            raise ValueError(f"policy must be (S, A), got shape {p.shape}")
        if p.min() < 0:
            raise ValueError("policy probabilities must be nonnegative")
        if np.abs(p.sum(axis=1) - 1.0).max() > 1e-12:
            raise ValueError("policy rows must sum to 1 within 1e-12")
        object.__setattr__(self, "probs", _readonly(p))

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions: np.ndarray, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.shape[0], num_actions))
        p[np.arange(actions.shape[0]), actions] = 1.0
        return cls(p)

    @classmethod
    def greedy(cls, q: np.ndarray) -> "Policy":
        """Deterministic argmax policy; ties go to the lowest action index."""
        q = np.asarray(q, dtype=float)
        return cls.deterministic(np.argmax(q, axis=1), q.shape[1])

    @classmethod
    def uniform_over(cls, num_states: int, num_actions: int, actions) -> "Policy":
        """Uniform mixture over a subset of actions, zero elsewhere."""
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((num_states, num_actions))
        p[:, actions] = 1.0 / actions.shape[0]
        return cls(p)

    def mixed_with_uniform(self, epsilon: float) -> "Policy":
        """(1-eps) * this policy + eps * uniform; epsilon-greedy smoothing."""
        if not (0.0 <= epsilon <= 1.0):
            raise ValueError(f"epsilon must be in [0,1], got {epsilon}")
        A = self.num_actions
        return Policy((1.0 - epsilon) * self.probs + epsilon / A)


@dataclass(frozen=True)
class ValueReport:
    """Exact V and Q for some policy (or the optimum)."""

    v: np.ndarray  # (S,)
    q: np.ndarray  # (S, A)

    def __post_init__(self):
        object.__setattr__(self, "v", _readonly(self.v))
        object.__setattr__(self, "q", _readonly(self.q))


def _check_value_range(v: np.ndarray, q: np.ndarray, v_max: float) -> tuple[np.ndarray, np.ndarray]:
    # Direct solves can undershoot 0 by rounding; snap those, reject real violations.
    lo = min(v.min(), q.min())
    hi = max(v.max(), q.max())
    if lo < -1e-9 or hi > v_max + 1e-9:
        raise ValueError(f"values outside [0, v_max]: range [{lo:.6g}, {hi:.6g}], v_max={v_max:.6g}")
    return np.clip(v, 0.0, None), np.clip(q, 0.0, None)


def evaluate_policy(mdp: LinearMdp, policy: Policy) -> ValueReport:
    """Exact policy evaluation by direct linear solve.

    Solves (I - gamma * P_pi) V = r_pi where P_pi and r_pi average the
    kernel and rewards over the policy, then backs out Q = r + gamma * P V.
    """
    if policy.probs.shape != (mdp.num_states, mdp.num_actions):
        raise ValueError(
            f"policy shape {policy.probs.shape} does not match mdp "
            f"({mdp.num_states},{mdp.num_actions})"
        )
    p_pi = np.einsum("sa,sae->se", policy.probs, mdp.transitions)
    r_pi = np.einsum("sa,sa->s", policy.probs, mdp.rewards)
    S = mdp.num_states
    v = np.linalg.solve(np.eye(S) - mdp.gamma * p_pi, r_pi)
    q = mdp.rewards + mdp.gamma * mdp.transitions @ v
    v, q = _check_value_range(v, q, mdp.v_max)
    return ValueReport(v=v, q=q)


def solve_optimal(mdp: LinearMdp, tol: float = 1e-10) -> tuple[Policy, ValueReport]:
    """Optimal policy and its exact values.

    Value iteration runs until the sup-norm residual drops below
    tol*(1-gamma)/(2*gamma), which bounds the value error by tol/2; the
    greedy policy is then polished by exact policy iteration so the
    returned report solves the Bellman optimality equation to solver
    precision. Ties break to the lowest action index.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    gamma, p, r = mdp.gamma, mdp.transitions, mdp.rewards
    threshold = np.inf if gamma == 0.0 else tol * (1.0 - gamma) / (2.0 * gamma)
    v = np.zeros(mdp.num_states)
    while True:
        q = r + gamma * (p @ v)
        v_new = q.max(axis=1)
        residual = np.abs(v_new - v).max()
        v = v_new
        if residual < threshold or gamma == 0.0:
            break

    policy = Policy.greedy(q)
    for _ in range(100):
        report = evaluate_policy(mdp, policy)
        improved = Policy.greedy(report.q)
        if np.array_equal(improved.probs, policy.probs):
            break
        policy = improved
    return policy, report


def suboptimality(mdp: LinearMdp, policy: Policy, state: int) -> float:
    """SubOpt(pi; s) = V*(s) - V^pi(s), computed from exact solves."""
    if not (0 <= state < mdp.num_states):
        raise ValueError(f"state {state} out of range")
    _, star = solve_optimal(mdp)
    mine = evaluate_policy(mdp, policy)
    return float(star.v[state] - mine.v[state])


# ---- constructors ---------------------------------------------------------


def make_tabular_mdp(
    num_states: int,
    num_actions: int,
    gamma: float = 0.9,
    r_max: float = 1.0,
    seed: int = 0,
) -> LinearMdp:
    """Random tabular MDP embedded as a linear MDP with one-hot features.

    d = S*A; phi(s,a) is the indicator of the pair, mu row idx(s,a) holds
    the Dirichlet-drawn transition distribution of that pair, and theta
    holds the uniform [0, r_max] reward table.
    """
    if num_states < 1 or num_actions < 1:
        raise ValueError("num_states and num_actions must be >= 1")
    rng = np.random.default_rng(seed)
    S, A = num_states, num_actions
    d = S * A
    phi = np.eye(d).reshape(S, A, d)
    mu = rng.dirichlet(np.ones(S), size=d)          # (d, S) rows are P(.|s,a)
    theta = rng.uniform(0.0, r_max, size=d)
    return LinearMdp(
        features=FeatureMap(phi),
        mu=mu,
        theta=theta,
        gamma=gamma,
        r_max=r_max,
        init_dist=np.full(S, 1.0 / S),
        seed=seed,
    )


def make_lowrank_mdp(
    num_states: int,
    num_actions: int,
    dim: int,
    gamma: float = 0.9,
    r_max: float = 1.0,
    seed: int = 0,
) -> LinearMdp:
    """Random rank-d linear MDP.

    Features are drawn on the d-simplex (so ||phi||_2 <= 1 automatically),
    each mu row is a distribution over states, hence every transition row
    is a convex combination of distributions; theta uniform in [0, r_max]
    keeps rewards in range.
    """
    if not (1 <= dim <= num_states * num_actions):
        raise ValueError(f"dim must be in [1, {num_states * num_actions}], got {dim}")
    rng = np.random.default_rng(seed)
    phi = rng.dirichlet(np.ones(dim), size=(num_states, num_actions))
    mu = rng.dirichlet(np.ones(num_states), size=dim)
    theta = rng.uniform(0.0, r_max, size=dim)
    return LinearMdp(
        features=FeatureMap(phi),
        mu=mu,
        theta=theta,
        gamma=gamma,
        r_max=r_max,
        init_dist=np.full(num_states, 1.0 / num_states),
        seed=seed,
    )


def make_adversarial_mdp(
    num_actions: int,
    dim: int,
    gamma: float = 0.9,
    r_max: float = 1.0,
) -> LinearMdp:
    """Single-state construction whose optimal occupancy second moment is
    proportional to the identity.

    The first `dim` actions carry scaled one-hot features sqrt(d)*e_i; for
    d > 1 that violates the norm cap, so all features are rescaled by
    1/sqrt(d) (recorded in feature_scale) which preserves proportionality
    to I. Remaining actions sit at the simplex barycenter. With one state,
    kernel validity pins mu = all-ones, and identical Q* across the d
    one-hot actions then forces theta = r_max * ones: every action earns
    r_max, so the uniform mixture over the first d actions is optimal.
    """
    if num_actions <= dim:
        raise ValueError(f"need num_actions > dim, got {num_actions} <= {dim}")
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    scale = 1.0 if dim == 1 else 1.0 / np.sqrt(dim)
    phi = np.zeros((1, num_actions, dim))
    phi[0, :dim, :] = np.sqrt(dim) * np.eye(dim) * scale   # = e_i exactly
    phi[0, dim:, :] = 1.0 / dim
    return LinearMdp(
        features=FeatureMap(phi),
        mu=np.ones((dim, 1)),
        theta=np.full(dim, r_max),
        gamma=gamma,
        r_max=r_max,
        init_dist=np.array([1.0]),
        feature_scale=scale,
    )
