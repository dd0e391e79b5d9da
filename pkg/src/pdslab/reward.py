"""Ridge reward regression with a confidence ellipsoid, and pessimistic relabeling.

The model is theta_hat = Lambda^{-1} sum phi_tau r_tau with
Lambda = nu*I + sum phi_tau phi_tau^T over the labeled data. The ellipsoid
radius alpha makes {theta : ||theta - theta_hat||_Lambda <= alpha} hold the
true parameter with probability 1 - delta, and the induced pointwise bound
alpha * sqrt(phi^T Lambda^{-1} phi) drives the pessimistic reward

    r_hat(s,a) = clamp(<phi, theta_hat> - alpha*sqrt(phi^T Lambda^{-1} phi), 0, r_max).

Relabeling modes: pds (pessimistic), uds (zeros), predict (plain plug-in),
oracle (true rewards, requires the generating MDP).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from pdslab.data import OfflineDataset
from pdslab.mdp import FeatureMap, LinearMdp

RELABEL_MODES = ("pds", "uds", "predict", "oracle")


def lemma_alpha(dim: int, n_labeled: int, nu: float, delta: float, r_max: float) -> float:
    """Data-independent ellipsoid radius for the ridge reward estimate."""
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0,1), got {delta}")
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    return float(
        np.sqrt(nu)
        + r_max * np.sqrt(2.0 * np.log(1.0 / delta) + dim * np.log(1.0 + n_labeled / (nu * dim)))
    )


def theorem_alpha(dim: int, n_labeled: int, delta: float, r_max: float) -> float:
    """The simplified radius used by the main-theorem presets: 2*r_max*sqrt(d*zeta2)."""
    if n_labeled < 1:
        raise ValueError("theorem preset needs n_labeled >= 1")
    if not 0 < delta < 1:
        raise ValueError(f"delta must be in (0,1), got {delta}")
    zeta2 = np.log(2.0 * dim * n_labeled / delta)
    return float(2.0 * r_max * np.sqrt(dim * zeta2))


@dataclass(frozen=True)
class RewardModel:
    """Fitted ridge reward estimate plus its confidence ellipsoid."""

    theta_hat: np.ndarray      # (d,)
    lambda_matrix: np.ndarray  # (d, d), nu*I + sum phi phi^T
    alpha: float
    nu: float
    n_labeled: int
    delta: float
    r_max: float = 1.0

    def __post_init__(self):
        lam = np.asarray(self.lambda_matrix, dtype=float)
        theta = np.asarray(self.theta_hat, dtype=float)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1] or theta.shape != (lam.shape[0],):
            raise ValueError("theta_hat/lambda_matrix shapes inconsistent")
        if np.abs(lam - lam.T).max() > 1e-9:
            raise ValueError("lambda_matrix must be symmetric")
        min_eig = float(np.linalg.eigvalsh(lam).min())
        if min_eig < self.nu - 1e-9:
            raise ValueError(f"lambda_matrix min eigenvalue {min_eig:.3e} below nu={self.nu}")
        if self.alpha < np.sqrt(self.nu) - 1e-12:
            raise ValueError(f"alpha={self.alpha} below sqrt(nu)")
        lam = 0.5 * (lam + lam.T)
        object.__setattr__(self, "lambda_matrix", lam)
        object.__setattr__(self, "theta_hat", theta)
        object.__setattr__(self, "_chol", scipy.linalg.cho_factor(lam))

    @property
    def dim(self) -> int:
        return self.theta_hat.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Lambda^{-1} rhs through the cached Cholesky factor."""
        return scipy.linalg.cho_solve(self._chol, rhs)

    def to_dict(self) -> dict:
        return {
            "theta_hat": self.theta_hat.tolist(),
            "lambda_matrix": self.lambda_matrix.ravel().tolist(),
            "alpha": self.alpha,
            "nu": self.nu,
            "delta": self.delta,
            "n_labeled": self.n_labeled,
            "r_max": self.r_max,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardModel":
        theta = np.asarray(doc["theta_hat"], dtype=float)
        d = theta.shape[0]
        return cls(
            theta_hat=theta,
            lambda_matrix=np.asarray(doc["lambda_matrix"], dtype=float).reshape(d, d),
            alpha=float(doc["alpha"]),
            nu=float(doc["nu"]),
            n_labeled=int(doc["n_labeled"]),
            delta=float(doc["delta"]),
            r_max=float(doc.get("r_max", 1.0)),
        )


def save_reward_model(model: RewardModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()) + "\n")


def load_reward_model(path: str | Path) -> RewardModel:
    return RewardModel.from_dict(json.loads(Path(path).read_text()))


def fit_reward(
    labeled: OfflineDataset,
    features: FeatureMap,
    nu: float = 1.0,
    delta: float = 0.1,
    r_max: float = 1.0,
    alpha_mode: str = "lemma",
) -> RewardModel:
    """Ridge regression of observed rewards onto features.

    alpha_mode picks the ellipsoid radius: "lemma" (default, the operative
    data-independent radius) or "theorem" (the simplified main-theorem
    preset, which dominates it).
    """
    if not labeled.labeled:
        raise ValueError("fit_reward requires a labeled dataset")
    if nu <= 0:
        raise ValueError(f"nu must be positive, got {nu}")
    if features.num_states < labeled.num_states or features.num_actions < labeled.num_actions:
        raise ValueError("dataset shape exceeds feature table shape")
    d = features.dim
    n = len(labeled)
    lam = nu * np.eye(d)
    rhs = np.zeros(d)
    if n > 0:
        phi = features.phi[labeled.states, labeled.actions]
        lam = lam + phi.T @ phi
        rhs = phi.T @ labeled.rewards
    theta_hat = scipy.linalg.cho_solve(scipy.linalg.cho_factor(lam), rhs)
    if alpha_mode == "lemma":
        alpha = lemma_alpha(d, n, nu, delta, r_max)
    elif alpha_mode == "theorem":
        alpha = theorem_alpha(d, n, delta, r_max)
    else:
        raise ValueError(f"unknown alpha_mode {alpha_mode!r}")
    return RewardModel(
        theta_hat=theta_hat,
        lambda_matrix=lam,
        alpha=alpha,
        nu=nu,
        n_labeled=n,
        delta=delta,
        r_max=r_max,
    )


def _deviation_rows(model: RewardModel, rows: np.ndarray) -> np.ndarray:
    # alpha * sqrt(phi^T Lambda^{-1} phi) for each row, clipped against
    # rounding (the quadratic form is nonnegative in exact arithmetic)
    quad = np.einsum("nd,nd->n", rows, model.solve(rows.T).T)
    return model.alpha * np.sqrt(np.clip(quad, 0.0, None))


def reward_deviation(model: RewardModel, features: FeatureMap, s: int, a: int) -> float:
    """Width of the reward confidence interval at (s,a)."""
    phi = features.vector(s, a)
    return float(_deviation_rows(model, phi[None, :])[0])


def deviation_table(model: RewardModel, features: FeatureMap) -> np.ndarray:
    """reward_deviation for every (s,a), shape (S, A)."""
    rows = features.matrix()
    return _deviation_rows(model, rows).reshape(features.num_states, features.num_actions)


def predicted_table(model: RewardModel, features: FeatureMap) -> np.ndarray:
    """Plug-in predictions <phi, theta_hat> for every (s,a), shape (S, A)."""
    return (features.matrix() @ model.theta_hat).reshape(
        features.num_states, features.num_actions
    )


def pessimistic_reward(model: RewardModel, features: FeatureMap, s: int, a: int) -> float:
    """Lower-confidence reward, clamped into [0, r_max]."""
    phi = features.vector(s, a)
    value = float(phi @ model.theta_hat) - reward_deviation(model, features, s, a)
    return float(np.clip(value, 0.0, model.r_max))


def pessimistic_table(model: RewardModel, features: FeatureMap) -> np.ndarray:
    table = predicted_table(model, features) - deviation_table(model, features)
    return np.clip(table, 0.0, model.r_max)


def relabel(
    unlabeled: OfflineDataset,
    model: RewardModel,
    features: FeatureMap,
    mode: str,
    mdp: LinearMdp | None = None,
    strict: bool = False,
) -> OfflineDataset:
    """Annotate missing rewards and return a labeled dataset.

    Observed labels are kept in modes pds/uds/predict; oracle replaces
    everything with the true <phi, theta>. strict=True replays the literal
    annotate-everything reading: the mode's rule overwrites observed labels
    too.
    """
    if mode not in RELABEL_MODES:
        raise ValueError(f"mode must be one of {RELABEL_MODES}, got {mode!r}")
    if features.num_states < unlabeled.num_states or features.num_actions < unlabeled.num_actions:
        raise ValueError("dataset shape exceeds feature table shape")
    if mode == "oracle":
        if mdp is None:
            raise ValueError("mode='oracle' requires the true mdp")
        fill_table = mdp.rewards
    elif mode == "uds":
        fill_table = np.zeros((features.num_states, features.num_actions))
    elif mode == "predict":
        fill_table = np.clip(predicted_table(model, features), 0.0, model.r_max)
    else:
        fill_table = pessimistic_table(model, features)

    fills = fill_table[unlabeled.states, unlabeled.actions]
    if mode == "oracle" or strict or unlabeled.rewards is None:
        new_rewards = fills
    else:
        new_rewards = np.where(np.isnan(unlabeled.rewards), fills, unlabeled.rewards)
    tag = f"{unlabeled.source_tag}|{mode}" if unlabeled.source_tag else mode
    return unlabeled.with_rewards(new_rewards, labeled=True, source_tag=tag)


def confidence_coverage_trial(
    mdp: LinearMdp,
    n0: int,
    noise: bool | float,
    delta: float,
    trials: int,
    seed: int = 0,
    nu: float = 1.0,
    behavior=None,
) -> float:
    """Fraction of fresh-data fits with ||theta* - theta_hat||_Lambda <= alpha."""
    from pdslab.data import sample_dataset
    from pdslab.mdp import Policy

    if trials < 1:
        raise ValueError("trials must be >= 1")
    if behavior is None:
        behavior = Policy.uniform(mdp.num_states, mdp.num_actions)
    hits = 0
    for sub in np.random.SeedSequence(seed).generate_state(trials):
        ds = sample_dataset(mdp, behavior, n=n0, seed=int(sub), noise=noise)
        model = fit_reward(ds, mdp.features, nu=nu, delta=delta, r_max=mdp.r_max)
        err = mdp.theta - model.theta_hat
        hits += float(err @ model.lambda_matrix @ err) <= model.alpha**2
    return hits / trials
