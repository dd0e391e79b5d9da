import numpy as np
import pytest

from pdslab.mdp import make_lowrank_mdp, make_tabular_mdp


@pytest.fixture
def tabular_5x3():
    return make_tabular_mdp(5, 3, gamma=0.95, r_max=1.0, seed=42)


@pytest.fixture
def lowrank_6x3x2():
    return make_lowrank_mdp(6, 3, dim=2, gamma=0.9, r_max=1.0, seed=2)


def value_iteration_oracle(p, r, gamma, residual=1e-12, max_iter=2_000_000):
    """Plain value iteration, independent of the package implementation."""
    v = np.zeros(p.shape[0])
    for _ in range(max_iter):
        v_new = (r + gamma * (p @ v)).max(axis=1)
        if np.abs(v_new - v).max() < residual:
            return v_new
        v = v_new
    raise AssertionError("oracle value iteration did not converge")


def policy_eval_oracle(p, r, gamma, probs, residual=1e-12, max_iter=2_000_000):
    """Fixed-point policy evaluation, independent of the package."""
    p_pi = np.einsum("sa,sae->se", probs, p)
    r_pi = np.einsum("sa,sa->s", probs, r)
    v = np.zeros(p.shape[0])
    for _ in range(max_iter):
        v_new = r_pi + gamma * (p_pi @ v)
        if np.abs(v_new - v).max() < residual:
            return v_new
        v = v_new
    raise AssertionError("oracle policy evaluation did not converge")
