import json

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from pdslab.data import (
    OfflineDataset,
    Transition,
    coverage_coefficient,
    exhaustive_dataset,
    header_path,
    mix_datasets,
    occupancy_second_moment,
    quantize_transitions,
    read_jsonl,
    sample_dataset,
    write_jsonl,
)
from pdslab.mdp import (
    FeatureMap,
    LinearMdp,
    Policy,
    make_adversarial_mdp,
    make_tabular_mdp,
    solve_optimal,
)


def dataset_from_pairs(pairs, mdp):
    """Hand-built labeled dataset visiting the given (s, a) pairs (self-loop sp)."""
    s = np.array([p[0] for p in pairs])
    a = np.array([p[1] for p in pairs])
    return OfflineDataset(
        s, a, mdp.rewards[s, a], s,
        labeled=True, num_states=mdp.num_states, num_actions=mdp.num_actions,
    )


# ---- sampling ----------------------------------------------------------------


def test_single_state_next_state_is_state():
    mdp = make_tabular_mdp(1, 1, seed=0)
    ds = sample_dataset(mdp, Policy.uniform(1, 1), n=1, seed=3)
    assert len(ds) == 1
    assert ds.next_states[0] == ds.states[0] == 0


def test_unlabeled_strips_rewards(tabular_5x3):
    ds = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=20, labeled=False, seed=1)
    assert ds.rewards is None
    assert not ds.labeled
    assert all(t.reward is None for t in ds.transitions)


def test_labeled_rewards_are_exact(tabular_5x3):
    ds = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=50, seed=2)
    expected = tabular_5x3.rewards[ds.states, ds.actions]
    assert np.array_equal(ds.rewards, expected)


def test_noise_is_clipped_and_seeded(tabular_5x3):
    ds = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=300, seed=5, noise=0.5)
    assert ds.rewards.min() >= 0.0 and ds.rewards.max() <= tabular_5x3.r_max
    exact = tabular_5x3.rewards[ds.states, ds.actions]
    assert not np.array_equal(ds.rewards, exact)
    again = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=300, seed=5, noise=0.5)
    assert np.array_equal(ds.rewards, again.rewards)
    # noise=True means half-width 0.1 * r_max
    small = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=300, seed=5, noise=True)
    assert np.abs(np.clip(exact - small.rewards, None, None)).max() <= 0.1 + 1e-12


def test_sampler_determinism(tabular_5x3):
    a = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=100, seed=9)
    b = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=100, seed=9)
    c = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=100, seed=10)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.next_states, b.next_states)
    assert not np.array_equal(a.states, c.states)


def test_empirical_frequencies_match_occupancy_oracle(tabular_5x3):
    # Oracle: expected visit frequency under horizon-H reset sampling is the
    # time average over t < H of the state marginal, times the policy.
    mdp, H, n = tabular_5x3, 100, 10_000
    pol = Policy.uniform(5, 3)
    p_pi = np.einsum("sa,sae->se", pol.probs, mdp.transitions)
    marginal = mdp.init_dist.copy()
    avg_state = np.zeros(5)
    for _ in range(H):
        avg_state += marginal / H
        marginal = p_pi.T @ marginal
    expected = avg_state[:, None] * pol.probs  # (S, A) cell probabilities

    ds = sample_dataset(mdp, pol, n=n, horizon_reset=H, seed=0)
    counts = np.zeros((5, 3))
    np.add.at(counts, (ds.states, ds.actions), 1.0)
    freq = counts / n
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(freq - expected) <= 3 * se + 1e-12)


def test_sample_parameter_errors(tabular_5x3):
    with pytest.raises(ValueError):
        sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=0)
    with pytest.raises(ValueError):
        sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=5, horizon_reset=0)
    with pytest.raises(ValueError):
        sample_dataset(tabular_5x3, Policy.uniform(4, 3), n=5)


# ---- mixing -------------------------------------------------------------------


def test_mix_concatenates_in_order(tabular_5x3):
    d = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=10, seed=0)
    both = mix_datasets(d, d)
    assert len(both) == 20
    assert both.labeled
    assert np.array_equal(both.states[:10], d.states)
    assert np.array_equal(both.states[10:], d.states)
    assert np.array_equal(both.rewards[:10], d.rewards)


def test_mix_labeled_with_unlabeled(tabular_5x3):
    lab = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=5, seed=0)
    unlab = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=7, labeled=False, seed=1)
    both = mix_datasets(lab, unlab)
    assert not both.labeled
    assert np.array_equal(both.rewards[:5], lab.rewards)
    assert np.isnan(both.rewards[5:]).all()


def test_mix_errors(tabular_5x3):
    d = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=5, seed=0)
    other = sample_dataset(make_tabular_mdp(4, 3, seed=0), Policy.uniform(4, 3), n=5, seed=0)
    empty = OfflineDataset([], [], None, [], labeled=False, num_states=5, num_actions=3)
    with pytest.raises(ValueError, match="shapes differ"):
        mix_datasets(d, other)
    with pytest.raises(ValueError, match="nonempty"):
        mix_datasets(d, empty)


# ---- occupancy second moment ---------------------------------------------------


def test_occupancy_single_pair_is_rank_one():
    phi = np.array([[[0.6, 0.8]]])  # single state, single action, ||phi|| = 1
    mdp = LinearMdp(
        features=FeatureMap(phi),
        mu=np.array([[1.0 / 3.0], [1.0]]),   # <phi, mu> = 0.2 + 0.8 = 1
        theta=np.array([0.5, 0.5]),
        gamma=0.9,
        r_max=1.0,
        init_dist=np.array([1.0]),
    )
    sigma = occupancy_second_moment(mdp, Policy.uniform(1, 1), 0)
    np.testing.assert_allclose(sigma, np.outer(phi[0, 0], phi[0, 0]), atol=1e-12)


def test_occupancy_adversarial_proportional_to_identity():
    mdp = make_adversarial_mdp(5, 2, gamma=0.9)
    pol = Policy.uniform_over(1, 5, [0, 1])
    sigma = occupancy_second_moment(mdp, pol, 0)
    np.testing.assert_allclose(sigma, mdp.feature_scale**2 * np.eye(2), atol=1e-12)
    one_d = make_adversarial_mdp(3, 1, gamma=0.9)
    sigma1 = occupancy_second_moment(one_d, Policy.uniform_over(1, 3, [0]), 0)
    np.testing.assert_allclose(sigma1, [[1.0]], atol=1e-12)


def test_occupancy_spectrum_and_trace_bounds():
    rng = np.random.default_rng(4)
    for _ in range(20):
        mdp = make_tabular_mdp(4, 3, gamma=float(rng.uniform(0, 0.95)), seed=int(rng.integers(1 << 30)))
        probs = rng.dirichlet(np.ones(3), size=4)
        sigma = occupancy_second_moment(mdp, Policy(probs / probs.sum(axis=1, keepdims=True)), int(rng.integers(4)))
        eigs = np.linalg.eigvalsh(sigma)
        assert eigs.min() >= -1e-12
        assert eigs.max() <= 1.0 + 1e-9
        assert np.trace(sigma) <= 1.0 + 1e-9


# ---- coverage coefficient -------------------------------------------------------


def test_coverage_handcrafted_value_on_adversarial():
    # 30% action 0, 30% action 1, 40% barycenter action: the Gram matrix is
    # [[0.4, 0.1], [0.1, 0.4]] against Sigma = I/2, so C-dagger = 0.6.
    mdp = make_adversarial_mdp(3, 2, gamma=0.9)
    pairs = [(0, 0)] * 3 + [(0, 1)] * 3 + [(0, 2)] * 4
    ds = dataset_from_pairs(pairs, mdp)
    pol = Policy.uniform_over(1, 3, [0, 1])
    rep = coverage_coefficient(ds, mdp, pol)
    np.testing.assert_allclose(rep.gram, [[0.4, 0.1], [0.1, 0.4]], atol=1e-12)
    assert rep.c_dagger == pytest.approx(0.6, abs=1e-10)
    # independent oracle: scipy generalized eigenproblem on the full space
    sigma = occupancy_second_moment(mdp, pol, 0)
    oracle = scipy.linalg.eigh(rep.gram, sigma, eigvals_only=True).min()
    assert rep.c_dagger == pytest.approx(oracle, abs=1e-10)


def test_coverage_of_optimal_data_approaches_one():
    mdp = make_adversarial_mdp(4, 2, gamma=0.9)
    pol = Policy.uniform_over(1, 4, [0, 1])
    ds = sample_dataset(mdp, pol, n=20_000, seed=0)
    rep = coverage_coefficient(ds, mdp, pol)
    assert rep.c_dagger == pytest.approx(1.0, abs=0.03)


def test_coverage_matches_exact_mixture_oracle(tabular_5x3):
    # With lots of data from pi*, the Gram approaches the init-mixture of
    # occupancy matrices; compare C-dagger against that exact limit.
    mdp = tabular_5x3
    pistar, _ = solve_optimal(mdp)
    sigmas = [occupancy_second_moment(mdp, pistar, s) for s in range(5)]
    m_exact = sum(mdp.init_dist[s] * sigmas[s] for s in range(5))

    def min_gen_eig(m, sigma):
        w, u = np.linalg.eigh(sigma)
        keep = w > 1e-10
        basis = u[:, keep] / np.sqrt(w[keep])
        return max(0.0, np.linalg.eigvalsh(basis.T @ m @ basis).min())

    c_exact = min(min_gen_eig(m_exact, s) for s in sigmas)
    ds = sample_dataset(mdp, pistar, n=40_000, horizon_reset=200, seed=1)
    rep = coverage_coefficient(ds, mdp, pistar)
    assert rep.c_dagger == pytest.approx(c_exact, abs=0.05)
    assert rep.per_start_state_values.shape == (5,)
    assert rep.c_dagger == pytest.approx(np.min(rep.per_start_state_values), abs=0)


def test_coverage_zero_when_needed_action_missing(tabular_5x3):
    mdp = tabular_5x3
    pistar, _ = solve_optimal(mdp)
    ds = sample_dataset(mdp, pistar, n=2_000, seed=3)
    star_actions = np.argmax(pistar.probs, axis=1)
    # drop every sample of state 0's optimal action
    keep = ~((ds.states == 0) & (ds.actions == star_actions[0]))
    pruned = OfflineDataset(
        ds.states[keep], ds.actions[keep], ds.rewards[keep], ds.next_states[keep],
        labeled=True, num_states=5, num_actions=3,
    )
    rep = coverage_coefficient(pruned, mdp, pistar)
    assert rep.c_dagger <= 1e-12


def test_coverage_scale_consistency(tabular_5x3):
    ds = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=500, seed=7)
    pistar, _ = solve_optimal(tabular_5x3)
    once = coverage_coefficient(ds, tabular_5x3, pistar)
    twice = coverage_coefficient(mix_datasets(ds, ds), tabular_5x3, pistar)
    assert abs(once.c_dagger - twice.c_dagger) <= 1e-12


def test_coverage_monotone_under_optimal_augmentation():
    hits = 0
    trials = 40
    for k in range(trials):
        mdp = make_tabular_mdp(3, 2, gamma=0.9, seed=1000 + k)
        pistar, _ = solve_optimal(mdp)
        base = sample_dataset(mdp, Policy.uniform(3, 2), n=60, seed=k)
        extra = sample_dataset(mdp, pistar, n=120, seed=5000 + k)
        c0 = coverage_coefficient(base, mdp, pistar).c_dagger
        c1 = coverage_coefficient(mix_datasets(base, extra), mdp, pistar).c_dagger
        hits += c1 >= c0 - 1e-9
    assert hits >= 0.95 * trials


def test_coverage_requires_nonempty(tabular_5x3):
    empty = OfflineDataset([], [], None, [], labeled=False, num_states=5, num_actions=3)
    pistar, _ = solve_optimal(tabular_5x3)
    with pytest.raises(ValueError, match="nonempty"):
        coverage_coefficient(empty, tabular_5x3, pistar)


# ---- exact-frequency fixtures ----------------------------------------------------


def test_quantize_and_exhaustive_dataset(tabular_5x3):
    q = quantize_transitions(tabular_5x3, 200)
    np.testing.assert_allclose(q.transitions.sum(axis=2), 1.0, atol=1e-12)
    assert np.abs(q.transitions * 200 - np.rint(q.transitions * 200)).max() <= 1e-9
    ds = exhaustive_dataset(q, 200)
    assert len(ds) == 5 * 3 * 200
    counts = np.zeros((5, 3, 5))
    np.add.at(counts, (ds.states, ds.actions, ds.next_states), 1.0)
    np.testing.assert_allclose(counts / 200, q.transitions, atol=0)
    assert np.array_equal(ds.rewards, q.rewards[ds.states, ds.actions])


def test_exhaustive_requires_integral_counts(tabular_5x3):
    with pytest.raises(ValueError, match="integral"):
        exhaustive_dataset(tabular_5x3, 7)


# ---- serialization -----------------------------------------------------------------


def test_jsonl_round_trip(tmp_path, tabular_5x3):
    for labeled in (True, False):
        ds = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=25, labeled=labeled, seed=11)
        path = tmp_path / f"d{labeled}.jsonl"
        write_jsonl(ds, path)
        back = read_jsonl(path)
        assert len(back) == 25
        assert back.labeled == labeled
        assert np.array_equal(back.states, ds.states)
        assert np.array_equal(back.next_states, ds.next_states)
        if labeled:
            assert np.array_equal(back.rewards, ds.rewards)
        else:
            assert back.rewards is None
        header = json.loads(header_path(path).read_text())
        assert header["mdp_hash"] == tabular_5x3.content_hash()
        assert header["labeled"] == labeled
        assert header["n"] == 25


def test_jsonl_mixed_labels_round_trip(tmp_path, tabular_5x3):
    lab = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=4, seed=0)
    unlab = sample_dataset(tabular_5x3, Policy.uniform(5, 3), n=3, labeled=False, seed=1)
    both = mix_datasets(lab, unlab)
    path = tmp_path / "mixed.jsonl"
    write_jsonl(both, path)
    back = read_jsonl(path)
    assert not back.labeled
    assert np.array_equal(back.rewards[:4], lab.rewards)
    assert np.isnan(back.rewards[4:]).all()


def test_jsonl_malformed_line_names_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"s": 0, "a": 0, "r": null, "sp": 0}\n{"s": 0, "a": 0}\n')
    with pytest.raises(ValueError, match="line 2"):
        read_jsonl(path)


def test_jsonl_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    back = read_jsonl(path)
    assert len(back) == 0


# ---- dataset validation --------------------------------------------------------------


def test_dataset_id_validation():
    with pytest.raises(ValueError, match="state id"):
        OfflineDataset([5], [0], None, [0], labeled=False, num_states=5, num_actions=3)
    with pytest.raises(ValueError, match="action id"):
        OfflineDataset([0], [3], None, [0], labeled=False, num_states=5, num_actions=3)
    with pytest.raises(ValueError, match="reward"):
        OfflineDataset([0], [0], None, [0], labeled=True, num_states=5, num_actions=3)


def test_from_transitions_round_trip():
    ts = [Transition(0, 1, 0.5, 2), Transition(2, 0, None, 0)]
    ds = OfflineDataset.from_transitions(ts, num_states=3, num_actions=2)
    assert not ds.labeled
    assert ds.transitions == tuple(ts)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 40), labeled=st.booleans())
def test_sampled_datasets_are_in_range(seed, n, labeled):
    mdp = make_tabular_mdp(3, 2, gamma=0.8, seed=7)
    ds = sample_dataset(mdp, Policy.uniform(3, 2), n=n, labeled=labeled, seed=seed, noise=0.2)
    assert ds.states.max() < 3 and ds.actions.max() < 2
    if labeled:
        assert ds.rewards.min() >= 0.0 and ds.rewards.max() <= mdp.r_max
    else:
        assert ds.rewards is None
