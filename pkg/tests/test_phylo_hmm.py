import itertools

import numpy as np
import pytest
from scipy.linalg import expm
from scipy.stats import mannwhitneyu

from core.em import EmConfig
from core.phylo_hmm import (
    CONSERVED, JUKES_CANTOR, PhyloHmmParams, PhyloHmmProblem, chain_forward_backward, column_likelihood,
    compress_columns, conservation_scores, emission_objective, fit, jc_transition, maximize_emission_objective,
    pattern_log_likelihoods, simulate, stationary_distribution,
)
from core.phylo_hmm import loglik as phylo_loglik
from data_processing.newick import parse_tree
from data_processing.seqio import DNA, PROTEIN, Alignment, parse_alignment
from utils.errors import DataError

RECOVERY_TREE = "((a:0.4,b:0.5):0.2,(c:0.45,d:0.35):0.2);"


@pytest.mark.parametrize("branch_length", [0.01, 0.1, 0.5, 1.0, 5.0])
def test_jukes_cantor_matches_matrix_exponential(branch_length):
    expected = expm(branch_length * JUKES_CANTOR.rate_matrix)
    np.testing.assert_allclose(jc_transition(branch_length), expected, atol=1e-12)
    np.testing.assert_allclose(jc_transition(branch_length).sum(axis=1), 1.0, atol=1e-14)


def test_jukes_cantor_semigroup():
    np.testing.assert_allclose(jc_transition(0.3) @ jc_transition(0.45), jc_transition(0.75), atol=1e-10)
    np.testing.assert_allclose(jc_transition(0.0), np.eye(4))
    with pytest.raises(ValueError):
        jc_transition(-0.1)


def enumerate_column_likelihood(tree, column, scale=1.0):
    """Sum over every assignment of states to the internal nodes."""
    internal = [node for node in range(tree.num_nodes) if tree.children[node]]
    states = np.full(tree.num_nodes, -1)
    for leaf, residue in zip(tree.leaves, column):
        states[leaf] = residue
    total = 0.0
    for assignment in itertools.product(range(4), repeat=len(internal)):
        states[internal] = assignment
        value = 0.25
        for node in range(1, tree.num_nodes):
            value *= jc_transition(tree.branch_lengths[node] * scale)[states[tree.parent[node]], states[node]]
        total += value
    return total


def test_pruning_matches_enumeration_over_ancestral_states(four_leaf_tree):
    for column in itertools.product(range(4), repeat=4):
        expected = enumerate_column_likelihood(four_leaf_tree, column, scale=0.7)
        assert column_likelihood(four_leaf_tree, column, scale=0.7) == pytest.approx(expected, rel=1e-10)


def test_pattern_likelihoods_sum_to_one_over_all_columns(four_leaf_tree):
    columns = np.array(list(itertools.product(range(4), repeat=4)))
    log_lik = pattern_log_likelihoods(four_leaf_tree, columns, four_leaf_tree.branch_lengths)
    assert np.exp(log_lik).sum() == pytest.approx(1.0, rel=1e-12)


def test_small_trees():
    single = parse_tree("(a:0.3);")
    assert column_likelihood(single, "G") == pytest.approx(0.25)
    pair = parse_tree("(a:0.1,b:0.2);")
    assert column_likelihood(pair, "AC") == pytest.approx(0.25 * jc_transition(0.3)[0, 1], rel=1e-12)
    assert column_likelihood(pair, [2, 2]) == pytest.approx(0.25 * jc_transition(0.3)[2, 2], rel=1e-12)


def test_column_likelihood_rejects_bad_residue(four_leaf_tree):
    with pytest.raises(DataError):
        column_likelihood(four_leaf_tree, "ACGN")


def test_chain_matches_state_path_enumeration(rng):
    mu, nu = 0.2, 0.35
    emit_c, emit_n = rng.random(3), rng.random(3)
    A = np.array([[1 - mu, mu], [nu, 1 - nu]])
    pi = stationary_distribution(mu, nu)
    emit = np.column_stack([emit_c, emit_n])

    evidence = 0.0
    conserved = np.zeros(3)
    counts = np.zeros((2, 2))
    for path in itertools.product(range(2), repeat=3):
        joint = pi[path[0]] * emit[0, path[0]]
        for i in range(1, 3):
            joint *= A[path[i - 1], path[i]] * emit[i, path[i]]
        evidence += joint
        conserved += joint * (np.array(path) == CONSERVED)
        for i in range(1, 3):
            counts[path[i - 1], path[i]] += joint

    posterior, transition_counts, loglik = chain_forward_backward(emit_c, emit_n, mu, nu)
    np.testing.assert_allclose(posterior, conserved / evidence, rtol=1e-10)
    np.testing.assert_allclose(transition_counts, counts / evidence, rtol=1e-10)
    assert loglik == pytest.approx(np.log(evidence), rel=1e-10)


def test_equal_emissions_give_stationary_posterior():
    posterior, _, _ = chain_forward_backward(np.full(6, 0.3), np.full(6, 0.3), 0.1, 0.05)
    np.testing.assert_allclose(posterior, 0.05 / 0.15, rtol=1e-12)


def test_single_column_is_bayes_rule():
    posterior, counts, loglik = chain_forward_backward([0.2], [0.6], 0.1, 0.3)
    prior_c = 0.3 / 0.4
    expected = prior_c * 0.2 / (prior_c * 0.2 + (1 - prior_c) * 0.6)
    assert posterior[0] == pytest.approx(expected, rel=1e-12)
    assert counts.sum() == 0.0
    assert loglik == pytest.approx(np.log(prior_c * 0.2 + (1 - prior_c) * 0.6))


def test_chain_rejects_column_with_no_support():
    with pytest.raises(DataError) as excinfo:
        chain_forward_backward([0.1, 0.0], [0.2, 0.0], 0.1, 0.1)
    assert excinfo.value.column == 2


def test_simulate_is_deterministic_and_follows_tree_leaves(four_leaf_tree):
    params = PhyloHmmParams(mu=0.1, nu=0.05, rho=0.3, branch_lengths=four_leaf_tree.branch_lengths[1:])
    first, states = simulate(four_leaf_tree, params, 300, seed=5)
    again, states_again = simulate(four_leaf_tree, params, 300, seed=5)
    np.testing.assert_array_equal(first.rows, again.rows)
    np.testing.assert_array_equal(states, states_again)
    assert first.ids == four_leaf_tree.leaf_names
    assert first.num_columns == 300
    assert set(np.unique(states)) <= {0, 1}


def test_fit_recovers_simulated_parameters():
    tree = parse_tree(RECOVERY_TREE)
    truth = PhyloHmmParams(mu=0.1, nu=0.05, rho=0.3, branch_lengths=tree.branch_lengths[1:])
    alignment, states = simulate(tree, truth, 2000, seed=11)

    params, trace = fit(alignment, tree, EmConfig(restarts=2, seed=3, tol=1e-7, max_iter=300))
    assert trace.is_monotone()
    assert params.rho == pytest.approx(0.3, abs=0.1)
    assert params.mu == pytest.approx(0.1, abs=0.05)
    assert params.nu == pytest.approx(0.05, abs=0.05)

    scores = conservation_scores(alignment, tree, params)
    conserved = states == CONSERVED
    u, _ = mannwhitneyu(scores[conserved], scores[~conserved])
    assert u / (conserved.sum() * (~conserved).sum()) >= 0.8


def test_emission_m_step_reaches_a_stationary_point():
    tree = parse_tree(RECOVERY_TREE)
    truth = PhyloHmmParams(mu=0.1, nu=0.05, rho=0.3, branch_lengths=tree.branch_lengths[1:])
    alignment, _ = simulate(tree, truth, 500, seed=2)
    problem = PhyloHmmProblem(alignment, tree)
    start = problem.initialize(np.random.default_rng(0), 0)
    stats, _ = problem.e_step(start)
    patterns = problem.patterns
    bounds = np.array([(1e-4, 0.999)] + [(1e-6, 10.0)] * len(start.branch_lengths))

    rho, lengths, value = maximize_emission_objective(
        tree, patterns, stats.weight_conserved, stats.weight_nonconserved, start.rho, start.branch_lengths,
    )
    assert value >= emission_objective(
        tree, patterns, stats.weight_conserved, stats.weight_nonconserved, start.rho, start.branch_lengths,
    )

    total = patterns.counts.sum()
    point = np.concatenate([[rho], lengths])

    def objective(x):
        return -emission_objective(tree, patterns, stats.weight_conserved, stats.weight_nonconserved,
                                   x[0], x[1:]) / total

    gradient = np.zeros_like(point)
    for k in range(point.shape[0]):
        step = 1e-6 * max(1.0, point[k])
        up, down = point.copy(), point.copy()
        up[k] = min(point[k] + step, bounds[k, 1])
        down[k] = max(point[k] - step, bounds[k, 0])
        gradient[k] = (objective(up) - objective(down)) / (up[k] - down[k])
    at_lower = np.isclose(point, bounds[:, 0]) & (gradient > 0)
    at_upper = np.isclose(point, bounds[:, 1]) & (gradient < 0)
    gradient[at_lower | at_upper] = 0.0
    assert np.linalg.norm(gradient) < 1e-4


def test_repeated_columns_share_a_pattern(four_leaf_tree):
    alignment = parse_alignment(">a\nAAC\n>b\nAAC\n>c\nAAG\n>d\nAAT\n")
    patterns = compress_columns(alignment, four_leaf_tree)
    assert patterns.leaves.shape[0] == 2
    np.testing.assert_array_equal(patterns.counts[patterns.inverse], [2, 2, 1])


def test_rows_are_matched_to_leaves_by_name(four_leaf_tree):
    params = PhyloHmmParams(mu=0.1, nu=0.1, rho=0.5, branch_lengths=four_leaf_tree.branch_lengths[1:])
    alignment = parse_alignment(">a\nACGT\n>b\nACGA\n>c\nTCGA\n>d\nACCA\n")
    shuffled = Alignment(ids=alignment.ids[::-1], rows=alignment.rows[::-1], alphabet=DNA)
    np.testing.assert_allclose(
        conservation_scores(alignment, four_leaf_tree, params),
        conservation_scores(shuffled, four_leaf_tree, params),
    )


def test_gapped_column_is_named(four_leaf_tree):
    alignment = parse_alignment(">a\nAC-T\n>b\nACGT\n>c\nACGT\n>d\nACGT\n")
    with pytest.raises(DataError) as excinfo:
        fit(alignment, four_leaf_tree)
    assert excinfo.value.column == 3


def test_leaf_mismatch_lists_the_difference(four_leaf_tree):
    alignment = parse_alignment(">a\nA\n>b\nA\n>c\nA\n>x\nA\n")
    with pytest.raises(DataError, match="d, x"):
        fit(alignment, four_leaf_tree)


def test_non_binary_tree_is_rejected():
    tree = parse_tree("(a:0.1,b:0.1,c:0.1);")
    alignment = parse_alignment(">a\nA\n>b\nA\n>c\nA\n")
    with pytest.raises(DataError, match="binary"):
        fit(alignment, tree)


def test_protein_alignment_is_rejected(four_leaf_tree):
    alignment = parse_alignment(">a\nW\n>b\nA\n>c\nA\n>d\nA\n", PROTEIN)
    with pytest.raises(DataError, match="DNA"):
        fit(alignment, four_leaf_tree)


def test_identical_column_scores_above_a_discordant_one(four_leaf_tree):
    params = PhyloHmmParams(mu=0.1, nu=0.1, rho=0.3, branch_lengths=four_leaf_tree.branch_lengths[1:])
    columns = np.array([[0, 0, 0, 0], [0, 1, 2, 3]])
    log_c = pattern_log_likelihoods(four_leaf_tree, columns, params.node_lengths(params.rho))
    log_n = pattern_log_likelihoods(four_leaf_tree, columns, params.node_lengths())
    assert log_c[0] - log_n[0] > 0 > log_c[1] - log_n[1]

    flank = ">a\nACGTA{}TTGCA\n>b\nACGAA{}TTGCC\n>c\nTCGTA{}ATGCA\n>d\nACCTA{}TAGCA\n"
    identical = parse_alignment(flank.format("A", "A", "A", "A"))
    discordant = parse_alignment(flank.format("A", "C", "G", "T"))
    scores_identical = conservation_scores(identical, four_leaf_tree, params)
    scores_discordant = conservation_scores(discordant, four_leaf_tree, params)
    assert scores_identical[5] > scores_discordant[5]


def test_indistinguishable_states_give_the_stationary_track():
    tree = parse_tree(RECOVERY_TREE)
    params = PhyloHmmParams(mu=0.1, nu=0.05, rho=0.999, branch_lengths=tree.branch_lengths[1:])
    alignment, _ = simulate(tree, params, 400, seed=9)
    scores = conservation_scores(alignment, tree, params)
    np.testing.assert_allclose(scores, 0.05 / 0.15, atol=0.02)


def test_even_switching_conserves_half_the_columns(four_leaf_tree):
    params = PhyloHmmParams(mu=0.5, nu=0.5, rho=0.3, branch_lengths=four_leaf_tree.branch_lengths[1:])
    _, states = simulate(four_leaf_tree, params, 10_000, seed=13)
    fraction = np.mean(states == CONSERVED)
    assert abs(fraction - 0.5) < 3 * np.sqrt(0.25 / 10_000)


def test_tiny_scaling_keeps_conserved_columns_monomorphic():
    tree = parse_tree("((a:2.0,b:2.0):1.0,(c:2.0,d:2.0):1.0);")
    params = PhyloHmmParams(mu=0.2, nu=0.2, rho=1e-4, branch_lengths=tree.branch_lengths[1:])
    alignment, states = simulate(tree, params, 4000, seed=17)
    monomorphic = np.all(alignment.rows == alignment.rows[0], axis=0)
    conserved = states == CONSERVED
    # Six edges of length rho * beta; each keeps the residue with the JC diagonal
    expected = np.prod([jc_transition(1e-4 * b)[0, 0] for b in tree.branch_lengths[1:]])
    assert monomorphic[conserved].mean() >= expected - 0.01
    assert monomorphic[~conserved].mean() < 0.2


def test_fit_beats_the_generating_parameters_when_states_coincide():
    tree = parse_tree(RECOVERY_TREE)
    truth = PhyloHmmParams(mu=0.1, nu=0.05, rho=0.999, branch_lengths=tree.branch_lengths[1:])
    alignment, _ = simulate(tree, truth, 500, seed=23)
    params, trace = fit(alignment, tree, EmConfig(restarts=3, seed=4, tol=1e-8, max_iter=200))
    at_truth = phylo_loglik(alignment, tree, truth)
    assert trace.final_loglik >= at_truth - 1e-6 * abs(at_truth)
    assert phylo_loglik(alignment, tree, params) == pytest.approx(trace.final_loglik, rel=1e-9)


def test_generalized_em_never_decreases_the_likelihood():
    tree = parse_tree(RECOVERY_TREE)
    truth = PhyloHmmParams(mu=0.1, nu=0.1, rho=0.3, branch_lengths=tree.branch_lengths[1:])
    for seed in range(100):
        alignment, _ = simulate(tree, truth, 120, seed=seed)
        _, trace = fit(alignment, tree, EmConfig(seed=seed, max_iter=6, tol=1e-300))
        assert trace.is_monotone(), f"seed {seed}"


def test_batched_transitions_match_single_matrices(four_leaf_tree):
    lengths = np.array([0.0, 0.05, 0.3, 2.0])
    stacked = JUKES_CANTOR.transitions(lengths)
    assert stacked.shape == (4, 4, 4)
    for matrix, length in zip(stacked, lengths):
        np.testing.assert_allclose(matrix, jc_transition(length), atol=1e-15)

    relabelled = four_leaf_tree.with_branch_lengths(np.arange(1.0, len(four_leaf_tree.edges) + 1))
    np.testing.assert_array_equal(relabelled.branch_lengths[four_leaf_tree.edges], np.arange(1.0, 7.0))
    assert relabelled.branch_lengths[0] == 0.0
