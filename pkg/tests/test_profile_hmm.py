import json

import numpy as np
import pytest
from scipy.special import logsumexp

from core.em import EmConfig
from core.profile_hmm import (
    ProfileHmm, ProfileHmmProblem, State, StatePath, SufficientStats, align, backward, baum_welch_update, build_alignment,
    expected_stats, forward, init_model, path_counts, path_log_probability, train, transition_masks, viterbi,
)
from data_processing.seqio import DNA, PROTEIN, Sequence, parse_fasta
from utils.errors import DataError


def random_hmm(rng, num_match, alphabet=DNA):
    d = alphabet.size
    tables = []
    for mask in transition_masks(num_match):
        table = np.zeros(mask.shape)
        for row in range(mask.shape[0]):
            if mask[row].any():
                table[row, mask[row]] = rng.dirichlet(np.ones(mask[row].sum()))
        tables.append(table)
    return ProfileHmm(
        match_emissions=rng.dirichlet(np.ones(d), size=num_match),
        insert_emissions=rng.dirichlet(np.ones(d), size=num_match + 1),
        match_transitions=tables[0],
        insert_transitions=tables[1],
        delete_transitions=tables[2],
        alphabet=alphabet,
    )


def all_paths(num_match, length):
    """Every Begin-to-End path that emits exactly `length` residues."""
    found = []

    def extend(states, emitted):
        kind, j = states[-1]
        if j == num_match and emitted == length:
            found.append(StatePath(states + [State("E", num_match + 1)]))
        moves = []
        if j < num_match and emitted < length:
            moves.append(State("M", j + 1))
        if kind != "D" and emitted < length:
            moves.append(State("I", j))
        if j < num_match and kind != "I":
            moves.append(State("D", j + 1))
        for state in moves:
            extend(states + [state], emitted + (state.kind in ("M", "I")))

    extend([State("B", 0)], 0)
    return found


@pytest.mark.parametrize("num_match", [1, 2])
@pytest.mark.parametrize("length", [0, 1, 2, 3])
def test_forward_and_viterbi_match_path_enumeration(num_match, length):
    rng = np.random.default_rng(100 * num_match + length)
    hmm = random_hmm(rng, num_match)
    seq = Sequence("x", rng.integers(4, size=length))
    paths = all_paths(num_match, length)
    scores = np.array([path_log_probability(hmm, path, seq) for path in paths])

    _, loglik = forward(hmm, seq)
    assert loglik == pytest.approx(logsumexp(scores), rel=1e-10)

    best_path, best = viterbi(hmm, seq)
    assert best == pytest.approx(scores.max(), rel=1e-10)
    assert str(best_path) == str(paths[int(np.argmax(scores))])


@pytest.mark.parametrize("num_match", [1, 2])
def test_expected_counts_match_path_enumeration(num_match):
    rng = np.random.default_rng(7 + num_match)
    hmm = random_hmm(rng, num_match)
    seq = Sequence("x", rng.integers(4, size=3))
    paths = all_paths(num_match, 3)
    log_joint = np.array([path_log_probability(hmm, path, seq) for path in paths])
    posterior = np.exp(log_joint - logsumexp(log_joint))

    expected = SufficientStats.zeros(num_match, 4)
    for path, weight in zip(paths, posterior):
        expected = expected + path_counts(hmm, path, seq, weight)

    stats = expected_stats(hmm, seq)
    for name in ("match_emissions", "insert_emissions", "match_transitions",
                 "insert_transitions", "delete_transitions"):
        np.testing.assert_allclose(getattr(stats, name), getattr(expected, name), rtol=1e-9, atol=1e-12)


def test_backward_agrees_with_forward(rng):
    hmm = random_hmm(rng, 6)
    seq = Sequence("x", rng.integers(4, size=25))
    table, loglik = forward(hmm, seq)
    table = backward(hmm, seq, table)
    assert table.backward_loglik == pytest.approx(loglik, rel=1e-10)


def test_long_sequence_does_not_underflow(rng):
    hmm = random_hmm(rng, 5)
    seq = Sequence("x", rng.integers(4, size=2000))
    _, loglik = forward(hmm, seq)
    assert np.isfinite(loglik)
    assert loglik < -1000


def test_posterior_emissions_sum_to_sequence_length(rng):
    hmm = random_hmm(rng, 4)
    seq = Sequence("x", rng.integers(4, size=9))
    stats = expected_stats(hmm, seq, weight=2.5)
    assert stats.total_emissions() == pytest.approx(2.5 * 9, rel=1e-10)
    _, loglik = forward(hmm, seq)
    assert stats.loglik == pytest.approx(2.5 * loglik)


def test_update_from_known_path_is_relative_frequency(rng):
    hmm = random_hmm(rng, 2)
    seq = Sequence("x", np.array([0, 2, 2]))
    path = StatePath([State("B", 0), State("M", 1), State("I", 1), State("M", 2), State("E", 3)])
    counts = path_counts(hmm, path, seq)
    assert counts.match_emissions[0, 0] == 1
    assert counts.insert_emissions[1, 2] == 1
    assert counts.match_transitions[1, 1] == 1

    updated = baum_welch_update(counts, alpha=0.0, alphabet=DNA, previous=hmm)
    np.testing.assert_allclose(updated.match_emissions[0], [1, 0, 0, 0])
    np.testing.assert_allclose(updated.match_emissions[1], [0, 0, 1, 0])
    np.testing.assert_allclose(updated.match_transitions[0], [1, 0, 0])
    np.testing.assert_allclose(updated.match_transitions[1], [0, 1, 0])
    np.testing.assert_allclose(updated.insert_transitions[1], [1, 0])
    # Rows the path never leaves keep their previous values
    np.testing.assert_allclose(updated.delete_transitions, hmm.delete_transitions)
    np.testing.assert_allclose(updated.insert_emissions[0], hmm.insert_emissions[0])


def test_update_with_pseudocount_smooths_every_allowed_cell():
    counts = SufficientStats.zeros(2, 4)
    counts.match_emissions[0] = [3, 1, 0, 0]
    updated = baum_welch_update(counts, alpha=1.0, alphabet=DNA)
    np.testing.assert_allclose(updated.match_emissions[0], [4 / 8, 2 / 8, 1 / 8, 1 / 8])
    np.testing.assert_allclose(updated.match_transitions[2], [0.5, 0.5, 0.0])
    np.testing.assert_allclose(updated.delete_transitions[0], [0.0, 0.0])
    np.testing.assert_allclose(updated.delete_transitions[2], [1.0, 0.0])


def test_path_with_illegal_transition_is_rejected(rng):
    hmm = random_hmm(rng, 2)
    seq = Sequence("x", np.array([1]))
    bad = StatePath([State("B", 0), State("I", 0), State("D", 1), State("M", 2), State("E", 3)])
    with pytest.raises(DataError):
        path_log_probability(hmm, bad, seq)


def test_forbidden_transition_mass_is_rejected(rng):
    hmm = random_hmm(rng, 2)
    broken = hmm.delete_transitions.copy()
    broken[2] = [0.5, 0.5]
    with pytest.raises(DataError):
        ProfileHmm(hmm.match_emissions, hmm.insert_emissions, hmm.match_transitions,
                   hmm.insert_transitions, broken, alphabet=DNA)


def test_init_model_length_rounds_half_up():
    seqs = parse_fasta(">a\nACGT\n>b\nACGTA\n")
    hmm = init_model(seqs, DNA)
    assert hmm.num_match == 5
    np.testing.assert_allclose(hmm.match_emissions.sum(axis=1), 1.0)


def family(rng, count=8):
    consensus = rng.integers(4, size=12)
    seqs = []
    for k in range(count):
        residues = consensus.copy()
        flips = rng.random(12) < 0.1
        residues[flips] = rng.integers(4, size=flips.sum())
        if k % 3 == 1:
            residues = np.delete(residues, 5)
        elif k % 3 == 2:
            residues = np.insert(residues, 7, rng.integers(4))
        seqs.append(Sequence(f"f{k}", residues))
    return seqs


def test_training_is_monotone_and_alignment_degaps_to_inputs(rng):
    seqs = family(rng)
    hmm, trace = train(seqs, em=EmConfig(max_iter=40, tol=1e-8), alphabet=DNA)
    assert trace.is_monotone()
    assert trace.final_loglik >= trace.loglik_per_iter[0]

    alignment, scores = align(hmm, seqs)
    assert alignment.ids == [seq.id for seq in seqs]
    assert len(scores) == len(seqs)
    for k, seq in enumerate(seqs):
        np.testing.assert_array_equal(alignment.degapped(k), seq.residues)
    assert np.all((alignment.rows >= 0).any(axis=0))


def test_weighted_e_step_counts_a_doubled_sequence_twice(rng):
    seqs = family(rng, count=4)
    hmm = random_hmm(rng, 12)
    doubled, _ = ProfileHmmProblem(seqs + [seqs[0]], alphabet=DNA, alpha=0.0).e_step(hmm)
    weighted, _ = ProfileHmmProblem(seqs, weights=[2.0, 1.0, 1.0, 1.0], alphabet=DNA, alpha=0.0).e_step(hmm)
    np.testing.assert_allclose(weighted.match_emissions, doubled.match_emissions, rtol=1e-9)
    np.testing.assert_allclose(weighted.delete_transitions, doubled.delete_transitions, rtol=1e-9)
    assert weighted.loglik == pytest.approx(doubled.loglik, rel=1e-10)


def test_model_json_round_trip(rng):
    hmm = random_hmm(rng, 3)
    again = ProfileHmm.from_dict(json.loads(json.dumps(hmm.to_dict())))
    assert again.alphabet is DNA
    for name in ("match_emissions", "insert_emissions", "match_transitions",
                 "insert_transitions", "delete_transitions"):
        np.testing.assert_array_equal(getattr(again, name), getattr(hmm, name))


def test_build_alignment_left_justifies_inserts(rng):
    hmm = random_hmm(rng, 1)
    seqs = [Sequence("a", np.array([0, 1, 2])), Sequence("b", np.array([3])), Sequence("c", np.array([1, 2]))]
    paths = [
        StatePath([State("B", 0), State("M", 1), State("I", 1), State("I", 1), State("E", 2)]),
        StatePath([State("B", 0), State("M", 1), State("E", 2)]),
        StatePath([State("B", 0), State("I", 0), State("M", 1), State("E", 2)]),
    ]
    alignment = build_alignment(paths, seqs, num_match=1, alphabet=DNA)
    np.testing.assert_array_equal(alignment.rows, [
        [-1, 0, 1, 2],
        [-1, 3, -1, -1],
        [1, 2, -1, -1],
    ])


def test_all_delete_match_column_is_dropped(rng):
    seqs = [Sequence("a", np.array([0])), Sequence("b", np.array([1]))]
    path = StatePath([State("B", 0), State("D", 1), State("M", 2), State("E", 3)])
    alignment = build_alignment([path, path], seqs, num_match=2, alphabet=DNA)
    np.testing.assert_array_equal(alignment.rows, [[0], [1]])


def test_empty_training_set_is_rejected():
    with pytest.raises(DataError):
        train([], alphabet=DNA)


# Five short proteins: C first, H fourth, F or Y fifth; one deletion and one insertion
TOY_FAMILY = ">s1\nCAEHF\n>s2\nCGKHY\n>s3\nCAEF\n>s4\nCGKWHY\n>s5\nCSEHF\n"


def test_training_enriches_the_conserved_columns():
    seqs = parse_fasta(TOY_FAMILY * 3, PROTEIN)
    hmm, trace = train(seqs, em=EmConfig(restarts=4, seed=3, max_iter=100), alpha=0.1, alphabet=PROTEIN)
    assert hmm.num_match == 5
    consensus = PROTEIN.decode(np.argmax(hmm.match_emissions, axis=1))
    assert consensus[0] == "C"
    assert consensus[3] == "H"
    assert consensus[4] in "FY"
    assert trace.is_monotone()


def test_identical_sequences_share_a_viterbi_path(rng):
    seqs = family(rng, count=5)
    twins = [Sequence("twin1", seqs[2].residues.copy()), Sequence("twin2", seqs[2].residues.copy())]
    hmm, _ = train(seqs + twins, em=EmConfig(max_iter=30), alphabet=DNA)
    alignment, scores = align(hmm, seqs + twins)
    np.testing.assert_array_equal(alignment.rows[-1], alignment.rows[-2])
    np.testing.assert_array_equal(alignment.rows[-1], alignment.rows[2])
    assert scores[-1] == scores[-2] == scores[2]


def test_doubling_all_weights_keeps_the_fixed_point(rng):
    seqs = family(rng, count=5)
    em = EmConfig(max_iter=15, tol=1e-300)
    single, single_trace = train(seqs, [1.0] * 5, em, alpha=0.0, alphabet=DNA)
    double, double_trace = train(seqs, [2.0] * 5, em, alpha=0.0, alphabet=DNA)
    for name in ("match_emissions", "insert_emissions", "match_transitions",
                 "insert_transitions", "delete_transitions"):
        np.testing.assert_allclose(getattr(double, name), getattr(single, name), rtol=1e-8, atol=1e-12)
    np.testing.assert_allclose(double_trace.loglik_per_iter, 2 * np.array(single_trace.loglik_per_iter), rtol=1e-10)


def test_unsmoothed_training_never_decreases_the_likelihood():
    for seed in range(100):
        seqs = family(np.random.default_rng(seed), count=4)
        _, trace = train(seqs, em=EmConfig(max_iter=10, tol=1e-300), alpha=0.0, alphabet=DNA)
        assert trace.is_monotone(), f"seed {seed}"
