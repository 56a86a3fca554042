import numpy as np
import pytest

from core.em import EmConfig, run_em
from core.haplotype import (
    HaplotypePool, HaplotypeProblem, build_pool, compatible_pairs, e_step, expected_counts, index_pairs, m_step,
    phase, posterior_pairs,
)
from data_processing.genotypes import GenotypeTable, parse_genotypes
from utils.errors import CapacityError, DataError, EmToolkitError


def simplex_grid(size, steps):
    """Every frequency vector of `size` entries on a grid of 1/steps."""
    points = []

    def fill(prefix, remaining):
        if len(prefix) == size - 1:
            points.append(prefix + [remaining])
            return
        for k in range(remaining + 1):
            fill(prefix + [k], remaining - k)

    fill([], steps)
    return np.array(points, dtype=float) / steps


def grid_logliks(index, grid):
    weights = grid[:, index.first] * grid[:, index.second]
    weights = np.where(index.first != index.second, 2.0 * weights, weights)
    membership = np.eye(index.num_individuals)[index.individual]
    with np.errstate(divide="ignore"):
        return np.log(weights @ membership).sum(axis=1)


def test_figure_style_table_pool_and_pairs(fig4_table):
    pool = build_pool(fig4_table)
    names = pool.render(fig4_table)
    rows = [tuple(row) for row in pool.haplotypes]
    assert rows == sorted(rows)
    assert set(names) == {"ACAC", "ACGC", "TGAC", "AGAC", "TCAC", "ACGT"}
    np.testing.assert_allclose(pool.frequencies, 1 / 6)

    pairs = [compatible_pairs(fig4_table.calls[i]) for i in range(3)]
    spell = lambda h: "".join(fig4_table.allele_letter(k, a) for k, a in enumerate(h))
    assert [(spell(a), spell(b)) for a, b in pairs[0]] == [("ACAC", "ACGC")]
    assert [(spell(a), spell(b)) for a, b in pairs[1]] == [("ACAC", "TGAC"), ("AGAC", "TCAC")]
    assert [(spell(a), spell(b)) for a, b in pairs[2]] == [("ACGC", "ACGT")]


@pytest.mark.parametrize("h", range(7))
def test_number_of_compatible_pairs(h):
    genotype = np.zeros((6, 2), dtype=np.int8)
    genotype[:h, 1] = 1
    pairs = compatible_pairs(genotype)
    assert len(pairs) == max(1, 2 ** (h - 1))
    assert len(set(pairs)) == len(pairs)
    for first, second in pairs:
        assert first <= second
        summed = np.array(first) + np.array(second)
        np.testing.assert_array_equal(summed, genotype.sum(axis=1))
    assert pairs == sorted(pairs)


def test_homozygous_individual_has_a_single_doubled_pair():
    pairs = compatible_pairs(np.array([[0, 0], [1, 1], [0, 0]]))
    assert pairs == [((0, 1, 0), (0, 1, 0))]


def test_e_step_by_hand_at_uniform_frequencies(fig4_table):
    pool = build_pool(fig4_table)
    counts, loglik = e_step(fig4_table, pool)
    expected = dict(zip(pool.render(fig4_table), counts))
    assert expected["ACAC"] == pytest.approx(1.5)
    assert expected["ACGC"] == pytest.approx(2.0)
    assert expected["ACGT"] == pytest.approx(1.0)
    for name in ("TGAC", "AGAC", "TCAC"):
        assert expected[name] == pytest.approx(0.5)
    assert counts.sum() == pytest.approx(2 * fig4_table.num_individuals)
    assert loglik == pytest.approx(np.log(2 / 36) + np.log(4 / 36) + np.log(2 / 36))


def test_homozygous_pairs_use_squared_frequency():
    table = parse_genotypes("x A/A C/C\ny A/G C/C\n")
    pool = HaplotypePool(haplotypes=np.array([[0, 0], [1, 0]]), frequencies=np.array([0.7, 0.3]))
    counts, loglik = e_step(table, pool)
    np.testing.assert_allclose(counts, [3.0, 1.0])
    assert loglik == pytest.approx(np.log(0.49) + np.log(2 * 0.7 * 0.3))
    np.testing.assert_allclose(m_step(counts, 2), [0.75, 0.25])


def test_unambiguous_table_reaches_counting_estimate():
    table = parse_genotypes("x1 A/A C/T\nx2 A/G C/C\nx3 A/A C/C\n")
    pool, _, trace = phase(table, EmConfig(tol=1e-12, max_iter=2000))
    names = pool.render(table)
    assert names == ["AC", "AT", "GC"]
    np.testing.assert_allclose(pool.frequencies, [4 / 6, 1 / 6, 1 / 6], atol=1e-6)

    index = index_pairs(table, pool)
    grid = simplex_grid(3, 1000)
    best = grid_logliks(index, grid).max()
    assert trace.final_loglik >= best - 1e-9
    assert np.allclose(grid[np.argmax(grid_logliks(index, grid))], [4 / 6, 1 / 6, 1 / 6], atol=1e-3)


def test_ambiguous_table_beats_every_grid_point():
    table = parse_genotypes("x1 A/G C/T\nx2 A/A C/C\nx3 G/G T/T\nx4 A/G C/C\nx5 A/A C/T\n")
    pool, _, trace = phase(table, EmConfig(tol=1e-12, max_iter=5000, restarts=3, seed=1))
    assert len(pool) == 4
    index = index_pairs(table, pool)
    assert trace.final_loglik >= grid_logliks(index, simplex_grid(4, 100)).max() - 1e-9
    assert trace.is_monotone()


def test_fixed_point_is_self_consistent(fig4_table):
    pool, _, _ = phase(fig4_table, EmConfig(tol=1e-14, max_iter=5000))
    counts, _ = e_step(fig4_table, pool)
    np.testing.assert_allclose(m_step(counts, fig4_table.num_individuals), pool.frequencies, atol=1e-5)


def test_best_phase_per_individual(fig4_table):
    pool, best, trace = phase(fig4_table)
    names = pool.render(fig4_table)
    calls = [(names[pair.first], names[pair.second]) for pair in best]
    assert calls[0] == ("ACAC", "ACGC")
    assert calls[1] == ("ACAC", "TGAC")
    assert calls[2] == ("ACGC", "ACGT")
    assert best[0].posterior == pytest.approx(1.0)
    assert best[1].posterior > 0.5
    assert pool.frequencies.sum() == pytest.approx(1.0)
    assert trace.converged


def test_posterior_pairs_sum_to_one(fig4_table):
    pool = build_pool(fig4_table)
    for pairs in posterior_pairs(fig4_table, pool):
        assert sum(pair.posterior for pair in pairs) == pytest.approx(1.0)


def test_individual_order_does_not_change_frequencies(fig4_table):
    order = [2, 0, 1]
    shuffled = GenotypeTable(
        ids=[fig4_table.ids[i] for i in order], alleles=fig4_table.alleles, calls=fig4_table.calls[order],
    )
    config = EmConfig(tol=1e-12, max_iter=3000)
    original, _, _ = phase(fig4_table, config)
    permuted, _, _ = phase(shuffled, config)
    np.testing.assert_array_equal(original.haplotypes, permuted.haplotypes)
    np.testing.assert_allclose(original.frequencies, permuted.frequencies, atol=1e-9)


def test_too_many_heterozygous_loci():
    row = " ".join(["A/G"] * 25)
    table = parse_genotypes(f"wide {row}\nnarrow {' '.join(['A/A'] * 25)}\n")
    with pytest.raises(CapacityError) as excinfo:
        phase(table)
    assert excinfo.value.record == "wide"


def test_capacity_limit_is_configurable():
    table = parse_genotypes("a A/G C/T G/T\nb A/A C/C G/G\n")
    with pytest.raises(CapacityError):
        build_pool(table, h_max=2)
    assert len(build_pool(table, h_max=3)) == 8


def test_empty_table_is_rejected():
    table = GenotypeTable(ids=[], alleles=[("A", "G")], calls=np.zeros((0, 1, 2), dtype=np.int8))
    with pytest.raises(DataError):
        build_pool(table)


def test_zero_frequency_individual_raises(fig4_table):
    pool = build_pool(fig4_table)
    index = index_pairs(fig4_table, pool)
    theta = np.zeros(len(pool))
    with pytest.raises(EmToolkitError):
        expected_counts(index, theta)


def random_dosage_table(rng, individuals=12, loci=5):
    rows = [f"i{k}\t" + "\t".join(str(d) for d in rng.integers(3, size=loci)) for k in range(individuals)]
    return parse_genotypes("\n".join(rows) + "\n")


def test_likelihood_never_decreases_from_random_starts():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        problem = HaplotypeProblem(random_dosage_table(rng))
        start = problem.initialize(rng, restart=1)
        theta, trace = run_em(problem, start, EmConfig(max_iter=60, tol=1e-12))
        assert trace.is_monotone(), f"seed {seed}"
        assert theta.sum() == pytest.approx(1.0)
