import numpy as np
import pytest

from data_processing.genotypes import parse_genotypes, write_genotypes
from utils.errors import DataError


def test_allele_pairs_are_normalized(fig4_table):
    assert fig4_table.ids == ["ind1", "ind2", "ind3"]
    assert fig4_table.alleles == [("A", "T"), ("C", "G"), ("A", "G"), ("C", "T")]
    np.testing.assert_array_equal(fig4_table.calls[1], [[0, 1], [0, 1], [0, 0], [0, 0]])
    np.testing.assert_array_equal(fig4_table.heterozygous_loci(0), [2])


def test_pair_order_and_separator_do_not_matter():
    table = parse_genotypes("x G|A  T/T\ny A/A T/T\n")
    np.testing.assert_array_equal(table.calls[0], [[0, 1], [0, 0]])
    assert table.alleles[1] == ("T", None)


def test_dosage_encoding():
    table = parse_genotypes("a\t0\t2\nb\t1\t1\n")
    assert table.alleles == [("0", "1"), ("0", "1")]
    np.testing.assert_array_equal(table.calls[:, 0], [[0, 0], [0, 1]])
    np.testing.assert_array_equal(table.calls[:, 1], [[1, 1], [0, 1]])


def test_write_genotypes_round_trips(fig4_table):
    again = parse_genotypes(write_genotypes(fig4_table))
    assert again.ids == fig4_table.ids
    assert again.alleles == fig4_table.alleles
    np.testing.assert_array_equal(again.calls, fig4_table.calls)


@pytest.mark.parametrize("text, fragment", [
    ("", "empty"),
    ("a A/C A/A\nb A/G A/A\n", "more than two alleles"),
    ("a A/C 0\nb A/C A/A\n", "mixes"),
    ("a A/C/T\n", "Malformed"),
    ("a A/C\nb A/C C/C\n", "different numbers"),
    ("onlyid\n", "at least one locus"),
    ("a X7\n", "Unrecognized"),
])
def test_malformed_tables(text, fragment):
    with pytest.raises(DataError, match=fragment):
        parse_genotypes(text)


def test_triallelic_error_names_the_locus():
    with pytest.raises(DataError, match="Locus 2"):
        parse_genotypes("a A/A A/C\nb A/A G/G\n")


def test_random_tables_round_trip(rng):
    for _ in range(20):
        individuals, loci = rng.integers(1, 10), rng.integers(1, 8)
        letters = [rng.choice(list("ACGT"), size=2, replace=False) for _ in range(loci)]
        rows = []
        for k in range(individuals):
            fields = [f"{pair[rng.integers(2)]}/{pair[rng.integers(2)]}" for pair in letters]
            rows.append(f"ind{k}\t" + "\t".join(fields) + "\n")
        table = parse_genotypes("".join(rows))
        written = write_genotypes(table)
        again = parse_genotypes(written)
        assert again.ids == table.ids
        assert again.alleles == table.alleles
        np.testing.assert_array_equal(again.calls, table.calls)
        assert write_genotypes(again) == written
