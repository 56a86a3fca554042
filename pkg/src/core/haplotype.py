"""
haplotype.py

Haplotype frequency estimation from unphased biallelic genotypes under random
mating without recombination, with per-individual phase calls.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start
from data_processing.genotypes import GenotypeTable
from utils.errors import CapacityError, DataError, EmToolkitError
from utils.logger import setup_logger

# Logger for haplotype phasing
logger = setup_logger(name="haplotype", log_filename="haplotype.log")

H_MAX = 20
FREQUENCY_FLOOR = 1e-12
REPORT_ZERO_BELOW = 1e-8

Haplotype = Tuple[int, ...]


@dataclass
class HaplotypePool:
    """
    Distinct haplotypes in lexicographic order of their allele vectors, with
    population frequencies.
    """

    haplotypes: np.ndarray   # (m, loci) of allele indices
    frequencies: np.ndarray

    def __len__(self) -> int:
        return int(self.haplotypes.shape[0])

    def render(self, table: GenotypeTable) -> List[str]:
        """Haplotypes spelled with the locus allele letters."""
        return [
            "".join(table.allele_letter(locus, int(a)) for locus, a in enumerate(haplotype))
            for haplotype in self.haplotypes
        ]


@dataclass
class PhasePair:
    """Unordered pair of pool indices (first <= second) and its posterior probability."""

    first: int
    second: int
    posterior: float


@dataclass
class PairIndex:
    """Every compatible pair of every individual as flat pool-index arrays, in canonical order."""

    individual: np.ndarray
    first: np.ndarray
    second: np.ndarray
    num_individuals: int


def _pair_arrays(calls: np.ndarray, individual: str = "", h_max: int = H_MAX) -> Tuple[np.ndarray, np.ndarray]:
    """
    Both haplotypes of every compatible phase, shape (pairs, loci) each.

    The first heterozygous locus carries allele 0 on the first haplotype,
    which makes first < second lexicographically; the remaining
    heterozygous loci run through binary counting with the earliest locus
    most significant, which yields lexicographic pair order.
    """
    het = np.flatnonzero(calls[:, 0] != calls[:, 1])
    h = het.shape[0]
    if h > h_max:
        raise CapacityError(
            f"{h} heterozygous loci exceed the limit of {h_max}", record=individual or None,
        )
    base = calls[:, 0].astype(np.int8)
    if h == 0:
        return base[None, :], base[None, :].copy()

    free = h - 1
    patterns = np.arange(2 ** free, dtype=np.int64)
    shifts = np.arange(free - 1, -1, -1, dtype=np.int64)
    bits = ((patterns[:, None] >> shifts[None, :]) & 1).astype(np.int8)

    first = np.tile(base, (patterns.shape[0], 1))
    first[:, het[0]] = 0
    first[:, het[1:]] = bits
    second = first.copy()
    second[:, het] = 1 - first[:, het]
    return first, second


def compatible_pairs(
    genotype: np.ndarray, individual: str = "", h_max: int = H_MAX,
) -> List[Tuple[Haplotype, Haplotype]]:
    """
    Unordered haplotype pairs that explain one genotype.

    Parameters
    ----------
    genotype : numpy.ndarray
        (loci, 2) sorted allele indices of one individual.

    Returns
    -------
    list
        max(1, 2 ** (h - 1)) pairs for h heterozygous loci, each as
        (smaller, larger) haplotype, in lexicographic order.

    Raises
    ------
    CapacityError
        If h exceeds `h_max`.
    """
    first, second = _pair_arrays(np.asarray(genotype), individual, h_max)
    return [(tuple(int(a) for a in x), tuple(int(a) for a in y)) for x, y in zip(first, second)]


def _enumerate(table: GenotypeTable, h_max: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    return [_pair_arrays(table.calls[i], table.ids[i], h_max) for i in range(table.num_individuals)]


def _index(pairs: List[Tuple[np.ndarray, np.ndarray]], haplotypes: np.ndarray) -> PairIndex:
    lookup = {row.tobytes(): j for j, row in enumerate(haplotypes)}
    individual, first, second = [], [], []
    for i, (a, b) in enumerate(pairs):
        individual.append(np.full(a.shape[0], i, dtype=np.int64))
        first.append(np.array([lookup[row.tobytes()] for row in a], dtype=np.int64))
        second.append(np.array([lookup[row.tobytes()] for row in b], dtype=np.int64))
    return PairIndex(
        individual=np.concatenate(individual), first=np.concatenate(first),
        second=np.concatenate(second), num_individuals=len(pairs),
    )


def build_pool(table: GenotypeTable, h_max: int = H_MAX) -> HaplotypePool:
    """
    Union of all haplotypes that appear in some compatible pair, with
    uniform frequencies.

    Raises
    ------
    DataError
        If the table has no individuals.
    CapacityError
        If some individual is too heterozygous.
    """
    if table.num_individuals == 0:
        raise DataError("Genotype table has no individuals")
    pairs = _enumerate(table, h_max)
    stacked = np.concatenate([np.vstack([a, b]) for a, b in pairs])
    haplotypes = np.unique(stacked, axis=0)
    return HaplotypePool(haplotypes=haplotypes, frequencies=np.full(haplotypes.shape[0], 1.0 / haplotypes.shape[0]))


def index_pairs(table: GenotypeTable, pool: HaplotypePool, h_max: int = H_MAX) -> PairIndex:
    """Compatible pairs of every individual as indices into `pool`."""
    try:
        return _index(_enumerate(table, h_max), pool.haplotypes.astype(np.int8))
    except KeyError as e:
        raise DataError("Pool lacks a haplotype compatible with the genotypes") from e


def _pair_weights(index: PairIndex, theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unnormalized pair weights and per-individual totals."""
    weights = theta[index.first] * theta[index.second]
    weights = np.where(index.first != index.second, 2.0 * weights, weights)
    totals = np.bincount(index.individual, weights=weights, minlength=index.num_individuals)
    return weights, totals


def expected_counts(index: PairIndex, theta: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    E[n_j] for every pool haplotype and the observed-data loglik.

    Raises
    ------
    EmToolkitError
        If an individual has zero total pair weight.
    """
    weights, totals = _pair_weights(index, theta)
    if np.any(totals <= 0):
        raise EmToolkitError(f"Individual {int(np.flatnonzero(totals <= 0)[0]) + 1} has no compatible mass")
    posterior = weights / totals[index.individual]
    counts = (
        np.bincount(index.first, weights=posterior, minlength=theta.shape[0])
        + np.bincount(index.second, weights=posterior, minlength=theta.shape[0])
    )
    return counts, float(np.log(totals).sum())


def e_step(table: GenotypeTable, pool: HaplotypePool, h_max: int = H_MAX) -> Tuple[np.ndarray, float]:
    """
    Expected haplotype counts under the pool's current frequencies.

    Parameters
    ----------
    table : GenotypeTable
        Unphased genotypes.
    pool : HaplotypePool
        Candidate haplotypes and their frequencies.
    h_max : int, optional
        Most heterozygous loci an individual may carry before enumeration is refused.

    Returns
    -------
    tuple
        E[n_j] for every pool haplotype (summing to 2n) and the log-likelihood
        of the genotypes at the current frequencies.
    """
    return expected_counts(index_pairs(table, pool, h_max), pool.frequencies)


def m_step(counts: np.ndarray, num_individuals: int) -> np.ndarray:
    """theta_j = E[n_j] / 2n."""
    return counts / (2.0 * num_individuals)


def posterior_pairs(table: GenotypeTable, pool: HaplotypePool, h_max: int = H_MAX) -> List[List[PhasePair]]:
    """Posterior of every compatible pair, per individual, in canonical order."""
    index = index_pairs(table, pool, h_max)
    weights, totals = _pair_weights(index, pool.frequencies)
    result: List[List[PhasePair]] = [[] for _ in range(index.num_individuals)]
    for i, a, b, w in zip(index.individual, index.first, index.second, weights):
        result[i].append(PhasePair(first=int(a), second=int(b), posterior=float(w / totals[i])))
    return result


class HaplotypeProblem(EmProblem[np.ndarray, np.ndarray]):
    """EM over the frequency vector of a fixed pool."""

    def __init__(self, table: GenotypeTable, h_max: int = H_MAX, floor: float = FREQUENCY_FLOOR):
        self.pool = build_pool(table, h_max)
        self.index = index_pairs(table, self.pool, h_max)
        self.num_individuals = table.num_individuals
        self.floor = floor

    def initialize(self, rng: np.random.Generator, restart: int) -> np.ndarray:
        if restart == 0:
            return self.pool.frequencies.copy()
        return rng.dirichlet(np.ones(len(self.pool)))

    def e_step(self, params: np.ndarray, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float]:
        return expected_counts(self.index, params)

    def m_step(self, stats: np.ndarray, params: np.ndarray) -> np.ndarray:
        theta = np.maximum(m_step(stats, self.num_individuals), self.floor)
        return theta / theta.sum()


def phase(
    table: GenotypeTable,
    em: EmConfig = EmConfig(),
    h_max: int = H_MAX,
    floor: float = FREQUENCY_FLOOR,
    report_zero_below: float = REPORT_ZERO_BELOW,
) -> Tuple[HaplotypePool, List[PhasePair], EmTrace]:
    """
    Estimate haplotype frequencies and call the most probable phase of
    every individual.

    Returns
    -------
    tuple
        Pool with fitted frequencies (entries below `report_zero_below`
        reported as 0), best PhasePair per individual (ties go to the
        earlier pair in canonical order) and the winning trace.

    Raises
    ------
    CapacityError
        If some individual has more than `h_max` heterozygous loci.
    """
    problem = HaplotypeProblem(table, h_max, floor)
    logger.info(
        f"Phasing {table.num_individuals} individuals at {table.num_loci} loci: "
        f"pool of {len(problem.pool)} haplotypes, {problem.index.first.shape[0]} compatible pairs"
    )
    theta, traces = multi_start(problem, em)
    trace = traces[best_restart(traces)]

    fitted = HaplotypePool(haplotypes=problem.pool.haplotypes, frequencies=theta)
    best = []
    for pairs in posterior_pairs(table, fitted, h_max):
        # max keeps the first of equal posteriors
        best.append(max(pairs, key=lambda pair: pair.posterior))

    reported = np.where(theta < report_zero_below, 0.0, theta)
    reported = reported / reported.sum()
    logger.info(f"Phasing finished: loglik {trace.final_loglik:.6f}, {int(np.sum(reported > 0))} haplotypes kept")
    return HaplotypePool(haplotypes=problem.pool.haplotypes, frequencies=reported), best, trace
