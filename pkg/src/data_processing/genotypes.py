"""
Genotype tables of unphased biallelic loci.

Input is whitespace- or tab-separated text, one row per individual: an id
followed by one field per locus, either an allele pair such as "A/T" or a
dosage "0", "1", "2" counting copies of allele1.
"""

import io
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from data_processing.seqio import TextInput, _as_text
from utils.errors import DataError
from utils.logger import setup_logger

# Initialize logger for genotype table parsing
logger = setup_logger(name="genotypes", log_filename="genotypes.log")

DOSAGE_LETTERS = ("0", "1")


@dataclass
class GenotypeTable:
    """
    Unphased genotypes.

    Attributes
    ----------
    ids : list of str
        Individual ids in input order.
    alleles : list of tuple
        Per locus (allele0, allele1) letters; allele0 sorts first. A
        monomorphic locus has allele1 = None.
    calls : numpy.ndarray
        Shape (n, loci, 2) of allele indices in {0, 1}, each pair sorted.
    """

    ids: List[str]
    alleles: List[Tuple[str, Optional[str]]]
    calls: np.ndarray

    @property
    def num_individuals(self) -> int:
        return len(self.ids)

    @property
    def num_loci(self) -> int:
        return len(self.alleles)

    def heterozygous_loci(self, individual: int) -> np.ndarray:
        pair = self.calls[individual]
        return np.flatnonzero(pair[:, 0] != pair[:, 1])

    def allele_letter(self, locus: int, allele: int) -> str:
        letter = self.alleles[locus][allele]
        if letter is None:
            raise DataError(f"Locus {locus + 1} has no second allele")
        return letter


def _split_field(value: str, individual: str, locus: int) -> Tuple[str, ...]:
    if "/" in value or "|" in value:
        parts = tuple(part.strip().upper() for part in value.replace("|", "/").split("/"))
        if len(parts) != 2 or not all(parts):
            raise DataError(f"Malformed genotype '{value}' at locus {locus + 1}", record=individual)
        return parts
    if value in ("0", "1", "2"):
        return (value,)
    raise DataError(f"Unrecognized genotype '{value}' at locus {locus + 1}", record=individual)


def parse_genotypes(text: TextInput) -> GenotypeTable:
    """
    Parse a genotype table into normalized unordered allele pairs.

    Raises
    ------
    DataError
        On an empty table, rows of different lengths, a locus with more than
        two alleles, or a locus mixing dosage and allele-pair fields.
    """
    content = _as_text(text)
    if not content.strip():
        raise DataError("Genotype table is empty")

    # Every field as a string; '#' starts a comment
    try:
        frame = pd.read_csv(
            io.StringIO(content), sep=r"\s+", header=None, dtype=str,
            comment="#", engine="python", keep_default_na=False,
        )
    except pd.errors.EmptyDataError as e:
        raise DataError("Genotype table is empty") from e
    except pd.errors.ParserError as e:
        raise DataError(f"Genotype rows have different numbers of loci: {e}") from e

    if frame.shape[1] < 2:
        raise DataError("Genotype table needs an id column and at least one locus")

    ids = [str(value) for value in frame.iloc[:, 0]]
    fields = frame.iloc[:, 1:].to_numpy()
    num_loci = fields.shape[1]

    # First pass: split every field, still as letters or dosages
    parsed = []
    for row, individual in enumerate(ids):
        entries = []
        for locus in range(num_loci):
            value = fields[row, locus]
            if pd.isna(value) or str(value).strip() == "":
                raise DataError(f"Missing genotype at locus {locus + 1}", record=individual, line=row + 1)
            entries.append(_split_field(str(value).strip(), individual, locus))
        parsed.append(entries)

    # Second pass: fix each locus's allele order and encode calls as sorted index pairs
    alleles: List[Tuple[str, Optional[str]]] = []
    calls = np.zeros((len(ids), num_loci, 2), dtype=np.int8)
    for locus in range(num_loci):
        column = [parsed[row][locus] for row in range(len(ids))]
        dosage = [len(entry) == 1 for entry in column]
        if any(dosage) and not all(dosage):
            raise DataError(f"Locus {locus + 1} mixes dosage and allele-pair genotypes")

        # Dosage counts copies of allele1
        if all(dosage):
            alleles.append(DOSAGE_LETTERS)
            for row, (value,) in enumerate(column):
                count = int(value)
                calls[row, locus] = (0 if count < 2 else 1, 1 if count > 0 else 0)
            continue

        letters = sorted({letter for entry in column for letter in entry})
        if len(letters) > 2:
            raise DataError(f"Locus {locus + 1} has more than two alleles: {', '.join(letters)}")
        alleles.append((letters[0], letters[1] if len(letters) == 2 else None))
        for row, entry in enumerate(column):
            pair = sorted(letters.index(letter) for letter in entry)
            calls[row, locus] = pair

    logger.info(f"Parsed genotypes for {len(ids)} individuals at {num_loci} loci")
    return GenotypeTable(ids=ids, alleles=alleles, calls=calls)


def write_genotypes(table: GenotypeTable) -> bytes:
    """Serialize in tab-separated allele-pair form; round-trips with parse_genotypes."""
    lines = []
    for row, individual in enumerate(table.ids):
        fields = [individual]
        for locus in range(table.num_loci):
            a, b = table.calls[row, locus]
            fields.append(f"{table.allele_letter(locus, int(a))}/{table.allele_letter(locus, int(b))}")
        lines.append("\t".join(fields) + "\n")
    return "".join(lines).encode("utf-8")
