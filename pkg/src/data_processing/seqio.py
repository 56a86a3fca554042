"""
Residue alphabets, FASTA sequences and multiple alignments.

Parsers accept UTF-8 text or bytes with LF or CRLF line endings and report
every failure as a DataError carrying the offending record, line and column.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence as SequenceType, Tuple, Union

import numpy as np

from utils.errors import DataError

GAP = -1
GAP_CHAR = "-"
# Accepted on input, always written as '-'
GAP_INPUT_CHARS = frozenset("-.")

TextInput = Union[str, bytes]


@dataclass(frozen=True)
class Alphabet:
    """
    Ordered residue alphabet; the index of a letter is its position in `letters`.

    DNA is A=0, C=1, G=2, T=3. Protein uses the 20 standard amino acids in
    alphabetical one-letter order (A, C, D, E, ..., Y).
    """

    kind: str
    letters: str
    index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.letters)) != len(self.letters):
            raise ValueError(f"Alphabet letters must be unique: {self.letters}")
        object.__setattr__(self, "index", {letter: i for i, letter in enumerate(self.letters)})

    @property
    def size(self) -> int:
        return len(self.letters)

    @classmethod
    def from_name(cls, name: str) -> "Alphabet":
        try:
            return {"dna": DNA, "protein": PROTEIN}[name.lower()]
        except KeyError:
            raise ValueError(f"Unknown alphabet '{name}', expected 'dna' or 'protein'") from None

    def decode(self, residues: np.ndarray) -> str:
        return "".join(GAP_CHAR if r == GAP else self.letters[r] for r in residues)


DNA = Alphabet("DNA", "ACGT")
PROTEIN = Alphabet("Protein", "ACDEFGHIKLMNPQRSTVWY")


@dataclass
class Sequence:
    """One sequence as alphabet indices."""

    id: str
    residues: np.ndarray

    def __len__(self) -> int:
        return int(self.residues.shape[0])


@dataclass
class Alignment:
    """
    Rectangular multiple alignment; `rows[n, l]` is an alphabet index or GAP.

    Every column holds at least one residue.
    """

    ids: List[str]
    rows: np.ndarray
    alphabet: Alphabet = DNA

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        if not self.ids:
            self.rows = self.rows.reshape(0, 0)
        elif self.rows.ndim != 2 or self.rows.shape[0] != len(self.ids):
            raise DataError(f"Alignment has {len(self.ids)} ids but rows of shape {self.rows.shape}")
        if self.rows.size and np.any(np.all(self.rows == GAP, axis=0)):
            column = int(np.flatnonzero(np.all(self.rows == GAP, axis=0))[0]) + 1
            raise DataError("Alignment column contains only gaps", column=column)

    @property
    def num_rows(self) -> int:
        return len(self.ids)

    @property
    def num_columns(self) -> int:
        return int(self.rows.shape[1]) if self.ids else 0

    def has_gaps(self) -> bool:
        return bool(np.any(self.rows == GAP))

    def degapped(self, row: int) -> np.ndarray:
        values = self.rows[row]
        return values[values != GAP]


def _as_text(text: TextInput) -> str:
    if isinstance(text, bytes):
        try:
            return text.decode("utf-8")
        except UnicodeDecodeError as e:
            raise DataError(f"Input is not valid UTF-8: {e}") from e
    return text


def _iter_records(text: TextInput) -> Iterator[Tuple[str, int, List[Tuple[int, str]]]]:
    """Yield (id, header line number, [(line number, sequence line)]) per FASTA record."""
    current_id = None
    header_line = 0
    body: List[Tuple[int, str]] = []

    for line_number, raw in enumerate(_as_text(text).splitlines(), start=1):
        line = raw.rstrip("\r")
        if line.startswith(">"):
            if current_id is not None:
                yield current_id, header_line, body
            current_id = line[1:].strip().split()[0] if line[1:].strip() else ""
            if not current_id:
                raise DataError("FASTA header without an identifier", line=line_number)
            header_line = line_number
            body = []
        elif current_id is None:
            if line.strip():
                raise DataError("Sequence data before the first FASTA header", line=line_number, column=1)
        else:
            body.append((line_number, line))

    if current_id is not None:
        yield current_id, header_line, body


def _encode_body(record_id: str, body: List[Tuple[int, str]], alphabet: Alphabet, allow_gaps: bool) -> np.ndarray:
    values: List[int] = []
    for line_number, line in body:
        for column, char in enumerate(line, start=1):
            if char.isspace():
                continue
            symbol = char.upper()
            if allow_gaps and symbol in GAP_INPUT_CHARS:
                values.append(GAP)
                continue
            index = alphabet.index.get(symbol)
            if index is None:
                raise DataError(
                    f"Symbol '{char}' is not in the {alphabet.kind} alphabet",
                    record=record_id, line=line_number, column=column,
                )
            values.append(index)
    return np.asarray(values, dtype=np.int64)


def parse_fasta(text: TextInput, alphabet: Alphabet = DNA) -> List[Sequence]:
    """
    Parse FASTA records into sequences of alphabet indices.

    Whitespace inside sequence lines is ignored and lowercase letters are
    upper-cased. Ambiguity codes and gaps are rejected.

    Parameters
    ----------
    text : str or bytes
        FASTA content.
    alphabet : Alphabet
        Residue alphabet.

    Returns
    -------
    list of Sequence
        One entry per record, in input order.

    Raises
    ------
    DataError
        On a symbol outside the alphabet or an empty record.
    """
    sequences = []
    for record_id, header_line, body in _iter_records(text):
        residues = _encode_body(record_id, body, alphabet, allow_gaps=False)
        if residues.size == 0:
            raise DataError("Empty FASTA record", record=record_id, line=header_line)
        sequences.append(Sequence(id=record_id, residues=residues))
    return sequences


def parse_alignment(text: TextInput, alphabet: Alphabet = DNA) -> Alignment:
    """
    Parse aligned FASTA ('-' or '.' for gaps) into a validated Alignment.

    Raises
    ------
    DataError
        On ragged rows, an all-gap column, or a symbol outside the alphabet.
    """
    ids: List[str] = []
    rows: List[np.ndarray] = []
    for record_id, header_line, body in _iter_records(text):
        residues = _encode_body(record_id, body, alphabet, allow_gaps=True)
        if residues.size == 0:
            raise DataError("Empty FASTA record", record=record_id, line=header_line)
        ids.append(record_id)
        rows.append(residues)

    if not rows:
        return Alignment(ids=[], rows=np.zeros((0, 0), dtype=np.int64), alphabet=alphabet)

    expected = rows[0].shape[0]
    for record_id, row in zip(ids, rows):
        if row.shape[0] != expected:
            raise DataError(
                f"Ragged alignment: '{record_id}' has length {row.shape[0]}, "
                f"'{ids[0]}' has length {expected}",
                record=record_id,
            )
    return Alignment(ids=ids, rows=np.vstack(rows), alphabet=alphabet)


def write_fasta(sequences: SequenceType[Sequence], alphabet: Alphabet = DNA) -> bytes:
    """Serialize sequences one record per two lines (no wrapping)."""
    lines = []
    for seq in sequences:
        lines.append(f">{seq.id}\n{alphabet.decode(seq.residues)}\n")
    return "".join(lines).encode("utf-8")


def write_alignment(alignment: Alignment) -> bytes:
    """Serialize an alignment as aligned FASTA; round-trips with parse_alignment."""
    lines = []
    for row, record_id in enumerate(alignment.ids):
        lines.append(f">{record_id}\n{alignment.alphabet.decode(alignment.rows[row])}\n")
    return "".join(lines).encode("utf-8")
