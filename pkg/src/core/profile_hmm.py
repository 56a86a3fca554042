"""
profile_hmm.py

Profile hidden Markov model with match, insert and delete states: scaled
forward-backward, Baum-Welch training through the EM driver, Viterbi decoding
and alignment assembly.

Topology for M match states (node 0 is Begin, node M + 1 is End):

    B/M_j -> M_{j+1}, I_j, D_{j+1}
    I_j   -> M_{j+1}, I_j
    D_j   -> M_{j+1}, D_{j+1}

where M_{M+1} means End and D_{M+1} does not exist. Insert and delete
states never follow each other.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, NamedTuple, Optional, Sequence as SequenceType, Tuple

import numpy as np

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start
from data_processing.seqio import GAP, PROTEIN, Alignment, Alphabet, Sequence
from utils.errors import DataError, EmToolkitError
from utils.logger import setup_logger

# Logger for profile HMM training and alignment, writing to profile_hmm.log
logger = setup_logger(name="profile_hmm", log_filename="profile_hmm.log")

# Column layout of the transition tables
TO_NEXT = 0   # M_{j+1} (or End when j = M)
TO_INSERT = 1
TO_DELETE = 2
TO_SELF = 1   # I_j -> I_j in the insert table, D_j -> D_{j+1} in the delete table

ROW_TOLERANCE = 1e-10


class State(NamedTuple):
    kind: str   # "B", "M", "I", "D" or "E"
    node: int

    def __str__(self) -> str:
        return self.kind if self.kind in ("B", "E") else f"{self.kind}{self.node}"


@dataclass
class StatePath:
    """Begin-to-end state path."""

    states: List[State]

    @property
    def num_emitting(self) -> int:
        return sum(1 for state in self.states if state.kind in ("M", "I"))

    def __str__(self) -> str:
        return " ".join(str(state) for state in self.states)


def transition_masks(num_match: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Allowed entries of the match, insert and delete transition tables."""
    match_mask = np.ones((num_match + 1, 3), dtype=bool)
    match_mask[num_match, TO_DELETE] = False
    insert_mask = np.ones((num_match + 1, 2), dtype=bool)
    delete_mask = np.ones((num_match + 1, 2), dtype=bool)
    delete_mask[0, :] = False
    delete_mask[num_match, TO_SELF] = False
    return match_mask, insert_mask, delete_mask


@dataclass
class ProfileHmm:
    """
    Profile HMM parameters.

    Attributes
    ----------
    match_emissions : numpy.ndarray
        (M, d); row j - 1 belongs to M_j.
    insert_emissions : numpy.ndarray
        (M + 1, d); row j belongs to I_j.
    match_transitions : numpy.ndarray
        (M + 1, 3); row 0 is Begin, row j is M_j.
    insert_transitions : numpy.ndarray
        (M + 1, 2).
    delete_transitions : numpy.ndarray
        (M + 1, 2); row 0 is unused and zero.
    """

    match_emissions: np.ndarray
    insert_emissions: np.ndarray
    match_transitions: np.ndarray
    insert_transitions: np.ndarray
    delete_transitions: np.ndarray
    alphabet: Alphabet = PROTEIN

    def __post_init__(self):
        M = self.num_match
        expected = {
            "insert_emissions": (M + 1, self.alphabet.size),
            "match_transitions": (M + 1, 3),
            "insert_transitions": (M + 1, 2),
            "delete_transitions": (M + 1, 2),
        }
        if self.match_emissions.shape != (M, self.alphabet.size):
            raise DataError(f"match_emissions must have shape {(M, self.alphabet.size)}")
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DataError(f"{name} must have shape {shape}, got {getattr(self, name).shape}")

        for name in ("match_emissions", "insert_emissions"):
            table = getattr(self, name)
            if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=ROW_TOLERANCE):
                raise DataError(f"Rows of {name} must be probability vectors")
        for name, mask in zip(("match_transitions", "insert_transitions", "delete_transitions"), self.masks):
            table = getattr(self, name)
            if np.any(table < 0) or np.any(table[~mask] != 0):
                raise DataError(f"{name} has mass on a transition the topology forbids")
            live = mask.any(axis=1)
            if not np.allclose(table[live].sum(axis=1), 1.0, atol=ROW_TOLERANCE):
                raise DataError(f"Rows of {name} must sum to 1")

    @property
    def num_match(self) -> int:
        return int(self.match_emissions.shape[0])

    @property
    def masks(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        return transition_masks(self.num_match)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "M": self.num_match,
            "alphabet": self.alphabet.kind.lower(),
            "emissions": {
                "match": self.match_emissions.tolist(),
                "insert": self.insert_emissions.tolist(),
            },
            "transitions": {
                "match": self.match_transitions.tolist(),
                "insert": self.insert_transitions.tolist(),
                "delete": self.delete_transitions.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ProfileHmm":
        try:
            return cls(
                match_emissions=np.array(values["emissions"]["match"], dtype=float).reshape(int(values["M"]), -1),
                insert_emissions=np.array(values["emissions"]["insert"], dtype=float),
                match_transitions=np.array(values["transitions"]["match"], dtype=float),
                insert_transitions=np.array(values["transitions"]["insert"], dtype=float),
                delete_transitions=np.array(values["transitions"]["delete"], dtype=float),
                alphabet=Alphabet.from_name(values.get("alphabet", "protein")),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DataError(f"Invalid profile HMM model: {e}") from e


@dataclass
class SufficientStats:
    """Expected emission and transition counts, laid out like ProfileHmm."""

    match_emissions: np.ndarray
    insert_emissions: np.ndarray
    match_transitions: np.ndarray
    insert_transitions: np.ndarray
    delete_transitions: np.ndarray
    loglik: float = 0.0

    @classmethod
    def zeros(cls, num_match: int, alphabet_size: int) -> "SufficientStats":
        return cls(
            match_emissions=np.zeros((num_match, alphabet_size)),
            insert_emissions=np.zeros((num_match + 1, alphabet_size)),
            match_transitions=np.zeros((num_match + 1, 3)),
            insert_transitions=np.zeros((num_match + 1, 2)),
            delete_transitions=np.zeros((num_match + 1, 2)),
        )

    def __add__(self, other: "SufficientStats") -> "SufficientStats":
        return SufficientStats(
            match_emissions=self.match_emissions + other.match_emissions,
            insert_emissions=self.insert_emissions + other.insert_emissions,
            match_transitions=self.match_transitions + other.match_transitions,
            insert_transitions=self.insert_transitions + other.insert_transitions,
            delete_transitions=self.delete_transitions + other.delete_transitions,
            loglik=self.loglik + other.loglik,
        )

    def total_emissions(self) -> float:
        return float(self.match_emissions.sum() + self.insert_emissions.sum())


@dataclass
class DpTable:
    """
    Scaled forward and backward values.

    Row i holds states after i residues have been emitted; `scale[i]` is the
    factor row i of the forward table was divided by, and `scale[L + 1]` the
    end-transition term, so that loglik = sum(log(scale)).
    """

    forward_match: np.ndarray
    forward_insert: np.ndarray
    forward_delete: np.ndarray
    scale: np.ndarray
    backward_match: Optional[np.ndarray] = None
    backward_insert: Optional[np.ndarray] = None
    backward_delete: Optional[np.ndarray] = None
    backward_loglik: Optional[float] = field(default=None)

    @property
    def loglik(self) -> float:
        return float(np.log(self.scale).sum())


def _check_residues(hmm: ProfileHmm, seq: Sequence) -> None:
    if len(seq) and (seq.residues.min() < 0 or seq.residues.max() >= hmm.alphabet.size):
        raise DataError(f"Sequence has residues outside the {hmm.alphabet.kind} alphabet", record=seq.id)


def forward(hmm: ProfileHmm, seq: Sequence) -> Tuple[DpTable, float]:
    """
    Scaled forward recursion over the match/insert/delete lattice.

    Returns
    -------
    tuple
        DpTable with the forward part filled and the sequence loglik.

    Raises
    ------
    EmToolkitError
        If the sequence has zero probability under the model.
    """
    _check_residues(hmm, seq)
    M, L, x = hmm.num_match, len(seq), seq.residues
    tM, tI, tD = hmm.match_transitions, hmm.insert_transitions, hmm.delete_transitions
    eM, eI = hmm.match_emissions, hmm.insert_emissions

    fM = np.zeros((L + 1, M + 1))
    fI = np.zeros((L + 1, M + 1))
    fD = np.zeros((L + 1, M + 1))
    scale = np.zeros(L + 2)

    # Begin is stored as M_0 before any residue
    fM[0, 0] = 1.0
    for i in range(L + 1):
        if i > 0:
            # Emitting states consume residue i from row i - 1
            r = x[i - 1]
            fM[i, 1:] = eM[:, r] * (
                fM[i - 1, :-1] * tM[:-1, TO_NEXT]
                + fI[i - 1, :-1] * tI[:-1, TO_NEXT]
                + fD[i - 1, :-1] * tD[:-1, TO_NEXT]
            )
            fI[i, :] = eI[:, r] * (fM[i - 1, :] * tM[:, TO_INSERT] + fI[i - 1, :] * tI[:, TO_SELF])
        # Delete states stay on row i and are filled left to right
        for j in range(1, M + 1):
            fD[i, j] = fM[i, j - 1] * tM[j - 1, TO_DELETE] + fD[i, j - 1] * tD[j - 1, TO_SELF]

        # Normalize the row; its scale enters the loglik
        total = fM[i].sum() + fI[i].sum() + fD[i].sum()
        if total <= 0 or not np.isfinite(total):
            raise EmToolkitError(f"Sequence '{seq.id}' has zero probability at position {i}")
        scale[i] = total
        fM[i] /= total
        fI[i] /= total
        fD[i] /= total

    # Transition into End after the last residue
    end = fM[L, M] * tM[M, TO_NEXT] + fI[L, M] * tI[M, TO_NEXT] + fD[L, M] * tD[M, TO_NEXT]
    if end <= 0:
        raise EmToolkitError(f"Sequence '{seq.id}' has zero probability under the model")
    scale[L + 1] = end

    table = DpTable(forward_match=fM, forward_insert=fI, forward_delete=fD, scale=scale)
    return table, table.loglik


def backward(hmm: ProfileHmm, seq: Sequence, table: Optional[DpTable] = None) -> DpTable:
    """
    Backward recursion using the forward scaling factors.

    The returned table also carries `backward_loglik`, which equals the
    forward loglik up to rounding.
    """
    if table is None:
        table, _ = forward(hmm, seq)
    M, L, x = hmm.num_match, len(seq), seq.residues
    tM, tI, tD = hmm.match_transitions, hmm.insert_transitions, hmm.delete_transitions
    eM, eI = hmm.match_emissions, hmm.insert_emissions
    scale = table.scale

    bM = np.zeros((L + 1, M + 1))
    bI = np.zeros((L + 1, M + 1))
    bD = np.zeros((L + 1, M + 1))

    # Only the last node can reach End
    bM[L, M] = tM[M, TO_NEXT] / scale[L + 1]
    bI[L, M] = tI[M, TO_NEXT] / scale[L + 1]
    bD[L, M] = tD[M, TO_NEXT] / scale[L + 1]

    for i in range(L, -1, -1):
        if i < L:
            # Moves that emit residue i + 1 into row i + 1
            r = x[i]
            c = scale[i + 1]
            next_match = eM[:, r] * bM[i + 1, 1:] / c
            next_insert = eI[:, r] * bI[i + 1, :] / c
            bM[i, :M] = tM[:M, TO_NEXT] * next_match
            bM[i, :] += tM[:, TO_INSERT] * next_insert
            bI[i, :M] = tI[:M, TO_NEXT] * next_match
            bI[i, :] += tI[:, TO_SELF] * next_insert
            bD[i, :M] = tD[:M, TO_NEXT] * next_match
        # Same-row moves into delete states, right to left
        for j in range(M - 1, -1, -1):
            bM[i, j] += tM[j, TO_DELETE] * bD[i, j + 1]
            bD[i, j] += tD[j, TO_SELF] * bD[i, j + 1]

    table.backward_match = bM
    table.backward_insert = bI
    table.backward_delete = bD
    table.backward_loglik = float(np.log(bM[0, 0]) + np.log(scale[1:]).sum())
    return table


def expected_stats(
    hmm: ProfileHmm, seq: Sequence, weight: float = 1.0, table: Optional[DpTable] = None,
) -> SufficientStats:
    """
    Posterior expected emission and transition counts for one sequence,
    multiplied by the sequence weight.
    """
    if weight < 0:
        raise ValueError(f"Sequence weight must be nonnegative, got {weight}")
    if table is None or table.backward_match is None:
        table = backward(hmm, seq, table)

    M, L, x = hmm.num_match, len(seq), seq.residues
    d = hmm.alphabet.size
    tM, tI, tD = hmm.match_transitions, hmm.insert_transitions, hmm.delete_transitions
    eM, eI = hmm.match_emissions, hmm.insert_emissions
    fM, fI, fD = table.forward_match, table.forward_insert, table.forward_delete
    bM, bI, bD = table.backward_match, table.backward_insert, table.backward_delete
    scale = table.scale

    stats = SufficientStats.zeros(M, d)
    onehot = np.zeros((L, d))
    onehot[np.arange(L), x] = 1.0
    stats.match_emissions = (fM[1:, 1:] * bM[1:, 1:]).T @ onehot
    stats.insert_emissions = (fI[1:, :] * bI[1:, :]).T @ onehot

    if L > 0:
        # Row i -> row i + 1 moves, divided by the scale of the row entered
        c = scale[1:L + 1, None]
        emit_match = eM[:, x].T * bM[1:, 1:] / c    # (L, M): enter M_{j+1} at row i + 1
        emit_insert = eI[:, x].T * bI[1:, :] / c    # (L, M + 1): enter I_j at row i + 1
        stats.match_transitions[:M, TO_NEXT] = (fM[:L, :M] * emit_match).sum(axis=0) * tM[:M, TO_NEXT]
        stats.match_transitions[:, TO_INSERT] = (fM[:L, :] * emit_insert).sum(axis=0) * tM[:, TO_INSERT]
        stats.insert_transitions[:M, TO_NEXT] = (fI[:L, :M] * emit_match).sum(axis=0) * tI[:M, TO_NEXT]
        stats.insert_transitions[:, TO_SELF] = (fI[:L, :] * emit_insert).sum(axis=0) * tI[:, TO_SELF]
        stats.delete_transitions[:M, TO_NEXT] = (fD[:L, :M] * emit_match).sum(axis=0) * tD[:M, TO_NEXT]

    # Same-row moves into delete states
    stats.match_transitions[:M, TO_DELETE] = (fM[:, :M] * bD[:, 1:]).sum(axis=0) * tM[:M, TO_DELETE]
    stats.delete_transitions[:M, TO_SELF] = (fD[:, :M] * bD[:, 1:]).sum(axis=0) * tD[:M, TO_SELF]

    end = scale[L + 1]
    stats.match_transitions[M, TO_NEXT] += fM[L, M] * tM[M, TO_NEXT] / end
    stats.insert_transitions[M, TO_NEXT] += fI[L, M] * tI[M, TO_NEXT] / end
    stats.delete_transitions[M, TO_NEXT] += fD[L, M] * tD[M, TO_NEXT] / end

    if weight != 1.0:
        for name in ("match_emissions", "insert_emissions", "match_transitions",
                     "insert_transitions", "delete_transitions"):
            setattr(stats, name, getattr(stats, name) * weight)
    stats.loglik = weight * table.loglik
    return stats


def _normalize_rows(counts: np.ndarray, mask: np.ndarray, alpha: float, previous: Optional[np.ndarray]) -> np.ndarray:
    smoothed = np.where(mask, counts + alpha, 0.0)
    totals = smoothed.sum(axis=1)
    if previous is not None:
        result = previous.copy()
    else:
        result = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
    filled = totals > 0
    result[filled] = smoothed[filled] / totals[filled, None]
    return result


def baum_welch_update(
    stats: SufficientStats, alpha: float = 0.5, alphabet: Alphabet = PROTEIN,
    previous: Optional[ProfileHmm] = None,
) -> ProfileHmm:
    """
    Ratio-of-expected-counts update with pseudocount alpha on every allowed
    cell: e = (m + alpha) / (m_total + d * alpha), t = (n + alpha) /
    (n_total + alpha * outdegree).

    A row with no counts and alpha = 0 keeps its value from `previous`
    (uniform without one); such a state is never visited.
    """
    M = stats.match_emissions.shape[0]
    match_mask, insert_mask, delete_mask = transition_masks(M)
    full_match = np.ones_like(stats.match_emissions, dtype=bool)
    full_insert = np.ones_like(stats.insert_emissions, dtype=bool)

    def old(name: str) -> Optional[np.ndarray]:
        return None if previous is None else getattr(previous, name)

    return ProfileHmm(
        match_emissions=_normalize_rows(stats.match_emissions, full_match, alpha, old("match_emissions")),
        insert_emissions=_normalize_rows(stats.insert_emissions, full_insert, alpha, old("insert_emissions")),
        match_transitions=_normalize_rows(stats.match_transitions, match_mask, alpha, old("match_transitions")),
        insert_transitions=_normalize_rows(stats.insert_transitions, insert_mask, alpha, old("insert_transitions")),
        delete_transitions=_normalize_rows(stats.delete_transitions, delete_mask, alpha, old("delete_transitions")),
        alphabet=alphabet,
    )


def log_prior(hmm: ProfileHmm, alpha: float) -> float:
    """Dirichlet log-density (up to a constant) matching the pseudocount."""
    if alpha == 0:
        return 0.0
    total = np.log(hmm.match_emissions).sum() + np.log(hmm.insert_emissions).sum()
    for table, mask in zip((hmm.match_transitions, hmm.insert_transitions, hmm.delete_transitions), hmm.masks):
        total += np.log(table[mask]).sum()
    return float(alpha * total)


def init_model(
    seqs: SequenceType[Sequence], alphabet: Alphabet = PROTEIN, alpha: float = 0.5, match_transition: float = 0.8,
) -> ProfileHmm:
    """
    Starting model: M = mean sequence length rounded half up, emissions from
    the smoothed global residue frequencies, and transitions that move to
    the next match state with probability `match_transition`.
    """
    if not seqs:
        raise DataError("Cannot build a profile HMM from zero sequences")
    lengths = np.array([len(seq) for seq in seqs])
    M = max(1, int(np.floor(lengths.mean() + 0.5)))
    d = alphabet.size

    counts = np.bincount(np.concatenate([seq.residues for seq in seqs]), minlength=d).astype(float)
    if counts.shape[0] > d:
        raise DataError(f"Sequences have residues outside the {alphabet.kind} alphabet")
    background = (counts + alpha) / (counts.sum() + d * alpha)

    p = match_transition
    match_transitions = np.tile([p, (1 - p) / 2, (1 - p) / 2], (M + 1, 1))
    match_transitions[M] = [p, 1 - p, 0.0]
    insert_transitions = np.tile([p, 1 - p], (M + 1, 1))
    delete_transitions = np.tile([p, 1 - p], (M + 1, 1))
    delete_transitions[0] = 0.0
    delete_transitions[M] = [1.0, 0.0]

    return ProfileHmm(
        match_emissions=np.tile(background, (M, 1)),
        insert_emissions=np.tile(background, (M + 1, 1)),
        match_transitions=match_transitions,
        insert_transitions=insert_transitions,
        delete_transitions=delete_transitions,
        alphabet=alphabet,
    )


def viterbi(hmm: ProfileHmm, seq: Sequence) -> Tuple[StatePath, float]:
    """
    Most probable state path in log space.

    Ties between predecessors are broken in the order match, delete, insert.
    """
    _check_residues(hmm, seq)
    M, L, x = hmm.num_match, len(seq), seq.residues
    with np.errstate(divide="ignore"):
        ltM, ltI, ltD = np.log(hmm.match_transitions), np.log(hmm.insert_transitions), np.log(hmm.delete_transitions)
        leM, leI = np.log(hmm.match_emissions), np.log(hmm.insert_emissions)

    vM = np.full((L + 1, M + 1), -np.inf)
    vI = np.full((L + 1, M + 1), -np.inf)
    vD = np.full((L + 1, M + 1), -np.inf)
    # Pointers hold the kind of the predecessor state
    pM = np.full((L + 1, M + 1), "", dtype="<U1")
    pI = np.full((L + 1, M + 1), "", dtype="<U1")
    pD = np.full((L + 1, M + 1), "", dtype="<U1")

    into_match = np.array(["M", "D", "I"])
    into_insert = np.array(["M", "I"])

    vM[0, 0] = 0.0
    for i in range(L + 1):
        if i > 0:
            r = x[i - 1]
            # argmax keeps the first maximum, which gives the tie order
            candidates = np.stack([
                vM[i - 1, :-1] + ltM[:-1, TO_NEXT],
                vD[i - 1, :-1] + ltD[:-1, TO_NEXT],
                vI[i - 1, :-1] + ltI[:-1, TO_NEXT],
            ])
            choice = np.argmax(candidates, axis=0)
            vM[i, 1:] = candidates[choice, np.arange(M)] + leM[:, r]
            pM[i, 1:] = into_match[choice]

            candidates = np.stack([vM[i - 1, :] + ltM[:, TO_INSERT], vI[i - 1, :] + ltI[:, TO_SELF]])
            choice = np.argmax(candidates, axis=0)
            vI[i, :] = candidates[choice, np.arange(M + 1)] + leI[:, r]
            pI[i, :] = into_insert[choice]
        for j in range(1, M + 1):
            candidates = (
                ("M", vM[i, j - 1] + ltM[j - 1, TO_DELETE]),
                ("D", vD[i, j - 1] + ltD[j - 1, TO_SELF]),
            )
            kind, score = max(candidates, key=lambda item: item[1])
            vD[i, j], pD[i, j] = score, kind

    candidates = (
        ("M", vM[L, M] + ltM[M, TO_NEXT]),
        ("D", vD[L, M] + ltD[M, TO_NEXT]),
        ("I", vI[L, M] + ltI[M, TO_NEXT]),
    )
    kind, best = max(candidates, key=lambda item: item[1])
    if not np.isfinite(best):
        raise EmToolkitError(f"Sequence '{seq.id}' has no legal path under the model")

    states = [State("E", M + 1)]
    i, j = L, M
    while not (kind == "M" and i == 0 and j == 0):
        states.append(State(kind, j))
        if kind == "M":
            kind, i, j = pM[i, j], i - 1, j - 1
        elif kind == "I":
            kind, i, j = pI[i, j], i - 1, j
        else:
            kind, i, j = pD[i, j], i, j - 1
    states.append(State("B", 0))
    states.reverse()
    return StatePath(states), float(best)


def _transition_slot(previous: State, current: State, num_match: int) -> Tuple[str, int, int]:
    """(table name, row, column) of the transition previous -> current, or DataError."""
    j = previous.node
    advances = (current.kind == "M" and current.node == j + 1) or (current.kind == "E" and j == num_match)
    if previous.kind in ("B", "M"):
        if advances:
            return "match_transitions", j, TO_NEXT
        if current.kind == "I" and current.node == j:
            return "match_transitions", j, TO_INSERT
        if current.kind == "D" and current.node == j + 1 and j < num_match:
            return "match_transitions", j, TO_DELETE
    elif previous.kind == "I":
        if advances:
            return "insert_transitions", j, TO_NEXT
        if current.kind == "I" and current.node == j:
            return "insert_transitions", j, TO_SELF
    elif previous.kind == "D":
        if advances:
            return "delete_transitions", j, TO_NEXT
        if current.kind == "D" and current.node == j + 1 and j < num_match:
            return "delete_transitions", j, TO_SELF
    raise DataError(f"Illegal transition {previous} -> {current}")


def _check_path(path: StatePath, seq: Sequence, num_match: int) -> None:
    states = path.states
    if len(states) < 2 or states[0].kind != "B" or states[-1].kind != "E":
        raise DataError("State path must run from Begin to End", record=seq.id)
    if path.num_emitting != len(seq):
        raise DataError(
            f"State path emits {path.num_emitting} residues but the sequence has {len(seq)}", record=seq.id,
        )
    for previous, current in zip(states, states[1:]):
        _transition_slot(previous, current, num_match)


def path_counts(hmm: ProfileHmm, path: StatePath, seq: Sequence, weight: float = 1.0) -> SufficientStats:
    """Complete-data event counts of a known path (the counting form of the complete-data likelihood)."""
    _check_path(path, seq, hmm.num_match)
    stats = SufficientStats.zeros(hmm.num_match, hmm.alphabet.size)
    position = 0
    for previous, current in zip(path.states, path.states[1:]):
        name, row, column = _transition_slot(previous, current, hmm.num_match)
        getattr(stats, name)[row, column] += weight
        if current.kind == "M":
            stats.match_emissions[current.node - 1, seq.residues[position]] += weight
            position += 1
        elif current.kind == "I":
            stats.insert_emissions[current.node, seq.residues[position]] += weight
            position += 1
    return stats


def path_log_probability(hmm: ProfileHmm, path: StatePath, seq: Sequence) -> float:
    """log P(seq, path)."""
    _check_path(path, seq, hmm.num_match)
    total = 0.0
    position = 0
    with np.errstate(divide="ignore"):
        for previous, current in zip(path.states, path.states[1:]):
            name, row, column = _transition_slot(previous, current, hmm.num_match)
            total += np.log(getattr(hmm, name)[row, column])
            if current.kind == "M":
                total += np.log(hmm.match_emissions[current.node - 1, seq.residues[position]])
                position += 1
            elif current.kind == "I":
                total += np.log(hmm.insert_emissions[current.node, seq.residues[position]])
                position += 1
    return float(total)


def build_alignment(
    paths: SequenceType[StatePath], seqs: SequenceType[Sequence], num_match: int, alphabet: Alphabet = PROTEIN,
) -> Alignment:
    """
    Stack sequences by their state paths.

    Residues emitted by M_j share match column j; residues emitted by I_j
    fill left-justified insert columns after match column j; deletions are
    gaps. Match columns that every sequence deletes are dropped because an
    alignment column needs at least one residue.
    """
    if len(paths) != len(seqs):
        raise DataError(f"Got {len(paths)} paths for {len(seqs)} sequences")

    # Collect match residues and insert runs per sequence
    match_columns = np.full((len(seqs), num_match), GAP, dtype=np.int64)
    inserts: List[List[List[int]]] = []
    for row, (path, seq) in enumerate(zip(paths, seqs)):
        _check_path(path, seq, num_match)
        row_inserts: List[List[int]] = [[] for _ in range(num_match + 1)]
        position = 0
        for state in path.states:
            if state.kind == "M":
                match_columns[row, state.node - 1] = seq.residues[position]
                position += 1
            elif state.kind == "I":
                row_inserts[state.node].append(int(seq.residues[position]))
                position += 1
        inserts.append(row_inserts)

    # Insert block j is as wide as the longest run after match column j
    widths = [max((len(row_inserts[j]) for row_inserts in inserts), default=0) for j in range(num_match + 1)]
    blocks = []
    for j in range(num_match + 1):
        if j > 0 and np.any(match_columns[:, j - 1] != GAP):
            blocks.append(match_columns[:, j - 1:j])
        if widths[j]:
            block = np.full((len(seqs), widths[j]), GAP, dtype=np.int64)
            for row, row_inserts in enumerate(inserts):
                block[row, :len(row_inserts[j])] = row_inserts[j]
            blocks.append(block)

    rows = np.hstack(blocks) if blocks else np.zeros((len(seqs), 0), dtype=np.int64)
    return Alignment(ids=[seq.id for seq in seqs], rows=rows, alphabet=alphabet)


class ProfileHmmProblem(EmProblem[ProfileHmm, SufficientStats]):
    """Baum-Welch as an EM problem; the objective is the weighted loglik plus the pseudocount prior."""

    def __init__(
        self, seqs: SequenceType[Sequence], weights: Optional[SequenceType[float]] = None,
        alphabet: Alphabet = PROTEIN, alpha: float = 0.5, match_transition: float = 0.8,
    ):
        if not seqs:
            raise DataError("Cannot train a profile HMM on zero sequences")
        if weights is None:
            weights = [1.0] * len(seqs)
        if len(weights) != len(seqs):
            raise DataError(f"Got {len(weights)} weights for {len(seqs)} sequences")
        if any(w < 0 for w in weights):
            raise DataError("Sequence weights must be nonnegative")
        if alpha < 0:
            raise ValueError(f"Pseudocount must be nonnegative, got {alpha}")
        self.seqs = list(seqs)
        self.weights = [float(w) for w in weights]
        self.alphabet = alphabet
        self.alpha = alpha
        # Initial emissions always carry some smoothing so no residue starts impossible
        self.base = init_model(self.seqs, alphabet, alpha=max(alpha, 0.5), match_transition=match_transition)

    def initialize(self, rng: np.random.Generator, restart: int) -> ProfileHmm:
        nonempty = [seq for seq in self.seqs if len(seq)]
        if restart == 0 or not nonempty:
            return self.base
        # Pull match state j toward the residue a random family member has at the matching relative position
        seq = nonempty[int(rng.integers(len(nonempty)))]
        M, d = self.base.num_match, self.alphabet.size
        positions = np.minimum((np.arange(M) * len(seq)) // M, len(seq) - 1)
        seeded = np.full((M, d), 0.5)
        seeded[np.arange(M), seq.residues[positions]] += 1.0 + d * rng.random()
        seeded /= seeded.sum(axis=1, keepdims=True)
        return ProfileHmm(
            match_emissions=0.5 * self.base.match_emissions + 0.5 * seeded,
            insert_emissions=self.base.insert_emissions,
            match_transitions=self.base.match_transitions,
            insert_transitions=self.base.insert_transitions,
            delete_transitions=self.base.delete_transitions,
            alphabet=self.alphabet,
        )

    def e_step(self, params: ProfileHmm, rng: Optional[np.random.Generator] = None) -> Tuple[SufficientStats, float]:
        total = SufficientStats.zeros(params.num_match, self.alphabet.size)
        for seq, weight in zip(self.seqs, self.weights):
            total = total + expected_stats(params, seq, weight)
        return total, total.loglik + log_prior(params, self.alpha)

    def m_step(self, stats: SufficientStats, params: ProfileHmm) -> ProfileHmm:
        return baum_welch_update(stats, self.alpha, self.alphabet, previous=params)


def train(
    seqs: SequenceType[Sequence],
    weights: Optional[SequenceType[float]] = None,
    em: EmConfig = EmConfig(),
    alpha: float = 0.5,
    alphabet: Alphabet = PROTEIN,
    match_transition: float = 0.8,
) -> Tuple[ProfileHmm, EmTrace]:
    """
    Fit a profile HMM to unaligned sequences by multi-start Baum-Welch.

    Returns
    -------
    tuple
        Trained model and the trace of the winning restart.
    """
    problem = ProfileHmmProblem(seqs, weights, alphabet, alpha, match_transition)
    logger.info(
        f"Training profile HMM: {len(seqs)} sequences, M = {problem.base.num_match}, "
        f"pseudocount {alpha}, {em.restarts} restart(s)"
    )
    hmm, traces = multi_start(problem, em)
    trace = traces[best_restart(traces)]
    logger.info(f"Profile HMM trained: loglik {trace.final_loglik:.6f}, converged={trace.converged}")
    return hmm, trace


def align(hmm: ProfileHmm, seqs: SequenceType[Sequence]) -> Tuple[Alignment, List[float]]:
    """Viterbi-decode every sequence and assemble the alignment; also returns the path log-probabilities."""
    decoded = [viterbi(hmm, seq) for seq in seqs]
    alignment = build_alignment([path for path, _ in decoded], seqs, hmm.num_match, hmm.alphabet)
    return alignment, [score for _, score in decoded]
