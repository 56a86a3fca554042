"""
phylo_hmm.py

Two-state phylogenetic HMM over alignment columns. A conserved state and a
nonconserved state share one tree and one Jukes-Cantor substitution model;
the conserved state runs on branch lengths scaled by rho. Column likelihoods
come from Felsenstein pruning, the state chain from a scaled
forward-backward pass, and (mu, nu, rho, branch lengths) from generalized EM.
"""

from dataclasses import dataclass
from typing import Any, Dict, Optional, Sequence as SequenceType, Tuple

import numpy as np
from scipy.optimize import minimize

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start
from data_processing.newick import PhyloTree
from data_processing.seqio import DNA, Alignment
from utils.errors import DataError, EmToolkitError
from utils.logger import setup_logger
from utils.rng import split_generator

# Initialize logger for the phylo-HMM solver
logger = setup_logger(name="phylo_hmm", log_filename="phylo_hmm.log")

CONSERVED = 0
NONCONSERVED = 1

RHO_BOUNDS = (1e-4, 0.999)
BRANCH_BOUNDS = (1e-6, 10.0)
RATE_BOUNDS = (1e-6, 1.0 - 1e-6)
OPTIMIZER_TOL = 1e-7


def jc_transition(branch_length: float) -> np.ndarray:
    """
    Jukes-Cantor transition matrix exp(tQ) for the unit-rate rate matrix.

    Raises
    ------
    ValueError
        If the branch length is negative.
    """
    if branch_length < 0 or not np.isfinite(branch_length):
        raise ValueError(f"Branch length must be a nonnegative number, got {branch_length}")
    decay = np.exp(-4.0 * branch_length / 3.0)
    matrix = np.full((4, 4), 0.25 - 0.25 * decay)
    np.fill_diagonal(matrix, 0.25 + 0.75 * decay)
    return matrix


def _jc_batch(lengths: np.ndarray) -> np.ndarray:
    """Stacked transition matrices, shape (n, 4, 4)."""
    decay = np.exp(-4.0 * np.asarray(lengths, dtype=float) / 3.0)[:, None, None]
    eye = np.eye(4)[None]
    return (0.25 - 0.25 * decay) * (1 - eye) + (0.25 + 0.75 * decay) * eye


@dataclass(frozen=True)
class SubstitutionModel:
    """Rate matrix and its stationary distribution; only the Jukes-Cantor model is supported."""

    rate_matrix: np.ndarray
    stationary: np.ndarray

    @classmethod
    def jukes_cantor(cls) -> "SubstitutionModel":
        # Off-diagonal 1/3 gives one expected substitution per unit time
        rate = np.full((4, 4), 1.0 / 3.0)
        np.fill_diagonal(rate, -1.0)
        return cls(rate_matrix=rate, stationary=np.full(4, 0.25))

    def transitions(self, lengths: np.ndarray) -> np.ndarray:
        """Transition matrices exp(tQ) for every length, shape (n, 4, 4)."""
        return _jc_batch(lengths)


JUKES_CANTOR = SubstitutionModel.jukes_cantor()


def stationary_distribution(mu: float, nu: float) -> np.ndarray:
    """(P(conserved), P(nonconserved)) of the two-state chain."""
    return np.array([nu / (mu + nu), mu / (mu + nu)])


def _transition_matrix(mu: float, nu: float) -> np.ndarray:
    return np.array([[1.0 - mu, mu], [nu, 1.0 - nu]])


@dataclass
class PhyloHmmParams:
    """
    Attributes
    ----------
    mu : float
        P(conserved -> nonconserved) between adjacent columns.
    nu : float
        P(nonconserved -> conserved).
    rho : float
        Branch-length scaling of the conserved state.
    branch_lengths : numpy.ndarray
        One length per tree edge, in `PhyloTree.edges` order.
    """

    mu: float
    nu: float
    rho: float
    branch_lengths: np.ndarray

    def __post_init__(self):
        self.branch_lengths = np.asarray(self.branch_lengths, dtype=float)
        if not (0 < self.mu < 1 and 0 < self.nu < 1):
            raise ValueError(f"mu and nu must lie in (0, 1), got {self.mu}, {self.nu}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")
        if np.any(self.branch_lengths < 0) or not np.all(np.isfinite(self.branch_lengths)):
            raise ValueError("Branch lengths must be nonnegative and finite")

    def node_lengths(self, scale: float = 1.0) -> np.ndarray:
        """Length of the edge above every node (0 for the root)."""
        return np.concatenate([[0.0], self.branch_lengths * scale])

    def to_dict(self, tree: Optional[PhyloTree] = None) -> Dict[str, Any]:
        values = {
            "mu": float(self.mu),
            "nu": float(self.nu),
            "rho": float(self.rho),
            "branch_lengths": [float(b) for b in self.branch_lengths],
        }
        if tree is not None:
            values["tree"] = tree.with_branch_lengths(self.branch_lengths).to_newick()
        return values


@dataclass
class ColumnPatterns:
    """
    Distinct alignment columns.

    Attributes
    ----------
    leaves : numpy.ndarray
        (P, num_leaves) residues of each pattern, leaves in `tree.leaves` order.
    counts : numpy.ndarray
        Number of columns showing each pattern.
    inverse : numpy.ndarray
        Pattern index of every alignment column.
    """

    leaves: np.ndarray
    counts: np.ndarray
    inverse: np.ndarray

    @property
    def num_columns(self) -> int:
        return int(self.inverse.shape[0])


def check_inputs(alignment: Alignment, tree: PhyloTree) -> np.ndarray:
    """
    Validate an alignment against a tree and return its rows in leaf order.

    Raises
    ------
    DataError
        If the alignment is not gap-free DNA or its ids do not match the
        tree's leaves.
    """
    if alignment.alphabet != DNA:
        raise DataError(f"Phylo-HMM needs a DNA alignment, got {alignment.alphabet.kind}")
    if alignment.num_columns == 0:
        raise DataError("Alignment has no columns")
    if alignment.has_gaps():
        column = int(np.flatnonzero(np.any(alignment.rows == -1, axis=0))[0]) + 1
        raise DataError("Alignment columns with gaps are not supported", column=column)
    if np.any(alignment.rows > 3):
        raise DataError("Alignment has residues outside A, C, G, T")

    leaf_names = tree.leaf_names
    if sorted(leaf_names) != sorted(alignment.ids):
        missing = sorted(set(leaf_names) ^ set(alignment.ids))
        raise DataError(f"Alignment ids and tree leaves differ: {', '.join(missing)}")
    row_of = {name: row for row, name in enumerate(alignment.ids)}
    return alignment.rows[[row_of[name] for name in leaf_names]]


def compress_columns(alignment: Alignment, tree: PhyloTree) -> ColumnPatterns:
    """
    Pool identical alignment columns into patterns.

    Parameters
    ----------
    alignment : Alignment
        Gap-free DNA alignment whose ids are the tree's leaf names.
    tree : PhyloTree
        Tree fixing the leaf order of the patterns.

    Returns
    -------
    ColumnPatterns
        Distinct columns in lexicographic order, their multiplicities and
        the pattern index of every column.

    Raises
    ------
    DataError
        From `check_inputs`.
    """
    rows = check_inputs(alignment, tree)
    patterns, inverse, counts = np.unique(rows.T, axis=0, return_inverse=True, return_counts=True)
    return ColumnPatterns(leaves=patterns, counts=counts.astype(float), inverse=inverse.reshape(-1))


def pattern_log_likelihoods(
    tree: PhyloTree, leaf_states: np.ndarray, node_lengths: np.ndarray,
    subst: SubstitutionModel = JUKES_CANTOR,
) -> np.ndarray:
    """
    log P(column) for each row of `leaf_states` (P, num_leaves) by pruning.

    Conditional likelihoods are rescaled by their maximum at every internal
    node and the log factors added back at the root.
    """
    num_patterns = leaf_states.shape[0]
    transitions = subst.transitions(node_lengths)
    partial = np.empty((tree.num_nodes, num_patterns, 4))
    log_scale = np.zeros(num_patterns)

    # Leaves hold indicator vectors of their observed residue
    eye = np.eye(4)
    for k, node in enumerate(tree.leaves):
        partial[node] = eye[leaf_states[:, k]]

    for node in tree.postorder:
        children = tree.children[node]
        if not children:
            continue
        product = np.ones((num_patterns, 4))
        for child in children:
            product *= partial[child] @ transitions[child].T
        peak = product.max(axis=1)
        # Impossible patterns stay at zero
        peak = np.where(peak > 0, peak, 1.0)
        partial[node] = product / peak[:, None]
        log_scale += np.log(peak)

    with np.errstate(divide="ignore"):
        return np.log(partial[0] @ subst.stationary) + log_scale


def column_likelihood(
    tree: PhyloTree, column: SequenceType, scale: float = 1.0, subst: SubstitutionModel = JUKES_CANTOR,
) -> float:
    """
    P(column) under the tree with every branch length multiplied by `scale`.

    Parameters
    ----------
    column : sequence
        One residue per leaf in `tree.leaves` order, as DNA indices or
        letters.

    Raises
    ------
    DataError
        If a residue is not one of A, C, G, T.
    """
    if isinstance(column, str):
        column = list(column)
    if len(column) != len(tree.leaves):
        raise DataError(f"Column has {len(column)} residues for {len(tree.leaves)} leaves")
    states = []
    for value in column:
        if isinstance(value, str):
            if value.upper() not in DNA.index:
                raise DataError(f"Residue '{value}' is not a DNA base")
            states.append(DNA.index[value.upper()])
        else:
            if not 0 <= int(value) < 4:
                raise DataError(f"Residue index {value} is not a DNA base")
            states.append(int(value))
    log_lik = pattern_log_likelihoods(tree, np.array([states]), tree.branch_lengths * scale, subst)
    return float(np.exp(log_lik[0]))


@dataclass
class ChainPosterior:
    """Forward-backward output of the two-state chain."""

    posterior_conserved: np.ndarray
    transition_counts: np.ndarray   # [from, to] with 0 = conserved
    initial: np.ndarray             # state posterior at the first column
    loglik: float


def chain_forward_backward_log(log_emit_c: np.ndarray, log_emit_n: np.ndarray, mu: float, nu: float) -> ChainPosterior:
    """Scaled forward-backward from log emissions; each column is shifted by its maximum before exponentiating."""
    log_emit = np.column_stack([log_emit_c, log_emit_n])
    L = log_emit.shape[0]
    if L == 0:
        raise DataError("Chain needs at least one column")
    shift = log_emit.max(axis=1)
    if not np.all(np.isfinite(shift)):
        column = int(np.flatnonzero(~np.isfinite(shift))[0]) + 1
        raise EmToolkitError(f"Both state emissions are zero at column {column}")
    emit = np.exp(log_emit - shift[:, None])

    A = _transition_matrix(mu, nu)
    # Forward pass, normalizing each column; the scales multiply to the likelihood
    alpha = np.empty((L, 2))
    scale = np.empty(L)
    current = stationary_distribution(mu, nu) * emit[0]
    for i in range(L):
        if i > 0:
            current = (alpha[i - 1] @ A) * emit[i]
        scale[i] = current.sum()
        alpha[i] = current / scale[i]

    # Backward pass with the forward scales
    beta = np.empty((L, 2))
    beta[L - 1] = 1.0
    for i in range(L - 2, -1, -1):
        beta[i] = A @ (emit[i + 1] * beta[i + 1]) / scale[i + 1]

    posterior = alpha * beta
    posterior /= posterior.sum(axis=1, keepdims=True)
    # Expected transitions between neighbouring columns
    if L > 1:
        xi = alpha[:-1, :, None] * A[None] * (emit[1:] * beta[1:])[:, None, :] / scale[1:, None, None]
        counts = xi.sum(axis=0)
    else:
        counts = np.zeros((2, 2))
    loglik = float(np.log(scale).sum() + shift.sum())
    return ChainPosterior(posterior_conserved=posterior[:, CONSERVED], transition_counts=counts,
                          initial=posterior[0].copy(), loglik=loglik)


def chain_forward_backward(
    emit_c: np.ndarray, emit_n: np.ndarray, mu: float, nu: float,
) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    Two-state forward-backward with the stationary initial distribution.

    Returns
    -------
    tuple
        (P(conserved) per column, 2 x 2 expected transition counts, loglik).

    Raises
    ------
    DataError
        If both emissions are zero at some column.
    """
    emit_c = np.asarray(emit_c, dtype=float)
    emit_n = np.asarray(emit_n, dtype=float)
    if emit_c.shape != emit_n.shape or emit_c.ndim != 1:
        raise DataError("Emission vectors must be one-dimensional and of equal length")
    dead = (emit_c <= 0) & (emit_n <= 0)
    if np.any(dead):
        raise DataError("Both state emissions are zero", column=int(np.flatnonzero(dead)[0]) + 1)
    with np.errstate(divide="ignore"):
        result = chain_forward_backward_log(np.log(emit_c), np.log(emit_n), mu, nu)
    return result.posterior_conserved, result.transition_counts, result.loglik


@dataclass
class PhyloStats:
    chain: ChainPosterior
    weight_conserved: np.ndarray     # expected conserved columns per pattern
    weight_nonconserved: np.ndarray


def chain_objective(mu: float, nu: float, initial: np.ndarray, counts: np.ndarray) -> float:
    """Expected complete-data log-probability of the state chain."""
    with np.errstate(divide="ignore", invalid="ignore"):
        value = initial @ np.log(stationary_distribution(mu, nu))
        value += np.nansum(counts * np.log(_transition_matrix(mu, nu)))
    return float(value)


def emission_objective(
    tree: PhyloTree, patterns: ColumnPatterns, weight_c: np.ndarray, weight_n: np.ndarray,
    rho: float, branch_lengths: np.ndarray,
) -> float:
    """Expected log-likelihood of the columns given the states."""
    lengths = np.concatenate([[0.0], branch_lengths])
    log_c = pattern_log_likelihoods(tree, patterns.leaves, lengths * rho)
    log_n = pattern_log_likelihoods(tree, patterns.leaves, lengths)
    return float(weight_c @ log_c + weight_n @ log_n)


def maximize_emission_objective(
    tree: PhyloTree, patterns: ColumnPatterns, weight_c: np.ndarray, weight_n: np.ndarray,
    rho: float, branch_lengths: np.ndarray,
    rho_bounds: Tuple[float, float] = RHO_BOUNDS, branch_bounds: Tuple[float, float] = BRANCH_BOUNDS,
    tol: float = OPTIMIZER_TOL, max_iter: int = 200,
) -> Tuple[float, np.ndarray, float]:
    """
    Bounded quasi-Newton (L-BFGS-B, finite-difference gradients) over rho
    and the branch lengths.

    Returns
    -------
    tuple
        (rho, branch lengths, objective). The starting point, clipped to the
        bounds, is returned when the optimizer does not improve on it.
    """
    total = max(float(patterns.counts.sum()), 1.0)
    start = np.concatenate([[np.clip(rho, *rho_bounds)], np.clip(branch_lengths, *branch_bounds)])
    bounds = [rho_bounds] + [branch_bounds] * len(branch_lengths)

    def negative(x: np.ndarray) -> float:
        value = emission_objective(tree, patterns, weight_c, weight_n, x[0], x[1:])
        return -value / total if np.isfinite(value) else np.inf

    start_value = negative(start)
    result = minimize(
        negative, start, method="L-BFGS-B", bounds=bounds,
        options={"gtol": tol, "ftol": 1e-12, "maxiter": max_iter},
    )
    if not np.isfinite(result.fun) or result.fun > start_value:
        logger.debug(f"Emission M-step kept its starting point ({result.message})")
        return float(start[0]), start[1:].copy(), -start_value * total
    return float(result.x[0]), np.asarray(result.x[1:]).copy(), -float(result.fun) * total


def update_rates(mu: float, nu: float, initial: np.ndarray, counts: np.ndarray) -> Tuple[float, float]:
    """
    Chain M-step: closed-form ratios of expected transition counts, then a
    bounded refinement that accounts for the stationary initial state.
    The best of the previous, closed-form and refined values is returned.
    """
    def closed(leave: float, stay: float, previous: float) -> float:
        total = leave + stay
        return float(np.clip(leave / total, *RATE_BOUNDS)) if total > 0 else previous

    candidates = [
        (mu, nu),
        (closed(counts[0, 1], counts[0, 0], mu), closed(counts[1, 0], counts[1, 1], nu)),
    ]
    result = minimize(
        lambda x: -chain_objective(x[0], x[1], initial, counts),
        np.array(candidates[1]), method="L-BFGS-B", bounds=[RATE_BOUNDS, RATE_BOUNDS],
    )
    if np.isfinite(result.fun):
        candidates.append((float(result.x[0]), float(result.x[1])))
    return max(candidates, key=lambda pair: chain_objective(pair[0], pair[1], initial, counts))


class PhyloHmmProblem(EmProblem[PhyloHmmParams, PhyloStats]):
    """Generalized EM over (mu, nu, rho, branch lengths) for a fixed topology."""

    def __init__(
        self, alignment: Alignment, tree: PhyloTree,
        rho_bounds: Tuple[float, float] = RHO_BOUNDS, branch_bounds: Tuple[float, float] = BRANCH_BOUNDS,
        optimizer_tol: float = OPTIMIZER_TOL,
    ):
        if not tree.is_binary():
            raise DataError("Phylo-HMM needs a binary tree")
        self.tree = tree
        self.patterns = compress_columns(alignment, tree)
        self.rho_bounds = tuple(rho_bounds)
        self.branch_bounds = tuple(branch_bounds)
        self.optimizer_tol = optimizer_tol

    def initialize(self, rng: np.random.Generator, restart: int) -> PhyloHmmParams:
        lengths = np.clip(self.tree.branch_lengths[1:], *self.branch_bounds)
        if restart == 0:
            return PhyloHmmParams(mu=0.1, nu=0.1, rho=0.5, branch_lengths=lengths)
        noise = np.exp(rng.normal(0.0, 0.25, size=lengths.shape))
        return PhyloHmmParams(
            mu=float(rng.uniform(0.02, 0.3)),
            nu=float(rng.uniform(0.02, 0.3)),
            rho=float(rng.uniform(0.1, 0.7)),
            branch_lengths=np.clip(lengths * noise, *self.branch_bounds),
        )

    def emissions(self, params: PhyloHmmParams) -> Tuple[np.ndarray, np.ndarray]:
        """Per-column log-likelihoods under the conserved and nonconserved states."""
        log_c = pattern_log_likelihoods(self.tree, self.patterns.leaves, params.node_lengths(params.rho))
        log_n = pattern_log_likelihoods(self.tree, self.patterns.leaves, params.node_lengths())
        return log_c[self.patterns.inverse], log_n[self.patterns.inverse]

    def e_step(self, params: PhyloHmmParams, rng: Optional[np.random.Generator] = None) -> Tuple[PhyloStats, float]:
        log_c, log_n = self.emissions(params)
        chain = chain_forward_backward_log(log_c, log_n, params.mu, params.nu)
        num_patterns = self.patterns.leaves.shape[0]
        weight_c = np.bincount(self.patterns.inverse, weights=chain.posterior_conserved, minlength=num_patterns)
        weight_n = self.patterns.counts - weight_c
        return PhyloStats(chain=chain, weight_conserved=weight_c, weight_nonconserved=weight_n), chain.loglik

    def m_step(self, stats: PhyloStats, params: PhyloHmmParams) -> PhyloHmmParams:
        # Chain rates and emission parameters separate in the expected complete-data loglik
        mu, nu = update_rates(params.mu, params.nu, stats.chain.initial, stats.chain.transition_counts)
        rho, lengths, _ = maximize_emission_objective(
            self.tree, self.patterns, stats.weight_conserved, stats.weight_nonconserved,
            params.rho, params.branch_lengths, self.rho_bounds, self.branch_bounds, self.optimizer_tol,
        )
        current = emission_objective(
            self.tree, self.patterns, stats.weight_conserved, stats.weight_nonconserved,
            params.rho, params.branch_lengths,
        )
        proposed = emission_objective(
            self.tree, self.patterns, stats.weight_conserved, stats.weight_nonconserved, rho, lengths,
        )
        # Generalized EM: keep the old point unless the optimizer improved on it
        if proposed < current:
            rho, lengths = params.rho, params.branch_lengths
        return PhyloHmmParams(mu=mu, nu=nu, rho=rho, branch_lengths=lengths)


def fit(
    alignment: Alignment,
    tree: PhyloTree,
    em: EmConfig = EmConfig(),
    rho_bounds: Tuple[float, float] = RHO_BOUNDS,
    branch_bounds: Tuple[float, float] = BRANCH_BOUNDS,
    optimizer_tol: float = OPTIMIZER_TOL,
) -> Tuple[PhyloHmmParams, EmTrace]:
    """
    Fit the two-state phylo-HMM by multi-start generalized EM.

    The tree's branch lengths are only a starting point.

    Raises
    ------
    DataError
        For a non-binary tree, gaps, non-DNA residues or mismatched leaves.
    """
    problem = PhyloHmmProblem(alignment, tree, rho_bounds, branch_bounds, optimizer_tol)
    logger.info(
        f"Fitting phylo-HMM: {alignment.num_rows} leaves, {alignment.num_columns} columns "
        f"({problem.patterns.leaves.shape[0]} patterns), {em.restarts} restart(s)"
    )
    params, traces = multi_start(problem, em)
    trace = traces[best_restart(traces)]
    logger.info(
        f"Phylo-HMM fitted: mu={params.mu:.4f} nu={params.nu:.4f} rho={params.rho:.4f}, "
        f"loglik {trace.final_loglik:.6f}"
    )
    return params, trace


def loglik(alignment: Alignment, tree: PhyloTree, params: PhyloHmmParams) -> float:
    """
    Observed-data log-likelihood of an alignment under fitted parameters.

    Parameters
    ----------
    alignment : Alignment
        Gap-free DNA alignment matching the tree's leaves.
    tree : PhyloTree
        Topology; its own branch lengths are ignored in favour of
        `params.branch_lengths`.
    params : PhyloHmmParams
        Chain rates, conserved scaling and branch lengths.

    Returns
    -------
    float
        log P(alignment), summed over both state paths.
    """
    problem = PhyloHmmProblem(alignment, tree)
    return problem.loglik(params)


def conservation_scores(alignment: Alignment, tree: PhyloTree, params: PhyloHmmParams) -> np.ndarray:
    """Posterior probability of the conserved state at every column."""
    problem = PhyloHmmProblem(alignment, tree)
    log_c, log_n = problem.emissions(params)
    return chain_forward_backward_log(log_c, log_n, params.mu, params.nu).posterior_conserved


def simulate(tree: PhyloTree, params: PhyloHmmParams, length: int, seed: int) -> Tuple[Alignment, np.ndarray]:
    """
    Sample an alignment from the generative model.

    Returns
    -------
    tuple
        Alignment with one row per leaf (leaf order of the tree) and the
        hidden state of every column (CONSERVED or NONCONSERVED).
    """
    if length < 1:
        raise ValueError(f"Alignment length must be positive, got {length}")
    rng = split_generator(seed, 0)

    # Hidden state path from the stationary start
    A = _transition_matrix(params.mu, params.nu)
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(2, p=stationary_distribution(params.mu, params.nu))
    draws = rng.random(length)
    for i in range(1, length):
        states[i] = NONCONSERVED if draws[i] < A[states[i - 1], NONCONSERVED] else CONSERVED

    residues = np.empty((tree.num_nodes, length), dtype=np.int64)
    # Root residues from the stationary distribution, then down every edge in preorder
    residues[0] = rng.choice(4, size=length, p=JUKES_CANTOR.stationary)
    conserved = states == CONSERVED
    lengths = params.node_lengths()
    for node in tree.edges:
        cdf = np.cumsum(JUKES_CANTOR.transitions([lengths[node] * params.rho, lengths[node]]), axis=2)
        rows = np.where(conserved, 0, 1)
        thresholds = cdf[rows, residues[tree.parent[node]]]
        uniform = rng.random(length)[:, None]
        residues[node] = np.minimum((uniform > thresholds).sum(axis=1), 3)

    leaves = tree.leaves
    alignment = Alignment(ids=tree.leaf_names, rows=residues[leaves], alphabet=DNA)
    return alignment, states
