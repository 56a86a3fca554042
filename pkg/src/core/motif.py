"""
motif.py

EM discovery of a fixed-width ungapped motif under the product-multinomial
model: one occurrence per sequence (OOPS) or independent two-component
windows with a site prior p0 (ZOOPS).
"""

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence as SequenceType, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start
from data_processing.seqio import DNA, Alphabet, Sequence
from utils.errors import DataError, EmToolkitError
from utils.logger import setup_logger
from utils.rng import split_generator

# Initialize logger for motif discovery
logger = setup_logger(name="motif", log_filename="motif.log")

OOPS = "oops"
ZOOPS = "zoops"

# Keeps the re-estimated site prior away from 0 and 1
P0_BOUNDS = (1e-8, 1.0 - 1e-8)


@dataclass
class MotifModel:
    """
    Product-multinomial motif.

    Attributes
    ----------
    theta0 : numpy.ndarray
        Background residue distribution, shape (d,).
    theta : numpy.ndarray
        Per-position residue distributions, shape (w, d).
    p0 : float, optional
        Site prior per window; only used in ZOOPS mode.
    """

    theta0: np.ndarray
    theta: np.ndarray
    p0: Optional[float] = None

    @property
    def width(self) -> int:
        return int(self.theta.shape[0])

    @property
    def alphabet_size(self) -> int:
        return int(self.theta0.shape[0])

    def to_dict(self, alphabet: Alphabet) -> Dict[str, Any]:
        return {
            "width": self.width,
            "alphabet": alphabet.letters,
            "background": [float(v) for v in self.theta0],
            "matrix": [[float(v) for v in row] for row in self.theta],
            "p0": None if self.p0 is None else float(self.p0),
        }


@dataclass
class ExpectedCounts:
    """
    Expected residue counts from an E-step.

    `n_sites` is the expected number of sites (K in OOPS mode) and
    `n_background` the expected number of background residues.
    """

    motif_counts: np.ndarray
    background_counts: np.ndarray
    n_sites: float
    n_background: float
    site_posterior_sum: float = 0.0
    n_windows: int = 0


# Per sequence, posterior probability of a site starting at each window
SitePosterior = List[np.ndarray]


@dataclass(frozen=True)
class MotifConfig:
    """Run settings for motif discovery."""

    width: int
    mode: str = OOPS
    pseudocount: float = 0.5
    p0: float = 0.05
    seed_scan: bool = True

    def __post_init__(self):
        if self.width < 1:
            raise ValueError(f"Motif width must be at least 1, got {self.width}")
        if self.mode not in (OOPS, ZOOPS):
            raise ValueError(f"Motif mode must be '{OOPS}' or '{ZOOPS}', got '{self.mode}'")
        if not self.pseudocount > 0:
            raise ValueError(f"Pseudocount must be positive, got {self.pseudocount}")
        if self.mode == ZOOPS and not 0 < self.p0 < 1:
            raise ValueError(f"p0 must lie in (0, 1), got {self.p0}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "MotifConfig":
        return cls(
            width=int(values["width"]),
            mode=str(values.get("mode", OOPS)).lower(),
            pseudocount=float(values.get("pseudocount", 0.5)),
            p0=float(values.get("p0", 0.05)),
            seed_scan=bool(values.get("seed_scan", True)),
        )


def _windows(seq: Sequence, width: int) -> np.ndarray:
    return sliding_window_view(seq.residues, width)


def log_site_weights(seq: Sequence, model: MotifModel) -> np.ndarray:
    """log w_l = log P(seq | site starts at l) for every start l = 0..L-w."""
    log_theta0 = np.log(model.theta0)
    log_ratio = np.log(model.theta) - log_theta0
    windows = _windows(seq, model.width)
    positions = np.arange(model.width)
    return log_theta0[seq.residues].sum() + log_ratio[positions, windows].sum(axis=1)


def site_weight(seq: Sequence, start: int, model: MotifModel) -> float:
    """
    Likelihood of `seq` given a motif site starting at `start` (0-based).

    Raises
    ------
    DataError
        If the window [start, start + w) does not fit in the sequence.
    """
    num_starts = len(seq) - model.width + 1
    if not 0 <= start < num_starts:
        raise DataError(f"Site start {start} outside 0..{num_starts - 1}", record=seq.id)
    return float(np.exp(log_site_weights(seq, model)[start]))


def _check_lengths(seqs: SequenceType[Sequence], width: int) -> None:
    if not seqs:
        raise DataError("No sequences given")
    for seq in seqs:
        if len(seq) < width:
            raise DataError(f"Sequence of length {len(seq)} is shorter than motif width {width}", record=seq.id)


def _residue_counts(seqs: SequenceType[Sequence], d: int) -> np.ndarray:
    return np.bincount(np.concatenate([seq.residues for seq in seqs]), minlength=d).astype(float)


def _window_counts(windows: np.ndarray, weights: np.ndarray, width: int, d: int) -> np.ndarray:
    """counts[i, r] = sum over windows of weight * [window[i] == r]."""
    counts = np.zeros((width, d))
    for i in range(width):
        counts[i] = np.bincount(windows[:, i], weights=weights, minlength=d)
    return counts


def e_step_oops(seqs: SequenceType[Sequence], model: MotifModel) -> Tuple[ExpectedCounts, SitePosterior, float]:
    """
    OOPS E-step: site posteriors w_l / W per sequence, expected motif and
    background counts, and loglik = sum_k log(W_k / L'_k).
    """
    _check_lengths(seqs, model.width)
    d, width = model.alphabet_size, model.width
    motif_counts = np.zeros((width, d))
    posterior: SitePosterior = []
    loglik = 0.0

    for seq in seqs:
        log_w = log_site_weights(seq, model)
        log_total = logsumexp(log_w)
        if not np.isfinite(log_total):
            raise EmToolkitError(f"Sequence '{seq.id}' has zero likelihood under the motif model")
        post = np.exp(log_w - log_total)
        posterior.append(post)
        loglik += log_total - np.log(log_w.shape[0])
        motif_counts += _window_counts(_windows(seq, width), post, width, d)

    background_counts = np.clip(_residue_counts(seqs, d) - motif_counts.sum(axis=0), 0.0, None)
    counts = ExpectedCounts(
        motif_counts=motif_counts,
        background_counts=background_counts,
        n_sites=float(len(seqs)),
        n_background=float(sum(len(seq) - width for seq in seqs)),
    )
    return counts, posterior, float(loglik)


def e_step_zoops(
    seqs: SequenceType[Sequence], model: MotifModel, p0: Optional[float] = None,
) -> Tuple[ExpectedCounts, SitePosterior, float]:
    """
    ZOOPS E-step: every length-w window is an independent draw from
    p0 * motif + (1 - p0) * background.

    Expected motif counts weight each window by its posterior; expected
    background counts weight all w residues of each window by one minus it.
    """
    _check_lengths(seqs, model.width)
    p0 = model.p0 if p0 is None else p0
    if p0 is None or not 0 < p0 < 1:
        raise ValueError(f"ZOOPS needs a site prior in (0, 1), got {p0}")

    d, width = model.alphabet_size, model.width
    log_theta0 = np.log(model.theta0)
    log_theta = np.log(model.theta)
    positions = np.arange(width)

    motif_counts = np.zeros((width, d))
    background_counts = np.zeros(d)
    posterior: SitePosterior = []
    loglik = 0.0
    posterior_sum = 0.0
    n_windows = 0

    for seq in seqs:
        windows = _windows(seq, width)
        log_site = np.log(p0) + log_theta[positions, windows].sum(axis=1)
        log_background = np.log1p(-p0) + log_theta0[windows].sum(axis=1)
        log_total = np.logaddexp(log_site, log_background)
        post = np.exp(log_site - log_total)
        posterior.append(post)
        loglik += log_total.sum()
        posterior_sum += post.sum()
        n_windows += windows.shape[0]
        motif_counts += _window_counts(windows, post, width, d)
        background_counts += _window_counts(windows, 1.0 - post, width, d).sum(axis=0)

    counts = ExpectedCounts(
        motif_counts=motif_counts,
        background_counts=background_counts,
        n_sites=float(posterior_sum),
        n_background=float(background_counts.sum()),
        site_posterior_sum=float(posterior_sum),
        n_windows=n_windows,
    )
    return counts, posterior, float(loglik)


def m_step(counts: ExpectedCounts, alpha: float = 0.5) -> MotifModel:
    """
    Counting M-step with pseudocount alpha added to every cell.

    theta_i = (c_i + alpha) / (sum(c_i) + d * alpha); theta0 likewise from
    the background counts. In ZOOPS mode p0 becomes the mean window
    posterior.
    """
    d = counts.background_counts.shape[0]
    theta = (counts.motif_counts + alpha) / (counts.motif_counts.sum(axis=1, keepdims=True) + d * alpha)
    theta0 = (counts.background_counts + alpha) / (counts.background_counts.sum() + d * alpha)
    p0 = None
    if counts.n_windows:
        p0 = float(np.clip(counts.site_posterior_sum / counts.n_windows, *P0_BOUNDS))
    return MotifModel(theta0=theta0, theta=theta, p0=p0)


def log_prior(model: MotifModel, alpha: float) -> float:
    """Log-density (up to a constant) of the Dirichlet prior the pseudocount encodes."""
    if alpha == 0:
        return 0.0
    return float(alpha * (np.log(model.theta0).sum() + np.log(model.theta).sum()))


def seed_model(window: np.ndarray, background: np.ndarray, alpha: float, p0: Optional[float] = None) -> MotifModel:
    """Starting model whose position i favours residue window[i]."""
    d = background.shape[0]
    onehot = np.zeros((window.shape[0], d))
    onehot[np.arange(window.shape[0]), window] = 1.0
    theta = (onehot + alpha) / (1.0 + d * alpha)
    return MotifModel(theta0=background.copy(), theta=theta, p0=p0)


class MotifProblem(EmProblem[MotifModel, ExpectedCounts]):
    """EM problem over a fixed set of sequences; the traced objective includes the pseudocount prior."""

    def __init__(self, seqs: SequenceType[Sequence], config: MotifConfig, alphabet: Alphabet = DNA):
        _check_lengths(seqs, config.width)
        self.seqs = list(seqs)
        self.config = config
        self.alphabet = alphabet
        counts = _residue_counts(self.seqs, alphabet.size)
        self.background = (counts + config.pseudocount) / (counts.sum() + alphabet.size * config.pseudocount)

    def _e_step(self, model: MotifModel) -> Tuple[ExpectedCounts, SitePosterior, float]:
        if self.config.mode == ZOOPS:
            return e_step_zoops(self.seqs, model)
        return e_step_oops(self.seqs, model)

    def objective(self, model: MotifModel) -> float:
        return self._e_step(model)[2] + log_prior(model, self.config.pseudocount)

    def initialize(self, rng: np.random.Generator, restart: int) -> MotifModel:
        width = self.config.width
        p0 = self.config.p0 if self.config.mode == ZOOPS else None
        seq = self.seqs[int(rng.integers(len(self.seqs)))]
        windows = _windows(seq, width)

        if not self.config.seed_scan:
            window = windows[int(rng.integers(windows.shape[0]))]
            return seed_model(window, self.background, self.config.pseudocount, p0)

        best_model, best_score = None, -np.inf
        for window in windows:
            candidate = seed_model(window, self.background, self.config.pseudocount, p0)
            score = self.objective(candidate)
            if score > best_score:
                best_model, best_score = candidate, score
        logger.debug(f"Restart {restart}: seed scan over '{seq.id}' picked score {best_score:.6g}")
        return best_model

    def e_step(self, params: MotifModel, rng: Optional[np.random.Generator] = None) -> Tuple[ExpectedCounts, float]:
        counts, _, loglik = self._e_step(params)
        return counts, loglik + log_prior(params, self.config.pseudocount)

    def m_step(self, stats: ExpectedCounts, params: MotifModel) -> MotifModel:
        return m_step(stats, self.config.pseudocount)

    def posterior(self, model: MotifModel) -> SitePosterior:
        return self._e_step(model)[1]


def best_sites(posterior: SitePosterior) -> List[Tuple[int, float]]:
    """Per sequence, (start, posterior) of the most probable site; ties go to the smallest start."""
    return [(int(np.argmax(post)), float(np.max(post))) for post in posterior]


def discover(
    seqs: SequenceType[Sequence],
    config: MotifConfig,
    em: EmConfig,
    alphabet: Alphabet = DNA,
) -> Tuple[MotifModel, SitePosterior, EmTrace]:
    """
    Find the maximum-likelihood motif by multi-start EM.

    Returns
    -------
    tuple
        Best model, its site posteriors and the trace of the winning restart.

    Raises
    ------
    DataError
        If a sequence is shorter than the motif width.
    """
    logger.info(
        f"Motif discovery: {len(seqs)} sequences, width {config.width}, mode {config.mode}, "
        f"{em.restarts} restart(s)"
    )
    problem = MotifProblem(seqs, config, alphabet)
    model, traces = multi_start(problem, em)
    trace = traces[best_restart(traces)]
    posterior = problem.posterior(model)
    logger.info(f"Motif discovery finished: loglik {trace.final_loglik:.6f}, converged={trace.converged}")
    return model, posterior, trace


def plant_motif(
    num_seqs: int, length: int, width: int, seed: int, alphabet: Alphabet = DNA,
) -> Tuple[List[Sequence], np.ndarray, List[int]]:
    """
    Random uniform sequences, each carrying one copy of a random motif.

    Returns
    -------
    tuple
        (sequences, planted motif as indices, 0-based start per sequence).
    """
    if width > length:
        raise ValueError(f"Motif width {width} exceeds sequence length {length}")
    rng = split_generator(seed, 0)
    motif = rng.integers(alphabet.size, size=width)
    seqs, starts = [], []
    for k in range(num_seqs):
        residues = rng.integers(alphabet.size, size=length)
        start = int(rng.integers(length - width + 1))
        residues[start:start + width] = motif
        seqs.append(Sequence(id=f"seq{k + 1}", residues=residues.astype(np.int64)))
        starts.append(start)
    return seqs, motif, starts
