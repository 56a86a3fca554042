"""
mixture.py

Gaussian mixture clustering with four covariance families, BIC model
selection and the rejection-controlled E-step (RCEM).

Covariances are estimated with a small ridge r treated as a prior scatter:
full Sigma_k = (S_k + r I) / N_k, so the quantity EM increases is the
loglik minus r/2 * sum_k tr(Sigma_k^-1).
"""

from dataclasses import dataclass
from typing import Any, Dict, List, NamedTuple, Optional, Sequence as SequenceType, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cholesky, solve_triangular
from scipy.special import logsumexp

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start
from utils.errors import DataError, EmptyComponentError, SingularCovarianceError
from utils.logger import setup_logger
from utils.rng import split_generator

# Initialize logger for mixture fitting, writing to mixture.log
logger = setup_logger(name="mixture", log_filename="mixture.log")

SPHERICAL = "spherical"
DIAGONAL = "diagonal"
FULL = "full"
SHARED = "shared"
FAMILIES = (SPHERICAL, DIAGONAL, FULL, SHARED)

RIDGE_FACTOR = 1e-6
EMPTY_COMPONENT_MASS = 1e-8


@dataclass
class MixtureModel:
    """
    Attributes
    ----------
    weights : numpy.ndarray
        Mixing proportions tau, shape (K,).
    means : numpy.ndarray
        (K, p).
    covariances : numpy.ndarray
        (K, p, p); identical slices under the shared family.
    family : str
        One of FAMILIES.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    family: str = FULL

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown covariance family '{self.family}', expected one of {FAMILIES}")
        K, p = self.means.shape
        if self.weights.shape != (K,) or self.covariances.shape != (K, p, p):
            raise DataError("Mixture parameter arrays have inconsistent shapes")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise DataError("Mixing weights must be a probability vector")

    @property
    def num_components(self) -> int:
        return int(self.means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    def permuted(self, order: SequenceType[int]) -> "MixtureModel":
        order = np.asarray(order)
        return MixtureModel(self.weights[order], self.means[order], self.covariances[order], self.family)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K": self.num_components,
            "family": self.family,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


@dataclass(frozen=True)
class RcemConfig:
    """Rejection-controlled E-step: responsibilities below `threshold` are kept at `threshold` or dropped."""

    threshold: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"RCEM threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "RcemConfig":
        return cls(threshold=float(values.get("c", cls.threshold)), seed=int(values.get("seed", cls.seed)))


def default_ridge(data: np.ndarray, factor: float = RIDGE_FACTOR) -> float:
    """factor times the mean per-column variance, floored at 1e-12."""
    return max(factor * float(np.mean(np.var(data, axis=0))), 1e-12)


def _check_data(data: np.ndarray) -> np.ndarray:
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] == 0:
        raise DataError(f"Data must be a non-empty n x p matrix, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise DataError("Data holds missing or infinite values")
    return data


def component_log_densities(data: np.ndarray, model: MixtureModel) -> np.ndarray:
    """
    log f_k(x_i) for every point and component, shape (n, K).

    Raises
    ------
    SingularCovarianceError
        If a covariance is not positive definite.
    """
    data = _check_data(data)
    n, p = data.shape
    result = np.empty((n, model.num_components))
    for k in range(model.num_components):
        try:
            chol = cholesky(model.covariances[k], lower=True)
        except LinAlgError as e:
            raise SingularCovarianceError(k) from e
        diagonal = np.diag(chol)
        if np.any(diagonal <= 0) or not np.all(np.isfinite(diagonal)):
            raise SingularCovarianceError(k)
        z = solve_triangular(chol, (data - model.means[k]).T, lower=True)
        log_det = 2.0 * np.log(diagonal).sum()
        result[:, k] = -0.5 * (p * np.log(2.0 * np.pi) + log_det + np.sum(z * z, axis=0))
    return result


def _joint_log(data: np.ndarray, model: MixtureModel) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(model.weights)[None, :] + component_log_densities(data, model)


def e_step(data: np.ndarray, model: MixtureModel) -> Tuple[np.ndarray, float]:
    """
    Responsibilities tau_k f_k(x_i) / sum_j tau_j f_j(x_i) and the loglik,
    both computed in log space.
    """
    joint = _joint_log(data, model)
    total = logsumexp(joint, axis=1)
    return np.exp(joint - total[:, None]), float(total.sum())


def loglik(data: np.ndarray, model: MixtureModel) -> float:
    """
    Observed-data log-likelihood of a mixture.

    Parameters
    ----------
    data : numpy.ndarray
        (n, p) points; a 1-D array is read as one column.
    model : MixtureModel
        Weights, means and covariances to score.

    Returns
    -------
    float
        sum_i log sum_k tau_k f_k(x_i), without the ridge penalty.
    """
    return float(logsumexp(_joint_log(data, model), axis=1).sum())


def ridge_penalty(model: MixtureModel, ridge: float) -> float:
    """r/2 * sum of tr(Sigma_k^-1), counting a shared covariance once."""
    if ridge == 0:
        return 0.0
    covariances = model.covariances[:1] if model.family == SHARED else model.covariances
    return float(0.5 * ridge * sum(np.trace(np.linalg.inv(cov)) for cov in covariances))


def m_step(
    data: np.ndarray, responsibilities: np.ndarray, family: str = FULL, ridge: Optional[float] = None,
) -> MixtureModel:
    """
    Weighted mixing proportions, means and family-constrained covariances.

    Rows of `responsibilities` need not sum to one (RCEM weights); the mixing
    proportions are normalized by the total weight.

    Parameters
    ----------
    data : numpy.ndarray
        (n, p) points.
    responsibilities : numpy.ndarray
        (n, K) nonnegative weights.
    family : str, optional
        Covariance family, one of FAMILIES.
    ridge : float, optional
        Prior scatter r; defaults to `default_ridge(data)`.

    Returns
    -------
    MixtureModel

    Notes
    -----
    - The ridge enters as a prior scatter before dividing by the component
      mass: full Sigma_k = (S_k + r I) / N_k. The diagonal therefore grows by
      r / N_k, not by r; the diagonal, spherical and shared families
      (divided by the total weight) follow the same rule.
    - The update maximizes loglik - `ridge_penalty`, the objective the
      driver traces.

    Raises
    ------
    EmptyComponentError
        If some component has total weight below EMPTY_COMPONENT_MASS.
    """
    if family not in FAMILIES:
        raise ValueError(f"Unknown covariance family '{family}', expected one of {FAMILIES}")
    data = _check_data(data)
    gamma = np.asarray(responsibilities, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] != data.shape[0]:
        raise DataError(f"Responsibilities of shape {gamma.shape} do not match {data.shape[0]} points")
    if ridge is None:
        ridge = default_ridge(data)

    n, p = data.shape
    K = gamma.shape[1]
    mass = gamma.sum(axis=0)
    empty = [k for k in range(K) if mass[k] < EMPTY_COMPONENT_MASS]
    if empty:
        raise EmptyComponentError(empty)

    # Weighted means and per-component scatter matrices
    means = (gamma.T @ data) / mass[:, None]
    scatter = np.empty((K, p, p))
    for k in range(K):
        centered = data - means[k]
        scatter[k] = (gamma[:, k, None] * centered).T @ centered

    eye = np.eye(p)
    if family == FULL:
        covariances = (scatter + ridge * eye) / mass[:, None, None]
    elif family == DIAGONAL:
        diagonals = np.diagonal(scatter, axis1=1, axis2=2)
        covariances = np.stack([np.diag((diagonals[k] + ridge) / mass[k]) for k in range(K)])
    elif family == SPHERICAL:
        scales = (np.trace(scatter, axis1=1, axis2=2) + ridge * p) / (p * mass)
        covariances = scales[:, None, None] * eye
    else:
        pooled = (scatter.sum(axis=0) + ridge * eye) / mass.sum()
        covariances = np.broadcast_to(pooled, (K, p, p)).copy()

    covariances = 0.5 * (covariances + np.transpose(covariances, (0, 2, 1)))
    return MixtureModel(weights=mass / mass.sum(), means=means, covariances=covariances, family=family)


def rcem_reweight(responsibilities: np.ndarray, config: RcemConfig, rng: np.random.Generator) -> np.ndarray:
    """
    Entry-wise rejection control: keep max(gamma, c) with probability
    min(1, gamma / c), otherwise 0. Rows are not renormalized.
    """
    gamma = np.asarray(responsibilities, dtype=float)
    c = config.threshold
    accept = rng.random(gamma.shape) < np.minimum(1.0, gamma / c)
    return np.where(accept, np.maximum(gamma, c), 0.0)


def q_function(data: np.ndarray, responsibilities: np.ndarray, model: MixtureModel) -> float:
    """Expected complete-data loglik sum_ik gamma_ik (log tau_k + log f_k(x_i))."""
    joint = _joint_log(data, model)
    gamma = np.asarray(responsibilities, dtype=float)
    with np.errstate(invalid="ignore"):
        terms = np.where(gamma > 0, gamma * joint, 0.0)
    return float(terms.sum())


def assignments(responsibilities: np.ndarray) -> np.ndarray:
    """Most responsible component per point; ties go to the lower index."""
    return np.argmax(responsibilities, axis=1)


def _covariance_for(data: np.ndarray, family: str, ridge: float) -> np.ndarray:
    """Whole-data covariance projected onto the family."""
    single = m_step(data, np.ones((data.shape[0], 1)), family if family != SHARED else FULL, ridge)
    return single.covariances[0]


class MixtureProblem(EmProblem[MixtureModel, np.ndarray]):
    """Mixture EM, optionally with the RCEM reweighting after each E-step."""

    def __init__(
        self, data: np.ndarray, num_components: int, family: str = FULL,
        ridge_factor: float = RIDGE_FACTOR, rcem: Optional[RcemConfig] = None,
    ):
        self.data = _check_data(data)
        if family not in FAMILIES:
            raise ValueError(f"Unknown covariance family '{family}', expected one of {FAMILIES}")
        if num_components < 1:
            raise ValueError(f"Number of components must be positive, got {num_components}")
        if self.data.shape[0] <= num_components:
            raise DataError(f"Need more points than components: n = {self.data.shape[0]}, K = {num_components}")
        self.num_components = num_components
        self.family = family
        self.ridge = default_ridge(self.data, ridge_factor)
        self.rcem = rcem
        self.deterministic = rcem is None

    def objective(self, model: MixtureModel) -> float:
        return loglik(self.data, model) - ridge_penalty(model, self.ridge)

    def initialize(self, rng: np.random.Generator, restart: int) -> MixtureModel:
        gamma = rng.dirichlet(np.ones(self.num_components), size=self.data.shape[0])
        return self._m_step(gamma, None)

    def e_step(self, params: MixtureModel, rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, float]:
        gamma, value = e_step(self.data, params)
        value -= ridge_penalty(params, self.ridge)
        if self.rcem is not None:
            # Key the draws on the RCEM seed and the driver's (seed, restart, t) stream
            step = 0 if rng is None else int(rng.integers(2 ** 63))
            gamma = rcem_reweight(gamma, self.rcem, split_generator(self.rcem.seed, step))
        return gamma, value

    def m_step(self, stats: np.ndarray, params: MixtureModel) -> MixtureModel:
        return self._m_step(stats, params)

    def _m_step(self, gamma: np.ndarray, previous: Optional[MixtureModel]) -> MixtureModel:
        try:
            return m_step(self.data, gamma, self.family, self.ridge)
        except EmptyComponentError as e:
            return self._rescue(gamma, e.components, previous)

    def _rescue(self, gamma: np.ndarray, empty: List[int], previous: Optional[MixtureModel]) -> MixtureModel:
        """Re-seed empty components at the least likely points with the whole-data covariance."""
        logger.warning(f"Re-seeding empty mixture component(s) {empty}")
        n, p = self.data.shape
        kept = [k for k in range(self.num_components) if k not in empty]

        # Score points under the previous model, or by distance to the mean on the first step
        if previous is not None:
            density = logsumexp(_joint_log(self.data, previous), axis=1)
        else:
            density = -np.sum((self.data - self.data.mean(axis=0)) ** 2, axis=1)

        # Regular update for the surviving components, scaled to leave room for the new ones
        partial = m_step(self.data, gamma[:, kept], self.family, self.ridge) if kept else None
        weights = np.empty(self.num_components)
        means = np.empty((self.num_components, p))
        covariances = np.empty((self.num_components, p, p))
        if partial is not None:
            weights[kept] = partial.weights * (1.0 - len(empty) / n)
            means[kept] = partial.means
            covariances[kept] = partial.covariances

        # Each empty component restarts at one of the least likely points
        seeds = np.argsort(density, kind="stable")[:len(empty)]
        fallback = (partial.covariances[0] if self.family == SHARED and partial is not None
                    else _covariance_for(self.data, self.family, self.ridge))
        for k, point in zip(empty, seeds):
            weights[k] = 1.0 / n
            means[k] = self.data[point]
            covariances[k] = fallback
        return MixtureModel(weights=weights / weights.sum(), means=means, covariances=covariances, family=self.family)


def fit(
    data: np.ndarray,
    num_components: int,
    family: str = FULL,
    em: EmConfig = EmConfig(),
    rcem: Optional[RcemConfig] = None,
    ridge_factor: float = RIDGE_FACTOR,
) -> Tuple[MixtureModel, np.ndarray, EmTrace]:
    """
    Fit a K-component mixture by multi-start EM (RCEM when `rcem` is given).

    Returns
    -------
    tuple
        Best model, its plain responsibilities and the winning trace.

    Raises
    ------
    DataError
        If n <= K or the data are not a finite matrix.
    """
    problem = MixtureProblem(data, num_components, family, ridge_factor, rcem)
    logger.info(
        f"Fitting {num_components}-component {family} mixture to {problem.data.shape[0]} x "
        f"{problem.data.shape[1]} data{' with RCEM' if rcem else ''}, {em.restarts} restart(s)"
    )
    model, traces = multi_start(problem, em)
    trace = traces[best_restart(traces)]
    gamma, _ = e_step(problem.data, model)
    logger.info(f"Mixture fitted: objective {trace.final_loglik:.6f} after {trace.iterations} iterations")
    return model, gamma, trace


def num_free_parameters(num_components: int, dim: int, family: str) -> int:
    """
    Number of free parameters of a mixture, as used by BIC.

    Parameters
    ----------
    num_components : int
        K.
    dim : int
        Data dimension p.
    family : str
        Covariance family.

    Returns
    -------
    int
        (K - 1) weights + K p means + the family's covariance entries:
        K (spherical), K p (diagonal), K p (p + 1) / 2 (full) or
        p (p + 1) / 2 (shared).
    """
    K, p = num_components, dim
    covariance = {
        SPHERICAL: K,
        DIAGONAL: K * p,
        FULL: K * p * (p + 1) // 2,
        SHARED: p * (p + 1) // 2,
    }[family]
    return (K - 1) + K * p + covariance


def bic(model: MixtureModel, data: np.ndarray) -> float:
    """-2 loglik + (free parameters) log n; lower is better."""
    data = _check_data(data)
    free = num_free_parameters(model.num_components, model.dim, model.family)
    return -2.0 * loglik(data, model) + free * np.log(data.shape[0])


class KSelection(NamedTuple):
    """Outcome of a BIC sweep over K."""

    model: MixtureModel
    k: int
    table: List[Dict[str, float]]
    responsibilities: np.ndarray
    trace: EmTrace


def select_k(
    data: np.ndarray,
    k_range: SequenceType[int],
    family: str = FULL,
    em: EmConfig = EmConfig(),
    rcem: Optional[RcemConfig] = None,
    ridge_factor: float = RIDGE_FACTOR,
) -> KSelection:
    """
    Fit every K in `k_range` and keep the lowest BIC; ties go to the smaller K.

    Returns
    -------
    KSelection
        Best model and its K, the BIC table with one row per K in ascending
        order, and the responsibilities and trace of the chosen fit.
    """
    k_values = sorted(set(int(k) for k in k_range))
    if not k_values:
        raise ValueError("k_range must not be empty")
    data = _check_data(data)

    table = []
    best: Optional[KSelection] = None
    best_bic = np.inf
    for k in k_values:
        model, gamma, trace = fit(data, k, family, em, rcem, ridge_factor)
        score = bic(model, data)
        table.append({
            "K": k,
            "loglik": loglik(data, model),
            "n_params": num_free_parameters(k, data.shape[1], family),
            "bic": score,
            "iterations": trace.iterations,
        })
        # Strict comparison keeps the smaller K on ties
        if best is None or score < best_bic:
            best, best_bic = KSelection(model, k, table, gamma, trace), score
    logger.info(f"BIC selects K = {best.k} among {k_values}")
    return best


def sample_mixture(
    means: SequenceType, sds: SequenceType, n: int, seed: int, weights: Optional[SequenceType[float]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw n points from an axis-aligned Gaussian mixture.

    Parameters
    ----------
    means : array-like
        (K,) or (K, p) component means.
    sds : array-like
        Per-component standard deviation, (K,) or (K, p).
    weights : array-like, optional
        Mixing proportions; uniform when omitted.

    Returns
    -------
    tuple
        (n x p data, component label per point).
    """
    means = np.asarray(means, dtype=float)
    if means.ndim == 1:
        means = means[:, None]
    K, p = means.shape
    sds = np.asarray(sds, dtype=float)
    sds = np.broadcast_to(sds[:, None] if sds.ndim == 1 else sds, (K, p))
    probabilities = np.full(K, 1.0 / K) if weights is None else np.asarray(weights, dtype=float)

    rng = split_generator(seed, 0)
    labels = rng.choice(K, size=n, p=probabilities)
    data = means[labels] + sds[labels] * rng.standard_normal((n, p))
    return data, labels
