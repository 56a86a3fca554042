"""
em.py

Generic expectation-maximization driver shared by every solver: one EM run to
convergence, seeded multi-start, and the traces both produce.
"""

import math
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, Generic, List, Optional, Tuple, TypeVar

import numpy as np

from utils.errors import ConvergenceError, EmToolkitError, MultiStartError
from utils.logger import setup_logger
from utils.rng import split_generator

# Initialize the logger shared by every EM run
logger = setup_logger(name="em", log_filename="em.log")

# Allowed decrease of the objective before a step counts as non-monotone
MONOTONE_SLACK = 1e-9

P = TypeVar("P")  # Parameter point
S = TypeVar("S")  # Sufficient statistics


@dataclass(frozen=True)
class EmConfig:
    """
    Convergence and restart settings for an EM run.

    Attributes
    ----------
    tol : float
        Threshold on |l_t - l_(t-1)| / (|l_t| + 1).
    max_iter : int
        Maximum number of M-steps per restart.
    restarts : int
        Number of independent starting points.
    seed : int
        Master seed; restart r draws from the stream (seed, r).
    workers : int
        Threads used to run restarts; 1 runs them in order.
    """

    tol: float = 1e-6
    max_iter: int = 1000
    restarts: int = 1
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.restarts < 1:
            raise ValueError(f"restarts must be at least 1, got {self.restarts}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if self.workers < 1:
            raise ValueError(f"workers must be at least 1, got {self.workers}")

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "EmConfig":
        """Build a config from a YAML section, ignoring unknown keys."""
        known = {key: values[key] for key in ("tol", "max_iter", "restarts", "seed", "workers") if key in values}
        return cls(
            tol=float(known.get("tol", cls.tol)),
            max_iter=int(known.get("max_iter", cls.max_iter)),
            restarts=int(known.get("restarts", cls.restarts)),
            seed=int(known.get("seed", cls.seed)),
            workers=int(known.get("workers", cls.workers)),
        )


@dataclass
class EmTrace:
    """Objective value after initialization and after every M-step of one run."""

    loglik_per_iter: List[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    restart: int = 0
    error: Optional[str] = None

    @property
    def final_loglik(self) -> float:
        return self.loglik_per_iter[-1] if self.loglik_per_iter else -math.inf

    def is_monotone(self, slack: float = MONOTONE_SLACK) -> bool:
        values = self.loglik_per_iter
        return all(b >= a - slack for a, b in zip(values, values[1:]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "restart": self.restart,
            "iterations": self.iterations,
            "converged": self.converged,
            "loglik_per_iter": [float(v) for v in self.loglik_per_iter],
            "error": self.error,
        }


class EmProblem(ABC, Generic[P, S]):
    """
    Capabilities a solver supplies to the driver.

    Implementations must be safe to share read-only between restarts: any
    per-run state lives in the parameter objects they return.
    """

    # False when the E-step draws random numbers (RCEM); monotonicity is then
    # not checked
    deterministic: bool = True

    @abstractmethod
    def initialize(self, rng: np.random.Generator, restart: int) -> P:
        """Starting parameter point for restart `restart`."""

    @abstractmethod
    def e_step(self, params: P, rng: Optional[np.random.Generator] = None) -> Tuple[S, float]:
        """Sufficient statistics at `params` and the objective value at `params`."""

    @abstractmethod
    def m_step(self, stats: S, params: P) -> P:
        """New parameter point maximizing the expected objective."""

    def loglik(self, params: P) -> float:
        """Observed-data objective at `params`."""
        return self.e_step(params)[1]


def relative_change(current: float, previous: float) -> float:
    return abs(current - previous) / (abs(current) + 1.0)


def run_em(
    problem: EmProblem,
    init: P,
    config: EmConfig,
    restart: int = 0,
) -> Tuple[P, EmTrace]:
    """
    Iterate E-step and M-step from `init` until the relative objective change
    drops below `config.tol` or `config.max_iter` M-steps have run.

    Parameters
    ----------
    problem : EmProblem
        Solver capabilities.
    init : P
        Valid starting parameter point.
    config : EmConfig
        Convergence settings.
    restart : int, optional
        Restart index recorded in the trace.

    Returns
    -------
    tuple
        Final parameters and the run's EmTrace.

    Raises
    ------
    ConvergenceError
        If the objective is NaN or infinite at some iteration.

    Notes
    -----
    - The E-step at iteration t receives the stream (seed, restart, t), so a
      randomized E-step draws the same numbers however restarts are scheduled.
    """
    params = init
    # Iteration 0 scores the starting point
    stats, loglik = problem.e_step(params, split_generator(config.seed, restart, 0))
    if not math.isfinite(loglik):
        raise ConvergenceError(f"Non-finite log-likelihood {loglik}", iteration=0)
    trace = EmTrace(loglik_per_iter=[float(loglik)], restart=restart)

    for iteration in range(1, config.max_iter + 1):
        params = problem.m_step(stats, params)
        stats, new_loglik = problem.e_step(params, split_generator(config.seed, restart, iteration))
        if not math.isfinite(new_loglik):
            raise ConvergenceError(f"Non-finite log-likelihood {new_loglik}", iteration=iteration)

        trace.loglik_per_iter.append(float(new_loglik))
        trace.iterations = iteration
        logger.debug(f"restart {restart} iteration {iteration}: loglik {new_loglik:.10g}")

        if problem.deterministic and new_loglik < loglik - MONOTONE_SLACK:
            logger.warning(
                f"Log-likelihood decreased by {loglik - new_loglik:.3e} at iteration {iteration} "
                f"(restart {restart})"
            )

        if relative_change(new_loglik, loglik) < config.tol:
            trace.converged = True
            break
        loglik = new_loglik

    logger.debug(
        f"restart {restart} finished after {trace.iterations} iterations, "
        f"converged={trace.converged}, loglik={trace.final_loglik:.10g}"
    )
    return params, trace


def best_restart(traces: List[EmTrace]) -> int:
    """Index of the successful restart with the highest final objective; ties go to the lowest index."""
    best = None
    for index, trace in enumerate(traces):
        if trace.error is not None:
            continue
        if best is None or trace.final_loglik > traces[best].final_loglik:
            best = index
    if best is None:
        raise MultiStartError([trace.error or "unknown" for trace in traces])
    return best


def _run_restart(problem: EmProblem, config: EmConfig, restart: int) -> Tuple[Optional[Any], EmTrace]:
    rng = split_generator(config.seed, restart)
    try:
        init = problem.initialize(rng, restart)
        return run_em(problem, init, config, restart=restart)
    except (EmToolkitError, ArithmeticError, ValueError, np.linalg.LinAlgError) as e:
        logger.warning(f"Restart {restart} failed: {e}")
        return None, EmTrace(restart=restart, error=str(e))


def multi_start(problem: EmProblem, config: EmConfig) -> Tuple[P, List[EmTrace]]:
    """
    Run `config.restarts` independent EM runs and keep the best one.

    Restart r initializes from the stream (config.seed, r), so the result is a
    deterministic function of the problem and the seed whatever the number
    of workers.

    Returns
    -------
    tuple
        Parameters of the best restart and the traces of all restarts, in
        restart order.

    Raises
    ------
    MultiStartError
        If every restart failed.
    """
    logger.info(f"Starting {config.restarts} EM restart(s) with seed {config.seed}")

    if config.workers > 1 and config.restarts > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(lambda r: _run_restart(problem, config, r), range(config.restarts)))
    else:
        outcomes = [_run_restart(problem, config, r) for r in range(config.restarts)]

    traces = [trace for _, trace in outcomes]
    best = best_restart(traces)
    logger.info(
        f"Best restart {best} with loglik {traces[best].final_loglik:.10g} "
        f"after {traces[best].iterations} iterations"
    )
    return outcomes[best][0], traces
