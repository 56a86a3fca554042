import math

import numpy as np
import pytest

from core.em import EmConfig, EmProblem, EmTrace, best_restart, multi_start, run_em
from utils.errors import ConvergenceError, MultiStartError
from utils.rng import split_generator


class CoinMixture(EmProblem):
    """Two biased coins; each trial picks a coin and flips it `flips` times."""

    def __init__(self, heads, flips):
        self.heads = np.asarray(heads, dtype=float)
        self.flips = flips

    def initialize(self, rng, restart):
        return (0.5, float(rng.uniform(0.2, 0.4)), float(rng.uniform(0.6, 0.8)))

    def _log_joint(self, params):
        weight, p1, p2 = params
        tails = self.flips - self.heads
        return np.column_stack([
            np.log(weight) + self.heads * np.log(p1) + tails * np.log(1 - p1),
            np.log(1 - weight) + self.heads * np.log(p2) + tails * np.log(1 - p2),
        ])

    def e_step(self, params, rng=None):
        joint = self._log_joint(params)
        total = np.logaddexp(joint[:, 0], joint[:, 1])
        return np.exp(joint - total[:, None]), float(total.sum())

    def m_step(self, stats, params):
        mass = stats.sum(axis=0)
        p = (stats * self.heads[:, None]).sum(axis=0) / (mass * self.flips)
        return (float(mass[0] / mass.sum()), float(p[0]), float(p[1]))


class FixedPoint(EmProblem):
    def initialize(self, rng, restart):
        return 1.0

    def e_step(self, params, rng=None):
        return None, -3.0

    def m_step(self, stats, params):
        return params


class Exploding(FixedPoint):
    def e_step(self, params, rng=None):
        return None, math.nan


class FailsOnRestart(CoinMixture):
    def __init__(self, heads, flips, failing):
        super().__init__(heads, flips)
        self.failing = failing

    def initialize(self, rng, restart):
        if restart in self.failing:
            raise ValueError(f"bad start {restart}")
        return super().initialize(rng, restart)


@pytest.fixture
def coins():
    rng = np.random.default_rng(3)
    which = rng.random(60) < 0.4
    heads = np.where(which, rng.binomial(10, 0.2, 60), rng.binomial(10, 0.75, 60))
    return CoinMixture(heads, 10)


@pytest.mark.parametrize("kwargs", [
    {"max_iter": 0},
    {"restarts": 0},
    {"tol": 0.0},
    {"tol": -1e-3},
    {"workers": 0},
    {"seed": -1},
])
def test_config_rejects_invalid_values(kwargs):
    with pytest.raises(ValueError):
        EmConfig(**kwargs)


def test_config_from_dict_ignores_unknown_keys():
    config = EmConfig.from_dict({"tol": "1e-4", "restarts": 3, "colour": "blue"})
    assert config.tol == 1e-4
    assert config.restarts == 3
    assert config.max_iter == 1000


def test_fixed_point_converges_after_one_iteration():
    _, trace = run_em(FixedPoint(), 1.0, EmConfig(tol=1e-6))
    assert trace.converged
    assert trace.iterations == 1
    assert trace.loglik_per_iter == [-3.0, -3.0]


def test_max_iter_one_runs_exactly_one_m_step(coins):
    _, trace = run_em(coins, (0.5, 0.3, 0.7), EmConfig(max_iter=1, tol=1e-300))
    assert trace.iterations == 1
    assert len(trace.loglik_per_iter) == 2


def test_non_finite_objective_raises_convergence_error():
    with pytest.raises(ConvergenceError) as excinfo:
        run_em(Exploding(), 1.0, EmConfig())
    assert excinfo.value.iteration == 0


def test_trace_is_monotone(coins):
    _, trace = run_em(coins, (0.5, 0.3, 0.7), EmConfig(tol=1e-10, max_iter=500))
    assert trace.converged
    assert trace.is_monotone()


def test_multi_start_is_deterministic_across_workers(coins):
    sequential, traces_a = multi_start(coins, EmConfig(restarts=4, seed=11))
    threaded, traces_b = multi_start(coins, EmConfig(restarts=4, seed=11, workers=3))
    assert sequential == threaded
    assert [t.loglik_per_iter for t in traces_a] == [t.loglik_per_iter for t in traces_b]
    assert [t.restart for t in traces_a] == [0, 1, 2, 3]


def test_multi_start_returns_best_restart(coins):
    params, traces = multi_start(coins, EmConfig(restarts=5, seed=2))
    best = traces[best_restart(traces)]
    assert best.final_loglik == max(t.final_loglik for t in traces)
    assert coins.loglik(params) == pytest.approx(best.final_loglik, abs=1e-6)


def test_best_restart_breaks_ties_toward_lowest_index():
    traces = [EmTrace([-5.0], restart=0), EmTrace([-2.0], restart=1), EmTrace([-2.0], restart=2)]
    assert best_restart(traces) == 1


def test_failed_restarts_are_skipped(coins):
    problem = FailsOnRestart(coins.heads, 10, failing={0, 2})
    _, traces = multi_start(problem, EmConfig(restarts=3, seed=5))
    assert traces[0].error is not None
    assert traces[2].error is not None
    assert best_restart(traces) == 1


def test_all_restarts_failing_raises(coins):
    problem = FailsOnRestart(coins.heads, 10, failing={0, 1})
    with pytest.raises(MultiStartError) as excinfo:
        multi_start(problem, EmConfig(restarts=2))
    assert len(excinfo.value.causes) == 2


def test_split_generator_streams_are_order_independent():
    first = split_generator(7, 3).random(4)
    split_generator(7, 0).random(10)
    again = split_generator(7, 3).random(4)
    np.testing.assert_array_equal(first, again)
    assert not np.array_equal(first, split_generator(7, 4).random(4))


class RecordsDraws(CoinMixture):
    """Keeps the first number the E-step stream yields at every iteration."""

    def __init__(self, heads, flips):
        super().__init__(heads, flips)
        self.draws = []

    def e_step(self, params, rng=None):
        self.draws.append(float(rng.random()))
        return super().e_step(params)


def test_e_step_stream_is_keyed_by_seed_restart_and_iteration(coins):
    problem = RecordsDraws(coins.heads, 10)
    _, trace = run_em(problem, (0.5, 0.3, 0.7), EmConfig(seed=7, max_iter=3, tol=1e-300), restart=2)
    assert trace.iterations == 3
    expected = [float(split_generator(7, 2, t).random()) for t in range(4)]
    assert problem.draws == expected
