import logging

import numpy as np
import pytest
from scipy import stats

from conftest import random_params
from laghawkes.core import CausalGraph, EventSequence, InvalidArgument, LagPosterior, ModelParams
from laghawkes.likelihood import compensator, intensity_at
from laghawkes.simulate import (ContractViolation, SimConfig, TruncationError, intensity_upper_bound,
                                mean_inter_arrival, naive_next_event_time, point_mass,
                                predict_next_event_time, predict_rollout, simulate, simulate_batch)


def _one_dim(a=0.5, beta=1.0, delta=2.0, mu=0.5):
    return ModelParams(np.array([mu]), np.array([[a]]), np.array([[beta]]), np.array([[delta]]))


def test_config_validation():
    with pytest.raises(InvalidArgument):
        SimConfig(0.0)
    with pytest.raises(InvalidArgument):
        SimConfig(1.0, max_events=0)


def test_same_seed_same_sequence():
    p = random_params(np.random.default_rng(0), 3)
    a = simulate(p, None, SimConfig(50.0, seed=4))
    b = simulate(p, None, SimConfig(50.0, seed=4))
    c = simulate(p, None, SimConfig(50.0, seed=5))
    assert a == b and a != c


def test_prefix_property():
    p = random_params(np.random.default_rng(1), 2)
    short = simulate(p, None, SimConfig(20.0, seed=9))
    long = simulate(p, None, SimConfig(60.0, seed=9))
    assert long.truncated(20.0) == short


def test_masked_pairs_do_not_excite():
    g = CausalGraph([[True, False], [False, True]])
    p = ModelParams(np.array([0.5, 1e-8]), np.array([[0.3, 5.0], [5.0, 0.0]]), np.ones((2, 2)),
                    np.zeros((2, 2)))
    s = simulate(p, g, SimConfig(200.0, seed=2))
    assert s.counts()[1] == 0 and s.counts()[0] > 0


def test_truncation_carries_partial_sequence():
    with pytest.raises(TruncationError) as info:
        simulate(_one_dim(), None, SimConfig(1000.0, seed=0, max_events=10))
    assert len(info.value.partial) == 10


def test_supercritical_warns(caplog):
    p = _one_dim(a=1.5, beta=1.0)
    with caplog.at_level(logging.WARNING):
        simulate_batch(p, None, 1, 5.0, 0)
    assert "not stationary" in caplog.text


def test_jump_trace_matches_activations():
    p = random_params(np.random.default_rng(2), 2)
    s, jumps = simulate(p, None, SimConfig(30.0, seed=3), return_jumps=True)
    for u in range(2):
        expect = sorted(t + p.delta[u, v] for v in range(2) for t in s.times_of(v) if t + p.delta[u, v] < 30.0)
        np.testing.assert_allclose(jumps.times[u], expect)


def test_upper_bound_dominates_intensity_until_next_activation():
    p = random_params(np.random.default_rng(3), 2)
    s = simulate(p, None, SimConfig(20.0, seed=1))
    t_now = 10.0
    acts = sorted(t + p.delta[u, v] for u in range(2) for v in range(2) for t in s.times_of(v)
                  if t + p.delta[u, v] > t_now)
    end = acts[0]
    bound = intensity_upper_bound(p, s, t_now, end)
    for x in np.linspace(t_now, end, 20):
        assert sum(intensity_at(p, s, u, x) for u in range(2)) <= bound + 1e-12
    with pytest.raises(ContractViolation):
        intensity_upper_bound(p, s, t_now, acts[-1] + 1.0)


def test_compensator_increments_are_unit_exponential():
    p = random_params(np.random.default_rng(4), 2, radius=0.5)
    incs = []
    for s in simulate_batch(p, None, 40, 50.0, 11):
        for u in range(2):
            c = np.array([compensator(p, s, u, t) for t in s.times_of(u)])
            incs.extend(np.diff(np.concatenate([[0.0], c])))
    assert len(incs) > 1000
    assert stats.kstest(incs, "expon").pvalue > 0.01


def test_rollout_extends_history():
    p = random_params(np.random.default_rng(5), 2)
    hist = simulate(p, None, SimConfig(10.0, seed=0))
    roll = predict_rollout(p, p.delta, hist, 5.0, seed=1)
    assert roll.T == 15.0
    assert roll.truncated(10.0) == hist
    with pytest.raises(InvalidArgument):
        predict_rollout(p, p.delta, hist, 0.0, seed=1)


def test_poisson_next_event_is_memoryless():
    mu = 0.5
    p = ModelParams(np.array([mu]), np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 1)))
    g = CausalGraph.empty(1)
    hist = EventSequence([1.0, 3.0], [0, 0], 4.0, 1)
    post = LagPosterior.constant("gaussian", g, 1.0, 1.0)
    m, samples = predict_next_event_time(p, post, hist, 0, n_samples=2000, seed=3, return_samples=True)
    se = samples.std() / np.sqrt(samples.size)
    assert abs(m - (4.0 + 1 / mu)) < 3 * se
    assert predict_next_event_time(p, post, hist, 0, 50, seed=3) == predict_next_event_time(p, post, hist, 0, 50, 3)


def test_naive_baseline_helpers():
    seqs = [EventSequence([1.0, 2.0, 4.0], [0, 0, 0], 5.0, 1), EventSequence([0.5, 1.5], [0, 0], 5.0, 1)]
    assert mean_inter_arrival(seqs, 0) == pytest.approx((1.0 + 2.0 + 1.0) / 3)
    assert naive_next_event_time(seqs[0], 0, 1.5) == 5.5
    assert naive_next_event_time(EventSequence.empty(3.0, 1), 0, 1.5) == 4.5


def test_point_mass_samples_exactly():
    from laghawkes.infer.distributions import sample_lags

    g = CausalGraph([[True, False], [True, True]])
    D = np.array([[0.7, 0.0], [1.2, 0.4]])
    d = sample_lags(point_mass(g, D), np.random.default_rng(0))
    np.testing.assert_allclose(d, D)
