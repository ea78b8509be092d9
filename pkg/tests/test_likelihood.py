import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_params, random_sequence
from laghawkes.core import CausalGraph, EventSequence, InvalidArgument, ModelParams
from laghawkes.likelihood import (PackedBatch, batch_evaluate, compensator, grad_log_likelihood,
                                  intensity_at, log_likelihood)


def _relaxed_intensity(p, seq, u, t, tau):
    # oracle for the relaxed kernel a * sigmoid(x / tau) * exp(-b max(x, 0)), x in (-20 tau, inf)
    lam = p.mu[u]
    for v in range(p.U):
        for tk in seq.times_of(v):
            if tk >= t:
                continue
            x = t - tk - p.delta[u, v]
            if x <= -20 * tau:
                continue
            sg = 1.0 if x > 20 * tau else 1.0 / (1.0 + math.exp(-x / tau))
            lam += p.A[u, v] * sg * math.exp(-p.beta[u, v] * max(x, 0.0))
    return lam


def test_intensity_is_left_continuous():
    p = ModelParams(np.array([0.5]), np.array([[2.0]]), np.array([[1.0]]), np.array([[1.0]]))
    s = EventSequence([1.0], [0], 5.0, 1)
    assert intensity_at(p, s, 0, 2.0) == pytest.approx(0.5)
    assert intensity_at(p, s, 0, 2.0 + 1e-12) == pytest.approx(2.5)
    assert intensity_at(p, s, 0, 3.0) == pytest.approx(0.5 + 2.0 * math.exp(-1.0))
    with pytest.raises(InvalidArgument):
        intensity_at(p, s, 0, 6.0)


def test_poisson_closed_form():
    U, T = 2, 10.0
    p = ModelParams(np.array([0.3, 0.7]), np.zeros((U, U)), np.ones((U, U)), np.zeros((U, U)))
    s = EventSequence([1.0, 2.0, 3.5], [0, 1, 1], T, U)
    expect = math.log(0.3) + 2 * math.log(0.7) - (0.3 + 0.7) * T
    ll = log_likelihood(p, [s])
    assert ll.total == pytest.approx(expect)
    np.testing.assert_allclose(ll.per_dim, ll.event_term - ll.compensator_term)


@pytest.mark.parametrize("seed", range(10))
def test_compensator_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    U = 2
    p = random_params(rng, U)
    s = random_sequence(rng, U, 12, 8.0)
    for u in range(U):
        breaks = sorted({float(t + p.delta[u, v]) for v in range(U) for t in s.times_of(v)
                         if t + p.delta[u, v] < s.T})
        val, _ = integrate.quad(lambda t: intensity_at(p, s, u, t), 0, s.T, points=breaks or None,
                                limit=500, epsabs=1e-11, epsrel=1e-11)
        assert compensator(p, s, u, s.T) == pytest.approx(val, abs=1e-7)


@given(st.integers(0, 10 ** 6), st.integers(1, 3), st.integers(0, 25))
def test_recursive_matches_direct(seed, U, n):
    rng = np.random.default_rng(seed)
    p = random_params(rng, U)
    mask = rng.random((U, U)) < 0.7
    p = p.replace(A=np.where(mask, p.A, 0.0), delta=np.where(mask, p.delta, 0.0))
    g = CausalGraph(mask)
    seqs = [random_sequence(rng, U, n, 10.0), random_sequence(rng, U, n // 2, 5.0)]
    a = log_likelihood(p, seqs, g, method="recursive")
    b = log_likelihood(p, seqs, g, method="direct")
    np.testing.assert_allclose(a.per_dim, b.per_dim, rtol=1e-10, atol=1e-10)
    np.testing.assert_allclose(a.per_seq, b.per_seq, rtol=1e-10, atol=1e-10)


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    U = 2
    p = random_params(rng, U)
    s = [random_sequence(rng, U, 15, 10.0)]
    g = grad_log_likelihood(p, s)
    ll = lambda **kw: log_likelihood(p.replace(**kw), s).total
    np.testing.assert_allclose(g.mu, _fd(lambda x: ll(mu=x), p.mu), rtol=1e-5)
    np.testing.assert_allclose(g.A, _fd(lambda x: ll(A=x), p.A), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g.beta, _fd(lambda x: ll(beta=x), p.beta), rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(g.delta, _fd(lambda x: ll(delta=x), p.delta, 1e-8), rtol=1e-4, atol=1e-6)


def test_gradient_zero_on_masked_entries():
    rng = np.random.default_rng(3)
    g = CausalGraph([[True, False], [True, True]])
    p = random_params(rng, 2, mask=g.adjacency)
    s = [random_sequence(rng, 2, 10, 10.0)]
    r = grad_log_likelihood(p, s, g)
    assert r.A[0, 1] == 0 and r.beta[0, 1] == 0 and r.delta[0, 1] == 0


def test_gradient_handles_coinciding_activation():
    p = ModelParams(np.array([0.5]), np.array([[0.5]]), np.array([[1.0]]), np.array([[1.0]]))
    s = [EventSequence([1.0, 2.0], [0, 0], 4.0, 1)]
    assert np.all(np.isfinite(grad_log_likelihood(p, s).flat()))


@pytest.mark.parametrize("tau", [0.05, 0.2])
def test_relaxed_compensator_matches_relaxed_intensity(tau):
    rng = np.random.default_rng(7)
    U = 2
    p = random_params(rng, U)
    s = random_sequence(rng, U, 10, 6.0)
    res = batch_evaluate(PackedBatch.from_sequences([s]), p.mu, p.A, p.beta, p.delta,
                         np.ones((U, U), bool), tau, grad=False)
    for u in range(U):
        brk = sorted({float(t + p.delta[u, v] + k * tau) for v in range(U) for t in s.times_of(v)
                      for k in (-1, 0, 1)} | set(map(float, s.times)))
        brk = [b for b in brk if 0 < b < s.T]
        val, _ = integrate.quad(lambda t: _relaxed_intensity(p, s, u, t, tau), 0, s.T, points=brk,
                                limit=1000, epsabs=1e-10)
        assert res.compensator_term[0, u] == pytest.approx(val, abs=1e-6)
        ev = sum(math.log(_relaxed_intensity(p, s, u, t, tau)) for t in s.times_of(u))
        assert res.event_term[0, u] == pytest.approx(ev, abs=1e-9)


def test_relaxed_gradient_matches_finite_differences():
    rng = np.random.default_rng(11)
    U = 2
    p = random_params(rng, U)
    seqs = [random_sequence(rng, U, 20, 10.0, "a"), random_sequence(rng, U, 10, 10.0, "b")]
    b = PackedBatch.from_sequences(seqs)
    m = np.ones((U, U), bool)
    D = np.stack([p.delta, p.delta * 0.5])
    tau = 0.1
    r = batch_evaluate(b, p.mu, p.A, p.beta, D, m, tau)
    f = lambda mu, A, B, D: batch_evaluate(b, mu, A, B, D, m, tau, grad=False).ll.sum()
    np.testing.assert_allclose(r.gA.sum(0), _fd(lambda x: f(p.mu, x, p.beta, D), p.A), rtol=1e-5)
    np.testing.assert_allclose(r.gB.sum(0), _fd(lambda x: f(p.mu, p.A, x, D), p.beta), rtol=1e-5)
    np.testing.assert_allclose(r.gD, _fd(lambda x: f(p.mu, p.A, p.beta, x), D), rtol=1e-4, atol=1e-7)


def test_relaxed_tends_to_exact():
    rng = np.random.default_rng(5)
    p = random_params(rng, 2)
    s = [random_sequence(rng, 2, 30, 10.0)]
    b = PackedBatch.from_sequences(s)
    exact = log_likelihood(p, s).total
    vals = [batch_evaluate(b, p.mu, p.A, p.beta, p.delta, np.ones((2, 2), bool), tau, grad=False).ll[0]
            for tau in (1e-3, 1e-5)]
    assert abs(vals[1] - exact) < abs(vals[0] - exact) + 1e-12
    assert vals[1] == pytest.approx(exact, abs=1e-3)


@given(st.integers(0, 10 ** 6), st.sampled_from([0.5, 2.0, 3.0]))
def test_time_rescaling_invariance(seed, c):
    rng = np.random.default_rng(seed)
    U = 2
    p = random_params(rng, U)
    s = random_sequence(rng, U, 15, 10.0)
    sc = EventSequence(s.times * c, s.dims, s.T * c, U)
    q = ModelParams(p.mu / c, p.A / c, p.beta / c, p.delta * c)
    assert log_likelihood(q, [sc]).total == pytest.approx(log_likelihood(p, [s]).total - len(s) * math.log(c),
                                                          rel=1e-10, abs=1e-9)
