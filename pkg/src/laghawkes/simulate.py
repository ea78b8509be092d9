"""Thinning simulation of delayed Hawkes processes and prediction rollouts.

Each event of type ``v`` schedules one activation per allowed target ``u`` at
``t + delta[u, v]``. Between consecutive activations every intensity is a sum of
decaying exponentials, hence non-increasing, so the total intensity right after
the current time is a valid majorant up to the next scheduled activation.
"""

from __future__ import annotations

import heapq
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CausalGraph, EventSequence, InvalidArgument, LagPosterior, ModelParams
from .infer.distributions import sample_lags

log = logging.getLogger(__name__)

DEFAULT_MAX_EVENTS = 10 ** 6
DEFAULT_PREDICTION_SAMPLES = 100


class TruncationError(RuntimeError):
    """Raised when a run exceeds ``max_events``; carries the partial sequence."""

    def __init__(self, msg: str, partial: EventSequence):
        super().__init__(msg)
        self.partial = partial


class ContractViolation(InvalidArgument):
    pass


@dataclass(frozen=True)
class SimConfig:
    T: float
    seed: int = 0
    max_events: int = DEFAULT_MAX_EVENTS

    def __post_init__(self):
        if not self.T > 0:
            raise InvalidArgument("horizon must be positive")
        if self.max_events < 1:
            raise InvalidArgument("max_events must be >= 1")


@dataclass(frozen=True)
class JumpTrace:
    """Intensity jump times and magnitudes per target dimension, up to horizon ``T``.

    ``source[u]`` records which source dimension caused each jump; it is ground
    truth for testing, and recovery code must not read it.
    """

    times: list
    magnitudes: list
    source: list
    T: float

    def __post_init__(self):
        for ts in self.times:
            if np.any(np.diff(ts) <= 0):
                raise InvalidArgument("jump times must be strictly increasing")


@dataclass
class ActivationQueue:
    """Min-heap of scheduled kernel activations ``(time, target, source)``."""

    A: np.ndarray
    B: np.ndarray
    heap: list = field(default_factory=list)
    _count: int = 0

    def push(self, t: float, u: int, v: int):
        heapq.heappush(self.heap, (t, self._count, u, v))
        self._count += 1

    def peek_time(self) -> float:
        return self.heap[0][0] if self.heap else math.inf

    def pop_until(self, t: float) -> list[tuple[float, int, int]]:
        out = []
        while self.heap and self.heap[0][0] <= t:
            at, _, u, v = heapq.heappop(self.heap)
            out.append((at, u, v))
        return out

    def __len__(self):
        return len(self.heap)


def make_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed) & (2 ** 64 - 1), *stream])))


def spectral_check(params: ModelParams) -> float:
    from .identify import spectral_radius

    rho, stationary = spectral_radius(params)
    if not stationary:
        log.warning("spectral radius %.4f >= 1: process is not stationary", rho)
    return rho


class _Engine:
    """Incremental thinning state. Excitation ``X[u, v]`` decays at rate ``B[u, v]``."""

    def __init__(self, params: ModelParams, mask: np.ndarray, delay: np.ndarray, t0: float):
        self.mu = np.asarray(params.mu, dtype=float)
        self.A = np.where(mask, params.A, 0.0)
        self.B = np.asarray(params.beta, dtype=float)
        self.D = np.where(mask, delay, 0.0)
        self.mask = mask
        self.targets = [np.nonzero(mask[:, v])[0] for v in range(params.U)]
        self.X = np.zeros_like(self.A)
        self.t = t0
        self.queue = ActivationQueue(self.A, self.B)
        self.jumps: list | None = None

    def advance(self, t: float):
        if t > self.t:
            self.X *= np.exp(-self.B * (t - self.t))
            self.t = t

    def schedule(self, t_event: float, v: int):
        for u in self.targets[v]:
            self.queue.push(t_event + self.D[u, v], int(u), v)

    def apply_due(self, t: float):
        for at, u, v in self.queue.pop_until(t):
            # activation at ``at`` <= t: its contribution has decayed for t - at
            self.X[u, v] += self.A[u, v] * math.exp(-self.B[u, v] * (t - at))
            if self.jumps is not None and self.A[u, v] > 0:
                self.jumps.append((at, u, v))

    def rates(self) -> np.ndarray:
        return self.mu + self.X.sum(axis=1)

    def seed_history(self, times, dims, t_now: float):
        for t, v in zip(times, dims):
            self.schedule(float(t), int(v))
        self.apply_due(t_now)

    def run(self, rng: np.random.Generator, t_end: float, max_events: int,
            stop_dim: int | None = None):
        out_t, out_u = [], []
        while True:
            window_end = min(self.queue.peek_time(), t_end)
            lam = self.rates()
            bound = lam.sum()
            cand = self.t + rng.standard_exponential() / bound
            if cand >= window_end:
                if window_end >= t_end:
                    self.advance(t_end)
                    return out_t, out_u, False
                self.advance(window_end)
                self.apply_due(window_end)
                continue
            self.advance(cand)
            lam = self.rates()
            total = lam.sum()
            r = rng.random() * bound
            if r >= total:
                continue
            u = int(min(np.searchsorted(np.cumsum(lam), r, side="right"), lam.size - 1))
            out_t.append(cand)
            out_u.append(u)
            if len(out_t) > max_events:
                return out_t[:-1], out_u[:-1], True
            self.schedule(cand, u)
            if stop_dim is not None and u == stop_dim:
                return out_t, out_u, False


def intensity_upper_bound(params: ModelParams, history: EventSequence, t_now: float,
                          window_end: float, graph: CausalGraph | None = None) -> float:
    """Total intensity just after ``t_now``; a majorant on ``(t_now, window_end]``.

    Raises :class:`ContractViolation` if some activation falls strictly inside the
    window.
    """
    mask = graph.adjacency if graph is not None else np.ones((params.U, params.U), dtype=bool)
    total = float(params.mu.sum())
    for u in range(params.U):
        for v in range(params.U):
            if not mask[u, v]:
                continue
            act = history.times_of(v) + params.delta[u, v]
            if np.any((act > t_now) & (act < window_end)):
                raise ContractViolation(f"activation of pair ({u}, {v}) inside ({t_now}, {window_end})")
            live = act[act <= t_now]
            total += params.A[u, v] * np.exp(-params.beta[u, v] * (t_now - live)).sum()
    return total


def _finish(times, dims, T, U, seq_id, truncated, max_events) -> EventSequence:
    seq = EventSequence(np.asarray(times, dtype=float), np.asarray(dims, dtype=np.int64), T, U, seq_id)
    if truncated:
        raise TruncationError(f"more than {max_events} events before T={T}", seq)
    return seq


def simulate(params: ModelParams, graph: CausalGraph | None, cfg: SimConfig, seq_id: str = "",
             *, ancestors: EventSequence | None = None, return_jumps: bool = False):
    """Sample one realization on ``(0, T]``.

    ``ancestors`` optionally injects fixed events (e.g. a single event at t=0)
    that excite the process but are not part of the output. With
    ``return_jumps`` the popped activations are returned as a :class:`JumpTrace`.
    """
    graph = graph or CausalGraph.full(params.U)
    engine = _Engine(params, graph.adjacency, params.delta, 0.0)
    if return_jumps:
        engine.jumps = []
    if ancestors is not None:
        engine.seed_history(ancestors.times, ancestors.dims, 0.0)
    rng = make_rng(cfg.seed)
    ts, us, trunc = engine.run(rng, cfg.T, cfg.max_events)
    seq = _finish(ts, us, cfg.T, params.U, seq_id, trunc, cfg.max_events)
    if not return_jumps:
        return seq
    U = params.U
    jumps = [(t, u, v) for t, u, v in engine.jumps if t < cfg.T]
    trace = JumpTrace(
        times=[np.array([t for t, uu, _ in jumps if uu == u]) for u in range(U)],
        magnitudes=[np.array([params.A[u, v] for t, uu, v in jumps if uu == u]) for u in range(U)],
        source=[np.array([v for t, uu, v in jumps if uu == u], dtype=int) for u in range(U)],
        T=cfg.T)
    return seq, trace


def simulate_batch(params: ModelParams, graph: CausalGraph | None, n: int, T: float, seed: int,
                   max_events: int = DEFAULT_MAX_EVENTS, prefix: str = "seq") -> list[EventSequence]:
    spectral_check(params)
    seeds = np.random.SeedSequence(int(seed)).generate_state(n, dtype=np.uint64)
    return [simulate(params, graph, SimConfig(T, int(s), max_events), f"{prefix}{i}")
            for i, s in enumerate(seeds)]


def predict_rollout(params: ModelParams, lag_sample: np.ndarray, history: EventSequence,
                    horizon_extension: float, seed: int, graph: CausalGraph | None = None,
                    max_events: int = DEFAULT_MAX_EVENTS, *, stop_dim: int | None = None) -> EventSequence:
    """Continue ``history`` on ``(T, T + horizon_extension]`` with the given delays.

    Past events whose activation lands after ``T`` still excite the future. The
    result contains the history followed by the generated events.
    """
    if not horizon_extension > 0:
        raise InvalidArgument("horizon_extension must be positive")
    graph = graph or CausalGraph.full(params.U)
    lag = np.asarray(lag_sample, dtype=float)
    if lag.shape != (params.U, params.U):
        raise InvalidArgument("lag_sample must be U x U")
    if np.any(lag[~graph.adjacency] != 0):
        raise InvalidArgument("lag_sample must be zero on masked pairs")
    engine = _Engine(params, graph.adjacency, lag, history.T)
    engine.seed_history(history.times, history.dims, history.T)
    end = history.T + horizon_extension
    ts, us, trunc = engine.run(make_rng(seed), end, max_events, stop_dim)
    return _finish(np.concatenate([history.times, ts]), np.concatenate([history.dims, us]).astype(np.int64),
                   end, params.U, history.seq_id, trunc, max_events)


def first_event_after(seq: EventSequence, t: float, u: int) -> float | None:
    x = seq.times_of(u)
    x = x[x > t]
    return float(x[0]) if x.size else None


def predict_next_event_time(params: ModelParams, posterior: LagPosterior, history: EventSequence,
                            u: int, n_samples: int = DEFAULT_PREDICTION_SAMPLES, seed: int = 0,
                            graph: CausalGraph | None = None, window: float | None = None,
                            return_samples: bool = False):
    """Monte Carlo mean of the first post-history event time of dimension ``u``.

    Each rollout draws its own delays from ``posterior``. A rollout that produces
    no ``u`` event within ``window`` is retried once with twice the window; if it
    still produces none, the window end is recorded, which biases the estimate
    downwards for very quiet dimensions.
    """
    if n_samples < 1:
        raise InvalidArgument("n_samples must be >= 1")
    graph = graph or CausalGraph(posterior.mask)
    if window is None:
        window = 10.0 / float(params.mu[u])
    out = np.empty(n_samples)
    for i in range(n_samples):
        lag = sample_lags(posterior, make_rng(seed, 1, i))
        t_first = None
        for attempt, w in enumerate((window, 2 * window)):
            roll = predict_rollout(params, lag, history, w, int(make_rng(seed, 2, i, attempt).integers(2 ** 63)),
                                   graph, stop_dim=u)
            t_first = first_event_after(roll, history.T, u)
            if t_first is not None:
                break
        out[i] = t_first if t_first is not None else history.T + 2 * window
    if return_samples:
        return float(out.mean()), out
    return float(out.mean())


def mean_inter_arrival(seqs, u: int) -> float:
    """Pooled mean gap between consecutive events of ``u`` over ``seqs``."""
    gaps = [np.diff(s.times_of(u)) for s in seqs]
    gaps = np.concatenate(gaps) if gaps else np.zeros(0)
    if gaps.size == 0:
        raise InvalidArgument(f"dimension {u} has fewer than two events in every sequence")
    return float(gaps.mean())


def naive_next_event_time(history: EventSequence, u: int, mean_gap: float) -> float:
    """Baseline: last event of ``u`` in the history plus the mean gap (``T + gap`` if none)."""
    tu = history.times_of(u)
    return float(tu[-1] if tu.size else history.T) + mean_gap


def point_mass(graph: CausalGraph, delta: np.ndarray) -> LagPosterior:
    """Degenerate Gaussian posterior concentrated on ``delta`` (std 0 is not allowed; 1e-300)."""
    return LagPosterior("gaussian", np.where(graph.adjacency, delta, 0.0),
                        np.full(delta.shape, 1e-300), graph.adjacency)


__all__ = [
    "SimConfig", "JumpTrace", "ActivationQueue", "TruncationError", "ContractViolation",
    "simulate", "simulate_batch", "intensity_upper_bound", "predict_rollout",
    "predict_next_event_time", "first_event_after", "mean_inter_arrival", "naive_next_event_time", "point_mass", "make_rng",
]
