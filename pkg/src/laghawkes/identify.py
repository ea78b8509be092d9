"""Stationarity and identifiability checks, plus evaluation metrics."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .core import CausalGraph, InvalidArgument, ModelParams

MATCH_TOL = 1e-9


class NonConvergence(ArithmeticError):
    def __init__(self, msg, last):
        super().__init__(msg)
        self.last = last


class Contradiction(ValueError):
    pass


class AmbiguousDelay(ValueError):
    def __init__(self, msg, pair, candidates):
        super().__init__(msg)
        self.pair = pair
        self.candidates = candidates


class UnexplainedJumps(ValueError):
    pass


class UndefinedMetric(ValueError):
    pass


def norm_matrix(params: ModelParams) -> np.ndarray:
    """Matrix of kernel L1 norms ``a / beta``; delays play no role."""
    return params.A / params.beta


def _power_radius(G: np.ndarray, tol: float, max_iter: int) -> float:
    # G + I has the Perron root as its strictly dominant eigenvalue when G is irreducible
    n = G.shape[0]
    M = G + np.eye(n)
    x = np.full(n, 1.0 / n)
    est = 0.0
    for _ in range(max_iter):
        y = M @ x
        new = y.sum() / x.sum()
        x = y / y.sum()
        if abs(new - est) <= tol * max(1.0, new):
            return max(new - 1.0, 0.0)
        est = new
    raise NonConvergence(f"power iteration did not converge in {max_iter} steps", est - 1.0)


def spectral_radius(params_or_matrix, tol: float = 1e-10, max_iter: int = 10_000) -> tuple[float, bool]:
    """Perron root of the nonnegative norm matrix, by power iteration.

    The matrix is split into strongly connected blocks first (the radius is the
    largest block radius), so triangular/nilpotent patterns do not stall the
    iteration. Returns ``(radius, radius < 1)``.
    """
    G = norm_matrix(params_or_matrix) if isinstance(params_or_matrix, ModelParams) \
        else np.asarray(params_or_matrix, dtype=float)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise InvalidArgument("need a square matrix")
    if not np.all(np.isfinite(G)) or np.any(G < 0):
        raise InvalidArgument("norm matrix must be finite and nonnegative")
    _, labels = connected_components(csr_matrix(G > 0), directed=True, connection="strong")
    rho = 0.0
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        block = G[np.ix_(idx, idx)]
        rho = max(rho, block[0, 0] if idx.size == 1 else _power_radius(block, tol, max_iter))
    return float(rho), bool(rho < 1.0)


def recover_mu(jumps, first_arrival_times, intensity_before_first) -> np.ndarray:
    """Base rates read off the intensity before the first arrival.

    ``intensity_before_first[u]`` is either a constant or an array of intensity
    observations on ``[0, t_(1))``; any variation beyond 1e-9, or a jump before
    the first arrival, is a contradiction.
    """
    t1 = float(np.min(first_arrival_times))
    out = []
    for u, obs in enumerate(intensity_before_first):
        obs = np.atleast_1d(np.asarray(obs, dtype=float))
        if obs.size == 0:
            raise Contradiction(f"no intensity observations for dimension {u}")
        if obs.max() - obs.min() > 1e-9:
            raise Contradiction(f"intensity of dimension {u} varies before the first arrival")
        jt = np.asarray(jumps.times[u]) if jumps is not None else np.zeros(0)
        if np.any(jt < t1):
            raise Contradiction(f"dimension {u} jumps before the first arrival at {t1}")
        out.append(float(obs[0]))
    return np.array(out)


def _nearest_gap(sorted_vals: np.ndarray, x: np.ndarray) -> np.ndarray:
    pos = np.searchsorted(sorted_vals, x)
    lo = np.clip(pos - 1, 0, sorted_vals.size - 1)
    hi = np.clip(pos, 0, sorted_vals.size - 1)
    return np.minimum(np.abs(sorted_vals[lo] - x), np.abs(sorted_vals[hi] - x))


def _candidate_shifts(src: np.ndarray, jumps: np.ndarray, T: float, tol: float) -> list[float]:
    """Shifts ``d >= 0`` such that every activation ``src + d < T`` is a jump time."""
    if src.size == 0 or jumps.size == 0:
        return []
    out = []
    # the first source event must land on some jump
    for d in jumps - src[0]:
        if d < -tol:
            continue
        d = max(float(d), 0.0)
        act = src + d
        act = act[act < T - tol]
        if act.size and np.all(_nearest_gap(jumps, act) <= tol):
            out.append(d)
    return out


@dataclass(frozen=True)
class PairOutcome:
    status: str  # "exact" | "ambiguous" | "failed"
    delta: float | None
    candidates: tuple = ()
    message: str = ""


def _activations(src: np.ndarray, d: float, T: float, tol: float) -> np.ndarray:
    act = src + d
    return act[act < T - tol]


def _covers_once(S: np.ndarray, acts: list, tol: float) -> bool:
    """True iff the activations hit every jump in ``S`` exactly once."""
    if sum(a.size for a in acts) != S.size:
        return False
    hits = np.zeros(S.size, dtype=int)
    for a in acts:
        if a.size == 0:
            continue
        pos = np.clip(np.searchsorted(S, a - tol), 0, S.size - 1)
        if np.any(np.abs(S[pos] - a) > tol):
            return False
        np.add.at(hits, pos, 1)
    return bool(np.all(hits == 1))


def match_delays(event_times, jumps, graph: CausalGraph, tol: float = MATCH_TOL,
                 max_combinations: int = 100_000) -> dict:
    """Per-pair outcome of jump-gap matching (never raises for individual pairs).

    For each target, candidate shifts of every allowed source are combined and a
    combination is kept only if the union of its activations explains every jump
    exactly once. A pair is exact when all surviving combinations agree on its
    shift, ambiguous when they disagree, and failed when none survives. A source
    with no activation before ``T`` leaves its delay unconstrained (ambiguous).
    """
    U = graph.U
    out = {}
    for u in range(U):
        S = np.asarray(jumps.times[u], dtype=float)
        srcs = [v for v in range(U) if graph.adjacency[u, v]]
        if not srcs:
            continue
        src_t = {v: np.asarray(event_times[v], dtype=float) for v in srcs}
        cands = {}
        for v in srcs:
            if src_t[v].size == 0 or src_t[v][0] >= jumps.T - tol:
                cands[v] = [None]
            else:
                cands[v] = _candidate_shifts(src_t[v], S, jumps.T, tol)
        n_comb = int(np.prod([len(c) for c in cands.values()]))
        if n_comb == 0:
            for v in srcs:
                msg = (f"no shift aligns source {v} with jumps of {u}" if not cands[v]
                       else f"jumps of {u} are not explained exactly once")
                out[(u, v)] = PairOutcome("failed", None, (), msg)
            continue
        if n_comb > max_combinations:
            for v in srcs:
                out[(u, v)] = PairOutcome("ambiguous", None, tuple(c for c in cands[v] if c is not None),
                                          f"{n_comb} shift combinations exceed the search budget")
            continue
        acts = {v: {d: (np.zeros(0) if d is None else _activations(src_t[v], d, jumps.T, tol))
                    for d in cands[v]} for v in srcs}
        valid = [combo for combo in itertools.product(*(cands[v] for v in srcs))
                 if _covers_once(S, [acts[v][d] for v, d in zip(srcs, combo)], tol)]
        for j, v in enumerate(srcs):
            if not valid:
                out[(u, v)] = PairOutcome("failed", None, (), f"jumps of {u} are not explained exactly once")
                continue
            values = sorted({c[j] for c in valid}, key=lambda x: -1.0 if x is None else x)
            if values == [None]:
                out[(u, v)] = PairOutcome("ambiguous", None, (),
                                          f"no activation of source {v} is observed before T")
            elif len(values) == 1:
                out[(u, v)] = PairOutcome("exact", values[0])
            else:
                vals = tuple(x for x in values if x is not None)
                out[(u, v)] = PairOutcome("ambiguous", None, vals,
                                          f"{len(vals)} shifts align source {v} with jumps of {u}")
    return out


def recover_delays_from_jumps(event_times, jumps, graph: CausalGraph, tol: float = MATCH_TOL) -> np.ndarray:
    """Delay matrix from noiseless intensity jump times.

    ``event_times[v]`` are the arrivals of source ``v``; ``jumps.times[u]`` the
    jump times of target ``u`` observed on ``[0, jumps.T)``. For each allowed pair
    the delay is the unique shift mapping every observed activation of ``v`` onto a
    jump of ``u``, and the union of matched activations must cover each jump once.
    """
    res = match_delays(event_times, jumps, graph, tol)
    D = np.zeros((graph.U, graph.U))
    for (u, v), r in res.items():
        if r.status == "ambiguous":
            raise AmbiguousDelay(f"pair ({u}, {v}): {r.message}: {list(r.candidates)}", (u, v), r.candidates)
    for (u, v), r in res.items():
        if r.status == "failed":
            raise UnexplainedJumps(f"pair ({u}, {v}): {r.message}")
        D[u, v] = r.delta
    return D


def absolute_error_rate(learned, truth, mask=None) -> float:
    """Mean of ``|L - T| / T`` in percent over unmasked entries with nonzero truth."""
    L = np.asarray(learned, dtype=float)
    Tr = np.asarray(truth, dtype=float)
    if L.shape != Tr.shape:
        raise InvalidArgument(f"shape mismatch {L.shape} vs {Tr.shape}")
    keep = Tr != 0
    if mask is not None:
        keep &= np.broadcast_to(np.asarray(mask, dtype=bool), Tr.shape)
    if not keep.any():
        raise UndefinedMetric("no entries left after excluding masked and zero-truth entries")
    return float(np.mean(np.abs(L[keep] - Tr[keep]) / np.abs(Tr[keep])) * 100.0)


def rmse(predicted, actual) -> float:
    p = np.asarray(predicted, dtype=float)
    a = np.asarray(actual, dtype=float)
    if p.shape != a.shape:
        raise InvalidArgument(f"length mismatch {p.shape} vs {a.shape}")
    if p.size == 0:
        raise InvalidArgument("need at least one prediction")
    return float(math.sqrt(np.mean((p - a) ** 2)))


def metric_json(metric: str, value: float, **detail) -> str:
    if metric not in ("abs_error_rate", "rmse", "spectral_radius"):
        raise InvalidArgument(f"unknown metric {metric!r}")
    return json.dumps({"metric": metric, "value": float(value), "detail": detail}, sort_keys=True)


__all__ = [
    "NonConvergence", "Contradiction", "AmbiguousDelay", "UnexplainedJumps", "UndefinedMetric",
    "norm_matrix", "spectral_radius", "recover_mu", "match_delays", "recover_delays_from_jumps",
    "absolute_error_rate", "rmse", "metric_json", "PairOutcome",
]
