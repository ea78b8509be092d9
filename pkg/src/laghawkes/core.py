"""Domain types for delayed multivariate Hawkes processes.

Matrices are indexed ``[target, source]``: ``A[u, v]`` is the impact of an
event of type ``v`` on the intensity of type ``u``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

MU_FLOOR = 1e-8


class InvalidArgument(ValueError):
    pass


class DimensionMismatch(InvalidArgument):
    pass


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True, order=True)
class Event:
    t: float
    u: int

    def __post_init__(self):
        if not math.isfinite(self.t) or self.t < 0:
            raise InvalidArgument(f"event time must be finite and >= 0, got {self.t}")
        if self.u < 0:
            raise InvalidArgument(f"event dimension must be >= 0, got {self.u}")


@dataclass(frozen=True)
class EventSequence:
    """One realization on ``[0, T]`` stored as parallel time/dimension arrays."""

    times: np.ndarray
    dims: np.ndarray
    T: float
    U: int
    seq_id: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        dims = np.asarray(self.dims, dtype=np.int64).reshape(-1)
        if times.shape != dims.shape:
            raise InvalidArgument("times and dims must have equal length")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise InvalidArgument(f"horizon must be positive, got {self.T}")
        if self.U < 1:
            raise InvalidArgument(f"num_dims must be positive, got {self.U}")
        if times.size:
            if not np.all(np.isfinite(times)) or times.min() < 0 or times.max() > self.T:
                raise InvalidArgument("event times must lie in [0, T]")
            if dims.min() < 0 or dims.max() >= self.U:
                raise InvalidArgument("event dimension out of range")
            if np.any(np.diff(times) < 0):
                raise InvalidArgument("events must be time-sorted")
            if np.any(np.diff(times) == 0):
                raise InvalidArgument("duplicate timestamps are not allowed")
        times.setflags(write=False)
        dims.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "dims", dims)

    @classmethod
    def from_events(cls, events: Iterable[Event], T: float, U: int, seq_id: str = "") -> "EventSequence":
        evs = sorted(events)
        return cls(np.array([e.t for e in evs], dtype=float),
                   np.array([e.u for e in evs], dtype=np.int64), T, U, seq_id)

    @classmethod
    def empty(cls, T: float, U: int, seq_id: str = "") -> "EventSequence":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), T, U, seq_id)

    @property
    def events(self) -> list[Event]:
        return [Event(float(t), int(u)) for t, u in zip(self.times, self.dims)]

    def __len__(self):
        return int(self.times.size)

    def times_of(self, u: int) -> np.ndarray:
        return self.times[self.dims == u]

    def counts(self) -> np.ndarray:
        return np.bincount(self.dims, minlength=self.U)

    def truncated(self, t_end: float) -> "EventSequence":
        """Events with ``t <= t_end`` on horizon ``t_end``."""
        keep = self.times <= t_end
        return EventSequence(self.times[keep], self.dims[keep], t_end, self.U, self.seq_id)

    def __eq__(self, other):
        if not isinstance(other, EventSequence):
            return NotImplemented
        return (self.T == other.T and self.U == other.U and self.seq_id == other.seq_id
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.dims, other.dims))

    __hash__ = None

    def to_json(self) -> dict:
        return {"seq_id": self.seq_id, "T": float(self.T), "U": int(self.U),
                "events": [{"t": float(t), "u": int(u)} for t, u in zip(self.times, self.dims)]}

    @classmethod
    def from_json(cls, doc: dict) -> "EventSequence":
        evs = doc.get("events", [])
        return cls(np.array([e["t"] for e in evs], dtype=float),
                   np.array([e["u"] for e in evs], dtype=np.int64),
                   float(doc["T"]), int(doc["U"]), str(doc.get("seq_id", "")))


class KernelFamily(str, Enum):
    EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class KernelSpec:
    family: KernelFamily = KernelFamily.EXPONENTIAL

    def __post_init__(self):
        if self.family is not KernelFamily.EXPONENTIAL:
            raise InvalidArgument("only the exponential kernel is supported")


@dataclass(frozen=True)
class CausalGraph:
    """Boolean adjacency; ``adjacency[u, v]`` is True iff ``v -> u`` is allowed."""

    adjacency: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adjacency, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise DimensionMismatch("adjacency must be square")
        adj.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)

    @property
    def U(self) -> int:
        return self.adjacency.shape[0]

    @classmethod
    def full(cls, U: int) -> "CausalGraph":
        return cls(np.ones((U, U), dtype=bool))

    @classmethod
    def empty(cls, U: int) -> "CausalGraph":
        return cls(np.zeros((U, U), dtype=bool))

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(u), int(v)) for u, v in zip(*np.nonzero(self.adjacency))]


@dataclass(frozen=True)
class ModelParams:
    mu: np.ndarray
    A: np.ndarray
    beta: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).reshape(-1)
        U = mu.size
        mats = {}
        for name in ("A", "beta", "delta"):
            m = np.array(getattr(self, name), dtype=float)
            if m.shape != (U, U):
                raise DimensionMismatch(f"{name} must have shape ({U}, {U}), got {m.shape}")
            mats[name] = m
        for name, arr in [("mu", mu), *mats.items()]:
            if not np.all(np.isfinite(arr)):
                raise InvalidArgument(f"{name} has non-finite entries")
        if U < 1:
            raise InvalidArgument("need at least one dimension")
        if np.any(mu < MU_FLOOR):
            raise InvalidArgument(f"mu must be >= {MU_FLOOR}")
        if np.any(mats["A"] < 0):
            raise InvalidArgument("A must be nonnegative")
        if np.any(mats["beta"] <= 0):
            raise InvalidArgument("beta must be positive")
        if np.any(mats["delta"] < 0):
            raise InvalidArgument("delta must be nonnegative")
        for name, arr in [("mu", mu), *mats.items()]:
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def U(self) -> int:
        return self.mu.size

    def replace(self, **kw) -> "ModelParams":
        d = {"mu": self.mu, "A": self.A, "beta": self.beta, "delta": self.delta}
        d.update(kw)
        return ModelParams(**d)

    def to_json(self, graph: CausalGraph | None = None) -> dict:
        graph = graph or CausalGraph.full(self.U)
        return {"U": self.U, "mu": self.mu.tolist(), "A": self.A.tolist(),
                "beta": self.beta.tolist(), "delta": self.delta.tolist(),
                "mask": graph.adjacency.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> tuple["ModelParams", CausalGraph]:
        params = cls(doc["mu"], doc["A"], doc["beta"], doc["delta"])
        if int(doc.get("U", params.U)) != params.U:
            raise DimensionMismatch("U does not match mu length")
        mask = doc.get("mask")
        graph = CausalGraph(mask) if mask is not None else CausalGraph.full(params.U)
        if graph.U != params.U:
            raise DimensionMismatch("mask shape does not match U")
        return params, graph


class LagFamily(str, Enum):
    EXPONENTIAL = "exponential"
    GAUSSIAN = "gaussian"
    LOGNORMAL = "lognormal"


@dataclass(frozen=True)
class LagPosterior:
    """Per-pair lag distribution.

    ``loc`` holds the rate for the exponential family and the (log-)mean for the
    Gaussian/log-normal families; ``scale`` holds the (log-)stddev and is unused
    (NaN) for the exponential family. Pairs outside ``mask`` are point masses at 0.
    """

    family: LagFamily
    loc: np.ndarray
    scale: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        fam = LagFamily(self.family)
        loc = np.array(self.loc, dtype=float)
        mask = np.asarray(self.mask, dtype=bool)
        if loc.ndim != 2 or loc.shape != mask.shape:
            raise DimensionMismatch("loc and mask must be equally shaped square matrices")
        if fam is LagFamily.EXPONENTIAL:
            scale = np.full(loc.shape, np.nan)
            if np.any(loc[mask] <= 0):
                raise InvalidArgument("exponential rates must be positive")
        else:
            scale = np.array(self.scale, dtype=float)
            if scale.shape != loc.shape:
                raise DimensionMismatch("scale must match loc")
            if np.any(scale[mask] <= 0):
                raise InvalidArgument("scale parameters must be positive")
        loc = np.where(mask, loc, 0.0)
        if fam is not LagFamily.EXPONENTIAL:
            scale = np.where(mask, scale, 0.0)
        for arr in (loc, scale, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "loc", loc)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def constant(cls, family: LagFamily | str, graph: CausalGraph, loc: float,
                 scale: float = float("nan")) -> "LagPosterior":
        U = graph.U
        return cls(LagFamily(family), np.full((U, U), loc), np.full((U, U), scale),
                   graph.adjacency)

    @property
    def U(self) -> int:
        return self.loc.shape[0]

    def mean(self) -> np.ndarray:
        """Mean delay per pair (0 on masked pairs).

        For the Gaussian family this is the location parameter (the mean of the
        unclipped distribution), which is what delay error rates are computed on.
        """
        if self.family is LagFamily.EXPONENTIAL:
            out = np.divide(1.0, self.loc, out=np.zeros_like(self.loc), where=self.mask)
        elif self.family is LagFamily.GAUSSIAN:
            out = self.loc.copy()
        else:
            out = np.exp(self.loc + 0.5 * self.scale ** 2)
        return np.where(self.mask, out, 0.0)

    def param_rows(self) -> list[list]:
        rows = []
        for u in range(self.U):
            row = []
            for v in range(self.U):
                if self.family is LagFamily.EXPONENTIAL:
                    row.append({"rate": float(self.loc[u, v])} if self.mask[u, v] else None)
                elif self.family is LagFamily.GAUSSIAN:
                    row.append({"mean": float(self.loc[u, v]), "std": float(self.scale[u, v])}
                               if self.mask[u, v] else None)
                else:
                    row.append({"log_mean": float(self.loc[u, v]), "log_std": float(self.scale[u, v])}
                               if self.mask[u, v] else None)
            rows.append(row)
        return rows

    def to_json(self) -> dict:
        return {"family": self.family.value, "params": self.param_rows()}

    @classmethod
    def from_json(cls, doc: dict) -> "LagPosterior":
        fam = LagFamily(doc["family"])
        rows = doc["params"]
        U = len(rows)
        loc = np.zeros((U, U))
        scale = np.full((U, U), np.nan)
        mask = np.zeros((U, U), dtype=bool)
        keys = {LagFamily.EXPONENTIAL: ("rate", None), LagFamily.GAUSSIAN: ("mean", "std"),
                LagFamily.LOGNORMAL: ("log_mean", "log_std")}[fam]
        for u, row in enumerate(rows):
            for v, rec in enumerate(row):
                if rec is None:
                    continue
                mask[u, v] = True
                loc[u, v] = rec[keys[0]]
                if keys[1]:
                    scale[u, v] = rec[keys[1]]
        return cls(fam, loc, scale, mask)


def _check_finite(*xs: float):
    for x in xs:
        if not math.isfinite(x):
            raise InvalidArgument(f"non-finite argument {x!r}")


def kernel_value(a: float, beta: float, delta: float, elapsed: float) -> float:
    """Delayed exponential kernel ``a * exp(-beta * (elapsed - delta))`` once ``elapsed >= delta``."""
    _check_finite(a, beta, delta, elapsed)
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    if elapsed < delta:
        return 0.0
    return a * math.exp(-beta * (elapsed - delta))


def kernel_l1_norm(a: float, beta: float) -> float:
    _check_finite(a, beta)
    if beta <= 0:
        raise InvalidArgument("beta must be positive")
    return a / beta


def apply_mask(params: ModelParams, graph: CausalGraph) -> ModelParams:
    if graph.U != params.U:
        raise DimensionMismatch(f"graph has U={graph.U}, params have U={params.U}")
    m = graph.adjacency
    return params.replace(A=np.where(m, params.A, 0.0), delta=np.where(m, params.delta, 0.0))


# ---- JSON / JSONL I/O -----------------------------------------------------

def write_sequences(path, seqs: Sequence[EventSequence]) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")) + "\n")


def read_sequences(path) -> list[EventSequence]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(EventSequence.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, InvalidArgument) as exc:
                raise InvalidArgument(f"{path}:{lineno}: {exc}") from exc
    return out


def write_params(path, params: ModelParams, graph: CausalGraph | None = None, **extra) -> None:
    doc = params.to_json(graph)
    doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def read_params(path) -> tuple[ModelParams, CausalGraph, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    params, graph = ModelParams.from_json(doc)
    return params, graph, doc


__all__ = [
    "MU_FLOOR", "InvalidArgument", "DimensionMismatch", "NumericError", "Event", "EventSequence", "KernelFamily",
    "KernelSpec", "CausalGraph", "ModelParams", "LagFamily", "LagPosterior", "kernel_value",
    "kernel_l1_norm", "apply_mask", "write_sequences", "read_sequences", "write_params",
    "read_params",
]
