"""Amortized lag encoder: sinusoidal time embedding, learned type embedding and a
per-pair affine + softplus head, built on the scalar tape.

The pooled score for a pair ``(u, v)`` reduces the inner-product matrix between
the event embeddings of ``u`` and of ``v``. Two reductions are available:

``nearest`` (default)
    for each event of ``u``, the entry of the latest strictly earlier event of
    ``v``; the score is the mean of those entries.
``mean``
    the mean over every entry of the matrix.

Because the type part of an embedding column is constant over events, both
reductions equal ``pooled time inner product + type_u . type_v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Node, Tape
from ..core import CausalGraph, EventSequence, InvalidArgument, LagFamily, LagPosterior
from .optim import softplus, softplus_inv

POOLINGS = ("nearest", "mean")


def time_embedding(t, d_model: int) -> np.ndarray:
    """Sinusoidal embedding; column ``2i`` is ``sin(t / 10000**(2i/d))`` and ``2i+1`` the cosine."""
    if d_model < 2 or d_model % 2:
        raise InvalidArgument("d_model must be a positive even integer")
    t = np.asarray(t, dtype=float)
    freq = 1.0 / 10000.0 ** (2.0 * np.arange(d_model // 2) / d_model)
    ang = np.multiply.outer(t, freq)
    out = np.empty(t.shape + (d_model,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class EncoderParams:
    type_emb: np.ndarray  # (d_model, U)
    w_loc: np.ndarray  # (U, U) head weights
    b_loc: np.ndarray
    w_scale: np.ndarray
    b_scale: np.ndarray
    use_time: bool = True
    use_type: bool = True
    pooling: str = "nearest"

    def __post_init__(self):
        self.type_emb = np.array(self.type_emb, dtype=float)
        d, U = self.type_emb.shape
        if d < 2 or d % 2:
            raise InvalidArgument("d_model must be a positive even integer")
        for name in ("w_loc", "b_loc", "w_scale", "b_scale"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (U, U):
                raise InvalidArgument(f"{name} must have shape ({U}, {U})")
            setattr(self, name, arr)
        if self.pooling not in POOLINGS:
            raise InvalidArgument(f"pooling must be one of {POOLINGS}")

    @property
    def d_model(self) -> int:
        return self.type_emb.shape[0]

    @property
    def U(self) -> int:
        return self.type_emb.shape[1]

    @classmethod
    def init(cls, U: int, d_model: int, family, prior: LagPosterior | None = None, seed: int = 0,
             use_time: bool = True, use_type: bool = True, pooling: str = "nearest",
             init_range: float = 0.05) -> "EncoderParams":
        """Small uniform weights; head biases chosen so the initial posterior equals ``prior``."""
        rng = np.random.default_rng(seed)
        uni = lambda *shape: rng.uniform(-init_range, init_range, shape)
        b_loc, b_scale = uni(U, U), uni(U, U)
        if prior is not None:
            fam = LagFamily(family)
            loc = np.where(prior.mask, prior.loc, 1.0)
            b_loc = loc if fam is LagFamily.LOGNORMAL else softplus_inv(loc)
            if fam is not LagFamily.EXPONENTIAL:
                b_scale = softplus_inv(np.where(prior.mask, prior.scale, 1.0))
        return cls(uni(d_model, U), uni(U, U), b_loc, uni(U, U), b_scale, use_time, use_type, pooling)

    def names(self) -> list[str]:
        return list(self.to_inputs())

    def to_inputs(self) -> dict[str, float]:
        d, U = self.type_emb.shape
        out = {f"type[{i},{u}]": self.type_emb[i, u] for i in range(d) for u in range(U)}
        for key in ("w_loc", "b_loc", "w_scale", "b_scale"):
            arr = getattr(self, key)
            out.update({f"{key}[{u},{v}]": arr[u, v] for u in range(U) for v in range(U)})
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {"type_emb": self.type_emb, "w_loc": self.w_loc, "b_loc": self.b_loc,
                "w_scale": self.w_scale, "b_scale": self.b_scale}

    def with_arrays(self, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        return EncoderParams(arrays["type_emb"], arrays["w_loc"], arrays["b_loc"], arrays["w_scale"],
                             arrays["b_scale"], self.use_time, self.use_type, self.pooling)

    def grads_to_arrays(self, grads: dict[str, float]) -> dict[str, np.ndarray]:
        d, U = self.type_emb.shape
        out = {k: np.zeros_like(v) for k, v in self.arrays().items()}
        for i in range(d):
            for u in range(U):
                out["type_emb"][i, u] = grads.get(f"type[{i},{u}]", 0.0)
        for key in ("w_loc", "b_loc", "w_scale", "b_scale"):
            for u in range(U):
                for v in range(U):
                    out[key][u, v] = grads.get(f"{key}[{u},{v}]", 0.0)
        return out

    def to_json(self) -> dict:
        doc = {k: v.tolist() for k, v in self.arrays().items()}
        doc.update(use_time=self.use_time, use_type=self.use_type, pooling=self.pooling)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "EncoderParams":
        return cls(doc["type_emb"], doc["w_loc"], doc["b_loc"], doc["w_scale"], doc["b_scale"],
                   doc.get("use_time", True), doc.get("use_type", True), doc.get("pooling", "nearest"))


def sequence_embedding(seq: EventSequence, enc: EncoderParams, u: int) -> np.ndarray:
    """``2 d_model x N_u`` matrix: each column stacks the time and type embeddings of one event."""
    t = seq.times_of(u)
    d = enc.d_model
    top = time_embedding(t, d).T if enc.use_time else np.zeros((d, t.size))
    col = enc.type_emb[:, u] if enc.use_type else np.zeros(d)
    return np.vstack([top, np.repeat(col[:, None], t.size, axis=1)])


def pooled_time_scores(seq: EventSequence, d_model: int, pooling: str = "nearest"):
    """Pooled time-embedding inner products per pair, and which pairs have any entries."""
    U = seq.U
    score = np.zeros((U, U))
    has = np.zeros((U, U), dtype=bool)
    emb = [time_embedding(seq.times_of(u), d_model) for u in range(U)]
    times = [seq.times_of(u) for u in range(U)]
    for u in range(U):
        for v in range(U):
            if pooling == "mean":
                if times[u].size and times[v].size:
                    score[u, v] = emb[u].mean(axis=0) @ emb[v].mean(axis=0)
                    has[u, v] = True
                continue
            prev = np.searchsorted(times[v], times[u], side="left") - 1
            ok = prev >= 0
            if ok.any():
                score[u, v] = np.einsum("ij,ij->i", emb[u][ok], emb[v][prev[ok]]).mean()
                has[u, v] = True
    return score, has


@dataclass
class PosteriorTape:
    """Tape computing one sequence's lag posterior, reparameterized samples and the
    latent part of its ELBO: ``sum_s sum_pairs g[s,u,v] * delta[s,u,v] - kl_weight * KL``.

    ``g`` (the likelihood gradient w.r.t. each sampled delay, already divided by
    the number of samples) and the noise are tape inputs, so one tape serves
    every iteration.
    """

    tape: Tape
    family: LagFamily
    pairs: list
    n_samples: int
    param_names: list = field(default_factory=list)

    def inputs(self, params: dict[str, float], noise: np.ndarray, g: np.ndarray, kl_weight: float) -> dict:
        feed = dict(params)
        feed["kl_weight"] = kl_weight
        for s in range(self.n_samples):
            for (u, v) in self.pairs:
                feed[f"eps[{s},{u},{v}]"] = noise[s, u, v]
                feed[f"g[{s},{u},{v}]"] = g[s, u, v]
        return feed

    def run(self, params, noise, g, kl_weight):
        return self.tape.forward(self.inputs(params, noise, g, kl_weight))

    def values(self, out: dict, U: int):
        loc = np.zeros((U, U))
        scale = np.zeros((U, U))
        delta = np.zeros((self.n_samples, U, U))
        for (u, v) in self.pairs:
            loc[u, v] = out[f"loc[{u},{v}]"]
            scale[u, v] = out.get(f"scale[{u},{v}]", np.nan)
            for s in range(self.n_samples):
                delta[s, u, v] = out[f"delta[{s},{u},{v}]"]
        return loc, scale, delta


def _head(tape: Tape, family: LagFamily, pre_loc: Node, pre_scale: Node | None):
    if family is LagFamily.LOGNORMAL:
        loc = pre_loc + 0.0
    else:
        loc = pre_loc.softplus()
    scale = pre_scale.softplus() if pre_scale is not None else None
    return loc, scale


def _latent_objective(tape, family, pairs, n_samples, heads, prior: LagPosterior):
    kl_w = tape.input("kl_weight")
    terms = []
    kls = []
    for (u, v) in pairs:
        loc, scale = heads[(u, v)]
        tape.output(f"loc[{u},{v}]", loc)
        if scale is not None:
            tape.output(f"scale[{u},{v}]", scale)
        for s in range(n_samples):
            eps = tape.input(f"eps[{s},{u},{v}]")
            if family is LagFamily.EXPONENTIAL:
                d = eps / loc
            elif family is LagFamily.LOGNORMAL:
                d = (loc + scale * eps).exp()
            else:
                d = (loc + scale * eps).relu()
            tape.output(f"delta[{s},{u},{v}]", d)
            terms.append(tape.input(f"g[{s},{u},{v}]") * d)
        p_loc = float(prior.loc[u, v])
        if family is LagFamily.EXPONENTIAL:
            kl = (loc / p_loc).log() + p_loc / loc - 1.0
        else:
            p_s = float(prior.scale[u, v])
            kl = (p_s / scale).log() + (scale * scale + (loc - p_loc) ** 2.0) / (2.0 * p_s * p_s) - 0.5
        kls.append(kl)
    total_kl = kls[0] if kls else tape.const(0.0)
    for k in kls[1:]:
        total_kl = total_kl + k
    tape.output("kl", total_kl)
    obj = -(kl_w * total_kl)
    for t in terms:
        obj = obj + t
    tape.output("objective", obj)


def build_encoder_tape(seq: EventSequence, enc: EncoderParams, graph: CausalGraph, family,
                       prior: LagPosterior, n_samples: int) -> PosteriorTape:
    family = LagFamily(family)
    tape = Tape()
    d, U = enc.d_model, enc.U
    time_score, has = pooled_time_scores(seq, d, enc.pooling)
    pairs = graph.pairs()
    heads = {}
    for (u, v) in pairs:
        score = None
        if has[u, v]:
            if enc.use_time:
                score = tape.const(time_score[u, v])
            if enc.use_type:
                for i in range(d):
                    term = tape.input(f"type[{i},{u}]") * tape.input(f"type[{i},{v}]")
                    score = term if score is None else score + term
        pre_loc = tape.input(f"b_loc[{u},{v}]")
        pre_scale = tape.input(f"b_scale[{u},{v}]") if family is not LagFamily.EXPONENTIAL else None
        if score is not None:
            pre_loc = tape.input(f"w_loc[{u},{v}]") * score + pre_loc
            if pre_scale is not None:
                pre_scale = tape.input(f"w_scale[{u},{v}]") * score + pre_scale
        heads[(u, v)] = _head(tape, family, pre_loc, pre_scale)
    _latent_objective(tape, family, pairs, n_samples, heads, prior)
    return PosteriorTape(tape, family, pairs, n_samples, enc.names())


def build_factorized_tape(graph: CausalGraph, family, prior: LagPosterior, n_samples: int) -> PosteriorTape:
    """Same latent objective with free per-pair posterior parameters ``raw_loc``/``raw_scale``."""
    family = LagFamily(family)
    tape = Tape()
    pairs = graph.pairs()
    heads = {}
    for (u, v) in pairs:
        pre_scale = tape.input(f"raw_scale[{u},{v}]") if family is not LagFamily.EXPONENTIAL else None
        heads[(u, v)] = _head(tape, family, tape.input(f"raw_loc[{u},{v}]"), pre_scale)
    _latent_objective(tape, family, pairs, n_samples, heads, prior)
    return PosteriorTape(tape, family, pairs, n_samples)


def encode_posterior(seq: EventSequence, enc: EncoderParams, graph: CausalGraph, family="gaussian",
                     prior: LagPosterior | None = None) -> LagPosterior:
    """Posterior for one sequence; masked pairs are point masses at 0."""
    family = LagFamily(family)
    prior = prior or LagPosterior.constant(family, graph, 1.0, 1.0)
    pt = build_encoder_tape(seq, enc, graph, family, prior, 1)
    U = enc.U
    noise = np.ones((1, U, U)) if family is LagFamily.EXPONENTIAL else np.zeros((1, U, U))
    out = pt.run(enc.to_inputs(), noise, np.zeros((1, U, U)), 0.0)
    loc, scale, _ = pt.values(out, U)
    if family is LagFamily.EXPONENTIAL:
        loc = np.where(graph.adjacency, loc, 1.0)
    return LagPosterior(family, loc, scale, graph.adjacency)
