"""ELBO and the three estimation backends: MLE, factorized VI and amortized VI (VAE).

All fits maximize a per-sequence average objective with Adam over unconstrained
coordinates (softplus for positive parameters). Delay gradients are taken on a
relaxed event term whose activation step is a logistic of width ``tau``, annealed
geometrically from ``relax_start`` to ``relax_end`` over the first
``relax_fraction`` of the iteration budget. Objective traces always record the
exact (unrelaxed) objective on the full data set. With ``monotone`` set the
trace holds the objective of the incumbent (best parameters evaluated so far), the
fit returns that incumbent and the trace therefore never decreases; the objective
of each iterate is kept in ``diagnostics["iterate_trace"]``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import (MU_FLOOR, CausalGraph, EventSequence, InvalidArgument, LagFamily, LagPosterior,
                    ModelParams, NumericError)
from ..likelihood import GradientRecord, PackedBatch, batch_evaluate
from .distributions import draw_noise, kl_posterior, reparam_sample
from .encoder import (EncoderParams, PosteriorTape, build_encoder_tape, build_factorized_tape,
                      pooled_time_scores)
from .optim import Adam, moving_average, sigmoid, softplus, softplus_inv

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    step_size: float = 1e-2
    iterations: int = 5000
    batch_size: int = 64
    mc_samples: int = 1
    eval_mc_samples: int = 64
    trace_mc_samples: int = 16
    kl_weight: float = 1.0
    seed: int = 0
    tol: float = 1e-4
    eval_every: int = 10
    ma_window: int = 10
    relax_start: float = 0.3
    relax_end: float = 0.01
    relax_fraction: float = 0.6
    final_lr_fraction: float = 0.01
    decay_mode: str = "pair"
    learn_scale: bool = True
    monotone: bool = True

    def __post_init__(self):
        for name in ("step_size", "iterations", "batch_size", "mc_samples", "eval_mc_samples", "trace_mc_samples",
                     "tol", "eval_every", "ma_window", "final_lr_fraction"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.kl_weight < 0:
            raise InvalidArgument("kl_weight must be >= 0")
        if not (0 <= self.relax_end <= self.relax_start):
            raise InvalidArgument("need 0 <= relax_end <= relax_start")
        if self.decay_mode not in ("pair", "row"):
            raise InvalidArgument("decay_mode must be 'pair' or 'row'")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidArgument(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**doc)

    def tau(self, it: int) -> float:
        end = max(1, int(self.relax_fraction * self.iterations))
        if it >= end or self.relax_start == 0:
            return self.relax_end
        if self.relax_end == 0:
            return self.relax_start * (1 - it / end)
        return self.relax_start * (self.relax_end / self.relax_start) ** (it / end)

    def annealed(self, it: int) -> bool:
        return it >= int(self.relax_fraction * self.iterations)

    def lr(self, it: int) -> float:
        return self.step_size * self.final_lr_fraction ** (it / max(1, self.iterations - 1))


@dataclass
class FitResult:
    backend: str
    params: ModelParams
    graph: CausalGraph
    posterior: LagPosterior | None
    objective_trace: list
    wall_clock: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    per_sequence: list | None = None
    encoder: EncoderParams | None = None

    @property
    def delays(self) -> np.ndarray:
        return self.posterior.mean() if self.posterior is not None else self.params.delta

    def to_json(self) -> dict:
        doc = self.params.to_json(self.graph)
        if self.posterior is not None:
            doc["posterior"] = self.posterior.to_json()
        else:
            doc["posterior"] = {"family": "point", "params": self.params.delta.tolist()}
        doc.update(backend=self.backend, objective_trace=[float(x) for x in self.objective_trace],
                   converged=bool(self.converged), wall_clock=float(self.wall_clock),
                   diagnostics=_jsonable(self.diagnostics))
        if self.encoder is not None:
            doc["encoder"] = self.encoder.to_json()
        if self.per_sequence is not None:
            doc["per_sequence"] = [p.to_json() for p in self.per_sequence]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "FitResult":
        params, graph = ModelParams.from_json(doc)
        post = doc.get("posterior")
        posterior = None if post is None or post["family"] == "point" else LagPosterior.from_json(post)
        enc = EncoderParams.from_json(doc["encoder"]) if "encoder" in doc else None
        per = [LagPosterior.from_json(p) for p in doc["per_sequence"]] if "per_sequence" in doc else None
        return cls(doc.get("backend", "mle"), params, graph, posterior, list(doc.get("objective_trace", [])),
                   float(doc.get("wall_clock", 0.0)), bool(doc.get("converged", False)),
                   doc.get("diagnostics", {}), per, enc)


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return x


def default_init(seqs: Sequence[EventSequence], graph: CausalGraph, delta0: float | np.ndarray = 1.0,
                 a0: float = 0.1, beta0: float = 1.0) -> ModelParams:
    """Poisson-exact base rates, uniform impacts/decays, delays at the prior mean."""
    U = graph.U
    counts = np.sum([s.counts() for s in seqs], axis=0)
    total_T = float(sum(s.T for s in seqs))
    mu = np.maximum(counts / total_T, 10 * MU_FLOOR)
    m = graph.adjacency
    return ModelParams(mu, np.where(m, a0, 0.0), np.full((U, U), beta0),
                       np.where(m, np.broadcast_to(delta0, (U, U)), 0.0))


# ---- decoder parameterization ---------------------------------------------

class _Decoder:
    """Unconstrained coordinates for (mu, A, beta[, delta])."""

    def __init__(self, init: ModelParams, graph: CausalGraph, decay_mode: str, with_delta: bool):
        self.mask = graph.adjacency
        self.row = decay_mode == "row"
        beta = init.beta
        if self.row:
            beta = np.array([beta[u][self.mask[u]].mean() if self.mask[u].any() else beta[u].mean()
                             for u in range(init.U)])
        self.raw = {"mu": softplus_inv(init.mu - MU_FLOOR),
                    "A": np.where(self.mask, softplus_inv(np.maximum(init.A, 1e-6)), 0.0),
                    "beta": softplus_inv(beta)}
        if with_delta:
            self.raw["delta"] = np.where(self.mask, softplus_inv(np.maximum(init.delta, 1e-6)), 0.0)
        self.fixed_delta = init.delta

    def values(self):
        r = self.raw
        mu = MU_FLOOR + softplus(r["mu"])
        A = np.where(self.mask, softplus(r["A"]), 0.0)
        B = softplus(r["beta"])
        if self.row:
            B = np.repeat(B[:, None], self.mask.shape[0], axis=1)
        D = np.where(self.mask, softplus(r["delta"]), 0.0) if "delta" in r else self.fixed_delta
        return mu, A, B, D

    def params(self) -> ModelParams:
        return ModelParams(*self.values())

    def chain(self, gmu, gA, gB, gD=None) -> dict:
        r = self.raw
        out = {"mu": gmu * sigmoid(r["mu"]), "A": np.where(self.mask, gA * sigmoid(r["A"]), 0.0)}
        gB = np.where(self.mask, gB, 0.0)
        out["beta"] = (gB.sum(axis=1) if self.row else gB) * sigmoid(r["beta"])
        if "delta" in r and gD is not None:
            out["delta"] = np.where(self.mask, gD * sigmoid(r["delta"]), 0.0)
        return out


def _converged(trace: list, cfg: TrainConfig) -> bool:
    w = cfg.ma_window
    if len(trace) < 2 * w:
        return False
    ma = moving_average(trace, w)
    # relative change of the moving average across one window
    return abs(ma[-1] - ma[-1 - w]) <= cfg.tol * (1.0 + abs(ma[-1]))


class _Checkpoint:
    """Best-so-far parameters; ``offer`` returns the incumbent value to record."""

    def __init__(self, get, put, enabled: bool):
        self.get, self.put, self.enabled = get, put, enabled
        self.value = -np.inf
        self.state = None
        self.raw_trace: list[float] = []

    def offer(self, value: float) -> float:
        self.raw_trace.append(value)
        if not self.enabled:
            return value
        if value >= self.value:
            self.value = value
            self.state = copy.deepcopy(self.get())
        return self.value

    def restore(self) -> None:
        if self.enabled and self.state is not None:
            self.put(self.state)


def _minibatches(n: int, size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n, size):
            yield np.sort(perm[lo:lo + size])


def _grad_norm(dec: _Decoder, batch: PackedBatch, D, n: int) -> float:
    mu, A, B, _ = dec.values()
    res = batch_evaluate(batch, mu, A, B, D, dec.mask, 0.0, grad=True)
    m = dec.mask
    g = np.concatenate([res.gmu.sum(0), res.gA.sum(0)[m], res.gB.sum(0)[m]]) / n
    return float(np.linalg.norm(g))


# ---- MLE --------------------------------------------------------------------

def fit_mle(seqs: Sequence[EventSequence], graph: CausalGraph, init: ModelParams,
            cfg: TrainConfig = TrainConfig(), learn_delta: bool = True) -> FitResult:
    """Maximum likelihood over (mu, A, beta, delta) with delays as free parameters."""
    _check_mask(init, graph)
    t0 = time.perf_counter()
    n = len(seqs)
    batch = PackedBatch.from_sequences(seqs)
    dec = _Decoder(init, graph, cfg.decay_mode, with_delta=learn_delta)
    opt = Adam(cfg.step_size)
    rng = np.random.default_rng(cfg.seed)
    batches = _minibatches(n, min(cfg.batch_size, n), rng)
    trace, converged, diag = [], False, {}

    def put(state):
        dec.raw = state

    ckpt = _Checkpoint(lambda: dec.raw, put, cfg.monotone)
    try:
        for it in range(cfg.iterations):
            idx = next(batches)
            sub = batch if idx.size == n else batch.subset(idx)
            mu, A, B, D = dec.values()
            res = batch_evaluate(sub, mu, A, B, D, dec.mask, cfg.tau(it), grad=True)
            k = idx.size
            grads = dec.chain(res.gmu.sum(0) / k, res.gA.sum(0) / k, res.gB.sum(0) / k, res.gD.sum(0) / k)
            opt.step(dec.raw, grads, cfg.lr(it))
            if it % cfg.eval_every == 0 or it == cfg.iterations - 1:
                mu, A, B, D = dec.values()
                val = float(batch_evaluate(batch, mu, A, B, D, dec.mask, 0.0, grad=False).ll.mean())
                trace.append(ckpt.offer(val))
                if cfg.annealed(it) and _converged(trace, cfg):
                    converged = True
                    break
        converged = converged or _converged(trace, cfg)
        ckpt.restore()
        params = dec.params()
        diag["grad_norm"] = _grad_norm(dec, batch, params.delta, n)
        diag["iterations"] = it + 1
    except (NumericError, FloatingPointError, ValueError) as exc:
        log.error("MLE fit failed: %s", exc)
        diag["error"] = str(exc)
        params = _safe_params(dec, init)
        converged = False
    diag["iterate_trace"] = ckpt.raw_trace
    return FitResult("mle", params, graph, None, trace, time.perf_counter() - t0, converged, diag)


def _safe_params(dec: _Decoder, fallback: ModelParams) -> ModelParams:
    try:
        return dec.params()
    except Exception:
        return fallback


def _check_mask(init: ModelParams, graph: CausalGraph):
    if graph.U != init.U:
        raise InvalidArgument("graph and init disagree on U")
    off = ~graph.adjacency
    if np.any(init.A[off] != 0) or np.any(init.delta[off] != 0):
        raise InvalidArgument("init has nonzero impact or delay on masked pairs")


# ---- ELBO -------------------------------------------------------------------

@dataclass
class ElboResult:
    value: float  # summed over sequences
    per_seq: np.ndarray
    kl: np.ndarray  # per sequence, unweighted
    decoder_grad: GradientRecord  # d ELBO / d (mu, A, beta); delta block is zero
    posterior_grad: dict  # name -> d ELBO / d input of the posterior tape(s)
    clip_fraction: float = 0.0


def _posterior_values(family: LagFamily, pre_loc, pre_scale):
    loc = pre_loc if family is LagFamily.LOGNORMAL else softplus(pre_loc)
    scale = softplus(pre_scale) if family is not LagFamily.EXPONENTIAL else np.full_like(loc, np.nan)
    return loc, scale


def encoder_pre_activations(enc: EncoderParams, time_score: np.ndarray, has: np.ndarray):
    """Vectorized encoder head (values only; the tape supplies gradients)."""
    score = np.zeros_like(time_score)
    if enc.use_time:
        score = score + time_score
    if enc.use_type:
        score = score + enc.type_emb.T @ enc.type_emb
    score = np.where(has, score, 0.0)
    return enc.w_loc * score + enc.b_loc, enc.w_scale * score + enc.b_scale


class _Latents:
    """Posterior source for the ELBO: one factorized posterior or a per-sequence encoder."""

    def __init__(self, family, graph: CausalGraph, prior: LagPosterior, n_samples: int,
                 seqs=None, enc: EncoderParams | None = None, raw: dict | None = None):
        self.family = LagFamily(family)
        self.graph = graph
        self.prior = prior
        self.M = n_samples
        self.enc = enc
        self.raw = raw
        self.tapes: dict[int, PosteriorTape] = {}
        self.seqs = seqs
        if enc is not None:
            self.scores = [pooled_time_scores(s, enc.d_model, enc.pooling) for s in seqs]
        else:
            self.shared_tape = build_factorized_tape(graph, self.family, prior, n_samples)

    def loc_scale(self, i: int):
        if self.enc is not None:
            pl, ps = encoder_pre_activations(self.enc, *self.scores[i])
        else:
            pl, ps = self.raw["raw_loc"], self.raw["raw_scale"]
        return _posterior_values(self.family, pl, ps)

    def tape(self, i: int) -> PosteriorTape:
        if self.enc is None:
            return self.shared_tape
        if i not in self.tapes:
            self.tapes[i] = build_encoder_tape(self.seqs[i], self.enc, self.graph, self.family,
                                               self.prior, self.M)
        return self.tapes[i]

    def inputs(self) -> dict:
        if self.enc is not None:
            return self.enc.to_inputs()
        U = self.graph.U
        out = {}
        for (u, v) in self.graph.pairs():
            out[f"raw_loc[{u},{v}]"] = self.raw["raw_loc"][u, v]
            out[f"raw_scale[{u},{v}]"] = self.raw["raw_scale"][u, v]
        return out

    def posterior(self, i: int) -> LagPosterior:
        loc, scale = self.loc_scale(i)
        m = self.graph.adjacency
        return LagPosterior(self.family, np.where(m, loc, 1.0), np.where(m, scale, 1.0), m)


def _sample_delays(lat: _Latents, idx, noise):
    """Delays of shape (len(idx), M, U, U) and clip indicators."""
    m = lat.graph.adjacency
    out = np.zeros(noise.shape)
    clipped = 0
    for j, i in enumerate(idx):
        loc, scale = lat.loc_scale(i)
        loc = np.where(m, loc, 1.0)
        scale = np.where(m, np.nan_to_num(scale, nan=1.0), 1.0)
        out[j] = np.where(m, reparam_sample(lat.family, loc, scale, noise[j]), 0.0)
        if lat.family is LagFamily.GAUSSIAN:
            clipped += int(np.sum(((loc + scale * noise[j]) < 0) & m))
    return out, clipped


def _elbo_step(lat: _Latents, batch: PackedBatch, idx, params_vals, noise, kl_weight: float,
               tau: float, want_grad: bool = True):
    """ELBO terms for the sequences ``idx`` (rows of ``batch``) given fixed noise."""
    mu, A, B = params_vals
    k, M = len(idx), noise.shape[1]
    U = lat.graph.U
    delays, clipped = _sample_delays(lat, idx, noise)
    rep = np.repeat(np.arange(k), M)
    sub = batch.subset(np.asarray(idx)[rep])
    res = batch_evaluate(sub, mu, A, B, delays.reshape(k * M, U, U), lat.graph.adjacency, tau,
                         grad=want_grad)
    ll = res.ll.reshape(k, M).mean(axis=1)
    kl = np.array([kl_posterior(lat.posterior(i), lat.prior).sum() for i in idx])
    per_seq = ll - kl_weight * kl
    if not want_grad:
        return per_seq, kl, None, None, clipped
    dec = (res.gmu.reshape(k, M, U).sum(1).sum(0) / M, res.gA.reshape(k, M, U, U).sum(1).sum(0) / M,
           res.gB.reshape(k, M, U, U).sum(1).sum(0) / M)
    gD = res.gD.reshape(k, M, U, U) / M
    feed = lat.inputs()
    post_grad: dict[str, float] = {}
    for j, i in enumerate(idx):
        pt = lat.tape(i)
        pt.run(feed, noise[j], gD[j], kl_weight)
        for name, g in pt.tape.backward("objective").items():
            if name in feed:
                post_grad[name] = post_grad.get(name, 0.0) + g
    return per_seq, kl, dec, post_grad, clipped


def elbo(seqs: Sequence[EventSequence], params: ModelParams, posterior, prior: LagPosterior,
         cfg: TrainConfig = TrainConfig(), graph: CausalGraph | None = None, tau: float = 0.0,
         noise: np.ndarray | None = None) -> ElboResult:
    """Monte Carlo ELBO summed over sequences, with gradients.

    ``posterior`` is either a :class:`LagPosterior` (shared factorized posterior)
    or an ``(EncoderParams, CausalGraph)`` pair. Noise is drawn from ``cfg.seed``
    unless given explicitly with shape ``(n_seq, mc_samples, U, U)``.
    Posterior gradients are keyed by tape input name: ``raw_loc[u,v]`` /
    ``raw_scale[u,v]`` (softplus pre-activations) for a factorized posterior,
    encoder weight names otherwise.
    """
    if isinstance(posterior, LagPosterior):
        graph = graph or CausalGraph(posterior.mask)
        if posterior.family is not prior.family:
            raise InvalidArgument("posterior and prior families differ")
        raw = _raw_from_posterior(posterior)
        lat = _Latents(posterior.family, graph, prior, cfg.mc_samples, raw=raw)
    else:
        enc, graph = posterior
        lat = _Latents(prior.family, graph, prior, cfg.mc_samples, seqs=list(seqs), enc=enc)
    U = params.U
    batch = PackedBatch.from_sequences(seqs)
    if noise is None:
        noise = draw_noise(lat.family, np.random.default_rng(cfg.seed), (len(seqs), cfg.mc_samples, U, U))
    per_seq, kl, dec, pg, clipped = _elbo_step(lat, batch, list(range(len(seqs))),
                                               (params.mu, params.A, params.beta), noise,
                                               cfg.kl_weight, tau)
    m = graph.adjacency
    grad = GradientRecord(dec[0], np.where(m, dec[1], 0.0), np.where(m, dec[2], 0.0), np.zeros((U, U)))
    n_draws = max(1, noise.shape[0] * noise.shape[1] * int(m.sum()))
    return ElboResult(float(per_seq.sum()), per_seq, kl, grad, pg, clipped / n_draws)


def _raw_from_posterior(post: LagPosterior) -> dict:
    m = post.mask
    loc = np.where(m, post.loc, 1.0)
    raw_loc = loc if post.family is LagFamily.LOGNORMAL else softplus_inv(loc)
    raw_scale = softplus_inv(np.where(m, np.nan_to_num(post.scale, nan=1.0), 1.0))
    return {"raw_loc": raw_loc, "raw_scale": raw_scale}


def _tape_grads_to_raw(pg: dict, U: int) -> dict:
    out = {"raw_loc": np.zeros((U, U)), "raw_scale": np.zeros((U, U))}
    for name, g in pg.items():
        key, rest = name.split("[")
        u, v = map(int, rest.rstrip("]").split(","))
        out[key][u, v] = g
    return out


# ---- variational fits -------------------------------------------------------

def _fit_variational(backend: str, seqs, graph, init: ModelParams, prior: LagPosterior, cfg: TrainConfig,
                     q_init: LagPosterior | None = None, enc: EncoderParams | None = None,
                     progress=None) -> FitResult:
    _check_mask(init, graph)
    if np.any(prior.mask != graph.adjacency):
        raise InvalidArgument("prior mask must match the causal graph")
    t0 = time.perf_counter()
    n, U = len(seqs), graph.U
    family = prior.family
    batch = PackedBatch.from_sequences(seqs)
    dec = _Decoder(init, graph, cfg.decay_mode, with_delta=False)
    if enc is None:
        q_init = q_init or prior
        lat = _Latents(family, graph, prior, cfg.mc_samples, raw=_raw_from_posterior(q_init))
    else:
        lat = _Latents(family, graph, prior, cfg.mc_samples, seqs=list(seqs), enc=enc)
    opt = Adam(cfg.step_size)
    rng = np.random.default_rng(cfg.seed)
    batches = _minibatches(n, min(cfg.batch_size, n), np.random.default_rng(cfg.seed + 1))
    eval_noise = draw_noise(family, np.random.default_rng(cfg.seed + 2), (n, cfg.trace_mc_samples, U, U))
    all_idx = list(range(n))
    trace, converged, diag = [], False, {"clip_count": 0, "draws": 0}

    def put(state):
        dec.raw, lat.raw, lat.enc = state

    ckpt = _Checkpoint(lambda: (dec.raw, lat.raw, lat.enc), put, cfg.monotone)
    try:
        for it in range(cfg.iterations):
            idx = list(next(batches))
            noise = draw_noise(family, rng, (len(idx), cfg.mc_samples, U, U))
            mu, A, B, _ = dec.values()
            per_seq, kl, dgrad, pgrad, clipped = _elbo_step(lat, batch, idx, (mu, A, B), noise,
                                                            cfg.kl_weight, cfg.tau(it))
            diag["clip_count"] += clipped
            diag["draws"] += noise.size
            k = len(idx)
            grads = dec.chain(dgrad[0] / k, dgrad[1] / k, dgrad[2] / k)
            lr = cfg.lr(it)
            if enc is None:
                g = _tape_grads_to_raw(pgrad, U)
                if not cfg.learn_scale:
                    g["raw_scale"] = np.zeros((U, U))
                _adam_raw(opt, lat.raw, {kk: v / k for kk, v in g.items()}, lr)
            else:
                g = lat.enc.grads_to_arrays({kk: v / k for kk, v in pgrad.items()})
                if not cfg.learn_scale:
                    g["w_scale"] = np.zeros_like(g["w_scale"])
                    g["b_scale"] = np.zeros_like(g["b_scale"])
                arrays = lat.enc.arrays()
                _adam_raw(opt, arrays, g, lr, prefix="enc_")
                lat.enc = lat.enc.with_arrays(arrays)
            opt.step(dec.raw, grads, lr)
            if progress is not None:
                progress(it, float(per_seq.mean()))
            if it % cfg.eval_every == 0 or it == cfg.iterations - 1:
                mu, A, B, _ = dec.values()
                val, _, _, _, _ = _elbo_step(lat, batch, all_idx, (mu, A, B), eval_noise, cfg.kl_weight,
                                             0.0, want_grad=False)
                trace.append(ckpt.offer(float(val.mean())))
                if cfg.annealed(it) and _converged(trace, cfg):
                    converged = True
                    break
        converged = converged or _converged(trace, cfg)
        diag["iterations"] = it + 1
        ckpt.restore()
        mu, A, B, _ = dec.values()
        final_noise = draw_noise(family, np.random.default_rng(cfg.seed + 3), (n, cfg.eval_mc_samples, U, U))
        val, _, _, _, _ = _elbo_step(lat, batch, all_idx, (mu, A, B), final_noise, cfg.kl_weight, 0.0,
                                     want_grad=False)
        diag["final_elbo"] = float(val.mean())
    except (NumericError, FloatingPointError, ValueError) as exc:
        log.error("%s fit failed: %s", backend, exc)
        diag["error"] = str(exc)
        converged = False
    diag["iterate_trace"] = ckpt.raw_trace
    diag["clip_fraction"] = diag["clip_count"] / max(1, diag["draws"]) if family is LagFamily.GAUSSIAN else 0.0
    params = _safe_params(dec, init)
    per_seq_post = None
    if enc is None:
        posterior = lat.posterior(0)
    else:
        per_seq_post = [lat.posterior(i) for i in range(n)]
        posterior = _pool_posteriors(per_seq_post, graph)
    params = params.replace(delta=np.where(graph.adjacency, posterior.mean(), 0.0))
    return FitResult(backend, params, graph, posterior, trace, time.perf_counter() - t0, converged, diag,
                     per_seq_post, lat.enc)


def _adam_raw(opt: Adam, target: dict, grads: dict, lr: float, prefix: str = "q_"):
    # shares the optimizer's step counter with the decoder update that follows
    keyed = {prefix + k: v for k, v in target.items()}
    t = opt.t
    opt.step(keyed, {prefix + k: v for k, v in grads.items()}, lr)
    opt.t = t
    for k in target:
        target[k] = keyed[prefix + k]


def _pool_posteriors(posts: list[LagPosterior], graph: CausalGraph) -> LagPosterior:
    """Population posterior: parameter-wise average of per-sequence posteriors."""
    loc = np.mean([p.loc for p in posts], axis=0)
    scale = np.mean([p.scale for p in posts], axis=0)
    m = graph.adjacency
    return LagPosterior(posts[0].family, np.where(m, loc, 1.0), np.where(m, scale, 1.0), m)


def fit_vi(seqs: Sequence[EventSequence], graph: CausalGraph, init: ModelParams, prior: LagPosterior,
           cfg: TrainConfig = TrainConfig(), q_init: LagPosterior | None = None) -> FitResult:
    """ELBO ascent with one shared factorized lag posterior (no encoder)."""
    return _fit_variational("vi", seqs, graph, init, prior, cfg, q_init=q_init)


def fit_vae(seqs: Sequence[EventSequence], graph: CausalGraph, init: ModelParams, enc: EncoderParams,
            prior: LagPosterior, cfg: TrainConfig = TrainConfig()) -> FitResult:
    """Joint ELBO ascent over the decoder and the amortized encoder."""
    if enc.U != graph.U:
        raise InvalidArgument("encoder and graph disagree on U")
    return _fit_variational("vae", seqs, graph, init, prior, cfg, enc=enc)


def save_fit(path, result: FitResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json(), fh, indent=1, sort_keys=True)


def load_fit(path) -> FitResult:
    with open(path) as fh:
        return FitResult.from_json(json.load(fh))
