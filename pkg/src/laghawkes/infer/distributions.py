"""Lag distributions: closed-form KL divergences and reparameterized samplers."""

from __future__ import annotations

import numpy as np

from ..core import DimensionMismatch, InvalidArgument, LagFamily, LagPosterior


def kl_divergence(family, q_loc, q_scale, p_loc, p_scale):
    """KL(q || p) for one pair (scalars) or elementwise over arrays.

    Exponential entries are parameterized by rate; Gaussian by (mean, std);
    log-normal by (log-mean, log-std), for which the KL equals the Gaussian KL of
    the underlying normals.
    """
    fam = LagFamily(family)
    if fam is LagFamily.EXPONENTIAL:
        return np.log(q_loc / p_loc) + p_loc / q_loc - 1.0
    return (np.log(p_scale / q_scale) + (q_scale ** 2 + (q_loc - p_loc) ** 2) / (2 * p_scale ** 2)
            - 0.5)


def kl_posterior(q: LagPosterior, p: LagPosterior) -> np.ndarray:
    """Per-pair KL matrix; masked pairs (point mass vs point mass) contribute 0."""
    if q.family is not p.family:
        raise InvalidArgument(f"family mismatch: {q.family.value} vs {p.family.value}")
    if q.loc.shape != p.loc.shape:
        raise DimensionMismatch("posterior shapes differ")
    m = q.mask
    out = np.zeros(q.loc.shape)
    out[m] = kl_divergence(q.family, q.loc[m], q.scale[m], p.loc[m], p.scale[m])
    return out


def noise_kind(family) -> str:
    return "exponential" if LagFamily(family) is LagFamily.EXPONENTIAL else "normal"


def draw_noise(family, rng: np.random.Generator, size) -> np.ndarray:
    if noise_kind(family) == "exponential":
        return rng.standard_exponential(size)
    return rng.standard_normal(size)


def reparam_sample(family, loc, scale, noise):
    """Deterministic transform of external noise into a nonnegative delay.

    Gaussian draws are clipped at zero, so delays stay admissible.
    """
    fam = LagFamily(family)
    if fam is LagFamily.EXPONENTIAL:
        return noise / loc
    if fam is LagFamily.LOGNORMAL:
        return np.exp(loc + scale * noise)
    return np.maximum(loc + scale * noise, 0.0)


def reparam_jacobian(family, loc, scale, noise):
    """(d sample / d loc, d sample / d scale), elementwise."""
    fam = LagFamily(family)
    if fam is LagFamily.EXPONENTIAL:
        return -noise / loc ** 2, np.zeros_like(np.asarray(noise, dtype=float))
    if fam is LagFamily.LOGNORMAL:
        s = np.exp(loc + scale * noise)
        return s, s * noise
    live = np.asarray(loc + scale * np.asarray(noise, dtype=float)) > 0
    return live.astype(float), np.where(live, noise, 0.0)


def sample_lags(post: LagPosterior, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw delay matrices (``(U, U)`` or ``(n, U, U)``); masked pairs are 0."""
    shape = post.loc.shape if n is None else (n, *post.loc.shape)
    eps = draw_noise(post.family, rng, shape)
    loc = np.where(post.mask, post.loc, 1.0)
    scale = np.where(post.mask, np.nan_to_num(post.scale, nan=1.0), 1.0)
    return np.where(post.mask, reparam_sample(post.family, loc, scale, eps), 0.0)


def family_mean(family, loc, scale):
    fam = LagFamily(family)
    if fam is LagFamily.EXPONENTIAL:
        return 1.0 / loc
    if fam is LagFamily.LOGNORMAL:
        return np.exp(loc + 0.5 * scale ** 2)
    return loc
