"""Estimation: distributions, optimizer, encoder and the fit backends."""

from .distributions import family_mean, kl_divergence, kl_posterior, reparam_sample, sample_lags
from .encoder import EncoderParams, encode_posterior, time_embedding
from .fit import (ElboResult, FitResult, TrainConfig, default_init, elbo, fit_mle, fit_vae, fit_vi,
                  load_fit, save_fit)

__all__ = [
    "family_mean", "kl_divergence", "kl_posterior", "reparam_sample", "sample_lags",
    "EncoderParams", "encode_posterior", "time_embedding",
    "ElboResult", "FitResult", "TrainConfig", "default_init", "elbo", "fit_mle", "fit_vae", "fit_vi",
    "load_fit", "save_fit",
]
