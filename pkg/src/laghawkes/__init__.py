"""Multivariate Hawkes processes with per-pair excitation delays."""

from .core import (CausalGraph, Event, EventSequence, InvalidArgument, KernelFamily, KernelSpec, LagFamily,
                   LagPosterior, ModelParams, NumericError, read_params, read_sequences, write_params,
                   write_sequences)
from .likelihood import grad_log_likelihood, intensity_at, compensator, log_likelihood
from .simulate import SimConfig, predict_next_event_time, predict_rollout, simulate, simulate_batch
from .identify import absolute_error_rate, recover_delays_from_jumps, rmse, spectral_radius

__version__ = "0.1.0"
