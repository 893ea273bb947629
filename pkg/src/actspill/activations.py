"""Closed-form estimators for parameter counts, activation bytes, and FLOPs.

The per-layer activation estimate is linear in seq_len * micro_batch *
hidden_dim with two calibration coefficients: bytes that stay replicated on
every tensor-parallel rank, and bytes that shard with the TP degree. The
defaults (10 + 24/tp bytes per element product, FP16) describe a transformer
layer trained with flash attention, where the quadratic attention
intermediates never materialize.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ENCODER_DECODER, ModelConfig, ParallelismConfig

#: bytes per seq*batch*hidden unit at 2-byte elements
DEFAULT_SHARED_COEFF = 10.0
DEFAULT_SHARDED_COEFF = 24.0


@dataclass(frozen=True)
class ActivationProfile:
    """Calibration knobs for the per-layer activation estimate."""

    shared_bytes_per_token_dim: float = DEFAULT_SHARED_COEFF
    sharded_bytes_per_token_dim: float = DEFAULT_SHARDED_COEFF
    #: extra sharded bytes for decoder layers that carry cross-attention
    cross_attention_extra: float = DEFAULT_SHARDED_COEFF
    flash_attention: bool = True

    @classmethod
    def from_dict(cls, raw: dict) -> "ActivationProfile":
        return cls(**raw)


def param_count(m: ModelConfig) -> int:
    """Weights of an L-layer transformer: 12*L*h^2 plus embeddings 2*vocab*h."""
    h = m.hidden_dim
    return 12 * m.num_layers * h * h + 2 * m.vocab_size * h


def _layers_on_gpu(m: ModelConfig, par: ParallelismConfig) -> int:
    """Worst pipeline stage: ceil(L / pp)."""
    if m.num_layers == 0:
        return 0
    return -(-m.num_layers // par.pp_degree)


def per_layer_activation_bytes(
    m: ModelConfig,
    par: ParallelismConfig,
    profile: ActivationProfile,
    cross_attention: bool = False,
) -> float:
    """Activation bytes one transformer layer produces for one micro-batch."""
    tokens_dim = m.seq_len * m.micro_batch * m.hidden_dim
    scale = m.bytes_per_element / 2  # coefficients are calibrated at FP16
    coeff = (
        profile.shared_bytes_per_token_dim
        + profile.sharded_bytes_per_token_dim / par.tp_degree
    )
    if cross_attention:
        coeff += profile.cross_attention_extra / par.tp_degree
    bytes_ = tokens_dim * coeff * scale
    if not profile.flash_attention:
        # Attention scores and softmax output: two b*a*s^2 intermediates,
        # head-sharded across TP ranks.
        bytes_ += (
            2.0
            * m.micro_batch
            * m.num_heads
            * m.seq_len
            * m.seq_len
            * m.bytes_per_element
            / par.tp_degree
        )
    return bytes_


def activations_per_step(
    m: ModelConfig,
    par: ParallelismConfig,
    profile: ActivationProfile = ActivationProfile(),
) -> float:
    """Activation bytes one GPU produces per training step.

    Sums the per-layer estimate over this GPU's pipeline stage (worst stage,
    ceil(L/pp) layers) and multiplies by the number of micro-batches. For
    encoder-decoder models the floor(L/2) decoder layers carry the
    cross-attention extra; with pipeline sharding the stage is assumed to hold
    a proportional share of them.
    """
    total = 0.0
    decoders = m.decoder_layers()
    encoders = m.num_layers - decoders
    total += encoders * per_layer_activation_bytes(m, par, profile, cross_attention=False)
    if m.family == ENCODER_DECODER:
        total += decoders * per_layer_activation_bytes(m, par, profile, cross_attention=True)
    if m.num_layers:
        total *= _layers_on_gpu(m, par) / m.num_layers
    return total * par.num_microbatches


@dataclass(frozen=True)
class CheckpointedActivations:
    """Bytes kept under layerwise activation checkpointing.

    ``bytes`` is the exact estimate; ``asymptotic_scale`` is the sqrt(L)*h*D
    proportional form used in scaling sweeps (D = tokens per step).
    """

    bytes: float
    asymptotic_scale: float


def checkpointed_activations(
    m: ModelConfig,
    par: ParallelismConfig,
    profile: ActivationProfile = ActivationProfile(),
) -> CheckpointedActivations:
    """Layer-boundary inputs for every layer plus one live layer's activations."""
    boundary = (
        m.seq_len
        * m.micro_batch
        * m.hidden_dim
        * m.bytes_per_element
        / par.tp_degree
    )
    layers = _layers_on_gpu(m, par)
    live = 0.0
    if m.num_layers:
        live = per_layer_activation_bytes(
            m, par, profile, cross_attention=m.family == ENCODER_DECODER and m.decoder_layers() > 0
        )
    exact = (layers * boundary + live) * par.num_microbatches
    tokens = m.seq_len * m.micro_batch * par.num_microbatches
    scale = math.sqrt(m.num_layers) * m.hidden_dim * tokens
    return CheckpointedActivations(bytes=exact, asymptotic_scale=scale)


def flops_per_step(m: ModelConfig, par: ParallelismConfig) -> float:
    """Algorithmic FLOPs per step (forward + backward), model level: 6*N*tokens."""
    tokens = m.seq_len * m.micro_batch * par.num_microbatches
    return 6.0 * param_count(m) * tokens


def forward_flops(m: ModelConfig, par: ParallelismConfig) -> float:
    """Forward pass alone: 2*N*tokens, exactly one third of the step total."""
    tokens = m.seq_len * m.micro_batch * par.num_microbatches
    return 2.0 * param_count(m) * tokens
