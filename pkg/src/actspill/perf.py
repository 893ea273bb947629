"""Analytical performance model.

Step time follows a per-layer roofline: every layer contributes the larger of
its compute time and its memory-traffic time, and the whole pipeline stage is
floored by any collective that cannot overlap. Write-bandwidth sizing assumes
spill traffic may occupy half of the step wall time (forward plus the early
part of backward). SSD lifespan divides effective endurance by the spill bytes
consumed per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .activations import (
    ActivationProfile,
    activations_per_step,
    flops_per_step,
    forward_flops,
    param_count,
    per_layer_activation_bytes,
)
from .config import (
    DECODER_ONLY,
    ENCODER_DECODER,
    HardwareConfig,
    ModelConfig,
    ParallelismConfig,
)
from .errors import DegenerateSweep, EmptyCostList, NonPositiveStepTime, TooFewLayers

SECONDS_PER_YEAR = 365.25 * 24 * 3600.0

COMPUTE_LAYER = "compute-layer"
COMMUNICATION = "communication"


@dataclass(frozen=True)
class LayerCost:
    """One layer's contribution to a pipeline stage."""

    flops: float
    bytes_moved: float
    kind: str = COMPUTE_LAYER


def transformer_layer_time(
    costs: Sequence[LayerCost],
    zero_comm_time: float,
    hw: HardwareConfig,
) -> float:
    """Stage time: max(sum over layers of max(compute, memory), collective floor)."""
    if not costs:
        raise EmptyCostList("layer cost list is empty")
    achieved = hw.gpu_flops * hw.gpu_flops_efficiency
    total = 0.0
    for cost in costs:
        bw = hw.interconnect_bw if cost.kind == COMMUNICATION else hw.gpu_mem_bw
        total += max(cost.flops / achieved, cost.bytes_moved / bw)
    return max(total, zero_comm_time)


def required_write_bandwidth(activation_bytes: float, step_time_s: float) -> float:
    """Write bandwidth that hides spill traffic inside half the step time."""
    if step_time_s <= 0:
        raise NonPositiveStepTime(f"step_time_s={step_time_s}")
    return activation_bytes / (step_time_s / 2.0)


def effective_endurance(hw: HardwareConfig) -> float:
    """Usable bytes across the SSD array.

    Vendor TBW ratings assume a hostile random-write mix; an append-only
    sequential stream amplifies less (jesd_waf / actual_waf), and trading the
    multi-year powered-off retention window down to ~a day relaxes the P/E
    budget by retention_relax_factor.
    """
    return (
        hw.ssd_count
        * hw.ssd_rated_endurance
        * (hw.jesd_waf / hw.actual_waf)
        * hw.retention_relax_factor
    )


def projected_lifespan(
    hw: HardwareConfig,
    activation_bytes_per_step: float,
    step_time_s: float,
) -> float:
    """Seconds until the array's endurance is consumed; inf when nothing spills."""
    if step_time_s <= 0:
        raise NonPositiveStepTime(f"step_time_s={step_time_s}")
    if activation_bytes_per_step == 0:
        return math.inf
    return effective_endurance(hw) * step_time_s / activation_bytes_per_step


def projected_lifespan_years(
    hw: HardwareConfig,
    activation_bytes_per_step: float,
    step_time_s: float,
) -> float:
    return projected_lifespan(hw, activation_bytes_per_step, step_time_s) / SECONDS_PER_YEAR


def max_activations_per_gpu(
    m: ModelConfig,
    par: ParallelismConfig,
    profile: ActivationProfile = ActivationProfile(),
) -> float:
    """Largest per-step spill a GPU could sustain: everything except the two
    layers that must stay resident while compute pipelines through them."""
    if m.num_layers < 2:
        raise TooFewLayers(f"num_layers={m.num_layers}, need >= 2")
    total = activations_per_step(m, par, profile)
    resident = 2.0 * _largest_layer_bytes(m, par, profile)
    return max(total - resident, 0.0)


def _largest_layer_bytes(
    m: ModelConfig, par: ParallelismConfig, profile: ActivationProfile
) -> float:
    cross = m.family == ENCODER_DECODER and m.decoder_layers() > 0
    return per_layer_activation_bytes(m, par, profile, cross_attention=cross)


# -- scaling sweeps ---------------------------------------------------------

def scaling_exponent_fit(points: Sequence[tuple[float, float]]) -> float:
    """Least-squares slope of log(size) against log(compute budget).

    Requires at least three points spanning two decades of compute, otherwise
    the fit is meaningless and DegenerateSweep is raised.
    """
    if len(points) < 3:
        raise DegenerateSweep(f"need >= 3 points, got {len(points)}")
    budgets = np.array([c for c, _ in points], dtype=float)
    sizes = np.array([s for _, s in points], dtype=float)
    if np.any(budgets <= 0) or np.any(sizes <= 0):
        raise DegenerateSweep("compute budgets and sizes must be positive")
    span = budgets.max() / budgets.min()
    if span < 100.0:
        raise DegenerateSweep(f"compute span {span:.3g}x, need >= 2 decades")
    slope, _ = np.polyfit(np.log(budgets), np.log(sizes), 1)
    return float(slope)


def _sweep_budgets(n_points: int, c_min: float, c_max: float) -> np.ndarray:
    return np.logspace(math.log10(c_min), math.log10(c_max), n_points)


def activation_scaling_sweep(
    n_points: int = 9, c_min: float = 1e18, c_max: float = 1e24
) -> list[tuple[float, float]]:
    """(compute, activation-size) points under compute-optimal growth.

    Model size and batch tokens each grow as C^0.5 and hidden_dim as N^(1/3),
    so activations (N/h)*D come out as C^(5/6).
    """
    out = []
    for c in _sweep_budgets(n_points, c_min, c_max):
        n = math.sqrt(c)
        d = c / n
        h = n ** (1.0 / 3.0)
        out.append((c, (n / h) * d))
    return out


def others_scaling_sweep(
    n_points: int = 9, c_min: float = 1e18, c_max: float = 1e24
) -> list[tuple[float, float]]:
    """Weights/gradients/optimizer state grow with N, i.e. C^0.5."""
    return [(c, math.sqrt(c)) for c in _sweep_budgets(n_points, c_min, c_max)]


def checkpointed_scaling_sweep(
    n_points: int = 9, c_min: float = 1e18, c_max: float = 1e24
) -> list[tuple[float, float]]:
    """Checkpointed residue sqrt(L)*h*D with L and h both N^(1/3): C^(3/4)."""
    out = []
    for c in _sweep_budgets(n_points, c_min, c_max):
        n = math.sqrt(c)
        d = c / n
        h = n ** (1.0 / 3.0)
        layers = n ** (1.0 / 3.0)
        out.append((c, math.sqrt(layers) * h * d))
    return out


# -- whole-run projection ----------------------------------------------------

@dataclass(frozen=True)
class Projection:
    """Derived per-GPU figures for one training configuration."""

    name: str
    model: ModelConfig
    parallelism: ParallelismConfig
    hardware: HardwareConfig
    step_time_s: float
    forward_time_s: float
    activations_per_gpu: float
    required_write_bw: float
    lifespan_s: float  # math.inf when nothing spills
    max_activations: float

    @property
    def lifespan_years(self) -> float:
        return self.lifespan_s / SECONDS_PER_YEAR


def layer_costs(
    m: ModelConfig,
    par: ParallelismConfig,
    profile: ActivationProfile = ActivationProfile(),
) -> list[LayerCost]:
    """Forward cost of each layer on this GPU's pipeline stage.

    FLOPs take the algorithmic 2*N*tokens forward total split evenly across
    layers (embedding work amortized in); bytes take the layer's weights plus
    its activation traffic.
    """
    layers = -(-m.num_layers // par.pp_degree)
    if layers == 0:
        return []
    one_mb = replace(par, num_microbatches=1)
    fwd = forward_flops(m, one_mb) / (par.tp_degree * par.pp_degree)
    weight_bytes = 12 * m.hidden_dim * m.hidden_dim * m.bytes_per_element / par.tp_degree
    cross = m.family == ENCODER_DECODER and m.decoder_layers() > 0
    act_bytes = per_layer_activation_bytes(m, par, profile, cross_attention=cross)
    return [
        LayerCost(flops=fwd / layers, bytes_moved=weight_bytes + act_bytes)
        for _ in range(layers)
    ]


def build_projection(
    m: ModelConfig,
    par: ParallelismConfig,
    hw: HardwareConfig,
    profile: ActivationProfile = ActivationProfile(),
    name: str = "",
    zero_comm_time: float = 0.0,
) -> Projection:
    """Project step time, spill bandwidth, and SSD lifespan for one config.

    Step time is forward+backward (backward = 2x forward) for every
    micro-batch, stretched by the 1F1B pipeline fill factor
    (num_microbatches + pp - 1) / num_microbatches. The optimizer step is a
    constant bias and is excluded.
    """
    costs = layer_costs(m, par, profile)
    fwd_mb = transformer_layer_time(costs, zero_comm_time, hw)
    n_mb = par.num_microbatches
    forward_time = fwd_mb * n_mb
    step_time = 3.0 * fwd_mb * (n_mb + par.pp_degree - 1)
    act = activations_per_step(m, par, profile)
    bw = required_write_bandwidth(act, step_time)
    life = projected_lifespan(hw, act, step_time)
    max_act = (
        max_activations_per_gpu(m, par, profile) if m.num_layers >= 2 else 0.0
    )
    return Projection(
        name=name or f"h{m.hidden_dim}-l{m.num_layers}",
        model=m,
        parallelism=par,
        hardware=hw,
        step_time_s=step_time,
        forward_time_s=forward_time,
        activations_per_gpu=act,
        required_write_bw=bw,
        lifespan_s=life,
        max_activations=max_act,
    )


#: Activation profile for large sequence-sharded deployments, where tensor
#: parallelism shards every per-layer activation rather than only the block
#: outputs. Total bytes per token-dim stay at 34.
FULLY_SHARDED_PROFILE = ActivationProfile(
    shared_bytes_per_token_dim=0.0,
    sharded_bytes_per_token_dim=34.0,
)

#: Large-cluster achieved-FLOPs fraction (communication and stragglers eat
#: more of peak than on a 2-GPU box).
LARGE_SCALE_EFFICIENCY = 0.35


def _scaled_hw() -> HardwareConfig:
    return replace(HardwareConfig(), gpu_flops_efficiency=LARGE_SCALE_EFFICIENCY)


def _gpt(name: str, h: int, layers: int, head_dim: int, micro_batch: int,
         pp: int, n_mb: int, dp: int) -> tuple[str, ModelConfig, ParallelismConfig]:
    model = ModelConfig(
        hidden_dim=h,
        num_layers=layers,
        num_heads=h // head_dim,
        head_dim=head_dim,
        family=DECODER_ONLY,
        seq_len=2048,
        micro_batch=micro_batch,
    )
    par = ParallelismConfig(
        tp_degree=8, pp_degree=pp, dp_degree=dp, num_microbatches=n_mb
    )
    return name, model, par


#: Billion-to-trillion scale decoder stacks at the parallelism layouts such
#: models actually train with; micro-batch sizes 8-32.
LARGE_MODEL_SWEEP: tuple[tuple[str, ModelConfig, ParallelismConfig], ...] = (
    _gpt("gpt-76b", 10240, 60, 128, 32, pp=4, n_mb=16, dp=32),
    _gpt("gpt-145b", 12288, 80, 128, 32, pp=8, n_mb=16, dp=24),
    _gpt("gpt-310b", 16384, 96, 128, 16, pp=16, n_mb=32, dp=15),
    _gpt("gpt-530b", 20480, 105, 128, 32, pp=35, n_mb=36, dp=9),
    _gpt("gpt-1t", 25600, 128, 160, 8, pp=64, n_mb=128, dp=6),
)


def large_model_projections() -> list[Projection]:
    """Projections over the builtin large-model sweep."""
    hw = _scaled_hw()
    return [
        build_projection(m, par, hw, FULLY_SHARDED_PROFILE, name=name)
        for name, m, par in LARGE_MODEL_SWEEP
    ]


# -- upscaling ----------------------------------------------------------------

@dataclass(frozen=True)
class GrowthStep:
    """One row of the parallelism growth policy."""

    gpus: int
    tp: int
    pp: int
    dp: int
    #: fraction of the base step time added by communication at this scale
    comm_overhead: float


#: Grow tensor parallelism to 8, then pipeline, then data parallel. Overhead
#: fractions are a documented calibration; what matters downstream is that
#: they never decrease as the system grows.
DEFAULT_GROWTH_POLICY: tuple[GrowthStep, ...] = (
    GrowthStep(1, 1, 1, 1, 0.0),
    GrowthStep(2, 2, 1, 1, 0.02),
    GrowthStep(4, 4, 1, 1, 0.05),
    GrowthStep(8, 8, 1, 1, 0.09),
    GrowthStep(16, 8, 2, 1, 0.16),
    GrowthStep(32, 8, 4, 1, 0.25),
    GrowthStep(64, 8, 8, 1, 0.36),
    GrowthStep(128, 8, 8, 2, 0.36),
    GrowthStep(256, 8, 8, 4, 0.36),
)


@dataclass(frozen=True)
class UpscalePoint:
    gpus: int
    tp: int
    pp: int
    dp: int
    step_time_s: float
    required_write_bw: float


def upscale_bandwidth_projection(
    base: Projection,
    gpu_counts: Iterable[int],
    policy: Sequence[GrowthStep] = DEFAULT_GROWTH_POLICY,
    zero_stage: int = 0,
) -> list[UpscalePoint]:
    """Per-GPU write bandwidth as the cluster grows under a policy.

    LLM scale-out is weak scaling: each GPU keeps roughly its activation
    share while communication stretches the step. Vanilla data-parallel
    growth adds no gradient-collective pressure inside the modeled window, so
    it leaves bandwidth untouched; sharded-optimizer modes add a small
    dp-driven term.
    """
    rows = {step.gpus: step for step in policy}
    out = []
    for gpus in gpu_counts:
        try:
            row = rows[gpus]
        except KeyError:
            raise ValueError(f"no growth policy row for {gpus} gpus") from None
        overhead = row.comm_overhead
        if zero_stage > 0 and row.dp > 1:
            overhead += 0.02 * math.log2(row.dp)
        step_time = base.step_time_s * (1.0 + overhead)
        bw = required_write_bandwidth(base.activations_per_gpu, step_time)
        out.append(
            UpscalePoint(
                gpus=gpus, tp=row.tp, pp=row.pp, dp=row.dp,
                step_time_s=step_time, required_write_bw=bw,
            )
        )
    return out


# -- canonical validation points ---------------------------------------------

#: Encoder fine-tuning shapes used by the `validate` subcommand: hidden dim,
#: layer count, and the reference per-GPU activation estimate (GB) each run
#: is expected to reproduce within 10%. See README for provenance of the
#: reference numbers.
CANONICAL_VALIDATION_POINTS: tuple[tuple[str, int, int, float], ...] = (
    ("bert-h8192-l4", 8192, 4, 11.13),
    ("bert-h12288-l3", 12288, 3, 12.60),
    ("bert-h16384-l2", 16384, 2, 11.50),
)


def canonical_validation_config(hidden_dim: int, layers: int) -> tuple[ModelConfig, ParallelismConfig]:
    model = ModelConfig.from_hidden(
        hidden_dim, layers, seq_len=1024, micro_batch=16
    )
    par = ParallelismConfig(tp_degree=2)
    return model, par


def flops_per_gpu_per_step(m: ModelConfig, par: ParallelismConfig) -> float:
    """Algorithmic step FLOPs landing on one GPU."""
    return flops_per_step(m, par) / (par.tp_degree * par.pp_degree)


__all__ = [
    "LayerCost",
    "Projection",
    "GrowthStep",
    "UpscalePoint",
    "COMPUTE_LAYER",
    "COMMUNICATION",
    "SECONDS_PER_YEAR",
    "transformer_layer_time",
    "required_write_bandwidth",
    "effective_endurance",
    "projected_lifespan",
    "projected_lifespan_years",
    "max_activations_per_gpu",
    "scaling_exponent_fit",
    "activation_scaling_sweep",
    "others_scaling_sweep",
    "checkpointed_scaling_sweep",
    "layer_costs",
    "build_projection",
    "large_model_projections",
    "upscale_bandwidth_projection",
    "DEFAULT_GROWTH_POLICY",
    "LARGE_MODEL_SWEEP",
    "FULLY_SHARDED_PROFILE",
    "CANONICAL_VALIDATION_POINTS",
    "canonical_validation_config",
    "param_count",
]
