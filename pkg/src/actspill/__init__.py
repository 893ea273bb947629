"""Activation spill modeling for LLM training.

A tensor-cache engine that offloads activations to throttled or file-backed
storage and reloads them ahead of the backward pass, plus closed-form
estimators for step time, required write bandwidth, SSD lifespan, and
scaling exponents, and a recompute/offload/keep strategy comparison.
"""

from .activations import (
    ActivationProfile,
    activations_per_step,
    checkpointed_activations,
    flops_per_step,
    forward_flops,
    param_count,
    per_layer_activation_bytes,
)
from .cache import MemoryLedger, OffloadPlan, TensorCache, TensorHandle
from .clock import VirtualClock, WallClock
from .config import (
    HardwareConfig,
    ModelConfig,
    ParallelismConfig,
    RunConfig,
    load_config_file,
    validate,
)
from .errors import (
    ActspillError,
    InvalidConfig,
    LostTensor,
    MalformedTrace,
    OutOfMemory,
    UnknownId,
)
from .harness import (
    ComparisonResult,
    EventTrace,
    StepMetrics,
    SyntheticModule,
    build_workload,
    compare_baseline,
    padded_vocab_size,
    peak_memory,
    plan_offload_budget,
    run_step,
    run_training,
    workload_compute_time,
)
from .perf import (
    CANONICAL_VALIDATION_POINTS,
    LayerCost,
    Projection,
    build_projection,
    canonical_validation_config,
    effective_endurance,
    flops_per_gpu_per_step,
    large_model_projections,
    max_activations_per_gpu,
    projected_lifespan,
    projected_lifespan_years,
    required_write_bandwidth,
    scaling_exponent_fit,
    transformer_layer_time,
    upscale_bandwidth_projection,
)
from .rok import (
    RokPoint,
    Strategy,
    evaluate_strategy,
    rok_curve,
    throughput_breakdown,
)
from .storage import FileBackend, ThrottleSpec, ThrottledBackend

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # config
    "ModelConfig", "ParallelismConfig", "HardwareConfig", "RunConfig",
    "load_config_file", "validate",
    # activation estimators
    "ActivationProfile", "param_count", "per_layer_activation_bytes",
    "activations_per_step", "checkpointed_activations", "flops_per_step",
    "forward_flops",
    # performance models
    "LayerCost", "transformer_layer_time", "required_write_bandwidth",
    "effective_endurance", "projected_lifespan", "projected_lifespan_years",
    "max_activations_per_gpu", "scaling_exponent_fit", "Projection",
    "build_projection", "large_model_projections",
    "upscale_bandwidth_projection", "flops_per_gpu_per_step",
    "canonical_validation_config", "CANONICAL_VALIDATION_POINTS",
    # engine
    "TensorCache", "TensorHandle", "OffloadPlan", "MemoryLedger",
    "VirtualClock", "WallClock",
    # storage
    "ThrottleSpec", "ThrottledBackend", "FileBackend",
    # harness
    "SyntheticModule", "EventTrace", "StepMetrics", "ComparisonResult",
    "build_workload", "plan_offload_budget", "workload_compute_time",
    "padded_vocab_size", "run_training", "run_step", "compare_baseline",
    "peak_memory",
    # strategy comparison
    "Strategy", "RokPoint", "evaluate_strategy", "rok_curve",
    "throughput_breakdown",
    # errors
    "ActspillError", "InvalidConfig", "OutOfMemory", "UnknownId",
    "LostTensor", "MalformedTrace",
]
