"""Strategy comparison: recompute, offload, or keep activations resident.

Each (strategy, batch) pair maps to one point of peak activation bytes vs
model throughput. Throughput always divides the same algorithmic FLOPs by the
step time, so recomputation shows up as lost throughput rather than extra
work, and an offload run that hides its transfers matches the keep-resident
throughput exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

from .activations import ActivationProfile, checkpointed_activations, param_count
from .cache import OffloadPlan
from .config import HardwareConfig, ModelConfig, ParallelismConfig
from .errors import OutOfMemory
from .harness import SyntheticModule, build_workload, run_step, workload_compute_time
from .perf import flops_per_gpu_per_step, required_write_bandwidth
from .storage import ThrottleSpec

KEEP = "keep"
RECOMPUTE = "recompute-layerwise"
OFFLOAD = "offload"

_KINDS = (KEEP, RECOMPUTE, OFFLOAD)

#: headroom multiplier when sizing the simulated store to a workload
OFFLOAD_BW_HEADROOM = 2.0


@dataclass(frozen=True)
class Strategy:
    """What happens to activations between forward and backward.

    ``plan`` overrides the offload plan and is only meaningful for the
    offload strategy; left unset, the strategy offloads everything the
    element threshold admits.
    """

    kind: str
    plan: Optional[OffloadPlan] = None

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise ValueError(f"strategy kind must be one of {_KINDS}, got {self.kind!r}")
        if self.plan is not None and self.kind != OFFLOAD:
            raise ValueError(f"only the {OFFLOAD!r} strategy takes a plan")


DEFAULT_STRATEGIES = (Strategy(KEEP), Strategy(RECOMPUTE), Strategy(OFFLOAD))


@dataclass(frozen=True)
class RokPoint:
    strategy: Strategy
    batch_size: int
    peak_bytes: float
    model_throughput: float  # algorithmic FLOP/s per GPU
    step_time: float


def weight_update_time(m: ModelConfig, par: ParallelismConfig,
                       hw: HardwareConfig) -> float:
    """Fixed per-step cost of touching the weights.

    Read weights, read gradients, write weights: three passes over this GPU's
    shard at memory bandwidth. A calibration knob, not a measurement.
    """
    shard = param_count(m) * m.bytes_per_element / (par.tp_degree * par.pp_degree)
    return 3.0 * shard / hw.gpu_mem_bw


def device_activation_budget(m: ModelConfig, par: ParallelismConfig,
                             hw: HardwareConfig) -> float:
    """Bytes left for activations once this GPU's weight shard is resident.

    Gradients and optimizer state are assumed sharded or host-resident, so
    only the element-width weight copy is charged against capacity.
    """
    shard = param_count(m) * m.bytes_per_element / (par.tp_degree * par.pp_degree)
    return hw.gpu_mem_capacity - shard


def offload_everything_plan(workload: Sequence[SyntheticModule],
                            microbatches: int = 1) -> OffloadPlan:
    """Budget covering every tracked tensor, head included.

    The head's logits forward from the in-flight write with zero reads, so
    including them costs writes but never a reload stall.
    """
    total = float(sum(mod.activation_bytes for mod in workload)) * microbatches
    biggest = max((mod.activation_bytes for mod in workload), default=0)
    return OffloadPlan(
        budget_bytes=total,
        keep_last_module=False,
        min_tensor_elems=1,
        prefetch_cap_bytes=1.3 * biggest if biggest else None,
    )


def _offload_point(workload: Sequence[SyntheticModule],
                   plan: Optional[OffloadPlan],
                   microbatches: int) -> tuple[float, float]:
    """Peak and fwd+bwd time of an offload run, store sized to the workload."""
    if plan is None:
        plan = offload_everything_plan(workload, microbatches)
    compute = workload_compute_time(workload, microbatches)
    offloadable = min(
        plan.budget_bytes,
        float(sum(mod.activation_bytes for mod in workload)) * microbatches,
    )
    # Forward occupies roughly half the step; provision the simulated store
    # so transfers hide behind compute, as the upscaling model prescribes.
    bw = OFFLOAD_BW_HEADROOM * max(
        required_write_bandwidth(offloadable, compute), 1.0
    )
    metrics, _ = run_step(
        workload, plan, "virtual", microbatches,
        throttle=ThrottleSpec(write_bw=bw, read_bw=bw),
    )
    return float(metrics.peak_activation_bytes), metrics.step_time


def evaluate_strategy(
    m: ModelConfig,
    par: ParallelismConfig,
    prof: ActivationProfile,
    hw: HardwareConfig,
    strategy: Strategy,
    batch: int,
) -> RokPoint:
    """One point of the strategy/batch grid.

    Keep and recompute are closed-form over the synthetic workload; offload
    runs the virtual-clock engine. All three share the weight-update fixed
    cost and the algorithmic-FLOPs numerator. Raises OutOfMemory when the
    strategy's peak exceeds what the device can spare for activations.
    """
    if batch < 1:
        raise ValueError(f"batch must be >= 1, got {batch}")
    m_b = replace(m, micro_batch=batch)
    workload = build_workload(m_b, par, prof, hw, shrink=1.0)
    mbs = par.num_microbatches
    compute = workload_compute_time(workload, mbs)
    fixed = weight_update_time(m_b, par, hw)
    head_bytes = workload[-1].activation_bytes if workload else 0

    if strategy.kind == KEEP:
        peak = float(sum(mod.activation_bytes for mod in workload)) * mbs
        step_time = compute + fixed
    elif strategy.kind == RECOMPUTE:
        # Layer inputs plus one live layer, plus the head logits that
        # checkpointing cannot avoid materializing for the loss backward.
        peak = checkpointed_activations(m_b, par, prof).bytes + head_bytes
        recompute_time = mbs * sum(
            mod.forward_compute_time for mod in workload[:-1]
        )
        step_time = compute + recompute_time + fixed
    else:
        peak, engine_time = _offload_point(workload, strategy.plan, mbs)
        step_time = engine_time + fixed

    budget = device_activation_budget(m_b, par, hw)
    if peak > budget:
        raise OutOfMemory(
            f"{strategy.kind} at batch {batch}: peak {peak / 1e9:.2f} GB "
            f"exceeds the {budget / 1e9:.2f} GB activation budget"
        )
    flops = flops_per_gpu_per_step(m_b, par)
    return RokPoint(
        strategy=strategy,
        batch_size=batch,
        peak_bytes=peak,
        model_throughput=flops / step_time,
        step_time=step_time,
    )


def rok_curve(
    m: ModelConfig,
    par: ParallelismConfig,
    prof: ActivationProfile,
    hw: HardwareConfig,
    batches: Sequence[int],
    strategies: Sequence[Strategy] = DEFAULT_STRATEGIES,
    notes: Optional[list] = None,
) -> list[RokPoint]:
    """Evaluate strategies x batches, skipping points that do not fit.

    Skipped points append a human-readable reason to ``notes`` when given.
    """
    if not batches:
        raise ValueError("need at least one batch size")
    points: list[RokPoint] = []
    for strategy in strategies:
        for batch in batches:
            try:
                points.append(evaluate_strategy(m, par, prof, hw, strategy, batch))
            except OutOfMemory as exc:
                if notes is not None:
                    notes.append(str(exc))
    return points


@dataclass(frozen=True)
class ThroughputBreakdown:
    """Step time split as t(b) = variable_per_sample * b + fixed_per_step."""

    variable_per_sample: float
    fixed_per_step: float
    #: per-sample time recovered by amortizing the fixed cost over the
    #: larger batch: fixed * (1/b_small - 1/b_large)
    fixed_saving_per_sample: float
    #: fixed cost as a fraction of each step
    fixed_share_small: float
    fixed_share_large: float


def throughput_breakdown(point_small_batch: RokPoint,
                         point_large_batch: RokPoint) -> ThroughputBreakdown:
    """Attribute the per-sample speedup between two batches of one strategy.

    Fits the two (batch, step_time) observations to a linear cost model; the
    per-sample term is batch-invariant, so everything a bigger batch saves is
    the fixed per-step cost spread over more samples.
    """
    b1, t1 = point_small_batch.batch_size, point_small_batch.step_time
    b2, t2 = point_large_batch.batch_size, point_large_batch.step_time
    if b1 == b2:
        raise ValueError("breakdown needs two distinct batch sizes")
    if b1 > b2:
        b1, t1, b2, t2 = b2, t2, b1, t1
    variable = (t2 - t1) / (b2 - b1)
    fixed = t1 - variable * b1
    saving = fixed * (1.0 / b1 - 1.0 / b2)
    return ThroughputBreakdown(
        variable_per_sample=variable,
        fixed_per_step=fixed,
        fixed_saving_per_sample=saving,
        fixed_share_small=fixed / t1 if t1 else 0.0,
        fixed_share_large=fixed / t2 if t2 else 0.0,
    )


__all__ = [
    "KEEP",
    "RECOMPUTE",
    "OFFLOAD",
    "Strategy",
    "RokPoint",
    "ThroughputBreakdown",
    "DEFAULT_STRATEGIES",
    "weight_update_time",
    "device_activation_budget",
    "offload_everything_plan",
    "evaluate_strategy",
    "rok_curve",
    "throughput_breakdown",
]
