"""Synthetic training-step driver and trace tooling.

A workload is a list of SyntheticModule entries derived from the analytical
models, shrunk to desk scale with the compute:I/O ratio preserved. run_step
drives the cache exactly like a hooked training loop would: module enter/exit
hints, one pack per activation slice in forward, unpack+consume in reverse
order in backward, stage hints around every command.

The trace is the ground truth for memory claims. peak_memory() replays a
trace using only event arithmetic (no cache internals) and must reproduce the
engine's own ledger byte for byte; tests hold the two against each other.
"""

from __future__ import annotations

import csv
import math
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .activations import ActivationProfile, per_layer_activation_bytes
from .cache import (
    BACKWARD,
    BEGIN,
    COMPUTE_END,
    COMPUTE_START,
    END,
    FORWARD,
    LOAD_END,
    LOAD_START,
    STORE_END,
    STORE_START,
    WEIGHT_UPDATE,
    Buffer,
    OffloadPlan,
    TensorCache,
    TensorHandle,
)
from .clock import VirtualClock, WallClock
from .config import ENCODER_DECODER, HardwareConfig, ModelConfig, ParallelismConfig
from .errors import MalformedTrace
from .perf import LayerCost, layer_costs, transformer_layer_time
from .storage import FileBackend, ThrottleSpec, ThrottledBackend

EVENT_KINDS = (
    COMPUTE_START, COMPUTE_END, STORE_START, STORE_END, LOAD_START, LOAD_END,
)

_STARTS = {COMPUTE_START: COMPUTE_END, STORE_START: STORE_END, LOAD_START: LOAD_END}
_ENDS = {v: k for k, v in _STARTS.items()}

DEFAULT_SHRINK = 1000.0
DEFAULT_TENSORS_PER_MODULE = 10
#: Reload inventory allowance as a multiple of the largest module's bytes.
DEFAULT_PREFETCH_FACTOR = 1.3


@dataclass(frozen=True)
class Event:
    time: float
    kind: str
    subject: str
    nbytes: int


class EventTrace:
    """Ordered event log; append is thread-safe for real-clock workers."""

    def __init__(self) -> None:
        self.events: list[Event] = []
        self._lock = threading.Lock()

    def emit(self, time: float, kind: str, subject: str, nbytes: int) -> None:
        with self._lock:
            self.events.append(Event(time, kind, subject, int(nbytes)))

    def finalize(self) -> "EventTrace":
        # Real-clock workers may interleave appends; stable sort keeps the
        # append order of equal timestamps, which is already causal order in
        # virtual mode.
        self.events.sort(key=lambda e: e.time)
        return self

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["time_s", "event", "subject", "bytes"])
            for e in self.events:
                writer.writerow([repr(e.time), e.kind, e.subject, e.nbytes])

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)


@dataclass(frozen=True)
class SyntheticModule:
    """One timed layer: compute costs plus the activation slices it emits."""

    module_id: str
    forward_compute_time: float
    backward_compute_time: float
    activation_sizes: tuple[int, ...]

    @property
    def activation_bytes(self) -> int:
        return sum(self.activation_sizes)


@dataclass(frozen=True)
class StepMetrics:
    step_time: float
    peak_activation_bytes: int
    offloaded_bytes: float
    forwarded_count: int
    backend_reads: int
    backend_writes: int


@dataclass(frozen=True)
class ComparisonResult:
    step_time_ratio: float
    peak_reduction: float
    offload: StepMetrics
    baseline: StepMetrics


def _split_bytes(total: int, parts: int) -> tuple[int, ...]:
    base, rem = divmod(total, parts)
    return tuple(base + 1 for _ in range(rem)) + tuple(base for _ in range(parts - rem))


def padded_vocab_size(vocab_size: int, tp_degree: int) -> int:
    """Vocabulary padded so each tensor-parallel rank gets a 128-multiple."""
    quantum = 128 * tp_degree
    return math.ceil(vocab_size / quantum) * quantum


def build_workload(
    m: ModelConfig,
    par: ParallelismConfig,
    prof: ActivationProfile = ActivationProfile(),
    hw: HardwareConfig = HardwareConfig(),
    shrink: float = DEFAULT_SHRINK,
    tensors_per_module: int = DEFAULT_TENSORS_PER_MODULE,
    include_head: bool = True,
) -> list[SyntheticModule]:
    """One SyntheticModule per transformer layer on this GPU, plus the
    vocabulary head.

    Times and bytes are both divided by `shrink`, so compute:I/O ratios are
    untouched while suites run in seconds. Each layer's activations are split
    into equal slices packed one per forward sub-operation.

    The head module carries the fp32 logits (padded vocabulary, sharded over
    tensor parallelism). It is produced last and consumed first, so offloading
    it buys nothing; its residency is a real part of the peak that layer
    offloading cannot remove.
    """
    if shrink <= 0:
        raise ValueError("shrink must be positive")
    costs = layer_costs(m, par, prof)
    if not costs:
        return []
    fwd = transformer_layer_time(costs[:1], 0.0, hw)
    cross = m.family == ENCODER_DECODER and m.decoder_layers() > 0
    act = per_layer_activation_bytes(m, par, prof, cross_attention=cross)
    sizes = _split_bytes(int(round(act / shrink)), tensors_per_module)
    modules = [
        SyntheticModule(
            module_id=f"m{i}",
            forward_compute_time=fwd / shrink,
            backward_compute_time=2.0 * fwd / shrink,
            activation_sizes=sizes,
        )
        for i in range(len(costs))
    ]
    if include_head:
        tokens = m.seq_len * m.micro_batch
        vocab_shard = padded_vocab_size(m.vocab_size, par.tp_degree) // par.tp_degree
        head_flops = 2.0 * tokens * m.hidden_dim * vocab_shard
        head_bytes = tokens * vocab_shard * 4  # fp32 logits
        head_weight = m.hidden_dim * vocab_shard * m.bytes_per_element
        head_fwd = transformer_layer_time(
            [LayerCost(flops=head_flops, bytes_moved=head_weight + head_bytes)],
            0.0, hw,
        )
        modules.append(
            SyntheticModule(
                module_id="head",
                forward_compute_time=head_fwd / shrink,
                backward_compute_time=2.0 * head_fwd / shrink,
                activation_sizes=_split_bytes(
                    int(round(head_bytes / shrink)), tensors_per_module
                ),
            )
        )
    return modules


def workload_compute_time(workload: Sequence[SyntheticModule],
                          microbatches: int = 1) -> float:
    return microbatches * sum(
        mod.forward_compute_time + mod.backward_compute_time for mod in workload
    )


def plan_offload_budget(
    workload: Sequence[SyntheticModule],
    write_bw: float,
    microbatches: int = 1,
    keep_last_module: bool = True,
    shrink: float = DEFAULT_SHRINK,
    prefetch_factor: float = DEFAULT_PREFETCH_FACTOR,
) -> OffloadPlan:
    """Size the per-step offload budget for a workload.

    The budget is capped twice: structurally (the executing module and the one
    being prefetched stay resident, on top of the last module the cache pins
    by adjacency, clamped to half the pool for shallow stacks) and by what the
    write channel can retire within the forward pass. The element threshold
    scales with the workload's shrink so desk-scale tensors face the same test
    full-scale ones would.
    """
    if not workload:
        return OffloadPlan(budget_bytes=0.0, keep_last_module=keep_last_module)
    module_bytes = [mod.activation_bytes for mod in workload]
    if keep_last_module and len(module_bytes) > 1:
        pool = module_bytes[:-1]
    else:
        pool = list(module_bytes)
    keep_n = min(2, math.ceil(len(pool) / 2))
    structural = float(sum(pool) - keep_n * max(pool)) * microbatches
    forward_time = microbatches * sum(
        mod.forward_compute_time for mod in workload
    )
    bw_cap = write_bw * forward_time
    budget = max(0.0, min(structural, bw_cap))
    return OffloadPlan(
        budget_bytes=budget,
        keep_last_module=keep_last_module,
        min_tensor_elems=max(1, int(2 ** 20 / shrink)),
        prefetch_cap_bytes=prefetch_factor * max(module_bytes),
    )


class _StepDriver:
    """Runs the schedule against one cache instance."""

    def __init__(self, workload, plan, cache, clock, trace, payloads, seed,
                 bytes_per_element=2):
        self.workload = list(workload)
        self.plan = plan
        self.cache = cache
        self.clock = clock
        self.trace = trace
        self.payloads = payloads
        self.seed = seed
        self.p = bytes_per_element
        self.refs: dict = {}

    def _emit(self, kind, subject, nbytes):
        self.trace.emit(self.clock.now(), kind, subject, nbytes)

    def _tracked(self, size: int) -> bool:
        return size // self.p >= self.plan.min_tensor_elems

    def _payload(self, step, mb, mi, k, size) -> Optional[bytes]:
        if not self.payloads:
            return None
        rng = np.random.default_rng([self.seed, step, mb, mi, k])
        return rng.bytes(size)

    def forward_microbatch(self, step: int, mb: int) -> None:
        cache = self.cache
        cache.switch_microbatch(mb)
        cache.stage_hint(FORWARD, BEGIN)
        for mi, mod in enumerate(self.workload):
            cache.on_forward_module_enter(mod.module_id)
            slice_time = mod.forward_compute_time / max(1, len(mod.activation_sizes))
            for k, size in enumerate(mod.activation_sizes):
                subject = f"F:s{cache.step_index}:mb{mb}:{mod.module_id}:{k}"
                traced = size if self._tracked(size) else 0
                self._emit(COMPUTE_START, subject, traced)
                self.clock.advance(slice_time)
                cache.sync()
                self._emit(COMPUTE_END, subject, traced)
                handle = TensorHandle(Buffer(
                    size,
                    payload=self._payload(step, mb, mi, k, size),
                    shape=(size // self.p,),
                ))
                self.refs[(mb, mod.module_id, k)] = cache.pack(handle)
            cache.on_forward_module_exit(mod.module_id)
        cache.stage_hint(FORWARD, END)

    def backward_microbatch(self, mb: int) -> None:
        cache = self.cache
        cache.switch_microbatch(mb)
        cache.stage_hint(BACKWARD, BEGIN)
        for mod in reversed(self.workload):
            cache.on_backward_module_enter(mod.module_id)
            slice_time = mod.backward_compute_time / max(1, len(mod.activation_sizes))
            for k in reversed(range(len(mod.activation_sizes))):
                size = mod.activation_sizes[k]
                ref = self.refs[(mb, mod.module_id, k)]
                cache.unpack(ref)
                subject = f"B:s{cache.step_index}:mb{mb}:{mod.module_id}:{k}"
                traced = size if self._tracked(size) else 0
                self._emit(COMPUTE_START, subject, traced)
                self.clock.advance(slice_time)
                cache.sync()
                self._emit(COMPUTE_END, subject, traced)
                cache.consume(ref)
            cache.on_backward_module_exit(mod.module_id)
        cache.stage_hint(BACKWARD, END)


def _resolve_backend(clock_kind, clock, throttle, storage_root, capacity_bytes):
    if clock_kind == "virtual":
        return ThrottledBackend(clock, throttle or ThrottleSpec(), capacity_bytes)
    import os
    import tempfile
    root = storage_root or os.environ.get("ACTSPILL_STORAGE_ROOT") \
        or tempfile.mkdtemp(prefix="actspill-")
    return FileBackend(root, capacity_bytes)


def run_training(
    workload: Sequence[SyntheticModule],
    plan: OffloadPlan,
    clock: str = "virtual",
    microbatches: int = 1,
    *,
    steps: int = 1,
    schedule: str = "sequential",
    throttle: Optional[ThrottleSpec] = None,
    storage_root=None,
    capacity_bytes: Optional[float] = None,
    seed: int = 0,
    payloads: Optional[bool] = None,
) -> tuple[list[StepMetrics], EventTrace]:
    """Drive `steps` training steps and return per-step metrics plus the trace.

    schedule "sequential" runs every forward then every backward (reverse
    micro-batch order); "1f1b" alternates forward/backward per micro-batch as
    the last pipeline stage would. Virtual clock requires (and builds) a
    throttled backend; the real clock does file I/O with seeded payloads.
    """
    if schedule not in ("sequential", "1f1b"):
        raise ValueError(f"unknown schedule {schedule!r}")
    if clock not in ("virtual", "real"):
        raise ValueError(f"unknown clock {clock!r}")
    clk = VirtualClock() if clock == "virtual" else WallClock()
    if payloads is None:
        payloads = clock == "real"
    backend = _resolve_backend(clock, clk, throttle, storage_root, capacity_bytes)
    trace = EventTrace()
    cache = TensorCache(backend, clk, plan, trace.emit)
    driver = _StepDriver(workload, plan, cache, clk, trace, payloads, seed)
    metrics: list[StepMetrics] = []
    try:
        for step in range(steps):
            reads0, writes0 = backend.reads_total, backend.writes_total
            t0 = clk.now()
            cache.ledger.reset_peak()
            if schedule == "sequential":
                for mb in range(microbatches):
                    driver.forward_microbatch(step, mb)
                for mb in reversed(range(microbatches)):
                    driver.backward_microbatch(mb)
            else:
                for mb in range(microbatches):
                    driver.forward_microbatch(step, mb)
                    driver.backward_microbatch(mb)
            cache.stage_hint(WEIGHT_UPDATE, BEGIN)
            cache.stage_hint(WEIGHT_UPDATE, END)
            # Step completion includes draining this step's writes: the
            # overlap claim is about hiding I/O inside compute, so writes
            # hanging past backward must show up in the step time.
            cache.drain_stores()
            if cache.ledger.current != 0:
                raise AssertionError(
                    f"accounting leak: {cache.ledger.current} bytes still "
                    f"charged at end of step {step}"
                )
            metrics.append(StepMetrics(
                step_time=clk.now() - t0,
                peak_activation_bytes=cache.ledger.peak,
                offloaded_bytes=cache.offloaded_bytes_step,
                forwarded_count=cache.forwarded_count,
                backend_reads=backend.reads_total - reads0,
                backend_writes=backend.writes_total - writes0,
            ))
            cache.end_step()
            driver.refs.clear()
    finally:
        cache.close()
        backend.close()
    return metrics, trace.finalize()


def run_step(
    workload: Sequence[SyntheticModule],
    plan: OffloadPlan,
    clock: str = "virtual",
    microbatches: int = 1,
    **kwargs,
) -> tuple[StepMetrics, EventTrace]:
    """run_training, reporting the last step (after keep-last warmup)."""
    metrics, trace = run_training(workload, plan, clock, microbatches, **kwargs)
    return metrics[-1], trace


# -- trace replay --------------------------------------------------------------

class _TensorSpan:
    __slots__ = ("produce", "consume", "store_start", "store_end",
                 "load_start", "load_end", "nbytes")

    def __init__(self) -> None:
        self.produce = None
        self.consume = None
        self.store_start = None
        self.store_end = None
        self.load_start = None
        self.load_end = None
        self.nbytes = 0


def _check_pairing(events: Sequence[Event]) -> None:
    last_time = -math.inf
    open_pairs: dict = {}
    for idx, e in enumerate(events):
        if e.kind not in EVENT_KINDS:
            raise MalformedTrace(f"unknown event kind {e.kind!r} at index {idx}")
        if e.time < last_time:
            raise MalformedTrace(
                f"time regressed to {e.time} at index {idx}"
            )
        last_time = e.time
        if e.kind in _STARTS:
            open_pairs.setdefault((e.subject, e.kind), []).append(e)
        else:
            start_kind = _ENDS[e.kind]
            stack = open_pairs.get((e.subject, start_kind))
            if not stack:
                raise MalformedTrace(
                    f"{e.kind} without {start_kind} for {e.subject!r}"
                )
            start = stack.pop(0)
            if start.nbytes != e.nbytes:
                raise MalformedTrace(
                    f"byte mismatch in {e.subject!r}: {start.nbytes} != {e.nbytes}"
                )
    dangling = [key for key, stack in open_pairs.items() if stack]
    if dangling:
        raise MalformedTrace(f"unmatched starts: {dangling!r}")


def peak_memory(trace) -> int:
    """Independent peak recomputation from a trace.

    Residency is reconstructed per tensor purely from events: produced at its
    forward slice's ComputeEnd; a kept tensor survives to its backward
    slice's ComputeEnd; an offloaded one retires at StoreEnd and, if
    reloaded, is resident again from LoadStart to its consuming ComputeEnd; a
    forwarded one (store but no load) survives to whichever of StoreEnd and
    consumption comes later. Deltas are applied in trace order, so ties
    resolve exactly as the engine's ledger resolved them.
    """
    events = list(trace)
    if not events:
        return 0
    _check_pairing(events)

    spans: dict[str, _TensorSpan] = {}

    def span(coord: str) -> _TensorSpan:
        return spans.setdefault(coord, _TensorSpan())

    for idx, e in enumerate(events):
        if e.kind == COMPUTE_END and e.subject.startswith("F:") and e.nbytes > 0:
            s = span(e.subject[2:])
            if s.produce is None:
                s.produce = idx
                s.nbytes = e.nbytes
        elif e.kind == COMPUTE_END and e.subject.startswith("B:") and e.nbytes > 0:
            s = span(e.subject[2:])
            if s.consume is None:
                s.consume = idx
        elif e.subject.startswith("t:"):
            s = span(e.subject[2:])
            slot = {
                STORE_START: "store_start", STORE_END: "store_end",
                LOAD_START: "load_start", LOAD_END: "load_end",
            }.get(e.kind)
            if slot and getattr(s, slot) is None:
                setattr(s, slot, idx)

    deltas: dict[int, int] = {}

    def add(idx: Optional[int], amount: int) -> None:
        if idx is not None:
            deltas[idx] = deltas.get(idx, 0) + amount

    for coord, s in spans.items():
        if s.produce is None:
            if s.store_start is not None or s.load_start is not None:
                raise MalformedTrace(f"storage events for unproduced tensor {coord!r}")
            continue
        if s.load_start is not None and s.store_start is None:
            raise MalformedTrace(f"load without store for tensor {coord!r}")
        add(s.produce, s.nbytes)
        if s.store_start is None:
            add(s.consume, -s.nbytes)  # kept
        elif s.load_start is None:
            # Offloaded; possibly forwarded to its consumer while in flight.
            if s.consume is None:
                add(s.store_end, -s.nbytes)
            else:
                add(max(s.store_end, s.consume), -s.nbytes)
        else:
            add(s.store_end, -s.nbytes)
            add(s.load_start, s.nbytes)
            add(s.consume, -s.nbytes)

    running = 0
    peak = 0
    for idx in range(len(events)):
        running += deltas.get(idx, 0)
        if running > peak:
            peak = running
    return peak


def compare_baseline(
    workload: Sequence[SyntheticModule],
    plan: OffloadPlan,
    microbatches: int = 1,
    *,
    steps: int = 2,
    schedule: str = "sequential",
    throttle: Optional[ThrottleSpec] = None,
    seed: int = 0,
) -> ComparisonResult:
    """Offload run vs keep-everything baseline on the virtual clock.

    Both arms run `steps` steps (default 2: the first step is warmup while
    the keep-last rule is learned) and the last step of each is compared.
    """
    baseline_plan = OffloadPlan(
        budget_bytes=0.0,
        keep_last_module=False,
        min_tensor_elems=plan.min_tensor_elems,
        prefetch_cap_bytes=plan.prefetch_cap_bytes,
    )
    offload, _ = run_step(
        workload, plan, "virtual", microbatches,
        steps=steps, schedule=schedule, throttle=throttle, seed=seed,
    )
    baseline, _ = run_step(
        workload, baseline_plan, "virtual", microbatches,
        steps=steps, schedule=schedule, throttle=throttle, seed=seed,
    )
    ratio = offload.step_time / baseline.step_time if baseline.step_time > 0 else 1.0
    if baseline.peak_activation_bytes > 0:
        reduction = 1.0 - offload.peak_activation_bytes / baseline.peak_activation_bytes
    else:
        reduction = 0.0
    return ComparisonResult(
        step_time_ratio=ratio,
        peak_reduction=reduction,
        offload=offload,
        baseline=baseline,
    )
