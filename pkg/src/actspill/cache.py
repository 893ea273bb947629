"""Activation lifecycle engine.

The cache sits between a training loop (real or synthetic) and a storage
backend. Operator outputs registered for backward reuse are packed: weights,
host tensors, and small tensors pass through untouched; everything else gets a
deduplicated id and either stays on the device or is written out through a
FIFO store pool while the device copy is held until the write is durable.
Backward replays ids through unpack, which serves from memory, forwards the
in-flight copy of a tensor still being stored, or waits on the FIFO load pool
that prefetches upcoming modules in reverse forward order.

Device-memory accounting is explicit and deterministic: bytes are charged at
pack, discharged when the owning scopes release them or when a durable write
retires an offloaded copy, and re-charged while a reload is in flight. The
same rules are applied independently by the trace-replay oracle in harness.py;
the two must agree event for event.
"""

from __future__ import annotations

import hashlib
import heapq
import math
import threading
import time as _time
from collections import deque
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Union

from .errors import (
    LostTensor,
    MismatchedScope,
    UnknownId,
    UnknownScope,
)

# Lifecycle states.
KEPT_IN_MEMORY = "KeptInMemory"
OFFLOADING = "Offloading"
OFFLOADED = "Offloaded"
LOADING = "Loading"
LOADED = "Loaded"
FORWARDED = "Forwarded"

# Trace event kinds (shared with the harness trace/replay).
COMPUTE_START = "ComputeStart"
COMPUTE_END = "ComputeEnd"
STORE_START = "StoreStart"
STORE_END = "StoreEnd"
LOAD_START = "LoadStart"
LOAD_END = "LoadEnd"

# Stage hint vocabulary.
FORWARD = "Forward"
BACKWARD = "Backward"
WEIGHT_UPDATE = "WeightUpdate"
BEGIN = "Begin"
END = "End"

DEVICE_GPU = "gpu"
DEVICE_HOST = "host"


class Buffer:
    """Underlying storage of one or more tensor handles (views)."""

    __slots__ = ("nbytes", "payload", "device", "shape", "tick")

    def __init__(self, nbytes: int, payload: Optional[bytes] = None,
                 device: str = DEVICE_GPU, shape: Optional[tuple] = None):
        self.nbytes = int(nbytes)
        self.payload = payload
        self.device = device
        self.shape = tuple(shape) if shape is not None else (self.nbytes,)
        self.tick: Optional[int] = None  # stamped by the cache on first sight


class TensorHandle:
    """A view over a Buffer with its own shape."""

    __slots__ = ("buffer", "shape")

    def __init__(self, buffer: Buffer, shape: Optional[tuple] = None):
        self.buffer = buffer
        self.shape = tuple(shape) if shape is not None else buffer.shape

    @property
    def nbytes(self) -> int:
        return self.buffer.nbytes

    @property
    def elems(self) -> int:
        return math.prod(self.shape)

    def transpose(self) -> "TensorHandle":
        return TensorHandle(self.buffer, tuple(reversed(self.shape)))


class TensorId(NamedTuple):
    storage_tick: int
    shape: tuple


PackedRef = Union[TensorHandle, TensorId]


@dataclass(frozen=True)
class ModuleScope:
    module_id: str
    microbatch: int
    forward_order: int


@dataclass(frozen=True)
class OffloadPlan:
    """What to offload and how far ahead to reload.

    budget_bytes caps offloaded bytes per step; the tensor that crosses the
    cap is still offloaded. prefetch_cap_bytes is a lookahead watermark: a
    queued load is issued only while the unconsumed bytes due to be consumed
    before it (resident or in flight) stay under the cap, so prefetching
    cannot rebuild the peak it just removed; None means no bound.
    min_tensor_elems passes small tensors through untouched.
    """

    budget_bytes: float
    keep_last_module: bool = True
    min_tensor_elems: int = 2 ** 20
    prefetch_cap_bytes: Optional[float] = None

    def __post_init__(self) -> None:
        if self.budget_bytes < 0:
            raise ValueError("budget_bytes must be >= 0")
        if self.min_tensor_elems < 0:
            raise ValueError("min_tensor_elems must be >= 0")
        if self.prefetch_cap_bytes is not None and self.prefetch_cap_bytes <= 0:
            raise ValueError("prefetch_cap_bytes must be positive or None")


class MemoryLedger:
    """Running device-byte total with a peak watermark."""

    def __init__(self) -> None:
        self.current = 0
        self.peak = 0

    def add(self, delta: int) -> None:
        self.current += delta
        if self.current > self.peak:
            self.peak = self.current

    def reset_peak(self) -> None:
        self.peak = self.current


class TensorRecord:
    """One tracked activation.

    The trace subject carries (step, microbatch, module, pack order) so the
    replay oracle can line tensor transfers up with the compute slices that
    produce and consume them.
    """

    __slots__ = (
        "id", "size", "state", "scopes", "pending_scopes", "storage_key",
        "microbatch", "module_id", "seq", "subject", "handle", "shape",
        "consumed", "released", "store_done", "store_ticket",
        "load_registered", "load_completion", "loaded_evt", "consume_pos",
    )

    def __init__(self, tid: TensorId, size: int, step: int, microbatch: int,
                 module_id: str, seq: int, scopes: set, handle: TensorHandle):
        self.id = tid
        self.size = size
        self.state = KEPT_IN_MEMORY
        self.scopes = frozenset(scopes)
        self.pending_scopes = set(scopes)
        self.storage_key: Optional[str] = None
        self.microbatch = microbatch
        self.module_id = module_id
        self.seq = seq
        self.subject = f"t:s{step}:mb{microbatch}:{module_id}:{seq}"
        self.handle = handle
        self.shape = handle.shape
        self.consumed = False
        self.released = False
        self.store_done = False
        self.store_ticket = None
        self.load_registered = False
        self.load_completion: Optional[float] = None
        self.loaded_evt: Optional[threading.Event] = None
        self.consume_pos: Optional[int] = None


class _MicrobatchState:
    __slots__ = ("forward_order", "module_packs", "consumption_order",
                 "consumption_front")

    def __init__(self) -> None:
        self.forward_order: list[str] = []          # modules by exit completion
        self.module_packs: dict[str, list] = {}     # module -> records, pack order
        # Expected backward consumption order (reverse forward order, reverse
        # pack order within a module), built at the first backward entry.
        self.consumption_order: Optional[list] = None
        self.consumption_front = 0


def _shape_hash(shape: tuple) -> str:
    return hashlib.blake2s(repr(shape).encode(), digest_size=4).hexdigest()


class TensorCache:
    """Offload/reload controller. One driver thread; workers only via backend.

    In virtual mode every store/load completion is a scheduled (time, seq)
    entry processed by sync(); in real mode the file backend's store worker
    and the cache's own load worker flip the same state under the lock.
    """

    def __init__(self, backend, clock, plan: OffloadPlan,
                 trace_sink: Optional[Callable] = None) -> None:
        self.backend = backend
        self.clock = clock
        self.plan = plan
        self.trace_sink = trace_sink
        self.ledger = MemoryLedger()
        self.virtual = bool(getattr(clock, "is_virtual", False))

        self._lock = threading.RLock()
        self._tick_counter = 0
        self._weight_ticks: set[int] = set()

        self._mb: dict[int, _MicrobatchState] = {}
        self._current_mb = 0
        self._records: dict[TensorId, TensorRecord] = {}
        self._key_generation: dict[TensorId, int] = {}

        self._forward_stack: list[str] = []
        self._backward_stack: list[str] = []
        self._in_backward = False
        self._forward_end_pending: Optional[tuple[int, str]] = None
        self._last_forward_module: dict[int, Optional[str]] = {}

        self._keep_marks: set[tuple[int, str]] = set()
        self._next_keep_marks: set[tuple[int, str]] = set()
        self._step_reset_armed = True
        self.step_index = 0

        self.offloaded_bytes_step = 0.0
        self.forwarded_count = 0
        self._step_keys: list[str] = []
        self._last_store_completion = 0.0

        # Virtual completion queue: (time, seq, kind, record)
        self._completions: list = []
        self._completion_seq = 0

        # Load pool: registration order, issued under the inventory cap.
        self._load_queue: deque[TensorRecord] = deque()
        self._real_load_queue: deque[TensorRecord] = deque()
        self._real_load_cv = threading.Condition(self._lock)
        self._load_worker: Optional[threading.Thread] = None
        self._closing = False
        self._worker_error: Optional[BaseException] = None
        if not self.virtual:
            self._load_worker = threading.Thread(
                target=self._load_loop, daemon=True
            )
            self._load_worker.start()

    # -- identity -------------------------------------------------------------

    def get_id(self, handle: TensorHandle) -> TensorId:
        """Stamp the underlying buffer on first sight; aliases share the tick."""
        with self._lock:
            buf = handle.buffer
            if buf.tick is None:
                buf.tick = self._tick_counter
                self._tick_counter += 1
            return TensorId(buf.tick, handle.shape)

    def register_weight(self, handle: TensorHandle) -> None:
        """Exclude this buffer from packing, under any view of it."""
        self.get_id(handle)
        with self._lock:
            self._weight_ticks.add(handle.buffer.tick)

    # -- hints ----------------------------------------------------------------

    def switch_microbatch(self, index: int) -> None:
        with self._lock:
            if self._forward_stack or self._backward_stack:
                raise MismatchedScope(
                    "switch_microbatch inside an open module scope"
                )
            self._current_mb = index
            self._mb.setdefault(index, _MicrobatchState())
            if self._forward_end_pending and self._forward_end_pending[0] != index:
                self._forward_end_pending = None

    def on_forward_module_enter(self, module_id: str) -> None:
        with self._lock:
            # Entering a forward scope mid-backward is the recomputation path
            # of checkpointing: scope opens normally, packs inside it keep.
            self._mb.setdefault(self._current_mb, _MicrobatchState())
            self._forward_stack.append(module_id)
            self._forward_end_pending = None

    def on_forward_module_exit(self, module_id: str) -> None:
        with self._lock:
            if not self._forward_stack or self._forward_stack[-1] != module_id:
                raise MismatchedScope(
                    f"forward exit {module_id!r}, stack {self._forward_stack!r}"
                )
            self._forward_stack.pop()
            state = self._mb[self._current_mb]
            state.forward_order.append(module_id)
            if not self._forward_stack:
                self._last_forward_module[self._current_mb] = module_id

    def on_backward_module_enter(self, module_id: str) -> None:
        """Open a backward scope and prefetch everything behind it.

        Load jobs for offloaded tensors of modules earlier in forward order
        are registered in reverse forward order (within a module, reverse
        pack order, matching consumption). Registration is idempotent;
        issuance is separate and capped, so re-entering re-sweeps records
        that have become durable since.
        """
        with self._lock:
            self._backward_stack.append(module_id)
            self._register_prefetch(self._current_mb, module_id)
            self._try_issue_loads()

    def on_backward_module_exit(self, module_id: str) -> None:
        with self._lock:
            if not self._backward_stack or self._backward_stack[-1] != module_id:
                raise MismatchedScope(
                    f"backward exit {module_id!r}, stack {self._backward_stack!r}"
                )
            self._backward_stack.pop()
            for record in list(self._records.values()):
                if record.released or record.microbatch != self._current_mb:
                    continue
                if module_id in record.pending_scopes:
                    record.pending_scopes.discard(module_id)
                    if not record.pending_scopes:
                        self._release(record)
            self._try_issue_loads()

    def stage_hint(self, kind: str, edge: str) -> None:
        with self._lock:
            if kind == FORWARD and edge == BEGIN:
                if self._step_reset_armed:
                    self._begin_step()
            elif kind == FORWARD and edge == END:
                last = self._last_forward_module.get(self._current_mb)
                if last is not None:
                    self._forward_end_pending = (self._current_mb, last)
            elif kind == BACKWARD and edge == BEGIN:
                self._in_backward = True
                if self._forward_end_pending is not None:
                    mb, module = self._forward_end_pending
                    if mb == self._current_mb:
                        self._next_keep_marks.add((mb, module))
                    self._forward_end_pending = None
            elif kind == BACKWARD and edge == END:
                self._in_backward = False
            elif kind == WEIGHT_UPDATE and edge == END:
                self._step_reset_armed = True

    def _begin_step(self) -> None:
        self._step_reset_armed = False
        self.step_index += 1
        self.offloaded_bytes_step = 0.0
        self.forwarded_count = 0
        self._keep_marks = set(self._next_keep_marks)
        self._next_keep_marks = set()
        self._forward_end_pending = None

    # -- pack / unpack ----------------------------------------------------------

    def pack(self, handle: TensorHandle) -> PackedRef:
        """Register an operator output for backward reuse.

        Pass-through for weights, host tensors, and tensors under the element
        threshold. Otherwise the tensor is recorded under the active scopes
        and either kept (budget reached, inside backward, or its module is
        marked keep-last) or enqueued on the store pool.
        """
        tid = self.get_id(handle)
        with self._lock:
            if handle.buffer.tick in self._weight_ticks:
                return handle
            if handle.buffer.device == DEVICE_HOST:
                return handle
            if handle.elems < self.plan.min_tensor_elems:
                return handle

            existing = self._records.get(tid)
            if existing is not None and not existing.released:
                # Alias of an already-tracked tensor; attach any new scopes
                # so each must release before the record can.
                if self._forward_stack:
                    new = set(self._forward_stack) - existing.scopes
                    if new:
                        existing.scopes = frozenset(existing.scopes | new)
                        existing.pending_scopes |= new
                return tid

            if self._forward_stack:
                scopes = set(self._forward_stack)
                module_id = self._forward_stack[-1]
            elif self._in_backward and self._backward_stack:
                scopes = {self._backward_stack[-1]}
                module_id = self._backward_stack[-1]
            else:
                raise UnknownScope(
                    "pack outside any module scope; module hints missing"
                )

            mb = self._current_mb
            state = self._mb.setdefault(mb, _MicrobatchState())
            packs = state.module_packs.setdefault(module_id, [])
            record = TensorRecord(
                tid, handle.nbytes, self.step_index, mb, module_id,
                len(packs), scopes, handle,
            )
            packs.append(record)
            self._records[tid] = record
            self.ledger.add(record.size)

            keep = (
                self._in_backward
                or (self.plan.keep_last_module and (mb, module_id) in self._keep_marks)
                or self.offloaded_bytes_step >= self.plan.budget_bytes
            )
            if not keep:
                self._offload(record)
            return tid

    def _storage_key(self, record: TensorRecord) -> str:
        gen = self._key_generation.get(record.id, 0)
        self._key_generation[record.id] = gen + 1
        base = (
            f"{record.microbatch}_{record.id.storage_tick}_"
            f"{_shape_hash(record.id.shape)}"
        )
        return base if gen == 0 else f"{base}_g{gen}"

    def _offload(self, record: TensorRecord) -> None:
        record.state = OFFLOADING
        record.storage_key = self._storage_key(record)
        self.offloaded_bytes_step += record.size
        self._step_keys.append(record.storage_key)
        now = self.clock.now()
        self._emit(now, STORE_START, record.subject, record.size)
        if self.virtual:
            ticket = self.backend.store(
                record.storage_key, record.handle.buffer.payload,
                nbytes=record.size,
            )
            record.store_ticket = ticket
            self._last_store_completion = max(
                self._last_store_completion, ticket.completion_time
            )
            self._push_completion(ticket.completion_time, "store", record)
        else:
            payload = record.handle.buffer.payload
            if payload is None:
                payload = bytes(record.size)
            record.store_ticket = self.backend.store(
                record.storage_key, payload,
                on_done=lambda ticket, r=record: self._on_real_store_done(r, ticket),
            )

    def unpack(self, ref: PackedRef) -> TensorHandle:
        """Resolve a packed reference for backward consumption.

        Loaded and kept tensors return immediately; a tensor whose store is
        still in flight is forwarded from the in-memory copy with zero
        backend reads; an offloaded tensor triggers (or waits on) its load.
        """
        if isinstance(ref, TensorHandle):
            return ref
        with self._lock:
            record = self._records.get(ref)
            if record is None:
                raise UnknownId(f"{ref} was never packed this step")
            if record.released:
                raise LostTensor(
                    f"{ref} was released before unpack; lifecycle bug"
                )
            if record.state in (KEPT_IN_MEMORY, LOADED, FORWARDED):
                return record.handle
            if record.state == OFFLOADING:
                record.state = FORWARDED
                self.forwarded_count += 1
                return record.handle
            if record.state == OFFLOADED:
                # Demand miss: issue now, bypassing the prefetch cap.
                self._issue_load(record)
            if record.state != LOADING:
                raise LostTensor(f"{ref} in unexpected state {record.state}")
            return self._wait_for_load(record)

    def consume(self, ref: PackedRef) -> None:
        """Mark a tensor consumed by the current backward slice.

        Releases the consuming module's claim immediately instead of waiting
        for the module-exit sweep, so memory steps down tensor by tensor
        through backward rather than module by module.
        """
        if isinstance(ref, TensorHandle):
            return
        with self._lock:
            record = self._records.get(ref)
            if record is None:
                raise UnknownId(repr(ref))
            if record.released:
                return
            record.consumed = True
            if self._backward_stack:
                record.pending_scopes.discard(self._backward_stack[-1])
            if not record.pending_scopes:
                self._release(record)
            self._try_issue_loads()

    # -- release & accounting ---------------------------------------------------

    def _release(self, record: TensorRecord) -> None:
        if record.released:
            return
        if record.state in (KEPT_IN_MEMORY, LOADED):
            self.ledger.add(-record.size)
            record.released = True
            record.handle = None
        elif record.state == FORWARDED:
            if record.store_done:
                self.ledger.add(-record.size)
                record.released = True
                record.handle = None
            else:
                # Device copy still feeds the in-flight write; the store
                # completion retires it.
                record.released = True
        elif record.state == OFFLOADED:
            record.released = True  # device bytes already retired
        else:
            # Offloading/Loading: release after the transfer settles.
            record.released = True

    # -- prefetch ---------------------------------------------------------------

    def _register_prefetch(self, mb: int, entered_module: str) -> None:
        state = self._mb.get(mb)
        if state is None:
            return
        order = state.forward_order
        if entered_module in order:
            horizon = order.index(entered_module) + 1
        else:
            horizon = len(order)
        if state.consumption_order is None:
            state.consumption_order = []
            state.consumption_front = 0
            for module_id in reversed(order):
                for record in reversed(state.module_packs.get(module_id, [])):
                    record.consume_pos = len(state.consumption_order)
                    state.consumption_order.append(record)
        for module_id in reversed(order[:horizon]):
            for record in reversed(state.module_packs.get(module_id, [])):
                if record.load_registered or record.released or record.consumed:
                    continue
                if record.state in (OFFLOADING, OFFLOADED):
                    record.load_registered = True
                    self._load_queue.append(record)

    def _unconsumed_ahead(self, record: TensorRecord) -> float:
        """Bytes still due to be consumed before this record is.

        Counts every live tensor earlier in the microbatch's consumption
        order, whether resident, forwarded, or already in flight; offloaded
        tensors cost nothing until their load is issued.
        """
        state = self._mb.get(record.microbatch)
        if state is None or state.consumption_order is None:
            return 0.0
        pos = record.consume_pos
        if pos is None:
            return 0.0
        order = state.consumption_order
        front = state.consumption_front
        while front < pos and (order[front].consumed or order[front].released):
            front += 1
        state.consumption_front = front
        ahead = 0.0
        for other in order[front:pos]:
            if other.consumed or other.released or other.state == OFFLOADED:
                continue
            ahead += other.size
        return ahead

    def _try_issue_loads(self) -> None:
        """Issue queued loads while the consumption watermark allows.

        The queue head blocks until durable (strict FIFO). The head is issued
        only when less than prefetch_cap_bytes of earlier-consumed data is
        still pending, so reloads land just ahead of the backward pass instead
        of piling on top of tensors that have yet to be consumed. A head next
        in line to be consumed always issues, so the cap cannot deadlock.
        """
        cap = self.plan.prefetch_cap_bytes
        while self._load_queue:
            record = self._load_queue[0]
            if record.released or record.consumed or record.state not in (
                OFFLOADING, OFFLOADED
            ):
                self._load_queue.popleft()
                continue
            if record.state == OFFLOADING:
                return  # not durable yet; keep order, retry at StoreEnd
            if cap is not None:
                ahead = self._unconsumed_ahead(record)
                if ahead > 0 and ahead >= cap:
                    return
            self._load_queue.popleft()
            self._issue_load(record)

    def _issue_load(self, record: TensorRecord) -> None:
        try:
            self._load_queue.remove(record)
        except ValueError:
            pass
        record.state = LOADING
        record.load_registered = True
        self.ledger.add(record.size)
        # LoadStart marks the ledger add, not the worker dequeue, so a
        # replayed trace charges reload residency at the same instant the
        # engine did.
        self._emit(self.clock.now(), LOAD_START, record.subject, record.size)
        if self.virtual:
            ticket = self.backend.read_request(record.storage_key)
            record.load_completion = ticket.completion_time
            self._push_completion(ticket.completion_time, "load", record)
        else:
            record.loaded_evt = threading.Event()
            self._real_load_queue.append(record)
            self._real_load_cv.notify()

    def _check_worker_error(self) -> None:
        if self._worker_error is not None:
            error = self._worker_error
            self._worker_error = None
            raise error

    def _wait_for_load(self, record: TensorRecord) -> TensorHandle:
        if self.virtual:
            self.clock.advance_to(record.load_completion)
            self.sync()
            return record.handle
        evt = record.loaded_evt
        self._lock.release()
        try:
            evt.wait()
        finally:
            self._lock.acquire()
        self._check_worker_error()
        return record.handle

    # -- completion machinery -----------------------------------------------------

    def _push_completion(self, time: float, kind: str, record: TensorRecord) -> None:
        heapq.heappush(
            self._completions, (time, self._completion_seq, kind, record)
        )
        self._completion_seq += 1

    def sync(self, up_to: Optional[float] = None) -> None:
        """Apply every virtual completion due at or before the clock (or up_to)."""
        if not self.virtual:
            return
        with self._lock:
            horizon = self.clock.now() if up_to is None else up_to
            while self._completions and self._completions[0][0] <= horizon:
                time, _, kind, record = heapq.heappop(self._completions)
                if kind == "store":
                    self._finish_store(record, time)
                else:
                    self._finish_load(record, time)

    def _finish_store(self, record: TensorRecord, time: float) -> None:
        self._emit(time, STORE_END, record.subject, record.size)
        record.store_done = True
        if record.state == OFFLOADING:
            record.state = OFFLOADED
            self.ledger.add(-record.size)
            record.handle = None
        elif record.state == FORWARDED:
            if record.consumed or record.released:
                self.ledger.add(-record.size)
                record.handle = None
        self._try_issue_loads()

    def _finish_load(self, record: TensorRecord, time: float,
                     payload: Optional[bytes] = None, fetched: bool = False) -> None:
        self._emit(time, LOAD_END, record.subject, record.size)
        if not fetched:
            payload = self.backend.load(record.storage_key)
        record.handle = TensorHandle(
            Buffer(record.size, payload, shape=record.shape)
        )
        record.handle.buffer.tick = record.id.storage_tick
        record.state = LOADED
        if record.released:
            # Released while in flight; retire immediately.
            self.ledger.add(-record.size)
            record.handle = None

    def _on_real_store_done(self, record: TensorRecord, ticket) -> None:
        with self._lock:
            if ticket.error is not None:
                self._worker_error = ticket.error
                return
            self._finish_store(record, self.clock.now())

    def _load_loop(self) -> None:
        while True:
            with self._lock:
                while not self._real_load_queue and not self._closing:
                    self._real_load_cv.wait()
                if self._closing and not self._real_load_queue:
                    return
                record = self._real_load_queue.popleft()
                key = record.storage_key
            try:
                payload = self.backend.load(key)
            except BaseException as exc:
                with self._lock:
                    self._worker_error = exc
                record.loaded_evt.set()
                continue
            with self._lock:
                self._finish_load(record, self.clock.now(), payload, fetched=True)
            record.loaded_evt.set()

    # -- step boundary -----------------------------------------------------------

    def last_store_completion(self) -> float:
        return self._last_store_completion

    def drain_stores(self) -> None:
        """Block (real) or fast-forward (virtual) until this step's writes land."""
        if self.virtual:
            self.clock.advance_to(self._last_store_completion)
            self.sync()
            return
        while True:
            with self._lock:
                self._check_worker_error()
                pending = [
                    r for r in self._records.values()
                    if r.store_ticket is not None and not r.store_done
                ]
            if not pending:
                return
            for record in pending:
                record.store_ticket.wait()
            # store_done flips in the on_done callback just after the ticket;
            # yield briefly so the worker can get there.
            _time.sleep(0.0005)

    def end_step(self, manifest_extra: Optional[dict] = None) -> None:
        """Drain writes, write the step manifest, and sweep this step's files."""
        self.drain_stores()
        with self._lock:
            self._check_worker_error()
            self.backend.write_step_manifest(
                self.step_index, manifest_extra
            )
            for key in self._step_keys:
                self.backend.delete(key)
            self._step_keys = []
            self._records = {}
            self._key_generation = {}
            self._mb = {}
            self._load_queue.clear()
            self._last_store_completion = self.clock.now()
            self._forward_end_pending = None
            self._last_forward_module = {}

    def close(self) -> None:
        if self._load_worker is not None:
            with self._lock:
                self._closing = True
                self._real_load_cv.notify_all()
            self._load_worker.join(timeout=30)
        self.backend.close()

    # -- reporting ---------------------------------------------------------------

    def record_state(self, ref: TensorId) -> str:
        with self._lock:
            record = self._records.get(ref)
            if record is None:
                raise UnknownId(repr(ref))
            return record.state

    def keep_marks(self) -> set:
        with self._lock:
            return set(self._keep_marks)

    def _emit(self, time: float, kind: str, subject: str, nbytes: int) -> None:
        if self.trace_sink is not None:
            self.trace_sink(time, kind, subject, nbytes)
