"""Persistence targets for spilled tensors.

Two backends share one contract. ThrottledBackend is the simulation target:
payloads live in a dict and completion times come from bandwidth arithmetic
against a virtual clock, one channel per direction, FIFO. FileBackend is the
real target: one file per tensor under a root directory, written append-only
in chunks by a dedicated worker thread and fsynced before its ticket reports
Done, so load never observes partial data.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

from .errors import (
    BackendFull,
    DuplicateId,
    NotFound,
    NotYetDurable,
)

PENDING = "Pending"
DONE = "Done"
FAILED = "Failed"

_CHUNK = 4 << 20


@dataclass(frozen=True)
class ThrottleSpec:
    """Simulated device speeds, loaded from the [storage] config section."""

    write_bw: float = 20e9
    read_bw: float = 20e9
    fixed_latency: float = 0.0

    def __post_init__(self) -> None:
        if self.write_bw <= 0 or self.read_bw <= 0:
            raise ValueError("throttle bandwidths must be positive")
        if self.fixed_latency < 0:
            raise ValueError("fixed_latency must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "ThrottleSpec":
        return cls(**raw) if raw else cls()


class VirtualTicket:
    """Completion is a scheduled time; state follows the clock."""

    def __init__(self, key, enqueue_time: float, completion_time: float, clock):
        self.id = key
        self.enqueue_time = enqueue_time
        self.completion_time = completion_time
        self._clock = clock

    @property
    def state(self) -> str:
        return DONE if self._clock.now() >= self.completion_time else PENDING


class ThreadTicket:
    """Completion is flipped by a worker thread."""

    def __init__(self, key, enqueue_time: float):
        self.id = key
        self.enqueue_time = enqueue_time
        self.completion_time: Optional[float] = None
        self.error: Optional[BaseException] = None
        self._done = threading.Event()

    @property
    def state(self) -> str:
        if not self._done.is_set():
            return PENDING
        return FAILED if self.error is not None else DONE

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    def _finish(self, completion_time: float, error: Optional[BaseException] = None):
        self.completion_time = completion_time
        self.error = error
        self._done.set()


class ThrottledBackend:
    """RAM-backed store with modeled transfer times.

    Jobs on each channel complete in enqueue order: a job starts when the
    channel frees up, occupies it for size/bandwidth, and reports Done a
    fixed latency later. With the write channel pointed at host RAM speeds
    this doubles as the CPU-offload target.
    """

    def __init__(self, clock, spec: ThrottleSpec = ThrottleSpec(),
                 capacity_bytes: Optional[float] = None) -> None:
        self.clock = clock
        self.spec = spec
        self.capacity_bytes = capacity_bytes
        self._data: dict = {}
        self._sizes: dict = {}
        self._store_tickets: dict = {}
        self._write_free = 0.0
        self._read_free = 0.0
        self.bytes_held = 0
        self.writes_total = 0
        self.reads_total = 0
        self.bytes_written = 0
        self.read_counts: dict = {}
        #: (key, enqueue_time, completion_time) in submission order, per pool
        self.store_log: list = []
        self.load_log: list = []

    def _schedule(self, free_attr: str, nbytes: int, bw: float) -> tuple[float, float]:
        now = self.clock.now()
        start = max(now, getattr(self, free_attr))
        busy_until = start + nbytes / bw
        setattr(self, free_attr, busy_until)
        return now, busy_until + self.spec.fixed_latency

    def store(self, key, payload: Optional[bytes] = None,
              nbytes: Optional[int] = None) -> VirtualTicket:
        if key in self._store_tickets:
            raise DuplicateId(f"{key!r} already stored")
        if nbytes is None:
            if payload is None:
                raise ValueError("need payload or nbytes")
            nbytes = len(payload)
        if self.capacity_bytes is not None and self.bytes_held + nbytes > self.capacity_bytes:
            raise BackendFull(
                f"{self.bytes_held + nbytes} > capacity {self.capacity_bytes}"
            )
        enqueue, completion = self._schedule("_write_free", nbytes, self.spec.write_bw)
        ticket = VirtualTicket(key, enqueue, completion, self.clock)
        self._store_tickets[key] = ticket
        self._data[key] = payload
        self._sizes[key] = nbytes
        self.bytes_held += nbytes
        self.writes_total += 1
        self.bytes_written += nbytes
        self.store_log.append((key, enqueue, completion))
        return ticket

    def _durable(self, key) -> VirtualTicket:
        try:
            ticket = self._store_tickets[key]
        except KeyError:
            raise NotFound(repr(key)) from None
        if ticket.state != DONE:
            raise NotYetDurable(f"{key!r} store completes at t={ticket.completion_time}")
        return ticket

    def read_request(self, key) -> VirtualTicket:
        """Schedule a load on the read channel; payload via load() once Done."""
        self._durable(key)
        enqueue, completion = self._schedule("_read_free", self._sizes[key], self.spec.read_bw)
        ticket = VirtualTicket(key, enqueue, completion, self.clock)
        self.load_log.append((key, enqueue, completion))
        return ticket

    def load(self, key) -> Optional[bytes]:
        self._durable(key)
        self.reads_total += 1
        self.read_counts[key] = self.read_counts.get(key, 0) + 1
        return self._data[key]

    def delete(self, key) -> None:
        self._durable(key)
        del self._store_tickets[key]
        del self._data[key]
        self.bytes_held -= self._sizes.pop(key)

    def keys(self) -> list:
        return list(self._store_tickets)

    def write_step_manifest(self, step_index: int, extra: Optional[dict] = None):
        return None  # nothing on disk to inspect

    def close(self) -> None:
        pass


class FileBackend:
    """One file per tensor under `root`, written by a single worker thread.

    The worker preserves submission order (plain FIFO queue), writes in
    chunks recording (offset, length) per call, fsyncs, then marks the ticket
    Done, so durability strictly precedes visibility. posix_fadvise(DONTNEED)
    drops written/read pages from the OS cache where available so repeated
    loads exercise storage rather than RAM; platforms without it just skip
    the hint.
    """

    def __init__(self, root, capacity_bytes: Optional[float] = None,
                 drop_page_cache: bool = True) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.capacity_bytes = capacity_bytes
        self.drop_page_cache = drop_page_cache and hasattr(os, "posix_fadvise")
        self._t0 = time.monotonic()
        self._lock = threading.Lock()
        self._store_tickets: dict = {}
        self._sizes: dict = {}
        self.bytes_held = 0
        self.writes_total = 0
        self.reads_total = 0
        self.bytes_written = 0
        self.read_counts: dict = {}
        #: key -> list of (offset, length) in the order write() was called
        self.write_pattern: dict = {}
        self._queue: queue.Queue = queue.Queue()
        self._worker = threading.Thread(target=self._store_loop, daemon=True)
        self._worker.start()

    def _now(self) -> float:
        return time.monotonic() - self._t0

    def _path(self, key) -> Path:
        return self.root / f"{key}.bin"

    def store(self, key, payload: bytes,
              on_done: Optional[Callable] = None) -> ThreadTicket:
        with self._lock:
            if key in self._store_tickets:
                raise DuplicateId(f"{key!r} already stored")
            nbytes = len(payload)
            if self.capacity_bytes is not None and \
                    self.bytes_held + nbytes > self.capacity_bytes:
                raise BackendFull(
                    f"{self.bytes_held + nbytes} > capacity {self.capacity_bytes}"
                )
            ticket = ThreadTicket(key, self._now())
            self._store_tickets[key] = ticket
            self._sizes[key] = nbytes
            self.bytes_held += nbytes
            self.writes_total += 1
            self.bytes_written += nbytes
        self._queue.put((key, payload, ticket, on_done))
        return ticket

    def _store_loop(self) -> None:
        while True:
            item = self._queue.get()
            if item is None:
                return
            key, payload, ticket, on_done = item
            error = None
            try:
                self._write_file(key, payload)
            except BaseException as exc:  # surfaced via ticket state
                error = exc
            ticket._finish(self._now(), error)
            if on_done is not None:
                on_done(ticket)

    def _write_file(self, key, payload: bytes) -> None:
        pattern = self.write_pattern.setdefault(key, [])
        fd = os.open(self._path(key), os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            offset = 0
            view = memoryview(payload)
            while offset < len(payload):
                chunk = view[offset:offset + _CHUNK]
                written = os.write(fd, chunk)
                pattern.append((offset, written))
                offset += written
            os.fsync(fd)
            if self.drop_page_cache:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
        finally:
            os.close(fd)

    def _durable(self, key) -> ThreadTicket:
        with self._lock:
            try:
                ticket = self._store_tickets[key]
            except KeyError:
                raise NotFound(repr(key)) from None
        state = ticket.state
        if state == PENDING:
            raise NotYetDurable(repr(key))
        if state == FAILED:
            raise ticket.error
        return ticket

    def load(self, key) -> bytes:
        self._durable(key)
        fd = os.open(self._path(key), os.O_RDONLY)
        try:
            parts = []
            while True:
                part = os.read(fd, _CHUNK)
                if not part:
                    break
                parts.append(part)
            if self.drop_page_cache:
                os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_DONTNEED)
        finally:
            os.close(fd)
        with self._lock:
            self.reads_total += 1
            self.read_counts[key] = self.read_counts.get(key, 0) + 1
        return b"".join(parts)

    def delete(self, key) -> None:
        self._durable(key)
        with self._lock:
            del self._store_tickets[key]
            self.bytes_held -= self._sizes.pop(key)
        os.unlink(self._path(key))

    def keys(self) -> list:
        with self._lock:
            return list(self._store_tickets)

    def write_step_manifest(self, step_index: int, extra: Optional[dict] = None) -> Path:
        with self._lock:
            entries = {str(k): self._sizes[k] for k in self._store_tickets}
        doc = {
            "step": step_index,
            "tensors": entries,
            "bytes_held": sum(entries.values()),
            "written_at": self._now(),
        }
        if extra:
            doc.update(extra)
        path = self.root / f"manifest_step{step_index}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path

    def close(self) -> None:
        if self._worker.is_alive():
            self._queue.put(None)
            self._worker.join(timeout=30)
