import os
import re

import pytest
from hypothesis import given, settings, strategies as st

from actspill.cache import (
    BACKWARD,
    BEGIN,
    DEVICE_HOST,
    END,
    FORWARD,
    FORWARDED,
    KEPT_IN_MEMORY,
    LOAD_START,
    LOADED,
    LOADING,
    OFFLOADED,
    OFFLOADING,
    STORE_END,
    STORE_START,
    WEIGHT_UPDATE,
    Buffer,
    MemoryLedger,
    OffloadPlan,
    TensorCache,
    TensorHandle,
    TensorId,
)
from actspill.clock import VirtualClock, WallClock
from actspill.errors import (
    LostTensor,
    MismatchedScope,
    UnknownId,
    UnknownScope,
)
from actspill.storage import FileBackend, ThrottleSpec, ThrottledBackend


def make_cache(budget=1e18, keep_last=False, min_elems=1, cap=None,
               write_bw=20e9, read_bw=20e9):
    clock = VirtualClock()
    backend = ThrottledBackend(
        clock, ThrottleSpec(write_bw=write_bw, read_bw=read_bw)
    )
    trace = []
    plan = OffloadPlan(
        budget_bytes=budget,
        keep_last_module=keep_last,
        min_tensor_elems=min_elems,
        prefetch_cap_bytes=cap,
    )
    cache = TensorCache(
        backend, clock, plan, trace_sink=lambda *event: trace.append(event)
    )
    return clock, backend, cache, trace


def pack_in(cache, module_id, sizes):
    cache.on_forward_module_enter(module_id)
    refs = [cache.pack(TensorHandle(Buffer(n))) for n in sizes]
    cache.on_forward_module_exit(module_id)
    return refs


def drain(clock, cache, seconds=10.0):
    clock.advance(seconds)
    cache.sync()


def key_tick(key: str) -> int:
    return int(key.split("_")[1])


# -- identity -----------------------------------------------------------------

def test_ids_alias_through_views():
    _clock, _backend, cache, _trace = make_cache()
    buf = Buffer(1024, shape=(16, 64))
    a = TensorHandle(buf)
    b = TensorHandle(buf, shape=(64, 16))
    id_a, id_b = cache.get_id(a), cache.get_id(b)
    assert id_a.storage_tick == id_b.storage_tick
    assert id_a != id_b  # same buffer, different view shape
    assert cache.get_id(a) == id_a  # stable across calls


def test_ids_distinct_across_buffers():
    _clock, _backend, cache, _trace = make_cache()
    n = 10_000
    ids = {cache.get_id(TensorHandle(Buffer(8))) for _ in range(n)}
    assert len(ids) == n
    ticks = sorted(i.storage_tick for i in ids)
    assert ticks == list(range(n))


def test_transpose_shares_buffer():
    handle = TensorHandle(Buffer(24, shape=(2, 3)))
    flipped = handle.transpose()
    assert flipped.shape == (3, 2)
    assert flipped.buffer is handle.buffer
    assert flipped.elems == handle.elems == 6


# -- pack pass-throughs ---------------------------------------------------------

def test_weights_pass_through_any_view():
    _clock, backend, cache, _trace = make_cache()
    weight = TensorHandle(Buffer(4096, shape=(64, 64)))
    cache.register_weight(weight)
    cache.on_forward_module_enter("m1")
    assert cache.pack(weight) is weight
    view = weight.transpose()
    assert cache.pack(view) is view
    cache.on_forward_module_exit("m1")
    assert backend.writes_total == 0
    assert cache.ledger.current == 0


def test_host_tensors_pass_through():
    _clock, _backend, cache, _trace = make_cache()
    host = TensorHandle(Buffer(4096, device=DEVICE_HOST))
    cache.on_forward_module_enter("m1")
    assert cache.pack(host) is host
    cache.on_forward_module_exit("m1")
    assert cache.ledger.current == 0


def test_small_tensors_pass_through():
    _clock, _backend, cache, _trace = make_cache(min_elems=100)
    small = TensorHandle(Buffer(99))
    cache.on_forward_module_enter("m1")
    assert cache.pack(small) is small
    big = TensorHandle(Buffer(100))
    assert isinstance(cache.pack(big), TensorId)
    cache.on_forward_module_exit("m1")


def test_pack_outside_scope_rejected():
    _clock, _backend, cache, _trace = make_cache()
    with pytest.raises(UnknownScope):
        cache.pack(TensorHandle(Buffer(1024)))


def test_duplicate_pack_is_free():
    _clock, _backend, cache, _trace = make_cache(budget=0.0)
    handle = TensorHandle(Buffer(512))
    cache.on_forward_module_enter("m1")
    ref = cache.pack(handle)
    assert cache.pack(handle) == ref
    cache.on_forward_module_exit("m1")
    assert cache.ledger.current == 512


# -- budget -------------------------------------------------------------------

def test_budget_zero_keeps_everything():
    _clock, backend, cache, _trace = make_cache(budget=0.0)
    refs = pack_in(cache, "m1", [100, 200, 300])
    assert backend.writes_total == 0
    assert cache.ledger.current == 600
    assert all(cache.record_state(r) == KEPT_IN_MEMORY for r in refs)


@given(
    sizes=st.lists(st.integers(1, 50), min_size=1, max_size=20),
    budget=st.integers(0, 400),
)
@settings(max_examples=60)
def test_budget_overshoot_bounded_by_one_tensor(sizes, budget):
    _clock, _backend, cache, _trace = make_cache(budget=float(budget))
    pack_in(cache, "m1", sizes)
    offloaded = cache.offloaded_bytes_step
    total = sum(sizes)
    if total <= budget:
        assert offloaded == total
    else:
        assert budget <= offloaded < budget + max(sizes)


def test_budget_is_per_step_across_microbatches():
    _clock, _backend, cache, _trace = make_cache(budget=300.0)
    pack_in(cache, "m1", [300])
    cache.switch_microbatch(1)
    refs = pack_in(cache, "m1", [300])
    assert cache.record_state(refs[0]) == KEPT_IN_MEMORY
    assert cache.offloaded_bytes_step == 300.0


def test_pack_inside_backward_keeps():
    _clock, _backend, cache, _trace = make_cache()
    pack_in(cache, "m1", [100])
    cache.stage_hint(BACKWARD, BEGIN)
    cache.on_backward_module_enter("m1")
    ref = cache.pack(TensorHandle(Buffer(4096)))
    assert cache.record_state(ref) == KEPT_IN_MEMORY
    cache.consume(ref)
    cache.on_backward_module_exit("m1")
    cache.stage_hint(BACKWARD, END)


# -- keep-last ------------------------------------------------------------------

def run_one_step(cache, clock):
    cache.stage_hint(FORWARD, BEGIN)
    refs1 = pack_in(cache, "m1", [100])
    refs2 = pack_in(cache, "m2", [100])
    cache.stage_hint(FORWARD, END)
    cache.stage_hint(BACKWARD, BEGIN)
    for module, refs in (("m2", refs2), ("m1", refs1)):
        cache.on_backward_module_enter(module)
        for ref in refs:
            cache.unpack(ref)
            cache.consume(ref)
        cache.on_backward_module_exit(module)
    cache.stage_hint(BACKWARD, END)
    cache.stage_hint(WEIGHT_UPDATE, END)
    drain(clock, cache)
    cache.end_step()
    return refs1, refs2


def test_keep_last_module_is_learned():
    clock, _backend, cache, _trace = make_cache(keep_last=True)
    run_one_step(cache, clock)
    assert cache.keep_marks() == set()  # step 1 had nothing learned yet

    cache.stage_hint(FORWARD, BEGIN)
    assert cache.keep_marks() == {(0, "m2")}
    pack_in(cache, "m1", [100])
    refs2 = pack_in(cache, "m2", [100])
    assert cache.record_state(refs2[0]) == KEPT_IN_MEMORY
    assert cache.offloaded_bytes_step == 100.0  # only m1 spilled


def test_keep_last_disabled_spills_the_tail():
    clock, _backend, cache, _trace = make_cache(keep_last=False)
    run_one_step(cache, clock)
    cache.stage_hint(FORWARD, BEGIN)
    refs2 = pack_in(cache, "m2", [100])
    assert cache.record_state(refs2[0]) == OFFLOADING


# -- unpack state matrix -----------------------------------------------------------

def test_unpack_unknown_id():
    _clock, _backend, cache, _trace = make_cache()
    with pytest.raises(UnknownId):
        cache.unpack(TensorId(999, (1,)))
    with pytest.raises(UnknownId):
        cache.consume(TensorId(999, (1,)))


def test_unpack_after_release_is_lost():
    _clock, _backend, cache, _trace = make_cache(budget=0.0)
    (ref,) = pack_in(cache, "m1", [100])
    cache.on_backward_module_enter("m1")
    cache.on_backward_module_exit("m1")  # sweep releases the record
    with pytest.raises(LostTensor):
        cache.unpack(ref)


def test_unpack_handle_is_identity():
    _clock, _backend, cache, _trace = make_cache()
    handle = TensorHandle(Buffer(8))
    assert cache.unpack(handle) is handle
    cache.consume(handle)  # no-op


def test_unpack_kept_returns_original_handle():
    _clock, _backend, cache, _trace = make_cache(budget=0.0)
    handle = TensorHandle(Buffer(256))
    cache.on_forward_module_enter("m1")
    ref = cache.pack(handle)
    cache.on_forward_module_exit("m1")
    assert cache.unpack(ref) is handle


def test_unpack_during_store_forwards_without_reads():
    # Throttle writes so the store can never finish inside the test.
    _clock, backend, cache, _trace = make_cache(write_bw=1.0)
    (ref,) = pack_in(cache, "m1", [1000])
    assert cache.record_state(ref) == OFFLOADING
    cache.on_backward_module_enter("m1")
    handle = cache.unpack(ref)
    assert handle is not None
    assert cache.record_state(ref) == FORWARDED
    assert cache.forwarded_count == 1
    assert backend.reads_total == 0
    assert backend.load_log == []


def test_unpack_offloaded_demand_loads():
    clock, backend, cache, _trace = make_cache()
    payload = b"\xab" * 512
    cache.on_forward_module_enter("m1")
    ref = cache.pack(TensorHandle(Buffer(512, payload)))
    cache.on_forward_module_exit("m1")
    drain(clock, cache)
    assert cache.record_state(ref) == OFFLOADED
    assert cache.ledger.current == 0
    handle = cache.unpack(ref)  # no backward scope: pure demand miss
    assert cache.record_state(ref) == LOADED
    assert handle.buffer.payload == payload
    assert backend.reads_total == 1
    assert cache.ledger.current == 512


# -- scopes ---------------------------------------------------------------------

def test_forward_exit_must_match():
    _clock, _backend, cache, _trace = make_cache()
    cache.on_forward_module_enter("m1")
    with pytest.raises(MismatchedScope):
        cache.on_forward_module_exit("m2")


def test_backward_exit_must_match():
    _clock, _backend, cache, _trace = make_cache()
    with pytest.raises(MismatchedScope):
        cache.on_backward_module_exit("m1")


def test_switch_microbatch_inside_scope_rejected():
    _clock, _backend, cache, _trace = make_cache()
    cache.on_forward_module_enter("m1")
    with pytest.raises(MismatchedScope):
        cache.switch_microbatch(1)


def test_nested_scopes_all_must_release():
    _clock, _backend, cache, _trace = make_cache(budget=0.0)
    cache.on_forward_module_enter("outer")
    cache.on_forward_module_enter("inner")
    ref = cache.pack(TensorHandle(Buffer(128)))
    cache.on_forward_module_exit("inner")
    cache.on_forward_module_exit("outer")

    cache.on_backward_module_enter("outer")
    cache.on_backward_module_enter("inner")
    cache.on_backward_module_exit("inner")
    assert cache.ledger.current == 128  # outer still holds it
    assert cache.unpack(ref) is not None
    cache.on_backward_module_exit("outer")
    assert cache.ledger.current == 0
    with pytest.raises(LostTensor):
        cache.unpack(ref)


# -- prefetch -------------------------------------------------------------------

def test_prefetch_runs_reverse_forward_order():
    clock, backend, cache, _trace = make_cache()
    pack_in(cache, "m1", [100])
    pack_in(cache, "m2", [100])
    drain(clock, cache)
    cache.on_backward_module_enter("m2")
    assert [key_tick(k) for k, *_ in backend.load_log] == [1, 0]


def test_prefetch_horizon_stops_at_entered_module():
    clock, backend, cache, _trace = make_cache()
    pack_in(cache, "m1", [100])
    pack_in(cache, "m2", [100])
    drain(clock, cache)
    cache.on_backward_module_enter("m1")  # out-of-order entry
    assert [key_tick(k) for k, *_ in backend.load_log] == [0]


def test_prefetch_reentry_is_idempotent():
    clock, backend, cache, _trace = make_cache()
    pack_in(cache, "m1", [100])
    pack_in(cache, "m2", [100])
    drain(clock, cache)
    cache.on_backward_module_enter("m2")
    cache.on_backward_module_enter("m2")
    assert len(backend.load_log) == 2
    assert backend.reads_total <= 2


def test_prefetch_head_blocks_until_durable():
    _clock, backend, cache, _trace = make_cache(write_bw=1.0)
    pack_in(cache, "m1", [100])
    cache.on_backward_module_enter("m1")
    assert backend.load_log == []  # still Offloading: strict FIFO holds


def test_prefetch_watermark_caps_inventory():
    clock, backend, cache, _trace = make_cache(cap=150.0)
    refs = pack_in(cache, "m1", [100, 100, 100])
    drain(clock, cache)
    cache.on_backward_module_enter("m1")
    # Consumption order is reverse pack order: t3, t2, then t1. t3 issues
    # (nothing ahead), t2 issues (100 < 150 ahead), t1 waits (200 >= 150).
    assert [key_tick(k) for k, *_ in backend.load_log] == [2, 1]
    assert cache.ledger.current == 200
    last = cache.unpack(refs[2])
    assert last is not None
    cache.consume(refs[2])
    # Consuming the head frees the watermark; the third load issues.
    assert [key_tick(k) for k, *_ in backend.load_log] == [2, 1, 0]


def test_demand_miss_bypasses_watermark():
    clock, backend, cache, _trace = make_cache(cap=1.0)
    refs = pack_in(cache, "m1", [100, 100])
    drain(clock, cache)
    cache.on_backward_module_enter("m1")
    # Cap of 1 byte: only the next-to-consume tensor may prefetch.
    assert len(backend.load_log) == 1
    handle = cache.unpack(refs[0])  # demand: issued regardless of the cap
    assert handle is not None
    assert len(backend.load_log) == 2


# -- storage keys and step boundary -------------------------------------------------

def test_storage_keys_carry_microbatch_tick_shape():
    _clock, backend, cache, _trace = make_cache()
    pack_in(cache, "m1", [100])
    cache.switch_microbatch(3)
    pack_in(cache, "m1", [100])
    keys = sorted(backend.keys())
    assert re.fullmatch(r"0_0_[0-9a-f]{8}", keys[0])
    assert re.fullmatch(r"3_1_[0-9a-f]{8}", keys[1])


def test_repacked_tensor_gets_fresh_generation():
    clock, backend, cache, _trace = make_cache()
    handle = TensorHandle(Buffer(100))
    cache.on_forward_module_enter("m1")
    ref = cache.pack(handle)
    cache.on_forward_module_exit("m1")
    cache.on_backward_module_enter("m1")
    cache.on_backward_module_exit("m1")  # releases the record
    drain(clock, cache)
    cache.on_forward_module_enter("m1")
    assert cache.pack(handle) == ref  # same id, new record
    cache.on_forward_module_exit("m1")
    keys = sorted(backend.keys())
    assert len(keys) == 2
    assert keys[1] == keys[0] + "_g1"


def test_end_step_sweeps_backend():
    clock, backend, cache, _trace = make_cache()
    refs = pack_in(cache, "m1", [100, 200])
    drain(clock, cache)
    cache.end_step()
    assert backend.keys() == []
    with pytest.raises(UnknownId):
        cache.record_state(refs[0])


def test_trace_event_pairing():
    clock, _backend, cache, trace = make_cache()
    (ref,) = pack_in(cache, "m1", [100])
    drain(clock, cache)
    cache.on_backward_module_enter("m1")
    cache.unpack(ref)
    kinds = [kind for _t, kind, _s, _n in trace]
    assert kinds == [STORE_START, STORE_END, LOAD_START, "LoadEnd"]
    times = [t for t, *_ in trace]
    assert times == sorted(times)
    subjects = {s for _t, _k, s, _n in trace}
    assert len(subjects) == 1  # one tensor, one subject


def test_memory_ledger_watermark():
    ledger = MemoryLedger()
    ledger.add(100)
    ledger.add(-40)
    ledger.add(20)
    assert (ledger.current, ledger.peak) == (80, 100)
    ledger.reset_peak()
    assert ledger.peak == 80


def test_offload_plan_validation():
    with pytest.raises(ValueError):
        OffloadPlan(budget_bytes=-1.0)
    with pytest.raises(ValueError):
        OffloadPlan(budget_bytes=0.0, min_tensor_elems=-1)
    with pytest.raises(ValueError):
        OffloadPlan(budget_bytes=0.0, prefetch_cap_bytes=0.0)


# -- real clock, real files ------------------------------------------------------

def test_real_mode_full_lifecycle(tmp_path):
    backend = FileBackend(tmp_path / "spill")
    cache = TensorCache(
        backend,
        WallClock(),
        OffloadPlan(budget_bytes=1e9, keep_last_module=False, min_tensor_elems=1),
    )
    try:
        payload = os.urandom(64 * 1024)
        cache.on_forward_module_enter("m1")
        ref = cache.pack(TensorHandle(Buffer(len(payload), payload)))
        cache.on_forward_module_exit("m1")
        cache.drain_stores()
        assert cache.record_state(ref) == OFFLOADED
        assert cache.ledger.current == 0

        cache.on_backward_module_enter("m1")
        handle = cache.unpack(ref)
        assert handle.buffer.payload == payload
        cache.consume(ref)
        cache.on_backward_module_exit("m1")
        assert cache.ledger.current == 0

        cache.end_step()
        assert backend.keys() == []
        manifests = list((tmp_path / "spill").glob("manifest_step*.json"))
        assert len(manifests) == 1
    finally:
        cache.close()
