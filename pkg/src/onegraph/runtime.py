"""On-device style runtime: load once, swap adapters, infer.

A session materializes a compiled model, plans one reusable byte arena
for all intermediate tensors (lifetime analysis plus greedy best-fit
offsets), and binds adapter packs into the designated input slots
without touching the base graph or weights.
"""

from __future__ import annotations

import statistics
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import compiler as cp
from . import graph as gr
from . import tensor as tz
from .errors import BindError, FormatError
from .rng import Rng


@dataclass
class PlanItem:
    tid: int
    size: int      # bytes
    start: int     # production index (-1 for graph inputs)
    end: int       # last consumer index


@dataclass
class MemoryPlan:
    offsets: dict        # tid -> (offset, size)
    arena_size: int


def lifetime_items(g: gr.Graph) -> list:
    """Byte sizes and lifetimes for every planned tensor of a graph.

    Graph inputs are planned (they are copied into the arena); constants
    live in the model image and are excluded.  Outputs stay live until
    the end of the graph.
    """
    info = gr.infer_shapes(g)
    last_use = {}
    for idx, n in enumerate(g.nodes):
        for t in n.inputs:
            last_use[t] = idx
    for _, t in g.outputs:
        last_use[t] = len(g.nodes)

    items = []
    for gi in g.inputs:
        shape, dtype = info[gi.tid]
        size = int(np.prod(shape, dtype=np.int64)) * tz.itemsize(dtype) if shape else tz.itemsize(dtype)
        items.append(PlanItem(gi.tid, size, -1, last_use.get(gi.tid, -1)))
    for idx, n in enumerate(g.nodes):
        shape, dtype = info[n.output]
        size = int(np.prod(shape, dtype=np.int64)) * tz.itemsize(dtype) if shape else tz.itemsize(dtype)
        items.append(PlanItem(n.output, size, idx, last_use.get(n.output, idx)))
    return items


def assign_offsets(items) -> MemoryPlan:
    """Greedy best-fit placement over lifetime-sorted items.

    Tensors are placed in production order; a tensor whose lifetime
    ended is released before the next allocation, and the smallest
    free gap that fits wins (ties to the lowest offset).
    """
    offsets = {}
    live = []   # (offset, size, end)
    arena = 0
    for item in sorted(items, key=lambda it: (it.start, it.tid)):
        live = [rec for rec in live if rec[2] >= item.start]
        placed = sorted((off, sz) for off, sz, _ in live)
        best = None
        cursor = 0
        for off, sz in placed:
            gap = off - cursor
            if gap >= item.size and (best is None or gap < best[1]):
                best = (cursor, gap)
            cursor = max(cursor, off + sz)
        offset = best[0] if best is not None else cursor
        offsets[item.tid] = (offset, item.size)
        live.append((offset, item.size, item.end))
        arena = max(arena, offset + item.size)
    return MemoryPlan(offsets, arena)


def plan_memory(g: gr.Graph) -> MemoryPlan:
    """Arena plan for a topologically ordered graph with static shapes."""
    return assign_offsets(lifetime_items(g))


def check_plan(items, plan: MemoryPlan) -> list:
    """Overlap violations: pairs with intersecting lifetimes sharing bytes."""
    bad = []
    for i, a in enumerate(items):
        for b in items[i + 1:]:
            if a.start <= b.end and b.start <= a.end:
                ao, asz = plan.offsets[a.tid]
                bo, bsz = plan.offsets[b.tid]
                if ao < bo + bsz and bo < ao + asz:
                    bad.append((a.tid, b.tid))
    return bad


class _ArenaHooks:
    """Store every planned tensor at its arena offset during execution."""

    def __init__(self, plan: MemoryPlan, arena: bytearray):
        self.plan = plan
        self.arena = arena

    def _view(self, tid, value):
        offset, size = self.plan.offsets[tid]
        view = np.frombuffer(self.arena, dtype=value.dtype, count=value.size, offset=offset)
        view = view.reshape(value.shape)
        view[...] = value
        return view

    def input_value(self, role, tid, value, tape):
        return self._view(tid, value)

    def weight_value(self, role, tid, value, tape):
        return value

    def lora_factor(self, role, node_id, which, value, tape):
        return value

    def node_output(self, role, node, value, tape):
        return self._view(node.output, value)


class Session:
    """One loaded model with at most one bound adapter.

    Base weights never change after load; binding only replaces the
    slot input buffers.  Confine a session to one thread at a time.
    """

    def __init__(self, model: cp.CompiledModel, model_bytes: bytes):
        t0 = time.perf_counter()
        self.model = model
        self.model_bytes = model_bytes
        self.bound_adapter = None
        self._slot_feeds = {}
        for role, g in self._graphs():
            gr.validate(g)
        self.plans = {role: plan_memory(g) for role, g in self._graphs()}
        self.arena = bytearray(max(p.arena_size for p in self.plans.values()) or 1)
        self.base_checksum = self._weights_crc()
        self.init_ms = (time.perf_counter() - t0) * 1000.0

    def _graphs(self):
        return [(role, self.model.graphs[role]) for role in ("encoder", "backbone", "decoder")]

    def _weights_crc(self) -> int:
        crc = 0
        for role, g in self._graphs():
            for tid in sorted(g.constants):
                crc = zlib.crc32(np.ascontiguousarray(g.constants[tid]).tobytes(), crc)
        return crc

    @property
    def adapter_buffer_bytes(self) -> int:
        return sum(int(v.nbytes) for v in self._slot_feeds.values())


def load_model(data: bytes) -> Session:
    """Parse and verify a compiled model; plans memory and times init."""
    model = cp.load_compiled(data)
    if model.steps < 1:
        raise FormatError("model step count must be positive")
    return Session(model, data)


def bind_lora(session: Session, pack_bytes: bytes):
    """Copy a pack's payloads into the slot buffers.

    Validation happens before any session state changes, so a failed
    bind leaves the previous binding intact.  No graph rebuild, no
    base-weight change; a rebind always performs the full copy.
    """
    pack = cp.unpack_lora(pack_bytes)
    descs = {d.slot_id: d for d in session.model.descriptors}
    if set(pack.slots) != set(descs):
        raise BindError(f"pack slots {sorted(pack.slots)} do not match model slots {sorted(descs)}")
    staged = {}
    for slot_id, d in descs.items():
        s = pack.slots[slot_id]
        if s.a_q.shape != d.a_shape or s.b_q.shape != d.b_shape:
            raise BindError(f"slot {slot_id}: payload shapes {s.a_q.shape}/{s.b_q.shape} "
                            f"do not match descriptors {d.a_shape}/{d.b_shape}")
        if s.a_params != d.a_params or s.b_params != d.b_params:
            raise BindError(f"slot {slot_id}: pack quantization parameters do not match the model")
        if s.rank > d.r_max:
            raise BindError(f"slot {slot_id}: rank {s.rank} exceeds {d.r_max}")
        staged[d.a_name] = s.a_q.copy()
        staged[d.b_name] = s.b_q.copy()
        staged[d.alpha_name] = np.full((1,), s.alpha, dtype=np.float32)
    session._slot_feeds = staged
    session.bound_adapter = pack.adapter_id


def infer(session: Session, x, cond, seed: int = 0) -> np.ndarray:
    """Run the frozen pipeline with the bound adapter; deterministic."""
    if session.model.descriptors and session.bound_adapter is None:
        raise BindError("model has adapter slots but no adapter is bound")
    model = session.model

    def run(role, feeds):
        g = model.graphs[role]
        hooks = _ArenaHooks(session.plans[role], session.arena)
        out = gr.run_graph(g, feeds, role=role, hooks=hooks)
        return {k: v.copy() for k, v in out.items()}

    enc = run("encoder", {model.graphs["encoder"].inputs[0].name: x})
    z = next(iter(enc.values()))
    z = z + Rng(seed).normal(z.shape)
    bb = model.graphs["backbone"]
    z_name, c_name = bb.inputs[0].name, bb.inputs[1].name
    for _ in range(model.steps):
        feeds = {z_name: z, c_name: cond}
        feeds.update(session._slot_feeds)
        out = run("backbone", feeds)
        z = next(iter(out.values()))
    dec = run("decoder", {model.graphs["decoder"].inputs[0].name: z})
    return next(iter(dec.values()))


# ---------------------------------------------------------------------------
# KPIs


def memory_accounting(base_bytes: int, lora_bytes: list):
    """Separate-graph deployment vs one shared graph, in bytes.

    separate: every use case ships its own merged model of roughly
    base size plus the average adapter size.  shared: one base plus
    all adapter packs.
    """
    n = len(lora_bytes)
    if n == 0:
        raise ValueError("need at least one adapter")
    avg = sum(lora_bytes) / n
    separate = n * (base_bytes + avg)
    shared = base_bytes + sum(lora_bytes)
    return separate, shared, separate / shared


@dataclass
class KPIReport:
    init_ms: float
    execute_ms: float
    end_to_end_ms: float
    shared_rom_bytes: int
    lora_rom_bytes: int
    arena_bytes: int
    adapter_buffer_bytes: int
    peak_ram_bytes: int
    n_usecases: int
    separate_total_bytes: float
    shared_total_bytes: float
    memory_ratio: float

    def to_text(self) -> str:
        fields = sorted(self.__dict__.items())
        return "\n".join(f"{k} {v!r}" for k, v in fields) + "\n"

    def to_csv(self) -> str:
        fields = sorted(self.__dict__.items())
        head = ",".join(k for k, _ in fields)
        row = ",".join(repr(v) for _, v in fields)
        return head + "\n" + row + "\n"


def kpi(session: Session, packs: list, workload: list) -> KPIReport:
    """Measure bind/infer wall times and the shared-vs-separate ROM ratio.

    ``packs`` are .qlp byte strings, ``workload`` is a list of (x, cond)
    pairs run under every pack.
    """
    if not packs:
        raise ValueError("need at least one pack")
    t_start = time.perf_counter()
    infer_times = []
    for pack in packs:
        bind_lora(session, pack)
        for i, (x, cond) in enumerate(workload):
            t0 = time.perf_counter()
            infer(session, x, cond, seed=i)
            infer_times.append((time.perf_counter() - t0) * 1000.0)
    end_to_end = (time.perf_counter() - t_start) * 1000.0

    base = len(session.model_bytes)
    lora_sizes = [len(p) for p in packs]
    separate, shared, ratio = memory_accounting(base, lora_sizes)
    arena = len(session.arena)
    adapter = session.adapter_buffer_bytes
    return KPIReport(
        init_ms=session.init_ms,
        execute_ms=statistics.median(infer_times) if infer_times else 0.0,
        end_to_end_ms=end_to_end,
        shared_rom_bytes=base,
        lora_rom_bytes=sum(lora_sizes),
        arena_bytes=arena,
        adapter_buffer_bytes=adapter,
        peak_ram_bytes=arena + adapter,
        n_usecases=len(packs),
        separate_total_bytes=separate,
        shared_total_bytes=shared,
        memory_ratio=ratio,
    )


def swap_benchmark(session: Session, pack_a: bytes, pack_b: bytes, reps: int):
    """Median adapter-swap time vs median full model reload time.

    Requires reps >= 3 and asserts that swapping beats reloading, the
    relational property that motivates runtime-bound adapters.
    """
    if reps < 3:
        raise ValueError("swap benchmark needs at least 3 reps")
    swap_times = []
    for i in range(reps):
        pack = pack_a if i % 2 == 0 else pack_b
        t0 = time.perf_counter()
        bind_lora(session, pack)
        swap_times.append((time.perf_counter() - t0) * 1000.0)
    reload_times = []
    for i in range(reps):
        t0 = time.perf_counter()
        fresh = load_model(session.model_bytes)
        bind_lora(fresh, pack_a if i % 2 == 0 else pack_b)
        reload_times.append((time.perf_counter() - t0) * 1000.0)
    swap_ms = statistics.median(swap_times)
    reload_ms = statistics.median(reload_times)
    if not swap_ms < reload_ms:
        raise RuntimeError(f"adapter swap ({swap_ms:.3f} ms) not faster than reload ({reload_ms:.3f} ms)")
    return swap_ms, reload_ms
