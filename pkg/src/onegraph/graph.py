"""Compute-graph IR and its interpreter.

A model is three graphs (encoder, backbone, decoder) plus a step count.
Backbone layers of kind ``lora_matmul`` hold a frozen weight and accept
low-rank factors at execution time; the same layers degenerate to a
plain product when no adapter is supplied.

Nodes are stored in topological order (validated), activations are
column-major feature matrices ``[features, batch]``, and all arithmetic
goes through the sequential fp32 kernels in :mod:`onegraph.tensor`, so
execution is deterministic bit-for-bit.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np

from . import qparams as qp
from . import tensor as tz
from .errors import BindError, CycleError, GraphError, ShapeError
from .rng import Rng

# Kinds of the floating-point IR; quantize/dequantize/qlinear appear
# only after quantization nodes are materialized for compilation.
FP_KINDS = ("matmul", "conv2d", "add", "mul", "scale", "concat", "activation", "lora_matmul")
QUANT_KINDS = ("quantize", "dequantize", "qlinear")
ALL_KINDS = FP_KINDS + QUANT_KINDS


@dataclass
class Node:
    id: int
    kind: str
    inputs: list
    output: int
    attrs: dict = field(default_factory=dict)


@dataclass
class GraphInput:
    name: str
    tid: int
    shape: tuple
    dtype: str = "fp32"


@dataclass
class Graph:
    nodes: list
    inputs: list          # [GraphInput]
    outputs: list         # [(name, tid)]
    constants: dict       # tid -> np.ndarray

    def node_by_id(self, nid: int):
        for n in self.nodes:
            if n.id == nid:
                return n
        raise GraphError(f"no node with id {nid}")

    def producer_map(self) -> dict:
        return {n.output: n for n in self.nodes}

    def next_node_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def next_tid(self) -> int:
        used = [n.output for n in self.nodes]
        used += [gi.tid for gi in self.inputs]
        used += list(self.constants)
        return max(used, default=-1) + 1

    def lora_nodes(self) -> list:
        return [n for n in self.nodes if n.kind == "lora_matmul"]

    def copy(self) -> "Graph":
        return Graph(
            nodes=[replace(n, inputs=list(n.inputs), attrs=dict(n.attrs)) for n in self.nodes],
            inputs=[replace(gi) for gi in self.inputs],
            outputs=list(self.outputs),
            constants=dict(self.constants),
        )


@dataclass
class LoRAEntry:
    A: np.ndarray        # [d_out, r] fp32
    B: np.ndarray        # [r, d_in] fp32
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]


@dataclass
class LoRAAdapter:
    adapter_id: str
    entries: dict        # lora node id -> LoRAEntry


@dataclass
class ModelBundle:
    encoder: Graph
    backbone: Graph
    decoder: Graph
    steps: int

    def graphs(self):
        return (("encoder", self.encoder), ("backbone", self.backbone), ("decoder", self.decoder))


# ---------------------------------------------------------------------------
# Shape propagation and validation


def _conv_out_shape(xs, ws, stride, padding):
    n, cin, h, w = xs
    cout, cin_w, kh, kw = ws
    if cin != cin_w:
        raise ShapeError(f"conv2d channels {cin} vs {cin_w}")
    oh = (h + 2 * padding[0] - kh) // stride[0] + 1
    ow = (w + 2 * padding[1] - kw) // stride[1] + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d output empty")
    return (n, cout, oh, ow)


def infer_shapes(g: Graph) -> dict:
    """tid -> (shape, dtype) for every tensor, checking node contracts."""
    info = {}
    for gi in g.inputs:
        info[gi.tid] = (tuple(gi.shape), gi.dtype)
    for tid, arr in g.constants.items():
        info[tid] = (tuple(arr.shape), tz.dtype_name(arr))

    for n in g.nodes:
        def get(tid, n=n):
            if tid not in info:
                raise GraphError(f"node {n.id}: tensor {tid} used before production")
            return info[tid]

        if n.kind == "matmul":
            (sa, da), (sb, db) = get(n.inputs[0]), get(n.inputs[1])
            if da != "fp32" or db != "fp32":
                raise ShapeError(f"node {n.id}: matmul needs fp32 operands")
            if len(sa) != 2 or len(sb) != 2 or sa[1] != sb[0]:
                raise ShapeError(f"node {n.id}: matmul shapes {sa} x {sb}")
            out = ((sa[0], sb[1]), "fp32")
        elif n.kind == "lora_matmul":
            (sw, dw), (sx, dx) = get(n.inputs[0]), get(n.inputs[1])
            if n.inputs[0] not in g.constants:
                raise GraphError(f"node {n.id}: lora_matmul weight must be a constant")
            if dw != "fp32" or dx != "fp32":
                raise ShapeError(f"node {n.id}: lora_matmul needs fp32 operands")
            if len(sw) != 2 or len(sx) != 2 or sw[1] != sx[0]:
                raise ShapeError(f"node {n.id}: lora_matmul shapes {sw} x {sx}")
            r = int(n.attrs.get("rank", 0))
            if not 1 <= r <= min(sw):
                raise ShapeError(f"node {n.id}: rank {r} exceeds min{sw}")
            out = ((sw[0], sx[1]), "fp32")
        elif n.kind in ("add", "mul"):
            (sa, da), (sb, db) = get(n.inputs[0]), get(n.inputs[1])
            if sa != sb or da != "fp32" or db != "fp32":
                raise ShapeError(f"node {n.id}: {n.kind} operands {sa}/{da} vs {sb}/{db}")
            out = (sa, "fp32")
        elif n.kind == "scale":
            (sx, dx), (ss, ds) = get(n.inputs[0]), get(n.inputs[1])
            if dx != "fp32" or ds != "fp32" or int(np.prod(ss)) != 1:
                raise ShapeError(f"node {n.id}: scale needs fp32 tensor and 1-element scalar")
            out = (sx, "fp32")
        elif n.kind == "concat":
            axis = int(n.attrs["axis"])
            shapes = [get(t) for t in n.inputs]
            base = list(shapes[0][0])
            for s, d in shapes[1:]:
                if d != shapes[0][1] or len(s) != len(base):
                    raise ShapeError(f"node {n.id}: concat rank/dtype mismatch")
                for ax in range(len(base)):
                    if ax != axis and s[ax] != base[ax]:
                        raise ShapeError(f"node {n.id}: concat extent mismatch on axis {ax}")
                base[axis] += s[axis]
            out = (tuple(base), shapes[0][1])
        elif n.kind == "activation":
            sx, dx = get(n.inputs[0])
            if dx != "fp32":
                raise ShapeError(f"node {n.id}: activation needs fp32")
            out = (sx, "fp32")
        elif n.kind == "conv2d":
            (sx, dx), (sw, dw) = get(n.inputs[0]), get(n.inputs[1])
            if dx != "fp32" or dw != "fp32" or len(sx) != 4 or len(sw) != 4:
                raise ShapeError(f"node {n.id}: conv2d needs 4-D fp32 operands")
            out = (_conv_out_shape(sx, sw, n.attrs.get("stride", (1, 1)), n.attrs.get("padding", (0, 0))), "fp32")
        elif n.kind == "quantize":
            sx, dx = get(n.inputs[0])
            if dx != "fp32":
                raise ShapeError(f"node {n.id}: quantize needs fp32 input")
            p = n.attrs["qparams"]
            out = (sx, tz.dtype_name(np.empty(0, qp.storage_dtype(p.bits, p.signed))))
        elif n.kind == "dequantize":
            sx, _ = get(n.inputs[0])
            out = (sx, "fp32")
        elif n.kind == "qlinear":
            (sw, _), (sx, _) = get(n.inputs[0]), get(n.inputs[1])
            if n.attrs["op"] == "matmul":
                if sw[1] != sx[0]:
                    raise ShapeError(f"node {n.id}: qlinear shapes {sw} x {sx}")
                oshape = (sw[0], sx[1])
            else:
                oshape = _conv_out_shape(sx, sw, n.attrs.get("stride", (1, 1)), n.attrs.get("padding", (0, 0)))
            p = n.attrs["out_qparams"]
            out = (oshape, tz.dtype_name(np.empty(0, qp.storage_dtype(p.bits, p.signed))))
        else:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")

        if n.output in info:
            raise GraphError(f"node {n.id}: tensor {n.output} already has a producer")
        info[n.output] = out
    return info


def validate(g: Graph):
    """Raise on the first structural violation; None when the graph is well formed."""
    seen_ids = set()
    for n in g.nodes:
        if n.id in seen_ids:
            raise GraphError(f"duplicate node id {n.id}")
        seen_ids.add(n.id)
        if n.kind not in ALL_KINDS:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
        if n.output in n.inputs:
            raise CycleError(f"node {n.id} consumes its own output")

    produced = set(gi.tid for gi in g.inputs) | set(g.constants)
    for n in g.nodes:
        for t in n.inputs:
            if t not in produced and t not in {m.output for m in g.nodes}:
                raise GraphError(f"node {n.id}: dangling tensor id {t}")
        produced.add(n.output)

    topo_sort(g)  # raises CycleError on cycles
    info = infer_shapes(g)  # raises on use-before-production and shape errors

    # every output must exist and be reachable from the graph sources
    reachable = set(gi.tid for gi in g.inputs) | set(g.constants)
    for n in g.nodes:
        if all(t in reachable for t in n.inputs):
            reachable.add(n.output)
    for name, tid in g.outputs:
        if tid not in info:
            raise GraphError(f"output {name!r}: tensor {tid} does not exist")
        if tid not in reachable:
            raise GraphError(f"output {name!r}: tensor {tid} unreachable from inputs")


def topo_sort(g: Graph) -> list:
    """Kahn's method with ascending-id tie-break; returns node ids."""
    producer = {}
    for n in g.nodes:
        if n.output in producer:
            raise GraphError(f"tensor {n.output} produced twice")
        producer[n.output] = n
    sources = set(gi.tid for gi in g.inputs) | set(g.constants)
    indeg = {}
    users = {}
    for n in g.nodes:
        deps = {t for t in n.inputs if t not in sources and t in producer}
        indeg[n.id] = len(deps)
        for t in deps:
            users.setdefault(producer[t].id, []).append(n.id)
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    by_id = {n.id: n for n in g.nodes}
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for u in sorted(users.get(nid, [])):
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    if len(order) != len(g.nodes):
        stuck = sorted(set(by_id) - set(order))
        raise CycleError(f"cycle through nodes {stuck}")
    return order


def sort_nodes(g: Graph) -> Graph:
    """Copy of g with nodes reordered into canonical topological order."""
    order = topo_sort(g)
    by_id = {n.id: n for n in g.nodes}
    out = g.copy()
    out.nodes = [replace(by_id[nid], inputs=list(by_id[nid].inputs), attrs=dict(by_id[nid].attrs)) for nid in order]
    return out


def dump_graph(g: Graph) -> str:
    """One node per line: `id kind [in-ids] -> out-id {attrs}`."""
    lines = []
    for n in g.nodes:
        parts = []
        for k in sorted(n.attrs):
            v = n.attrs[k]
            if isinstance(v, qp.QuantParams):
                v = f"q({v.scale!r},{v.zero_point},{v.bits},{int(v.signed)})"
            elif isinstance(v, tuple):
                v = "x".join(str(i) for i in v)
            parts.append(f"{k}={v}")
        attrs = "{" + ", ".join(parts) + "}"
        ins = " ".join(str(t) for t in n.inputs)
        lines.append(f"{n.id} {n.kind} [{ins}] -> {n.output} {attrs}")
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# Execution


class Tape:
    """Recorded primitives for reverse-mode differentiation.

    Arrays are held by reference; entries are (op, inputs, output, ctx).
    """

    def __init__(self):
        self.entries = []

    def record(self, op, inputs, output, ctx=None):
        self.entries.append((op, inputs, output, ctx))


def _mm(a, b, tape):
    out = tz.matmul(a, b)
    if tape is not None:
        tape.record("matmul", (a, b), out)
    return out


def _add(a, b, tape):
    out = a + b
    if tape is not None:
        tape.record("add", (a, b), out)
    return out


def _mul(a, b, tape):
    out = a * b
    if tape is not None:
        tape.record("mul", (a, b), out)
    return out


def _scale(x, s, tape):
    out = x * s.reshape(())
    if tape is not None:
        tape.record("scale", (x, s), out)
    return out


def _concat(args, axis, tape):
    out = np.concatenate(args, axis=axis)
    if tape is not None:
        tape.record("concat", tuple(args), out, axis)
    return out


def _act(x, kind, tape):
    out = tz.activation(x, kind)
    if tape is not None:
        tape.record("activation", (x,), out, kind)
    return out


def _fq(x, params, tape):
    out = qp.fake_quant(x, params)
    if tape is not None:
        tape.record("fq", (x,), out, params)
    return out


class _NullHooks:
    """Plain floating-point execution: no quantization, no observation."""

    def input_value(self, role, tid, value, tape):
        return value

    def weight_value(self, role, tid, value, tape):
        return value

    def lora_factor(self, role, node_id, which, value, tape):
        return value

    def node_output(self, role, node, value, tape):
        return value


NULL_HOOKS = _NullHooks()


def run_graph(g: Graph, feeds: dict, *, role="graph", adapter=None, hooks=NULL_HOOKS, tape=None) -> dict:
    """Execute a graph; returns output name -> tensor.

    ``feeds`` maps input names to arrays.  ``adapter`` supplies low-rank
    factors for ``lora_matmul`` nodes by node id.  ``hooks`` intercepts
    tensor boundaries (see quant module) and ``tape`` records primitives
    for differentiation.
    """
    env = {}
    for gi in g.inputs:
        if gi.name not in feeds:
            raise ShapeError(f"missing graph input {gi.name!r}")
        v = np.asarray(feeds[gi.name])
        if tuple(v.shape) != tuple(gi.shape):
            raise ShapeError(f"input {gi.name!r}: expected shape {tuple(gi.shape)}, got {v.shape}")
        if tz.dtype_name(v) != gi.dtype:
            raise ShapeError(f"input {gi.name!r}: expected dtype {gi.dtype}")
        env[gi.tid] = hooks.input_value(role, gi.tid, v, tape)

    def fetch(tid, node):
        if tid in env:
            return env[tid]
        arr = g.constants[tid]
        # fp32 constants are quantizable weights, except a scale factor
        if arr.dtype == np.float32 and not (node.kind == "scale" and tid == node.inputs[1]):
            return hooks.weight_value(role, tid, arr, tape)
        return arr

    for n in g.nodes:
        ins = [fetch(t, n) for t in n.inputs]
        if n.kind == "matmul":
            out = _mm(ins[0], ins[1], tape)
        elif n.kind == "lora_matmul":
            out = _mm(ins[0], ins[1], tape)
            entry = adapter.entries.get(n.id) if adapter is not None else None
            if entry is not None:
                _check_entry_shapes(n, ins[0], entry)
                a_fac = hooks.lora_factor(role, n.id, "A", entry.A, tape)
                b_fac = hooks.lora_factor(role, n.id, "B", entry.B, tape)
                bx = _mm(b_fac, ins[1], tape)
                abx = _mm(a_fac, bx, tape)
                scaled = _scale(abx, np.full((1,), entry.alpha, dtype=np.float32), tape)
                out = _add(out, scaled, tape)
        elif n.kind == "add":
            out = _add(ins[0], ins[1], tape)
        elif n.kind == "mul":
            out = _mul(ins[0], ins[1], tape)
        elif n.kind == "scale":
            out = _scale(ins[0], ins[1], tape)
        elif n.kind == "concat":
            out = _concat(ins, int(n.attrs["axis"]), tape)
        elif n.kind == "activation":
            out = _act(ins[0], n.attrs["kind"], tape)
        elif n.kind == "conv2d":
            if tape is not None:
                raise GraphError("conv2d is not differentiable in this build")
            out = tz.conv2d(ins[0], ins[1], n.attrs.get("stride", (1, 1)), n.attrs.get("padding", (0, 0)))
        elif n.kind == "quantize":
            out = qp.quantize_array(ins[0], n.attrs["qparams"])
        elif n.kind == "dequantize":
            out = qp.dequantize_array(ins[0], n.attrs["qparams"])
        elif n.kind == "qlinear":
            out = _run_qlinear(n, ins)
        else:
            raise GraphError(f"node {n.id}: unknown kind {n.kind!r}")
        env[n.output] = hooks.node_output(role, n, out, tape)

    return {name: env[tid] for name, tid in g.outputs}


def _run_qlinear(n, ins):
    w_hat = qp.dequantize_array(ins[0], n.attrs["w_qparams"])
    x_hat = qp.dequantize_array(ins[1], n.attrs["in_qparams"])
    if n.attrs["op"] == "matmul":
        y = tz.matmul(w_hat, x_hat)
    else:
        y = tz.conv2d(x_hat, w_hat, n.attrs.get("stride", (1, 1)), n.attrs.get("padding", (0, 0)))
    if len(ins) > 2:
        y = y + qp.dequantize_array(ins[2], n.attrs["bias_qparams"])
    return qp.quantize_array(y, n.attrs["out_qparams"])


def _check_entry_shapes(node, w, entry):
    d_out, d_in = w.shape
    r = entry.A.shape[1]
    if entry.A.shape != (d_out, r) or entry.B.shape != (r, d_in):
        raise ShapeError(
            f"node {node.id}: adapter factors {entry.A.shape}/{entry.B.shape} "
            f"do not match weight {w.shape}"
        )
    r_max = int(node.attrs.get("rank", r))
    if r > r_max:
        raise ShapeError(f"node {node.id}: adapter rank {r} exceeds slot rank {r_max}")


def check_adapter(bundle: ModelBundle, adapter: LoRAAdapter):
    """Adapter entries must target existing backbone lora nodes with matching shapes."""
    by_id = {n.id: n for n in bundle.backbone.lora_nodes()}
    for nid, entry in adapter.entries.items():
        if nid not in by_id:
            raise BindError(f"adapter {adapter.adapter_id!r} targets unknown lora node {nid}")
        w = bundle.backbone.constants[by_id[nid].inputs[0]]
        _check_entry_shapes(by_id[nid], w, entry)


def validate_bundle(bundle: ModelBundle):
    for role, g in bundle.graphs():
        validate(g)
        if role != "backbone" and g.lora_nodes():
            raise GraphError(f"{role} graph may not contain lora_matmul nodes")
        if len(g.outputs) != 1:
            raise GraphError(f"{role} graph must have exactly one output")
    if bundle.steps < 1:
        raise GraphError("bundle step count must be positive")
    if len(bundle.encoder.inputs) != 1 or len(bundle.decoder.inputs) != 1:
        raise GraphError("encoder and decoder take exactly one input")
    if len(bundle.backbone.inputs) != 2:
        raise GraphError("backbone takes latent and conditioning inputs")
    enc_out = infer_shapes(bundle.encoder)[bundle.encoder.outputs[0][1]][0]
    latent = tuple(bundle.backbone.inputs[0].shape)
    if enc_out != latent:
        raise ShapeError(f"encoder output {enc_out} does not match backbone latent input {latent}")
    bb_out = infer_shapes(bundle.backbone)[bundle.backbone.outputs[0][1]][0]
    if bb_out != latent:
        raise ShapeError(f"backbone output {bb_out} must match its latent input {latent}")
    dec_in = tuple(bundle.decoder.inputs[0].shape)
    if bb_out != dec_in:
        raise ShapeError(f"backbone output {bb_out} does not match decoder input {dec_in}")


def run_bundle(bundle: ModelBundle, x, cond, adapter=None, *, noise_seed=0,
               hooks=NULL_HOOKS, tape=None) -> np.ndarray:
    """Encoder -> seeded noise -> `steps` backbone passes -> decoder."""
    enc = run_graph(bundle.encoder, {bundle.encoder.inputs[0].name: x},
                    role="encoder", hooks=hooks, tape=tape)
    z = next(iter(enc.values()))
    noise = Rng(noise_seed).normal(z.shape)
    z = _add(z, noise, tape)
    z_name = bundle.backbone.inputs[0].name
    c_name = bundle.backbone.inputs[1].name
    for _ in range(bundle.steps):
        out = run_graph(bundle.backbone, {z_name: z, c_name: cond},
                        role="backbone", adapter=adapter, hooks=hooks, tape=tape)
        z = next(iter(out.values()))
    dec = run_graph(bundle.decoder, {bundle.decoder.inputs[0].name: z},
                    role="decoder", hooks=hooks, tape=tape)
    return next(iter(dec.values()))


def execute_fp(bundle: ModelBundle, x, cond, adapter=None, noise_seed=0) -> np.ndarray:
    """Full-precision forward pass; deterministic for fixed inputs and seed."""
    if adapter is not None:
        check_adapter(bundle, adapter)
    return run_bundle(bundle, x, cond, adapter, noise_seed=noise_seed)


def attach_lora_static(g: Graph, adapter: LoRAAdapter) -> Graph:
    """Bake adapter factors into the targeted weights: W <- W + alpha * A @ B.

    Models the baseline deployment where every task ships its own merged
    graph.  Targets are addressed by node id, so attaching twice
    accumulates the update twice.
    """
    out = g.copy()
    by_id = {n.id: n for n in out.nodes}
    for nid, entry in adapter.entries.items():
        if nid not in by_id:
            raise GraphError(f"adapter targets missing node {nid}")
        node = by_id[nid]
        if node.kind not in ("lora_matmul", "matmul"):
            raise GraphError(f"node {nid} is not a linear layer")
        w_tid = node.inputs[0]
        if w_tid not in out.constants:
            raise GraphError(f"node {nid}: weight {w_tid} is not a constant")
        w = out.constants[w_tid]
        _check_entry_shapes(node, w, entry)
        ab = tz.matmul(entry.A, entry.B)
        out.constants[w_tid] = w + ab * np.float32(entry.alpha)
        node.kind = "matmul"
        node.attrs.pop("rank", None)
    return out
