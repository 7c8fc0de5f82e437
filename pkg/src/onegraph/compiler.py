"""Graph rewriting, optimization passes, and the frozen binary formats.

The deployment flow turns a bundle with adapter-capable layers into one
immutable artifact plus small per-task archives:

    rewrite_lora_as_input -> constant_fold -> dead_code_eliminate
        -> materialize_quantsim -> scale_fold -> freeze (.quadm)

Adapters are packed separately (.qlp) with their factors quantized at
the boundary under the shared slot parameters, so any pack can be bound
into the one compiled model at run time.

Both formats are little-endian with a crc32 over the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import graph as gr
from . import quant as qt
from . import tensor as tz
from .errors import CoverageError, FormatError, GraphError, PackError
from .qparams import QuantParams, quantize_array, storage_dtype

MODEL_MAGIC = b"QADM"
PACK_MAGIC = b"QLPK"
FORMAT_VERSION = 1

_ROLE_CODES = {"encoder": 0, "backbone": 1, "decoder": 2}
_ROLE_NAMES = {v: k for k, v in _ROLE_CODES.items()}
_KIND_CODES = {k: i for i, k in enumerate(gr.ALL_KINDS)}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class LoRASlotDescriptor:
    slot_id: int
    target_node_id: int
    a_tid: int
    b_tid: int
    alpha_tid: int
    d_out: int
    d_in: int
    r_max: int
    bits: int
    a_params: QuantParams
    b_params: QuantParams

    @property
    def a_shape(self):
        return (self.d_out, self.r_max)

    @property
    def b_shape(self):
        return (self.r_max, self.d_in)

    @property
    def a_name(self):
        return f"lora{self.target_node_id}.A"

    @property
    def b_name(self):
        return f"lora{self.target_node_id}.B"

    @property
    def alpha_name(self):
        return f"lora{self.target_node_id}.alpha"


@dataclass
class CompiledModel:
    version: int
    name: str
    creation_seed: int
    steps: int
    profile_text: str
    graphs: dict                 # role -> Graph
    descriptors: list

    def bundle_like(self):
        return gr.ModelBundle(self.graphs["encoder"], self.graphs["backbone"],
                              self.graphs["decoder"], self.steps)


# ---------------------------------------------------------------------------
# LoRA-as-input rewrite


def rewrite_lora_as_input(g: gr.Graph, shared: qt.QuantProfile):
    """Expose adapter factors as graph inputs.

    Every adapter-capable layer y = Wx splits into explicit dataflow
    y = Wx + alpha * A(Bx) with A, B, alpha as new graph inputs; the
    frozen weight is never merged.  Returns (graph, slot descriptors).
    """
    gr.validate(g)
    out = g.copy()
    descriptors = []
    lora = sorted(out.lora_nodes(), key=lambda n: n.id)
    for slot_id, node in enumerate(lora):
        w = out.constants[node.inputs[0]]
        d_out, d_in = w.shape
        r_max = int(node.attrs["rank"])
        a_params = shared.lora(node.id, "A")
        b_params = shared.lora(node.id, "B")
        if a_params is None or b_params is None:
            raise CoverageError(f"shared profile lacks slot params for lora node {node.id}")

        t_a, t_b, t_alpha = out.next_tid(), out.next_tid() + 1, out.next_tid() + 2
        t_wx, t_bx, t_abx, t_scaled = (out.next_tid() + 3 + i for i in range(4))
        y_tid = node.output
        x_tid = node.inputs[1]

        desc = LoRASlotDescriptor(
            slot_id=slot_id, target_node_id=node.id,
            a_tid=t_a, b_tid=t_b, alpha_tid=t_alpha,
            d_out=int(d_out), d_in=int(d_in), r_max=r_max,
            bits=shared.lora_bits, a_params=a_params, b_params=b_params,
        )
        descriptors.append(desc)
        out.inputs.append(gr.GraphInput(desc.a_name, t_a, (d_out, r_max)))
        out.inputs.append(gr.GraphInput(desc.b_name, t_b, (r_max, d_in)))
        out.inputs.append(gr.GraphInput(desc.alpha_name, t_alpha, (1,)))

        nid = out.next_node_id()
        node.kind = "matmul"
        node.attrs.pop("rank", None)
        node.output = t_wx
        expansion = [
            gr.Node(nid, "matmul", [t_b, x_tid], t_bx),
            gr.Node(nid + 1, "matmul", [t_a, t_bx], t_abx),
            gr.Node(nid + 2, "scale", [t_abx, t_alpha], t_scaled),
            gr.Node(nid + 3, "add", [t_wx, t_scaled], y_tid),
        ]
        pos = out.nodes.index(node)
        out.nodes[pos + 1:pos + 1] = expansion
    gr.validate(out)
    return out, descriptors


def adapter_slot_feeds(adapter: gr.LoRAAdapter, descriptors) -> dict:
    """Full-precision feeds for a rewritten graph: factors padded to r_max."""
    feeds = {}
    for d in descriptors:
        entry = adapter.entries.get(d.target_node_id)
        if entry is None:
            raise PackError(f"adapter {adapter.adapter_id!r} lacks entry for node {d.target_node_id}")
        if entry.rank > d.r_max:
            raise PackError(f"adapter rank {entry.rank} exceeds slot rank {d.r_max}")
        a = np.zeros(d.a_shape, dtype=np.float32)
        b = np.zeros(d.b_shape, dtype=np.float32)
        a[:, :entry.rank] = entry.A
        b[:entry.rank, :] = entry.B
        feeds[d.a_name] = a
        feeds[d.b_name] = b
        feeds[d.alpha_name] = np.full((1,), entry.alpha, dtype=np.float32)
    return feeds


# ---------------------------------------------------------------------------
# Optimization passes


_FOLDABLE = ("matmul", "conv2d", "add", "mul", "scale", "concat", "activation",
             "quantize", "dequantize", "qlinear")


def constant_fold(g: gr.Graph) -> gr.Graph:
    """Evaluate every all-constant subgraph at compile time.

    Adapter-capable layers are never folded: their value depends on the
    runtime-bound factors.  Outputs are bit-exact because folding runs
    the same kernels execution would.
    """
    out = g.copy()
    changed = True
    while changed:
        changed = False
        for node in list(out.nodes):
            if node.kind not in _FOLDABLE:
                continue
            if not all(t in out.constants for t in node.inputs):
                continue
            probe = gr.Graph(nodes=[replace(node, inputs=list(node.inputs), attrs=dict(node.attrs))],
                             inputs=[], outputs=[("v", node.output)],
                             constants={t: out.constants[t] for t in node.inputs})
            value = gr.run_graph(probe, {})["v"]
            out.constants[node.output] = value
            out.nodes.remove(node)
            changed = True
    return out


def dead_code_eliminate(g: gr.Graph) -> gr.Graph:
    """Drop nodes that reach no graph output; prune unused constants."""
    out = g.copy()
    live = {tid for _, tid in out.outputs}
    for node in reversed(out.nodes):
        if node.output in live:
            live.update(node.inputs)
    out.nodes = [n for n in out.nodes if n.output in live]
    used = set()
    for n in out.nodes:
        used.update(n.inputs)
    used.update(tid for _, tid in out.outputs)
    out.constants = {t: v for t, v in out.constants.items() if t in used}
    return out


def materialize_quantsim(g: gr.Graph, profile: qt.QuantProfile, role: str, descriptors=()) -> gr.Graph:
    """Insert explicit quantize/dequantize structure for compilation.

    Weight constants become integer payloads behind dequantize nodes;
    slot inputs become integer inputs (packs deliver them quantized);
    activations with profile entries get a quantize/dequantize pair.
    The result computes bit-identically to hook-based quantsim.
    """
    out = g.copy()
    slot_tids = {}
    for d in descriptors:
        slot_tids[d.a_tid] = d.a_params
        slot_tids[d.b_tid] = d.b_params

    def rewire(old_tid, new_tid, skip_ids):
        # scale's scalar operand (alpha) is exempt from quantization
        for n in out.nodes:
            if n.id in skip_ids:
                continue
            for pos, t in enumerate(n.inputs):
                if t == old_tid and not (n.kind == "scale" and pos == 1):
                    n.inputs[pos] = new_tid
        out.outputs = [(name, new_tid if t == old_tid else t) for name, t in out.outputs]

    # weights: integer payload + dequantize
    for tid in qt.weight_tids(g):
        p = profile.weight(role, tid)
        if p is None:
            raise CoverageError(f"profile does not cover {role}.w.{tid}")
        out.constants[tid] = quantize_array(out.constants[tid], p)
        dq_tid = out.next_tid()
        dq = gr.Node(out.next_node_id(), "dequantize", [tid], dq_tid, {"qparams": p})
        rewire(tid, dq_tid, skip_ids={dq.id})
        out.nodes.insert(0, dq)

    # slot inputs arrive quantized; alpha stays fp32
    for gi in out.inputs:
        if gi.tid in slot_tids:
            p = slot_tids[gi.tid]
            gi.dtype = tz.dtype_name(np.empty(0, storage_dtype(p.bits, p.signed)))
            dq_tid = out.next_tid()
            dq = gr.Node(out.next_node_id(), "dequantize", [gi.tid], dq_tid, {"qparams": p})
            rewire(gi.tid, dq_tid, skip_ids={dq.id})
            out.nodes.insert(0, dq)

    # covered fp32 inputs and node outputs get a quantize/dequantize pair
    def insert_act_pair(tid, p, position):
        q_tid = out.next_tid()
        dq_tid = q_tid + 1
        qn = gr.Node(out.next_node_id(), "quantize", [tid], q_tid, {"qparams": p})
        dqn = gr.Node(out.next_node_id() + 1, "dequantize", [q_tid], dq_tid, {"qparams": p})
        rewire(tid, dq_tid, skip_ids={qn.id, dqn.id})
        out.nodes[position:position] = [qn, dqn]
        return dq_tid

    for gi in list(out.inputs):
        if gi.dtype != "fp32" or gi.tid in slot_tids:
            continue
        p = profile.act(role, gi.tid)
        if p is not None:
            insert_act_pair(gi.tid, p, 0)

    for node in list(out.nodes):
        if node.kind not in gr.FP_KINDS:
            continue
        p = profile.act(role, node.output)
        if p is not None:
            insert_act_pair(node.output, p, out.nodes.index(node) + 1)

    gr.validate(out)
    return out


def scale_fold(g: gr.Graph, profile=None) -> gr.Graph:
    """Fuse dequantize -> linear op [-> bias add] -> quantize into one node.

    The quantization parameters move into the fused node's attributes,
    removing the standalone arithmetic nodes around each linear layer.
    The fused kernel performs the identical operation sequence, so
    integer results are preserved bit-for-bit.  Patterns that do not
    match (for example the runtime adapter path, which has no output
    quantizer) are left untouched.
    """
    out = g.copy()

    def consumers(tid):
        return [n for n in out.nodes if tid in n.inputs]

    output_tids = {t for _, t in out.outputs}
    changed = True
    while changed:
        changed = False
        producer = out.producer_map()
        for node in list(out.nodes):
            if node.kind not in ("matmul", "conv2d"):
                continue
            w_pos = 0 if node.kind == "matmul" else 1
            x_pos = 1 - w_pos
            dq_w = producer.get(node.inputs[w_pos])
            dq_x = producer.get(node.inputs[x_pos])
            if not (dq_w is not None and dq_w.kind == "dequantize"
                    and dq_x is not None and dq_x.kind == "dequantize"):
                continue
            if node.output in output_tids:
                continue
            next_nodes = consumers(node.output)
            if len(next_nodes) != 1:
                continue
            tail = next_nodes[0]

            bias_node = None
            bias_dq = None
            if tail.kind == "add" and tail.output not in output_tids:
                other = tail.inputs[0] if tail.inputs[1] == node.output else tail.inputs[1]
                cand = producer.get(other)
                if cand is not None and cand.kind == "dequantize" and cand.inputs[0] in out.constants:
                    after = consumers(tail.output)
                    if len(after) == 1 and after[0].kind == "quantize":
                        bias_node, bias_dq, tail = tail, cand, after[0]
            if tail.kind != "quantize":
                continue

            attrs = {
                "op": node.kind,
                "w_qparams": dq_w.attrs["qparams"],
                "in_qparams": dq_x.attrs["qparams"],
                "out_qparams": tail.attrs["qparams"],
            }
            if node.kind == "conv2d":
                attrs["stride"] = node.attrs.get("stride", (1, 1))
                attrs["padding"] = node.attrs.get("padding", (0, 0))
            inputs = [dq_w.inputs[0], dq_x.inputs[0]]
            if bias_node is not None:
                attrs["bias_qparams"] = bias_dq.attrs["qparams"]
                inputs.append(bias_dq.inputs[0])

            fused = gr.Node(node.id, "qlinear", inputs, tail.output, attrs)
            pos = out.nodes.index(node)
            out.nodes[pos] = fused
            out.nodes.remove(tail)
            if bias_node is not None:
                out.nodes.remove(bias_node)
            for dq in (dq_w, dq_x, bias_dq):
                if dq is not None and dq in out.nodes and not consumers(dq.output):
                    if dq.output not in output_tids:
                        out.nodes.remove(dq)
            changed = True
            break
    gr.validate(out)
    return out


def optimize_for_freeze(bundle: gr.ModelBundle, shared: qt.QuantProfile):
    """Run the full pass pipeline; returns (frozen-form bundle, descriptors)."""
    qt.check_coverage(shared, bundle)
    rewritten, descriptors = rewrite_lora_as_input(bundle.backbone, shared)
    graphs = {}
    for role, g, descs in (("encoder", bundle.encoder, ()),
                           ("backbone", rewritten, descriptors),
                           ("decoder", bundle.decoder, ())):
        g = constant_fold(g)
        g = dead_code_eliminate(g)
        g = materialize_quantsim(g, shared, role, descs)
        g = scale_fold(g)
        graphs[role] = g
    frozen = gr.ModelBundle(graphs["encoder"], graphs["backbone"], graphs["decoder"], bundle.steps)
    return frozen, descriptors


# ---------------------------------------------------------------------------
# Binary encoding helpers


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(data, pos):
    (n,) = struct.unpack_from("<H", data, pos)
    pos += 2
    return data[pos:pos + n].decode("utf-8"), pos + n


def _pack_qparams(p: QuantParams) -> bytes:
    return struct.pack("<fiBB", np.float32(p.scale), p.zero_point, p.bits, int(p.signed))


def _unpack_qparams(data, pos):
    scale, zp, bits, signed = struct.unpack_from("<fiBB", data, pos)
    return QuantParams(float(np.float32(scale)), zp, bits, bool(signed)), pos + 10


_ATTR_INT, _ATTR_FLOAT, _ATTR_STR, _ATTR_QPARAMS, _ATTR_TUPLE = range(5)


def _pack_attrs(attrs: dict) -> bytes:
    body = struct.pack("<B", len(attrs))
    for key in sorted(attrs):
        v = attrs[key]
        body += _pack_str(key)
        if isinstance(v, QuantParams):
            body += struct.pack("<B", _ATTR_QPARAMS) + _pack_qparams(v)
        elif isinstance(v, bool):
            raise FormatError(f"boolean attr {key} unsupported")
        elif isinstance(v, (int, np.integer)):
            body += struct.pack("<Bq", _ATTR_INT, int(v))
        elif isinstance(v, float):
            body += struct.pack("<Bd", _ATTR_FLOAT, v)
        elif isinstance(v, str):
            body += struct.pack("<B", _ATTR_STR) + _pack_str(v)
        elif isinstance(v, (tuple, list)):
            body += struct.pack("<BB", _ATTR_TUPLE, len(v)) + struct.pack(f"<{len(v)}q", *v)
        else:
            raise FormatError(f"cannot serialize attr {key}={v!r}")
    return body


def _unpack_attrs(data, pos):
    (count,) = struct.unpack_from("<B", data, pos)
    pos += 1
    attrs = {}
    for _ in range(count):
        key, pos = _unpack_str(data, pos)
        (tag,) = struct.unpack_from("<B", data, pos)
        pos += 1
        if tag == _ATTR_QPARAMS:
            attrs[key], pos = _unpack_qparams(data, pos)
        elif tag == _ATTR_INT:
            (attrs[key],) = struct.unpack_from("<q", data, pos)
            pos += 8
        elif tag == _ATTR_FLOAT:
            (attrs[key],) = struct.unpack_from("<d", data, pos)
            pos += 8
        elif tag == _ATTR_STR:
            attrs[key], pos = _unpack_str(data, pos)
        elif tag == _ATTR_TUPLE:
            (n,) = struct.unpack_from("<B", data, pos)
            pos += 1
            attrs[key] = tuple(struct.unpack_from(f"<{n}q", data, pos))
            pos += 8 * n
        else:
            raise FormatError(f"unknown attr tag {tag}")
    return attrs, pos


def _pack_graph(g: gr.Graph) -> bytes:
    g = gr.sort_nodes(g)
    body = struct.pack("<H", len(g.inputs))
    for gi in g.inputs:
        body += _pack_str(gi.name)
        body += struct.pack("<IBB", gi.tid, tz.DTYPE_CODES[gi.dtype], len(gi.shape))
        body += struct.pack(f"<{len(gi.shape)}I", *gi.shape)
    body += struct.pack("<H", len(g.outputs))
    for name, tid in g.outputs:
        body += _pack_str(name) + struct.pack("<I", tid)
    body += struct.pack("<I", len(g.nodes))
    for n in g.nodes:
        body += struct.pack("<IBB", n.id, _KIND_CODES[n.kind], len(n.inputs))
        body += struct.pack(f"<{len(n.inputs)}I", *n.inputs)
        body += struct.pack("<I", n.output)
        body += _pack_attrs(n.attrs)
    body += struct.pack("<I", len(g.constants))
    for tid in sorted(g.constants):
        body += struct.pack("<I", tid) + tz.qtns_bytes(g.constants[tid])
    return body


def _unpack_graph(data, pos):
    (n_in,) = struct.unpack_from("<H", data, pos)
    pos += 2
    inputs = []
    for _ in range(n_in):
        name, pos = _unpack_str(data, pos)
        tid, dcode, rank = struct.unpack_from("<IBB", data, pos)
        pos += 6
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        dtype = {v: k for k, v in tz.DTYPE_CODES.items()}[dcode]
        inputs.append(gr.GraphInput(name, tid, tuple(shape), dtype))
    (n_out,) = struct.unpack_from("<H", data, pos)
    pos += 2
    outputs = []
    for _ in range(n_out):
        name, pos = _unpack_str(data, pos)
        (tid,) = struct.unpack_from("<I", data, pos)
        pos += 4
        outputs.append((name, tid))
    (n_nodes,) = struct.unpack_from("<I", data, pos)
    pos += 4
    nodes = []
    for _ in range(n_nodes):
        nid, kind, n_ins = struct.unpack_from("<IBB", data, pos)
        pos += 6
        ins = list(struct.unpack_from(f"<{n_ins}I", data, pos))
        pos += 4 * n_ins
        (out_tid,) = struct.unpack_from("<I", data, pos)
        pos += 4
        attrs, pos = _unpack_attrs(data, pos)
        nodes.append(gr.Node(nid, _KIND_NAMES[kind], ins, out_tid, attrs))
    (n_const,) = struct.unpack_from("<I", data, pos)
    pos += 4
    constants = {}
    for _ in range(n_const):
        (tid,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arr, pos = tz.qtns_from_bytes(data, pos)
        constants[tid] = arr
    return gr.Graph(nodes, inputs, outputs, constants), pos


def _wrap_payload(magic: bytes, payload: bytes) -> bytes:
    head = magic + struct.pack("<HHIQ", FORMAT_VERSION, 0, zlib.crc32(payload) & 0xFFFFFFFF, len(payload))
    return head + payload


def _open_payload(magic: bytes, data: bytes) -> bytes:
    if len(data) < 20:
        raise FormatError("file too short")
    if data[:4] != magic:
        raise FormatError(f"bad magic {data[:4]!r}, expected {magic!r}")
    version, _flags, crc, length = struct.unpack_from("<HHIQ", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    payload = data[20:]
    if len(payload) != length:
        raise FormatError(f"truncated payload: {len(payload)} of {length} bytes")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise FormatError("payload checksum mismatch")
    return payload


# ---------------------------------------------------------------------------
# Freeze / load


def freeze(bundle: gr.ModelBundle, shared: qt.QuantProfile, descriptors,
           *, name: str = "model", creation_seed: int = 0) -> bytes:
    """Serialize an optimized bundle; byte-identical for identical inputs."""
    payload = struct.pack("<Q", creation_seed & 0xFFFFFFFFFFFFFFFF)
    payload += _pack_str(name)
    payload += struct.pack("<I", bundle.steps)
    payload += _pack_str(qt.profile_to_text(shared))
    payload += struct.pack("<B", 3)
    for role, g in bundle.graphs():
        payload += struct.pack("<B", _ROLE_CODES[role])
        payload += _pack_graph(g)
    payload += struct.pack("<I", len(descriptors))
    for d in sorted(descriptors, key=lambda d: d.slot_id):
        payload += struct.pack("<IIIII", d.slot_id, d.target_node_id, d.a_tid, d.b_tid, d.alpha_tid)
        payload += struct.pack("<IIIB", d.d_out, d.d_in, d.r_max, d.bits)
        payload += _pack_qparams(d.a_params) + _pack_qparams(d.b_params)
    return _wrap_payload(MODEL_MAGIC, payload)


def load_compiled(data: bytes) -> CompiledModel:
    payload = _open_payload(MODEL_MAGIC, data)
    pos = 0
    (seed,) = struct.unpack_from("<Q", payload, pos)
    pos += 8
    name, pos = _unpack_str(payload, pos)
    (steps,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    profile_text, pos = _unpack_str(payload, pos)
    (n_graphs,) = struct.unpack_from("<B", payload, pos)
    pos += 1
    graphs = {}
    for _ in range(n_graphs):
        (role_code,) = struct.unpack_from("<B", payload, pos)
        pos += 1
        g, pos = _unpack_graph(payload, pos)
        graphs[_ROLE_NAMES[role_code]] = g
    (n_desc,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    descriptors = []
    for _ in range(n_desc):
        slot_id, target, a_tid, b_tid, alpha_tid = struct.unpack_from("<IIIII", payload, pos)
        pos += 20
        d_out, d_in, r_max, bits = struct.unpack_from("<IIIB", payload, pos)
        pos += 13
        a_params, pos = _unpack_qparams(payload, pos)
        b_params, pos = _unpack_qparams(payload, pos)
        descriptors.append(LoRASlotDescriptor(slot_id, target, a_tid, b_tid, alpha_tid,
                                              d_out, d_in, r_max, bits, a_params, b_params))
    if pos != len(payload):
        raise FormatError("trailing bytes in model payload")
    if set(graphs) != {"encoder", "backbone", "decoder"}:
        raise FormatError("model must contain encoder, backbone, and decoder graphs")
    return CompiledModel(FORMAT_VERSION, name, seed, steps, profile_text, graphs, descriptors)


# ---------------------------------------------------------------------------
# Adapter packs


def pack_lora(adapter: gr.LoRAAdapter, descriptors, shared: qt.QuantProfile) -> bytes:
    """Quantize adapter factors under the shared slot params and serialize.

    Factors are zero-padded to the slot rank in the quantized domain
    (pad value = zero point, which dequantizes to exactly 0).
    """
    payload = _pack_str(adapter.adapter_id)
    payload += struct.pack("<B", shared.lora_bits)
    payload += struct.pack("<I", len(descriptors))
    for d in sorted(descriptors, key=lambda d: d.slot_id):
        entry = adapter.entries.get(d.target_node_id)
        if entry is None:
            raise PackError(f"adapter {adapter.adapter_id!r} has no entry for lora node {d.target_node_id}")
        r = entry.rank
        if r > d.r_max:
            raise PackError(f"adapter rank {r} exceeds slot rank {d.r_max}")
        if entry.A.shape != (d.d_out, r) or entry.B.shape != (r, d.d_in):
            raise PackError(f"adapter factors {entry.A.shape}/{entry.B.shape} do not fit slot "
                            f"{d.a_shape}/{d.b_shape}")
        a_q = np.full(d.a_shape, d.a_params.zero_point, dtype=storage_dtype(d.a_params.bits, d.a_params.signed))
        b_q = np.full(d.b_shape, d.b_params.zero_point, dtype=storage_dtype(d.b_params.bits, d.b_params.signed))
        a_q[:, :r] = quantize_array(entry.A, d.a_params)
        b_q[:r, :] = quantize_array(entry.B, d.b_params)
        payload += struct.pack("<IIf", d.slot_id, r, np.float32(entry.alpha))
        payload += _pack_qparams(d.a_params) + _pack_qparams(d.b_params)
        payload += tz.qtns_bytes(a_q) + tz.qtns_bytes(b_q)
    return _wrap_payload(PACK_MAGIC, payload)


@dataclass
class PackedSlot:
    slot_id: int
    rank: int
    alpha: float
    a_params: QuantParams
    b_params: QuantParams
    a_q: np.ndarray
    b_q: np.ndarray


@dataclass
class LoRAPack:
    adapter_id: str
    lora_bits: int
    slots: dict   # slot_id -> PackedSlot


def unpack_lora(data: bytes) -> LoRAPack:
    payload = _open_payload(PACK_MAGIC, data)
    pos = 0
    adapter_id, pos = _unpack_str(payload, pos)
    (lora_bits,) = struct.unpack_from("<B", payload, pos)
    pos += 1
    (n_slots,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    slots = {}
    for _ in range(n_slots):
        slot_id, rank, alpha = struct.unpack_from("<IIf", payload, pos)
        pos += 12
        a_params, pos = _unpack_qparams(payload, pos)
        b_params, pos = _unpack_qparams(payload, pos)
        a_q, pos = tz.qtns_from_bytes(payload, pos)
        b_q, pos = tz.qtns_from_bytes(payload, pos)
        slots[slot_id] = PackedSlot(slot_id, rank, float(np.float32(alpha)), a_params, b_params, a_q, b_q)
    if pos != len(payload):
        raise FormatError("trailing bytes in pack payload")
    return LoRAPack(adapter_id, lora_bits, slots)
