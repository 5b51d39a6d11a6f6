"""Assembly of whole-layer and whole-network simulator programs.

Plans the data memory map (weight tables, bias tables, activation buffers,
logits buffer), packs operands host-side, generates the per-layer streams
and concatenates them with layer markers for attribution.  Also provides
the host-side integer forward pass that the generated streams must agree
with bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .isa import PrecisionConfig
from .kernels import ActLayout, BaselineLayout, LayerSpec
from .sim import Program

DATA_BASE = 64  # keep address 0 unused


@dataclass(frozen=True)
class LayerExec:
    """Integer-domain execution description of one layer."""

    spec: LayerSpec
    cfg: PrecisionConfig | None = None  # None for pools / residual
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    survivors: tuple = ()
    shift: int = 0
    in_bits: int = 8
    out_bits: int = 8

    def __post_init__(self):
        if self.spec.kind in kernels.MAC_KINDS:
            if self.cfg is None or self.weights is None:
                raise ConfigError(f"{self.spec.kind} layer needs cfg and weights")
            if self.cfg.activation_bits != self.in_bits:
                raise ConfigError("in_bits must equal the config activation width")
        if not self.survivors:
            object.__setattr__(self, "survivors", tuple(range(self.spec.c_out)))

    @property
    def mac_count(self) -> int:
        return self.spec.mac_count(len(self.survivors))


def _align(n: int) -> int:
    return (n + 3) & ~3


class _Cursor:
    def __init__(self, base=DATA_BASE):
        self.pos = base

    def take(self, nbytes: int) -> int:
        addr = self.pos
        self.pos = _align(self.pos + nbytes)
        return addr


def _bias_blob(layer: LayerExec) -> bytes:
    bias = layer.bias
    if bias is None:
        bias = np.zeros(layer.spec.c_out, dtype=np.int64)
    out = np.zeros(layer.spec.c_out, dtype=np.int64)
    out[list(layer.survivors)] = np.asarray(bias, dtype=np.int64)[list(layer.survivors)]
    return ((out & 0xFFFFFFFF).astype(np.uint32)).tobytes()


def _weight_blob(layer: LayerExec, packed: bool, in_layout: ActLayout) -> bytes:
    spec, cfg = layer.spec, layer.cfg
    if spec.kind == "depthwise_conv2d":
        if packed:
            return kernels.pack_depthwise_weights(spec, cfg, layer.weights).tobytes()
        return kernels.pack_baseline_weights(spec, layer.weights, layer.survivors).tobytes()
    if packed:
        return kernels.pack_conv_weights(
            spec, cfg, layer.weights, layer.survivors, in_layout
        ).tobytes()
    return kernels.pack_baseline_weights(spec, layer.weights, layer.survivors).tobytes()


def _edge_layout(h, w, c, bits, ring, packed, base=0) -> ActLayout:
    if packed:
        return ActLayout(h, w, c, bits, ring=ring, base=base)
    return BaselineLayout(h, w, c, 32, ring=ring, base=base, value_bits=bits)


def _gen_layer(layer, in_layout, out_layout, w_base, bias_base, packed, logits, in2_base=0):
    spec = layer.spec
    if spec.kind == "conv2d" or spec.kind == "dense":
        if packed:
            return kernels.gen_conv2d_packed(
                spec, layer.cfg, in_layout, out_layout, layer.survivors,
                layer.shift, w_base, bias_base, logits,
            )
        return kernels.gen_conv2d_baseline(
            spec, in_layout, out_layout, layer.survivors,
            layer.shift, w_base, bias_base, logits,
        )
    if spec.kind == "depthwise_conv2d":
        if logits:
            raise ConfigError("depthwise layers cannot be final")
        if packed:
            return kernels.gen_depthwise_packed(
                spec, layer.cfg, in_layout, out_layout, layer.survivors,
                layer.shift, w_base, bias_base,
            )
        return kernels.gen_depthwise_baseline(
            spec, in_layout, out_layout, layer.survivors, layer.shift, w_base, bias_base
        )
    if spec.kind in kernels.POOL_KINDS:
        if packed:
            return kernels.gen_pool_packed(spec, in_layout, out_layout)
        return kernels.gen_pool_baseline(spec, in_layout, out_layout)
    if spec.kind == "residual_add":
        if packed:
            return kernels.gen_residual_packed(spec, in_layout, in2_base, out_layout)
        return kernels.gen_residual_baseline(spec, in_layout, in2_base, out_layout)
    raise ShapeError(f"unsupported kind {spec.kind}")


def build_layer_program(
    layer: LayerExec,
    packed: bool,
    inputs=None,
    logits: bool = False,
    out_ring: int = 0,
):
    """One-layer program.  Returns (Program, out_layout).

    inputs: interior [h][w][c] tensors (two for residual_add); zeros when
    omitted, which leaves cycle counts unchanged (streams are branchless in
    the data).
    """
    spec = layer.spec
    cur = _Cursor()
    is_mac = spec.kind in kernels.MAC_KINDS

    in_layout = _edge_layout(spec.h_in, spec.w_in, spec.c_in, layer.in_bits, spec.pad, packed)

    w_base = bias_base = 0
    weight_bytes = bias_bytes = b""
    if is_mac:
        weight_bytes = _weight_blob(layer, packed, in_layout)
        bias_bytes = _bias_blob(layer)
        w_base = cur.take(len(weight_bytes))
        bias_base = cur.take(len(bias_bytes))

    in_layout = replace(in_layout, base=cur.take(in_layout.total_bytes))
    in2_layout = None
    if spec.kind == "residual_add":
        in2_layout = replace(in_layout, base=cur.take(in_layout.total_bytes))

    if logits:
        out_layout = _edge_layout(spec.h_out, spec.w_out, spec.c_out, 32, 0, packed=False)
    else:
        out_layout = _edge_layout(
            spec.h_out, spec.w_out, spec.c_out, layer.out_bits, out_ring, packed
        )
    out_layout = replace(out_layout, base=cur.take(out_layout.total_bytes))

    instrs = _gen_layer(
        layer, in_layout, out_layout, w_base, bias_base, packed, logits,
        in2_base=in2_layout.base if in2_layout else 0,
    )

    data_init = []
    if is_mac:
        data_init.append((w_base, weight_bytes))
        data_init.append((bias_base, bias_bytes))
    if inputs is not None:
        tensors = inputs if isinstance(inputs, (list, tuple)) else [inputs]
        data_init.append((in_layout.base, in_layout.host_write(tensors[0])))
        if in2_layout is not None:
            data_init.append((in2_layout.base, in2_layout.host_write(tensors[1])))

    prog = Program(
        instrs=instrs,
        data_init=data_init,
        markers=[(spec.kind, 0, len(instrs))],
        mem_size=_align(cur.pos + 256),
        meta={
            "mac_count": layer.mac_count,
            "workload": _fingerprint([layer]),
        },
    )
    return prog, out_layout


def _fingerprint(layers) -> str:
    parts = []
    for l in layers:
        s = l.spec
        parts.append(f"{s.kind}:{s.c_in}x{s.h_in}x{s.w_in}->{s.c_out}k{s.kh}s{s.stride}p{s.pad}")
    return "|".join(parts)


def build_network_program(layers: list[LayerExec], image: np.ndarray, packed: bool):
    """Sequential network program.  Returns (Program, logits_layout).

    The image is the first layer's interior input tensor, already quantized
    to its activation grid.  The last layer writes raw 32-bit accumulators
    (class scores); every other MAC layer requantizes into the next buffer.
    """
    if any(l.spec.kind == "residual_add" for l in layers):
        raise ShapeError("network builder supports linear chains")
    cur = _Cursor()

    # input edge
    first = layers[0]
    in_layout = _edge_layout(
        first.spec.h_in, first.spec.w_in, first.spec.c_in,
        first.in_bits, first.spec.pad, packed,
    )

    # per-layer weight/bias tables
    tables = []
    for layer in layers:
        if layer.spec.kind in kernels.MAC_KINDS:
            lay_in = _edge_layout(
                layer.spec.h_in, layer.spec.w_in, layer.spec.c_in,
                layer.in_bits, layer.spec.pad, packed,
            )
            wb = _weight_blob(layer, packed, lay_in)
            bb = _bias_blob(layer)
            tables.append((cur.take(len(wb)), wb, cur.take(len(bb)), bb))
        else:
            tables.append(None)

    # activation buffers: edge i feeds layer i.  Writers and readers get
    # separate views of the same bytes when a dense layer consumes a spatial
    # tensor (flatten): positions are channel-aligned, so the byte layouts
    # coincide exactly.
    edges = [replace(in_layout, base=cur.take(in_layout.total_bytes))]
    writer_edges = [None]
    for i, layer in enumerate(layers):
        s = layer.spec
        last = i == len(layers) - 1
        if last:
            lay = _edge_layout(s.h_out, s.w_out, s.c_out, 32, 0, packed=False)
            base = cur.take(lay.total_bytes)
            edges.append(replace(lay, base=base))
            writer_edges.append(edges[-1])
            continue
        nxt = layers[i + 1].spec
        if layer.out_bits != layers[i + 1].in_bits:
            raise ConfigError(
                f"layer {i} writes {layer.out_bits}-bit values but layer "
                f"{i + 1} reads {layers[i + 1].in_bits}-bit"
            )
        flatten = nxt.kind == "dense" and (s.h_out, s.w_out, s.c_out) != (1, 1, nxt.c_in)
        if flatten:
            if s.h_out * s.w_out * s.c_out != nxt.c_in:
                raise ShapeError("dense input size does not match the flattened tensor")
            reader = _edge_layout(1, 1, nxt.c_in, layer.out_bits, 0, packed)
            writer = _edge_layout(s.h_out, s.w_out, s.c_out, layer.out_bits, 0, packed)
            if not writer.word32 and s.c_out % writer.lanes_per_word:
                raise ShapeError("flatten requires whole-word channel groups")
            base = cur.take(reader.total_bytes)
            edges.append(replace(reader, base=base))
            writer_edges.append(replace(writer, base=base))
        else:
            lay = _edge_layout(s.h_out, s.w_out, s.c_out, layer.out_bits, nxt.pad, packed)
            base = cur.take(lay.total_bytes)
            edges.append(replace(lay, base=base))
            writer_edges.append(edges[-1])

    instrs = []
    markers = []
    data_init = []
    total_macs = 0
    for i, layer in enumerate(layers):
        last = i == len(layers) - 1
        w_base = bias_base = 0
        if tables[i] is not None:
            w_base, wb, bias_base, bb = tables[i]
            data_init.append((w_base, wb))
            data_init.append((bias_base, bb))
        body = _gen_layer(
            layer, edges[i], writer_edges[i + 1], w_base, bias_base, packed, logits=last
        )
        markers.append((f"layer{i}:{layer.spec.kind}", len(instrs), len(instrs) + len(body)))
        instrs.extend(body)
        total_macs += layer.mac_count

    data_init.append((edges[0].base, edges[0].host_write(image)))
    prog = Program(
        instrs=instrs,
        data_init=data_init,
        markers=markers,
        mem_size=_align(cur.pos + 256),
        meta={
            "mac_count": total_macs,
            "workload": _fingerprint(layers),
            "per_layer_macs": {
                f"layer{i}:{l.spec.kind}": l.mac_count for i, l in enumerate(layers)
            },
        },
    )
    return prog, edges[-1]


# --------------------------------------------------------- host reference path

def wrap32_array(a: np.ndarray) -> np.ndarray:
    return ((a.astype(np.int64) + (1 << 31)) % (1 << 32)) - (1 << 31)


def requantize_array(acc: np.ndarray, shift: int, bits: int) -> np.ndarray:
    """Vectorized twin of kernels.requantize (ReLU subsumed by the clamp)."""
    acc = wrap32_array(acc)
    if shift:
        acc = (acc + (1 << (shift - 1)) - (acc < 0)) >> shift
    return np.clip(acc, 0, (1 << bits) - 1).astype(np.int64)


def host_layer_forward(layer: LayerExec, x: np.ndarray, x2=None, logits=False) -> np.ndarray:
    """Integer forward of one layer on a batch [n, h, w, c].

    Bit-identical to simulator execution of the generated streams.
    """
    s = layer.spec
    x = np.asarray(x, dtype=np.int64)
    if x.shape[1:] != (s.h_in, s.w_in, s.c_in):
        raise ShapeError(f"input {x.shape} does not match layer")
    keep = np.zeros(s.c_out, dtype=bool)
    keep[list(layer.survivors)] = True

    if s.kind in ("conv2d", "dense"):
        w = layer.weights.astype(np.int64)
        b = np.zeros(s.c_out, dtype=np.int64)
        if layer.bias is not None:
            b = np.asarray(layer.bias, dtype=np.int64).copy()
        b[~keep] = 0
        xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
        acc = np.zeros((x.shape[0], s.h_out, s.w_out, s.c_out), dtype=np.int64)
        for hk in range(s.kh):
            for wk in range(s.kw):
                win = xp[:, hk : hk + s.h_out * s.stride : s.stride,
                         wk : wk + s.w_out * s.stride : s.stride, :]
                acc += np.einsum("nyxc,oc->nyxo", win, w[:, hk, wk, :], optimize=True)
        acc += b
        acc[..., ~keep] = 0
        if logits:
            return wrap32_array(acc)
        out = requantize_array(acc, layer.shift, layer.out_bits)
        out[..., ~keep] = 0
        return out

    if s.kind == "depthwise_conv2d":
        w = layer.weights.astype(np.int64)
        b = np.zeros(s.c_out, dtype=np.int64)
        if layer.bias is not None:
            b = np.asarray(layer.bias, dtype=np.int64).copy()
        b[~keep] = 0
        xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
        acc = np.zeros((x.shape[0], s.h_out, s.w_out, s.c_out), dtype=np.int64)
        for hk in range(s.kh):
            for wk in range(s.kw):
                win = xp[:, hk : hk + s.h_out * s.stride : s.stride,
                         wk : wk + s.w_out * s.stride : s.stride, :]
                acc += win * w[:, hk, wk]
        acc += b
        acc[..., ~keep] = 0
        out = requantize_array(acc, layer.shift, layer.out_bits)
        out[..., ~keep] = 0
        return out

    if s.kind in kernels.POOL_KINDS:
        n = x.shape[0]
        win = x.reshape(n, s.h_out, 2, s.w_out, 2, s.c_in)
        if s.kind == "maxpool":
            return win.max(axis=(2, 4))
        return (win.sum(axis=(2, 4)) + 2) >> 2

    if s.kind == "residual_add":
        y = np.asarray(x2, dtype=np.int64)
        return np.clip(x + y, 0, (1 << layer.out_bits) - 1)

    raise ShapeError(f"unsupported kind {s.kind}")


def read_logits(layout: ActLayout, mem) -> np.ndarray:
    """Class-score vector from the final 32-bit buffer."""
    return layout.host_read(mem).reshape(-1)
