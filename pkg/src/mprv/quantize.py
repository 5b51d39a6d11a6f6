"""Post-training quantization, structured pruning and the host-side
integer inference path.

Weights quantize symmetrically to signed lanes with power-of-two scales;
activations are unsigned with zero point 0 and per-layer power-of-two
scales taken from calibration max-abs statistics.  Power-of-two scales
keep every requantization a plain shift in the generated epilogues.

The host path (quantized_forward) evaluates the same integer arithmetic
as the generated instruction streams and is bit-identical to simulator
execution; it exists so accuracy over a dataset does not require
simulating every sample.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import EmptySample, InvalidRate, ShapeError
from .isa import PrecisionConfig
from .kernels import MAC_KINDS, POOL_KINDS, LayerSpec, QuantizedTensor
from .programs import LayerExec, host_layer_forward


@dataclass(frozen=True)
class FloatLayer:
    spec: LayerSpec
    weights: np.ndarray | None = None  # float32; conv/dense [C_o][kh][kw][C_i], dw [C][kh][kw]
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class FloatNetwork:
    name: str
    layers: tuple

    @property
    def mac_layer_indices(self) -> tuple:
        return tuple(i for i, l in enumerate(self.layers) if l.spec.kind in MAC_KINDS)

    @property
    def input_shape(self) -> tuple:
        s = self.layers[0].spec
        return (s.h_in, s.w_in, s.c_in)


@dataclass(frozen=True)
class LayerQuantConfig:
    """Per-MAC-layer choice: precision config plus pruning rate; the scale
    shifts are resolved during quantization."""

    cfg: PrecisionConfig
    prune: float = 0.0
    weight_scale_shift: int | None = None
    activation_scale_shift: int | None = None


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


# ----------------------------------------------------------------- float path

def float_forward(net: FloatNetwork, x: np.ndarray, collect_ranges: bool = False):
    """Float inference on a batch [n, h, w, c]; optionally records the
    max-abs input seen at every layer boundary."""
    x = np.asarray(x, dtype=np.float64)
    ranges = []
    for layer in net.layers:
        s = layer.spec
        if collect_ranges:
            ranges.append(float(np.max(np.abs(x))) if x.size else 0.0)
        if s.kind == "dense" and x.shape[1:] != (1, 1, s.c_in):
            x = x.reshape(x.shape[0], 1, 1, -1)  # flatten (y, x, c) for dense
        if s.kind in ("conv2d", "dense"):
            xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
            w = layer.weights.astype(np.float64)
            out = np.zeros((x.shape[0], s.h_out, s.w_out, s.c_out))
            for hk in range(s.kh):
                for wk in range(s.kw):
                    win = xp[:, hk : hk + s.h_out * s.stride : s.stride,
                             wk : wk + s.w_out * s.stride : s.stride, :]
                    out += np.einsum("nyxc,oc->nyxo", win, w[:, hk, wk, :], optimize=True)
            if layer.bias is not None:
                out += layer.bias
            x = np.maximum(out, 0.0) if s.relu else out
        elif s.kind == "depthwise_conv2d":
            xp = np.pad(x, ((0, 0), (s.pad, s.pad), (s.pad, s.pad), (0, 0)))
            w = layer.weights.astype(np.float64)
            out = np.zeros((x.shape[0], s.h_out, s.w_out, s.c_out))
            for hk in range(s.kh):
                for wk in range(s.kw):
                    win = xp[:, hk : hk + s.h_out * s.stride : s.stride,
                             wk : wk + s.w_out * s.stride : s.stride, :]
                    out += win * w[:, hk, wk]
            if layer.bias is not None:
                out += layer.bias
            x = np.maximum(out, 0.0) if s.relu else out
        elif s.kind in POOL_KINDS:
            n = x.shape[0]
            win = x.reshape(n, s.h_out, 2, s.w_out, 2, s.c_in)
            x = win.max(axis=(2, 4)) if s.kind == "maxpool" else win.mean(axis=(2, 4))
        else:
            raise ShapeError(f"float forward does not support {s.kind}")
    logits = x.reshape(x.shape[0], -1)
    return (logits, ranges) if collect_ranges else logits


def float_accuracy(net: FloatNetwork, images: np.ndarray, labels: np.ndarray) -> float:
    logits = float_forward(net, images)
    return float((logits.argmax(axis=1) == labels).mean())


def calibrate(net: FloatNetwork, sample: np.ndarray) -> list[float]:
    """Per-layer max-abs input statistics from float forward passes."""
    if sample.size == 0:
        raise EmptySample("calibration sample is empty")
    _, ranges = float_forward(net, sample, collect_ranges=True)
    return ranges


# ----------------------------------------------------------- scale selection

def _pow2_exp(max_abs: float, qmax: int) -> int:
    """Smallest power-of-two exponent e with qmax * 2^e >= max_abs."""
    if max_abs <= 0.0 or qmax <= 0:
        return 0
    return max(-31, min(31, math.ceil(math.log2(max_abs / qmax))))


def quantize_weights_int(weights: np.ndarray, bits: int):
    """Symmetric signed quantization; returns (int lanes, scale exponent)."""
    qmax = (1 << (bits - 1)) - 1
    e = _pow2_exp(float(np.max(np.abs(weights))) if weights.size else 0.0, qmax)
    q = round_half_away(np.asarray(weights, dtype=np.float64) / 2.0**e)
    q = np.clip(q, -(1 << (bits - 1)), qmax).astype(np.int64)
    return q, e


def quantize_layer(weights: np.ndarray, cfg: PrecisionConfig, max_abs: float | None = None):
    """Spec surface for weight quantization: packed lanes + scale exponent.

    max_abs defaults to the tensor's own range (per-tensor symmetric).
    """
    q, e = quantize_weights_int(weights, cfg.weight_bits)
    if max_abs is not None:
        e = _pow2_exp(max_abs, (1 << (cfg.weight_bits - 1)) - 1)
        q = round_half_away(np.asarray(weights, dtype=np.float64) / 2.0**e)
        q = np.clip(q, -(1 << (cfg.weight_bits - 1)), (1 << (cfg.weight_bits - 1)) - 1)
        q = q.astype(np.int64)
    flat = q.reshape(-1)
    lanes_per_word = 32 // cfg.weight_bits
    mask = (1 << cfg.weight_bits) - 1
    n_words = (flat.size + lanes_per_word - 1) // lanes_per_word
    words = np.zeros(n_words, dtype=np.uint64)
    for k in range(lanes_per_word):
        vals = flat[k::lanes_per_word]
        words[: vals.size] |= (vals.astype(np.int64) & mask).astype(np.uint64) << (
            k * cfg.weight_bits
        )
    return QuantizedTensor(
        data=words.astype(np.uint32),
        shape=tuple(weights.shape),
        lane_width=cfg.weight_bits,
        scale_exp=e,
    )


def dequantize(tensor_int: np.ndarray, exp: int) -> np.ndarray:
    return tensor_int.astype(np.float64) * 2.0**exp


def prune_structured(weights: np.ndarray, rate: float):
    """Zero the floor(rate * C_o) output channels of smallest L1 norm.

    Returns (pruned weights, boolean keep mask over output channels).
    """
    if not 0.0 <= rate <= 1.0:
        raise InvalidRate(f"pruning rate {rate} outside [0, 1]")
    c_out = weights.shape[0]
    k = int(math.floor(rate * c_out))
    keep = np.ones(c_out, dtype=bool)
    if k:
        norms = np.abs(weights.reshape(c_out, -1)).sum(axis=1)
        drop = np.argsort(norms, kind="stable")[:k]
        keep[drop] = False
    pruned = weights.copy()
    pruned[~keep] = 0
    return pruned, keep


# --------------------------------------------------------- network quantization

@dataclass(frozen=True)
class QuantizedNetwork:
    name: str
    layers: tuple  # LayerExec per float layer, same order
    input_exp: int  # input activation scale exponent
    configs: tuple  # resolved LayerQuantConfig per MAC layer

    @property
    def input_bits(self) -> int:
        return self.layers[0].in_bits


def quantize_network(
    net: FloatNetwork,
    configs: list[LayerQuantConfig],
    ranges: list[float],
    shift_deltas: list[int] | None = None,
) -> QuantizedNetwork:
    """Resolve per-layer scales/shifts and build integer-domain layers.

    configs has one entry per MAC layer; pooling layers inherit the lane
    width of the downstream MAC layer.  The final layer emits raw 32-bit
    scores (shift 0), everything else requantizes into the next layer's
    activation grid.

    shift_deltas (one per MAC layer) tighten (+1) or relax (-1) a layer's
    output grid exponent relative to the calibrated max-abs choice; a
    tighter grid trades clipping of rare peaks for finer resolution.
    """
    mac_idx = net.mac_layer_indices
    if len(configs) != len(mac_idx):
        raise ShapeError(f"need {len(mac_idx)} layer configs, got {len(configs)}")
    if len(ranges) != len(net.layers):
        raise ShapeError("calibration ranges do not match the network")
    if shift_deltas is None:
        shift_deltas = [0] * len(mac_idx)
    if len(shift_deltas) != len(mac_idx):
        raise ShapeError("need one shift delta per MAC layer")

    # edge widths: each layer input uses the activation width of the next
    # MAC layer at or after it
    n = len(net.layers)
    in_bits = [8] * n
    nxt = {}
    j = len(mac_idx) - 1
    for i in range(n - 1, -1, -1):
        if j >= 0 and mac_idx[j] == i:
            nxt[i] = j
            j -= 1
        elif i + 1 in nxt:
            nxt[i] = nxt[i + 1]
    for i in range(n):
        in_bits[i] = configs[nxt[i]].cfg.activation_bits

    # activation scale exponents per edge
    edge_exp = [0] * (n + 1)
    for i in range(n):
        a_bits = in_bits[i]
        edge_exp[i] = _pow2_exp(ranges[i], (1 << a_bits) - 1)

    layers = []
    resolved = []
    ci = 0
    for i, fl in enumerate(net.layers):
        s = fl.spec
        if s.kind not in MAC_KINDS:
            # pools keep values and scale; their edge grid equals the next MAC input
            out_bits = in_bits[i + 1] if i + 1 < n else 8
            edge_exp[i + 1] = edge_exp[i]
            layers.append(LayerExec(spec=s, in_bits=in_bits[i], out_bits=out_bits))
            continue
        qc = configs[ci]
        delta = shift_deltas[ci]
        ci += 1
        last = i == mac_idx[-1]
        pruned_w, keep = prune_structured(fl.weights, qc.prune)
        q_w, e_w = quantize_weights_int(pruned_w, qc.cfg.weight_bits)
        e_in = edge_exp[i]
        bias_q = None
        if fl.bias is not None:
            bias_q = round_half_away(
                np.asarray(fl.bias, dtype=np.float64) / 2.0 ** (e_w + e_in)
            ).astype(np.int64)
        if last:
            shift, out_bits = 0, 8
            edge_exp[i + 1] = e_w + e_in
        else:
            out_bits = in_bits[i + 1]
            e_out = _pow2_exp(ranges[i + 1], (1 << out_bits) - 1) - delta
            shift = max(0, e_out - e_w - e_in)
            edge_exp[i + 1] = e_w + e_in + shift
        survivors = tuple(int(c) for c in np.nonzero(keep)[0])
        layers.append(
            LayerExec(
                spec=s, cfg=qc.cfg, weights=q_w, bias=bias_q,
                survivors=survivors, shift=shift,
                in_bits=qc.cfg.activation_bits, out_bits=out_bits,
            )
        )
        resolved.append(
            replace(qc, weight_scale_shift=e_w, activation_scale_shift=e_in)
        )
    return QuantizedNetwork(
        name=net.name, layers=tuple(layers), input_exp=edge_exp[0], configs=tuple(resolved)
    )


def quantize_input(qnet: QuantizedNetwork, images: np.ndarray) -> np.ndarray:
    """Float images -> unsigned input lanes on the first edge's grid."""
    a_bits = qnet.input_bits
    q = round_half_away(np.asarray(images, dtype=np.float64) / 2.0**qnet.input_exp)
    return np.clip(q, 0, (1 << a_bits) - 1).astype(np.int64)


def quantized_forward(qnet: QuantizedNetwork, images: np.ndarray) -> np.ndarray:
    """Integer inference over a float batch [n, h, w, c] -> int32 scores.

    Bit-identical to executing the packed (or baseline) streams in the
    simulator on the same quantized inputs.
    """
    x = quantize_input(qnet, images)
    n = len(qnet.layers)
    for i, layer in enumerate(qnet.layers):
        s = layer.spec
        if s.kind == "dense" and x.shape[1:] != (1, 1, s.c_in):
            x = x.reshape(x.shape[0], 1, 1, -1)  # flatten (y, x, c) for dense
        x = host_layer_forward(layer, x, logits=(i == n - 1))
    return x.reshape(x.shape[0], -1).astype(np.int64)


def quantized_accuracy(qnet: QuantizedNetwork, images: np.ndarray, labels: np.ndarray) -> float:
    scores = quantized_forward(qnet, images)
    return float((scores.argmax(axis=1) == labels).mean())


def calibrate_shifts(
    net: FloatNetwork,
    configs: list[LayerQuantConfig],
    ranges: list[float],
    images: np.ndarray,
    labels: np.ndarray,
    candidates=(0, 1, 2, -1),
    passes: int = 2,
) -> list[int]:
    """Greedy per-layer refinement of the requantization grids.

    Coordinate descent over output-grid deltas, keeping whatever maximizes
    accuracy on the calibration sample; ties prefer the smaller adjustment.
    This is the only post-training tuning the pipeline performs.
    """
    n = len(net.mac_layer_indices)
    deltas = [0] * n
    best = quantized_accuracy(quantize_network(net, configs, ranges, deltas), images, labels)
    for _ in range(passes):
        changed = False
        for li in range(n - 1):  # the final layer emits raw scores
            for cand in candidates:
                if cand == deltas[li]:
                    continue
                trial = list(deltas)
                trial[li] = cand
                acc = quantized_accuracy(
                    quantize_network(net, configs, ranges, trial), images, labels
                )
                if acc > best + 1e-12:
                    best, deltas, changed = acc, trial, True
        if not changed:
            break
    return deltas
