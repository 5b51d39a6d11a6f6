"""File formats: model containers, datasets, manifests, CSV reports.

Model container ("MRVW"): little-endian binary holding per-layer records.

    header:  magic "MRVW" | version u8 | flavor u8 (0 float, 1 quantized)
             | reserved u16 | record count u16 | name length u8 | name bytes
             | input scale exponent i8 (quantized flavor; 0 otherwise)
    record:  layer index u16 | kind u8 | geometry (c_in u16, c_out u16,
             h_in u16, w_in u16, kh u8, kw u8, stride u8, pad u8, relu u8)
             | weight_bits u8 | act_bits u8 | shift u8 | out_bits u8
             | weight scale exponent i8 | bias scale exponent i8
             | survivor count u16 | survivor indices u16 each
             | weight word count u32 | weight words (u32 LE)
             | bias word count u32 | bias words (u32 LE)

Float-flavor records store IEEE-754 float32 values in the word slots and
zero the quantization fields.  Pool records carry geometry only.

Datasets: count u32 | height u32 | width u32 | classes u32, then raw pixel
bytes and label bytes (see fixtures.parse_dataset).

Run manifests are line-oriented text: a `version 1` line, then
`<key> <value>` pairs; unknown keys are rejected with their line number.

All writers go through a temp file + atomic rename; a failed write never
leaves a partial file behind.
"""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ManifestError
from .isa import PrecisionConfig
from .kernels import LayerSpec
from .programs import LayerExec
from .quantize import FloatLayer, FloatNetwork, LayerQuantConfig, QuantizedNetwork

MAGIC = b"MRVW"
VERSION = 1

_KIND_CODE = {
    "conv2d": 1,
    "depthwise_conv2d": 2,
    "dense": 3,
    "maxpool": 4,
    "avgpool": 5,
    "residual_add": 6,
}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


def atomic_write(path: str, data: bytes | str):
    """Write via a temp file in the same directory, then rename."""
    mode = "wb" if isinstance(data, bytes) else "w"
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ----------------------------------------------------------- model container

def _pack_geometry(spec: LayerSpec) -> bytes:
    return struct.pack(
        "<HHHHBBBBB",
        spec.c_in, spec.c_out, spec.h_in, spec.w_in,
        spec.kh, spec.kw, spec.stride, spec.pad, int(spec.relu),
    )


def _unpack_geometry(buf, off):
    c_in, c_out, h_in, w_in, kh, kw, stride, pad, relu = struct.unpack_from(
        "<HHHHBBBBB", buf, off
    )
    return (c_in, c_out, h_in, w_in, kh, kw, stride, pad, bool(relu)), off + 13


def _pack_record(
    index, spec, weight_bits, act_bits, shift, out_bits, w_exp, b_exp,
    survivors, weight_words: np.ndarray, bias_words: np.ndarray,
) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<HB", index, _KIND_CODE[spec.kind]))
    out.write(_pack_geometry(spec))
    out.write(struct.pack("<BBBBbb", weight_bits, act_bits, shift, out_bits, w_exp, b_exp))
    out.write(struct.pack("<H", len(survivors)))
    out.write(struct.pack(f"<{len(survivors)}H", *survivors))
    for words in (weight_words, bias_words):
        w = np.asarray(words, dtype=np.uint32)
        out.write(struct.pack("<I", w.size))
        out.write(w.astype("<u4").tobytes())
    return out.getvalue()


def _unpack_record(buf, off):
    index, kind_code = struct.unpack_from("<HB", buf, off)
    off += 3
    geo, off = _unpack_geometry(buf, off)
    weight_bits, act_bits, shift, out_bits, w_exp, b_exp = struct.unpack_from(
        "<BBBBbb", buf, off
    )
    off += 6
    (n_surv,) = struct.unpack_from("<H", buf, off)
    off += 2
    survivors = struct.unpack_from(f"<{n_surv}H", buf, off)
    off += 2 * n_surv
    arrays = []
    for _ in range(2):
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        arrays.append(np.frombuffer(buf, dtype="<u4", count=count, offset=off).copy())
        off += 4 * count
    spec = LayerSpec(_CODE_KIND[kind_code], *geo)
    return (
        dict(
            index=index, spec=spec, weight_bits=weight_bits, act_bits=act_bits,
            shift=shift, out_bits=out_bits, w_exp=w_exp, b_exp=b_exp,
            survivors=survivors, weight_words=arrays[0], bias_words=arrays[1],
        ),
        off,
    )


def _container(flavor: int, name: str, input_exp: int, records: list[bytes]) -> bytes:
    head = MAGIC + struct.pack(
        "<BBHHB", VERSION, flavor, 0, len(records), len(name.encode())
    ) + name.encode() + struct.pack("<b", input_exp)
    return head + b"".join(records)


def _parse_container(blob: bytes):
    if blob[:4] != MAGIC:
        raise IoError("not a model container (bad magic)")
    version, flavor, _res, count, name_len = struct.unpack_from("<BBHHB", blob, 4)
    if version != VERSION:
        raise IoError(f"unsupported container version {version}")
    off = 11
    name = blob[off : off + name_len].decode()
    off += name_len
    (input_exp,) = struct.unpack_from("<b", blob, off)
    off += 1
    records = []
    for _ in range(count):
        rec, off = _unpack_record(blob, off)
        records.append(rec)
    if off != len(blob):
        raise IoError("trailing bytes after the last record")
    return flavor, name, input_exp, records


def save_float_network(net: FloatNetwork, path: str):
    records = []
    for i, layer in enumerate(net.layers):
        w = layer.weights if layer.weights is not None else np.zeros(0, np.float32)
        b = layer.bias if layer.bias is not None else np.zeros(0, np.float32)
        records.append(
            _pack_record(
                i, layer.spec, 0, 0, 0, 0, 0, 0, (),
                np.asarray(w, np.float32).reshape(-1).view(np.uint32),
                np.asarray(b, np.float32).reshape(-1).view(np.uint32),
            )
        )
    atomic_write(path, _container(0, net.name, 0, records))


def load_float_network(path: str) -> FloatNetwork:
    try:
        blob = open(path, "rb").read()
    except OSError as e:
        raise IoError(f"cannot read model {path}: {e}") from e
    flavor, name, _exp, records = _parse_container(blob)
    if flavor != 0:
        raise IoError(f"{path} is not a float model")
    layers = []
    for rec in records:
        spec = rec["spec"]
        weights = bias = None
        if rec["weight_words"].size:
            shape = (
                (spec.c_out, spec.kh, spec.kw)
                if spec.kind == "depthwise_conv2d"
                else (spec.c_out, spec.kh, spec.kw, spec.c_in)
            )
            weights = rec["weight_words"].view(np.float32).reshape(shape).copy()
        if rec["bias_words"].size:
            bias = rec["bias_words"].view(np.float32).copy()
        layers.append(FloatLayer(spec, weights, bias))
    return FloatNetwork(name, tuple(layers))


def save_quantized_network(qnet: QuantizedNetwork, path: str):
    records = []
    mac_i = 0
    for i, layer in enumerate(qnet.layers):
        spec = layer.spec
        if layer.cfg is None:
            records.append(
                _pack_record(i, spec, 0, layer.in_bits, 0, layer.out_bits,
                             0, 0, (), np.zeros(0, np.uint32), np.zeros(0, np.uint32))
            )
            continue
        w = (layer.weights.astype(np.int64).reshape(-1) & 0xFFFFFFFF).astype(np.uint32)
        b = np.zeros(0, np.uint32)
        if layer.bias is not None:
            b = (np.asarray(layer.bias, np.int64) & 0xFFFFFFFF).astype(np.uint32)
        qc = qnet.configs[mac_i] if mac_i < len(qnet.configs) else None
        mac_i += 1
        w_exp = qc.weight_scale_shift if qc and qc.weight_scale_shift is not None else 0
        b_exp = qc.activation_scale_shift if qc and qc.activation_scale_shift is not None else 0
        records.append(
            _pack_record(
                i, spec, layer.cfg.weight_bits, layer.cfg.activation_bits,
                layer.shift, layer.out_bits, w_exp, b_exp, layer.survivors, w, b,
            )
        )
    atomic_write(path, _container(1, qnet.name, qnet.input_exp, records))


def load_quantized_network(path: str) -> QuantizedNetwork:
    try:
        blob = open(path, "rb").read()
    except OSError as e:
        raise IoError(f"cannot read model {path}: {e}") from e
    flavor, name, input_exp, records = _parse_container(blob)
    if flavor != 1:
        raise IoError(f"{path} is not a quantized model")
    layers = []
    configs = []
    for rec in records:
        spec = rec["spec"]
        if rec["weight_bits"] == 0:
            layers.append(
                LayerExec(spec=spec, in_bits=rec["act_bits"], out_bits=rec["out_bits"])
            )
            continue
        cfg = PrecisionConfig(rec["weight_bits"], rec["act_bits"])
        shape = (
            (spec.c_out, spec.kh, spec.kw)
            if spec.kind == "depthwise_conv2d"
            else (spec.c_out, spec.kh, spec.kw, spec.c_in)
        )
        weights = rec["weight_words"].astype(np.int64)
        weights[weights >= 1 << 31] -= 1 << 32
        bias = rec["bias_words"].astype(np.int64)
        bias[bias >= 1 << 31] -= 1 << 32
        layers.append(
            LayerExec(
                spec=spec, cfg=cfg, weights=weights.reshape(shape),
                bias=bias if bias.size else None,
                survivors=tuple(rec["survivors"]), shift=rec["shift"],
                in_bits=cfg.activation_bits, out_bits=rec["out_bits"],
            )
        )
        configs.append(
            LayerQuantConfig(cfg, 1.0 - len(rec["survivors"]) / spec.c_out)
        )
    return QuantizedNetwork(name, tuple(layers), input_exp, tuple(configs))


# ---------------------------------------------------------------- manifests

@dataclass
class RunManifest:
    model: str
    dataset: str
    seed: int = 42
    weights: str | None = None
    cycle_model: str | None = None
    layer_configs: dict = field(default_factory=dict)  # index -> LayerQuantConfig
    default_config: str | None = None


_MANIFEST_KEYS = {"model", "dataset", "seed", "weights", "cycle_model",
                  "layer", "layers_default"}


def parse_manifest(text: str, base_dir: str = ".") -> RunManifest:
    fields = {"model": None, "dataset": None, "seed": 42,
              "weights": None, "cycle_model": None}
    layer_configs = {}
    default_config = None
    lines = text.splitlines()
    if not lines or lines[0].split("#")[0].strip() != "version 1":
        raise ManifestError("line 1: manifest must start with 'version 1'")
    for ln, raw in enumerate(lines[1:], 2):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0]
        if key not in _MANIFEST_KEYS:
            raise ManifestError(f"line {ln}: unknown key {key!r}")
        try:
            if key == "seed":
                fields["seed"] = int(parts[1])
            elif key == "layers_default":
                default_config = parts[1]
            elif key == "layer":
                idx = int(parts[1])
                cfg_name = parts[2]
                prune = 0.0
                rest = parts[3:]
                if rest:
                    if rest[0] != "prune" or len(rest) != 2:
                        raise ManifestError(
                            f"line {ln}: expected 'layer <i> <cfg> [prune <rate>]'"
                        )
                    prune = float(rest[1])
                from .isa import config_for

                layer_configs[idx] = LayerQuantConfig(config_for(cfg_name), prune)
            else:
                fields[key] = os.path.join(base_dir, parts[1])
        except ManifestError:
            raise
        except (IndexError, ValueError) as e:
            raise ManifestError(f"line {ln}: {e}") from e
    if fields["model"] is None or fields["dataset"] is None:
        raise ManifestError("manifest needs both 'model' and 'dataset' entries")
    return RunManifest(
        model=fields["model"], dataset=fields["dataset"], seed=fields["seed"],
        weights=fields["weights"], cycle_model=fields["cycle_model"],
        layer_configs=layer_configs, default_config=default_config,
    )


def load_manifest(path: str) -> RunManifest:
    try:
        text = open(path).read()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    return parse_manifest(text, base_dir=os.path.dirname(os.path.abspath(path)))


# --------------------------------------------------------------------- CSV

def write_csv(path: str, header: list, rows: list):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    atomic_write(path, buf.getvalue())


def read_csv(path: str):
    try:
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    if not rows:
        raise IoError(f"{path} is empty")
    return rows[0], rows[1:]
