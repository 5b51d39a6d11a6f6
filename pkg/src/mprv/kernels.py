"""Instruction-stream generators for quantized DNN layers.

Two stream families per layer kind:

* baseline: scalar 32-bit code in the shape of the classic nested
  multiply-accumulate loop (one lw per weight and per activation element,
  mul + add, pointer-bump inner loops).
* packed: nn_mac streams over packed operands.  Four output channels are
  processed per activation-word load (the loaded word is reused across
  their accumulators), and when the weight word carries more lanes than one
  instruction consumes it is rotated right in-register between macs instead
  of being reloaded.

Activation buffers are HWC with the channel dimension padded to a whole
number of lanes and an optional spatial zero ring for convolution padding:
position (y, x) of a buffer with padded channel count C' starts at lane
(y*(W+2r) + x) * C'.  Zero padding is materialised in memory, never
branch-guarded, so cycle counts are data-independent.

The requantization epilogue scales a 32-bit accumulator back to an
unsigned lane value: round-half-away-from-zero power-of-two shift, then
clamp to [0, 2^bits - 1] (which subsumes ReLU for unsigned outputs).
Final layers skip the epilogue and store raw 32-bit accumulators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .isa import Instruction, PrecisionConfig

MAC_KINDS = ("conv2d", "depthwise_conv2d", "dense")
POOL_KINDS = ("maxpool", "avgpool")
ALL_KINDS = MAC_KINDS + POOL_KINDS + ("residual_add",)

BLOCK = 4  # output channels sharing one activation-word load


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    h_in: int
    w_in: int
    kh: int = 1
    kw: int = 1
    stride: int = 1
    pad: int = 0
    relu: bool = False

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ShapeError(f"unknown layer kind {self.kind!r}")
        if min(self.c_in, self.c_out, self.h_in, self.w_in, self.kh, self.kw) < 1:
            raise ShapeError("layer dimensions must be positive")
        if self.kind == "dense" and (self.h_in, self.w_in, self.kh, self.kw) != (1, 1, 1, 1):
            raise ShapeError("dense layers use h=w=kh=kw=1")
        if self.kind == "depthwise_conv2d" and self.c_in != self.c_out:
            raise ShapeError("depthwise layers keep the channel count")
        if self.kind in POOL_KINDS:
            if not (self.kh == self.kw == self.stride == 2 and self.pad == 0):
                raise ShapeError("pooling supports 2x2 windows with stride 2")
            if self.c_in != self.c_out:
                raise ShapeError("pooling keeps the channel count")
        if self.kind == "residual_add" and (
            self.c_in != self.c_out or self.kh != 1 or self.kw != 1
        ):
            raise ShapeError("residual add is elementwise")
        if (self.h_in + 2 * self.pad - self.kh) % self.stride:
            raise ShapeError("height does not divide into whole output rows")
        if (self.w_in + 2 * self.pad - self.kw) % self.stride:
            raise ShapeError("width does not divide into whole output columns")

    @property
    def h_out(self) -> int:
        return (self.h_in + 2 * self.pad - self.kh) // self.stride + 1

    @property
    def w_out(self) -> int:
        return (self.w_in + 2 * self.pad - self.kw) // self.stride + 1

    def mac_count(self, surviving: int | None = None) -> int:
        if self.kind == "conv2d":
            c_o = self.c_out if surviving is None else surviving
            return c_o * self.h_out * self.w_out * self.c_in * self.kh * self.kw
        if self.kind == "depthwise_conv2d":
            c = self.c_out if surviving is None else surviving
            return c * self.h_out * self.w_out * self.kh * self.kw
        if self.kind == "dense":
            c_o = self.c_out if surviving is None else surviving
            return c_o * self.c_in
        return 0


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed lanes in 32-bit words, lane 0 in the LSBs of word 0."""

    data: np.ndarray  # uint32 words
    shape: tuple
    lane_width: int
    scale_exp: int  # real value = lane * 2**scale_exp
    zero_point: int = 0


def requantize(acc: int, shift: int, relu: bool = False, bits: int = 8) -> int:
    """32-bit accumulator -> unsigned lane value.

    Matches the generated epilogue exactly: add 2^(shift-1), minus one for
    negative accumulators (round half away from zero), arithmetic shift,
    optional ReLU, clamp to the lane range.
    """
    if not 0 <= shift <= 31:
        raise ConfigError(f"requantize shift {shift} out of range")
    if shift:
        acc = (acc + (1 << (shift - 1)) + (-1 if acc < 0 else 0)) >> shift
    if relu and acc < 0:
        acc = 0
    return min(max(acc, 0), (1 << bits) - 1)


# ------------------------------------------------------------------ layouts

@dataclass(frozen=True)
class ActLayout:
    """Geometry of one activation buffer in simulator memory."""

    h: int
    w: int
    c: int
    lane_width: int  # 2/4/8 for packed lanes, 32 for baseline words
    ring: int = 0
    base: int = 0

    @property
    def word32(self) -> bool:
        return self.lane_width == 32

    @property
    def lanes_per_word(self) -> int:
        return 1 if self.word32 else 32 // self.lane_width

    @property
    def c_pad(self) -> int:
        l = self.lanes_per_word
        return self.c if self.word32 else (self.c + l - 1) // l * l

    @property
    def bytes_per_position(self) -> int:
        return self.c_pad * 4 if self.word32 else self.c_pad * self.lane_width // 8

    @property
    def row_bytes(self) -> int:
        return (self.w + 2 * self.ring) * self.bytes_per_position

    @property
    def total_bytes(self) -> int:
        return (self.h + 2 * self.ring) * self.row_bytes

    def pos_offset(self, sy: int, sx: int) -> int:
        """Byte offset of storage position (sy, sx) from base."""
        return (sy * (self.w + 2 * self.ring) + sx) * self.bytes_per_position

    def interior_offset(self, y: int, x: int) -> int:
        return self.pos_offset(y + self.ring, x + self.ring)

    def host_write(self, tensor: np.ndarray) -> bytes:
        """Render an interior [h][w][c] integer tensor into buffer bytes."""
        t = np.asarray(tensor)
        if t.shape != (self.h, self.w, self.c):
            raise ShapeError(f"tensor {t.shape} does not match layout")
        hs, ws = self.h + 2 * self.ring, self.w + 2 * self.ring
        if self.word32:
            buf = np.zeros((hs, ws, self.c), dtype=np.uint32)
            buf[self.ring : self.ring + self.h, self.ring : self.ring + self.w] = (
                t.astype(np.int64) & 0xFFFFFFFF
            ).astype(np.uint32)
            return buf.tobytes()
        if t.min() < 0 or t.max() > (1 << self.lane_width) - 1:
            raise ShapeError("activation values exceed the lane range")
        full = np.zeros((hs, ws, self.c_pad), dtype=np.uint64)
        full[self.ring : self.ring + self.h, self.ring : self.ring + self.w, : self.c] = t
        lanes = full.reshape(-1, self.lanes_per_word)
        shifts = np.arange(self.lanes_per_word, dtype=np.uint64) * np.uint64(self.lane_width)
        words = (lanes << shifts).sum(axis=1, dtype=np.uint64) & np.uint64(0xFFFFFFFF)
        return words.astype(np.uint32).tobytes()

    def host_read(self, mem: bytes | bytearray) -> np.ndarray:
        """Interior [h][w][c] tensor from buffer bytes (lanes are unsigned)."""
        blob = bytes(mem[self.base : self.base + self.total_bytes])
        hs, ws = self.h + 2 * self.ring, self.w + 2 * self.ring
        if self.word32:
            arr = np.frombuffer(blob, dtype="<u4").reshape(hs, ws, self.c)
            out = arr[self.ring : self.ring + self.h, self.ring : self.ring + self.w]
            return out.astype(np.uint32).view(np.int32).astype(np.int32)
        words = np.frombuffer(blob, dtype="<u4").astype(np.uint64)
        shifts = np.arange(self.lanes_per_word, dtype=np.uint64) * np.uint64(self.lane_width)
        lanes = (words[:, None] >> shifts) & np.uint64((1 << self.lane_width) - 1)
        lanes = lanes.reshape(hs, ws, self.c_pad)[
            self.ring : self.ring + self.h, self.ring : self.ring + self.w, : self.c
        ]
        return lanes.astype(np.int32)


@dataclass(frozen=True)
class BaselineLayout(ActLayout):
    """32-bit element buffer whose values live on a narrower quantized grid."""

    value_bits: int = 8


def value_bits_of(layout: ActLayout) -> int:
    return layout.value_bits if isinstance(layout, BaselineLayout) else layout.lane_width


# ------------------------------------------------------------------- assembler

class R:
    """Register conventions used by the generators."""

    ZERO = 0
    A_WIN = 1  # activation window origin for the current output position
    W_PTR = 2  # streaming weight pointer (working copy)
    OUT = 3  # current output position base
    BIAS = 4
    ACC = (5, 6, 7, 8)
    WREG = (9, 10, 11, 12)
    AREG = 13
    T0 = 14
    T1 = 15
    ROUND = 16
    CMAX = 17
    OUTW = 18
    Y = 19
    X = 20
    ATMP = 23
    T2 = 24
    AEND = 25
    W_BASE = 26
    IN2 = 27
    T3 = 28


class Asm:
    """Small instruction-list builder with labels and branch fixups."""

    def __init__(self):
        self.instrs: list[Instruction] = []
        self._labels: dict[str, int] = {}
        self._fixups: list[tuple[int, str]] = []
        self._unique = 0

    def fresh(self, stem: str) -> str:
        self._unique += 1
        return f"{stem}_{self._unique}"

    def label(self, name: str):
        self._labels[name] = len(self.instrs)

    def emit(self, op, rd=0, rs1=0, rs2=0, imm=0, cfg=None):
        self.instrs.append(Instruction(op, rd, rs1, rs2, imm, cfg))

    def branch(self, op: str, rs1: int, rs2: int, label: str):
        self._fixups.append((len(self.instrs), label))
        self.instrs.append(Instruction(op, 0, rs1, rs2, 0))

    def finalize(self) -> list[Instruction]:
        for idx, label in self._fixups:
            target = self._labels[label]
            off = (target - idx) * 4
            if not -4096 <= off <= 4094:
                raise ConfigError(f"branch to {label} out of range ({off} bytes)")
            old = self.instrs[idx]
            self.instrs[idx] = Instruction(old.op, 0, old.rs1, old.rs2, off)
        self._fixups.clear()
        return self.instrs

    def lw(self, rd, rs1, imm=0):
        self.emit("lw", rd, rs1, imm=imm)

    def sw(self, rs2, rs1, imm=0):
        self.emit("sw", rs1=rs1, rs2=rs2, imm=imm)

    def addi(self, rd, rs1, imm):
        self.emit("addi", rd, rs1, imm=imm)

    def add(self, rd, rs1, rs2):
        self.emit("add", rd, rs1, rs2)

    def sub(self, rd, rs1, rs2):
        self.emit("sub", rd, rs1, rs2)

    def mul(self, rd, rs1, rs2):
        self.emit("mul", rd, rs1, rs2)

    def and_(self, rd, rs1, rs2):
        self.emit("and", rd, rs1, rs2)

    def or_(self, rd, rs1, rs2):
        self.emit("or", rd, rs1, rs2)

    def andi(self, rd, rs1, imm):
        self.emit("andi", rd, rs1, imm=imm)

    def xori(self, rd, rs1, imm):
        self.emit("xori", rd, rs1, imm=imm)

    def slli(self, rd, rs1, imm):
        self.emit("slli", rd, rs1, imm=imm)

    def srli(self, rd, rs1, imm):
        self.emit("srli", rd, rs1, imm=imm)

    def srai(self, rd, rs1, imm):
        self.emit("srai", rd, rs1, imm=imm)

    def mv(self, rd, rs1):
        self.addi(rd, rs1, 0)

    def li(self, rd, value):
        value = int(value)
        if -2048 <= value <= 2047:
            self.addi(rd, R.ZERO, value)
            return
        hi = ((value + 0x800) >> 12) & 0xFFFFF
        lo = ((value - (hi << 12)) + 0x800) % 4096 - 0x800
        self.emit("lui", rd, imm=hi)
        if lo:
            self.addi(rd, rd, lo)

    def nn_mac(self, cfg: PrecisionConfig, rd, rs1, rs2):
        self.emit(cfg.mnemonic, rd, rs1, rs2, cfg=cfg)


class _OffsetLoads:
    """lw at rising offsets from a streaming pointer, rebasing the pointer
    when an offset would leave the 12-bit immediate range."""

    def __init__(self, asm: Asm, reg: int):
        self.asm = asm
        self.reg = reg
        self.rebase = 0

    def lw(self, rd: int, offset: int):
        delta = offset - self.rebase
        while delta > 2040:
            step = min(delta & ~3, 2044)
            self.asm.addi(self.reg, self.reg, step)
            self.rebase += step
            delta = offset - self.rebase
        self.asm.lw(rd, self.reg, delta)


class _ActLoader:
    """Loads activation words relative to the window origin.  Uses plain
    offsets when they fit the immediate; otherwise rebases per kernel row
    into a scratch register.  reset() must be called at the start of every
    loop body since the window register changes between iterations."""

    def __init__(self, asm: Asm, max_offset: int):
        self.asm = asm
        self.direct = max_offset <= 2040
        self.base = None

    def reset(self):
        self.base = None

    def load(self, rd, off, run_base=0):
        if self.direct:
            self.asm.lw(rd, R.A_WIN, off)
            return
        if self.base != run_base:
            if -2048 <= run_base <= 2047:
                self.asm.addi(R.ATMP, R.A_WIN, run_base)
            else:
                self.asm.li(R.T3, run_base)
                self.asm.add(R.ATMP, R.A_WIN, R.T3)
            self.base = run_base
        self.asm.lw(rd, R.ATMP, off - run_base)


def _add_const(asm: Asm, reg: int, value: int):
    if value == 0:
        return
    if -2048 <= value <= 2047:
        asm.addi(reg, reg, value)
    else:
        asm.li(R.T3, value)
        asm.add(reg, reg, R.T3)


# --------------------------------------------------------------- weight packing

def _survivor_blocks(survivors):
    survivors = sorted(survivors)
    return [tuple(survivors[i : i + BLOCK]) for i in range(0, len(survivors), BLOCK)]


def _pack_lane_run(values, lane_width: int) -> list[int]:
    """Signed lane values -> packed words, run padded to a word boundary."""
    lanes_per_word = 32 // lane_width
    words = []
    mask = (1 << lane_width) - 1
    for i in range(0, len(values), lanes_per_word):
        chunk = values[i : i + lanes_per_word]
        word = 0
        for k, v in enumerate(chunk):
            word |= (int(v) & mask) << (k * lane_width)
        words.append(word)
    return words


def _check_mac_shape(spec: LayerSpec, weights: np.ndarray):
    want = (spec.c_out, spec.kh, spec.kw, spec.c_in)
    if tuple(weights.shape) != want:
        raise ShapeError(f"weights {weights.shape} do not match layer {want}")


def pack_conv_weights(
    spec: LayerSpec,
    cfg: PrecisionConfig,
    weights: np.ndarray,
    survivors,
    in_layout: ActLayout,
) -> np.ndarray:
    """Block-interleaved packed weight stream for gen_conv2d_packed.

    Stream order: per survivor block, per kernel row, per word index within
    the row run, one word per block member.  Kernel-row runs carry the same
    channel padding as the activation buffer so weight lanes line up with
    activation lanes chunk for chunk.
    """
    _check_mac_shape(spec, weights)
    run_lanes = spec.kw * in_layout.c_pad
    words = []
    for block in _survivor_blocks(survivors):
        for h_k in range(spec.kh):
            per_channel = []
            for ch in block:
                lanes = np.zeros(run_lanes, dtype=np.int64)
                for w_k in range(spec.kw):
                    start = w_k * in_layout.c_pad
                    lanes[start : start + spec.c_in] = weights[ch, h_k, w_k, :]
                per_channel.append(_pack_lane_run(lanes, cfg.weight_bits))
            for wi in range(len(per_channel[0])):
                for pc in per_channel:
                    words.append(pc[wi])
    return np.array(words, dtype=np.uint32)


def pack_depthwise_weights(
    spec: LayerSpec, cfg: PrecisionConfig, weights: np.ndarray
) -> np.ndarray:
    """Per kernel position, all channels packed along the lane axis."""
    if weights.shape != (spec.c_out, spec.kh, spec.kw):
        raise ShapeError(f"depthwise weights {weights.shape} do not match layer")
    lanes_per_word = 32 // cfg.weight_bits
    c_slots = (spec.c_out + lanes_per_word - 1) // lanes_per_word * lanes_per_word
    words = []
    for h_k in range(spec.kh):
        for w_k in range(spec.kw):
            lanes = np.zeros(c_slots, dtype=np.int64)
            lanes[: spec.c_out] = weights[:, h_k, w_k]
            words.extend(_pack_lane_run(lanes, cfg.weight_bits))
    return np.array(words, dtype=np.uint32)


def pack_baseline_weights(spec: LayerSpec, weights: np.ndarray, survivors) -> np.ndarray:
    """Survivor-ordered scalar weight stream as 32-bit two's complement."""
    if spec.kind == "depthwise_conv2d":
        if weights.shape != (spec.c_out, spec.kh, spec.kw):
            raise ShapeError("depthwise weights do not match layer")
    else:
        _check_mac_shape(spec, weights)
    flat = weights[sorted(survivors)].reshape(-1)
    return (flat.astype(np.int64) & 0xFFFFFFFF).astype(np.uint32)


# ------------------------------------------------------------ requant epilogue

def _emit_requant(asm: Asm, acc: int, shift: int):
    if shift:
        asm.srai(R.T0, acc, 31)
        asm.add(acc, acc, R.ROUND)
        asm.add(acc, acc, R.T0)
        asm.srai(acc, acc, shift)
    # max(0, acc): covers ReLU for unsigned output lanes
    asm.srai(R.T0, acc, 31)
    asm.xori(R.T0, R.T0, -1)
    asm.and_(acc, acc, R.T0)
    # min(acc, cmax)
    asm.sub(R.T0, acc, R.CMAX)
    asm.srai(R.T1, R.T0, 31)
    asm.and_(R.T0, R.T0, R.T1)
    asm.add(acc, R.CMAX, R.T0)


class _OutWordPacker:
    """Assembles unsigned output lanes into words at the OUT pointer.

    When another code group has already written lanes of the same word
    (channel blocks each run their own spatial loop), the word is reloaded
    and new lanes are OR-ed in.
    """

    def __init__(self, asm: Asm, layout: ActLayout):
        self.asm = asm
        self.layout = layout
        self.word_idx = None
        self.started = False

    def put(self, src_reg: int, channel: int, preload: bool = False):
        if self.layout.word32:
            self.asm.sw(src_reg, R.OUT, 4 * channel)
            return
        lanes = self.layout.lanes_per_word
        widx, lane = channel // lanes, channel % lanes
        if widx != self.word_idx:
            self.flush()
            self.word_idx = widx
            if preload:
                self.asm.lw(R.OUTW, R.OUT, 4 * widx)
                self.started = True
        shift = lane * self.layout.lane_width
        if not self.started:
            if shift:
                self.asm.slli(R.OUTW, src_reg, shift)
            else:
                self.asm.mv(R.OUTW, src_reg)
            self.started = True
        elif shift:
            self.asm.slli(R.T0, src_reg, shift)
            self.asm.or_(R.OUTW, R.OUTW, R.T0)
        else:
            self.asm.or_(R.OUTW, R.OUTW, src_reg)

    def flush(self):
        if self.started:
            self.asm.sw(R.OUTW, R.OUT, 4 * self.word_idx)
            self.started = False
        self.word_idx = None


def _preload_flags(layout: ActLayout, survivors, group) -> dict:
    """channel -> whether an earlier group already wrote lanes of its word."""
    if layout.word32:
        return {ch: False for ch in group}
    lanes = layout.lanes_per_word
    group_set = set(group)
    flags = {}
    for ch in group:
        widx = ch // lanes
        first_in_word = min(c for c in group if c // lanes == widx)
        flags[ch] = any(
            s // lanes == widx and s not in group_set and s < first_in_word
            for s in survivors
        )
    return flags


# --------------------------------------------------------------- conv / dense

def _spatial_loops(asm: Asm, spec: LayerSpec, in_layout: ActLayout, out_layout: ActLayout, body):
    """Emit y/x output-position loops with pointer induction around body()."""
    h_o, w_o = spec.h_out, spec.w_out
    asm.li(R.A_WIN, in_layout.base)  # window origin of output (0, 0)
    asm.li(R.OUT, out_layout.base + out_layout.interior_offset(0, 0))
    if h_o * w_o == 1:
        body()
        return
    step_in = spec.stride * in_layout.bytes_per_position
    step_out = out_layout.bytes_per_position
    row_in = spec.stride * in_layout.row_bytes - w_o * step_in
    row_out = 2 * out_layout.ring * out_layout.bytes_per_position
    y_loop, x_loop = asm.fresh("y"), asm.fresh("x")
    asm.li(R.Y, h_o)
    asm.label(y_loop)
    asm.li(R.X, w_o)
    asm.label(x_loop)
    body()
    asm.addi(R.A_WIN, R.A_WIN, step_in)
    asm.addi(R.OUT, R.OUT, step_out)
    asm.addi(R.X, R.X, -1)
    asm.branch("bne", R.X, R.ZERO, x_loop)
    _add_const(asm, R.A_WIN, row_in)
    _add_const(asm, R.OUT, row_out)
    asm.addi(R.Y, R.Y, -1)
    asm.branch("bne", R.Y, R.ZERO, y_loop)


def gen_conv2d_packed(
    spec: LayerSpec,
    cfg: PrecisionConfig,
    in_layout: ActLayout,
    out_layout: ActLayout,
    survivors,
    shift: int,
    w_base: int,
    bias_base: int,
    logits: bool = False,
) -> list[Instruction]:
    """Packed convolution (or dense, via 1x1 geometry) stream."""
    if in_layout.lane_width != cfg.activation_bits:
        raise ConfigError("input layout width disagrees with config")
    if not logits and out_layout.word32:
        raise ConfigError("packed intermediate layers write packed buffers")
    p = cfg.products_per_instruction
    run_lanes = spec.kw * in_layout.c_pad
    chunks_per_run = run_lanes // p
    chunks_per_aword = cfg.activation_lanes // p
    chunks_per_wword = cfg.weight_lanes // p
    w_words_per_run = math.ceil(run_lanes / cfg.weight_lanes)
    blocks = _survivor_blocks(survivors)

    asm = Asm()
    asm.li(R.BIAS, bias_base)
    if shift:
        asm.li(R.ROUND, 1 << (shift - 1))
    if not logits:
        asm.li(R.CMAX, (1 << out_layout.lane_width) - 1)
    max_act_off = (spec.kh - 1) * in_layout.row_bytes + (run_lanes // cfg.activation_lanes) * 4
    acts = _ActLoader(asm, max_act_off)

    survivors = sorted(survivors)
    block_base = 0
    for block in blocks:
        n = len(block)
        preload = _preload_flags(out_layout, survivors, block)
        asm.li(R.W_BASE, w_base + block_base)

        def body(block=block, n=n, preload=preload):
            acts.reset()
            asm.mv(R.W_PTR, R.W_BASE)
            wstream = _OffsetLoads(asm, R.W_PTR)
            packer = _OutWordPacker(asm, out_layout)
            accs = R.ACC[:n]
            for g, ch in enumerate(block):
                asm.lw(accs[g], R.BIAS, 4 * ch)
            for h_k in range(spec.kh):
                run_base = h_k * in_layout.row_bytes
                run_w_base = h_k * w_words_per_run * n * 4
                for chunk in range(chunks_per_run):
                    if chunk % chunks_per_aword == 0:
                        acts.load(R.AREG, run_base + (chunk // chunks_per_aword) * 4, run_base)
                    else:
                        asm.srli(R.AREG, R.AREG, p * cfg.activation_bits)
                    if chunk % chunks_per_wword == 0:
                        wi = chunk // chunks_per_wword
                        for g in range(n):
                            wstream.lw(R.WREG[g], run_w_base + 4 * (wi * n + g))
                    else:
                        for g in range(n):
                            asm.srli(R.WREG[g], R.WREG[g], p * cfg.weight_bits)
                    for g in range(n):
                        asm.nn_mac(cfg, accs[g], R.AREG, R.WREG[g])
            for g, ch in enumerate(block):
                if logits:
                    asm.sw(accs[g], R.OUT, 4 * ch)
                else:
                    _emit_requant(asm, accs[g], shift)
                    packer.put(accs[g], ch, preload=preload[ch])
            packer.flush()

        _spatial_loops(asm, spec, in_layout, out_layout, body)
        block_base += n * w_words_per_run * spec.kh * 4
    return asm.finalize()


def gen_conv2d_baseline(
    spec: LayerSpec,
    in_layout: ActLayout,
    out_layout: ActLayout,
    survivors,
    shift: int,
    w_base: int,
    bias_base: int,
    logits: bool = False,
) -> list[Instruction]:
    """Scalar 32-bit convolution/dense stream, one lw per operand element."""
    if not in_layout.word32 or not out_layout.word32:
        raise ConfigError("baseline streams use 32-bit element buffers")
    run_elems = spec.kw * spec.c_in
    asm = Asm()
    asm.li(R.BIAS, bias_base)
    if shift:
        asm.li(R.ROUND, 1 << (shift - 1))
    if not logits:
        asm.li(R.CMAX, (1 << value_bits_of(out_layout)) - 1)

    survivors = sorted(survivors)
    per_channel_bytes = spec.kh * run_elems * 4
    for gi in range(0, len(survivors), 8):
        group = survivors[gi : gi + 8]
        asm.li(R.W_BASE, w_base + gi * per_channel_bytes)

        def body(group=group):
            asm.mv(R.W_PTR, R.W_BASE)
            for ch in group:
                acc = R.ACC[0]
                asm.lw(acc, R.BIAS, 4 * ch)
                for h_k in range(spec.kh):
                    asm.mv(R.ATMP, R.A_WIN)
                    _add_const(asm, R.ATMP, h_k * in_layout.row_bytes)
                    asm.mv(R.AEND, R.ATMP)
                    _add_const(asm, R.AEND, run_elems * 4)
                    loop = asm.fresh("mac")
                    asm.label(loop)
                    asm.lw(R.T1, R.W_PTR, 0)
                    asm.lw(R.T2, R.ATMP, 0)
                    asm.mul(R.T1, R.T1, R.T2)
                    asm.add(acc, acc, R.T1)
                    asm.addi(R.W_PTR, R.W_PTR, 4)
                    asm.addi(R.ATMP, R.ATMP, 4)
                    asm.branch("bne", R.ATMP, R.AEND, loop)
                if logits:
                    asm.sw(acc, R.OUT, 4 * ch)
                else:
                    _emit_requant(asm, acc, shift)
                    asm.sw(acc, R.OUT, 4 * ch)

        _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


def gen_dense_packed(spec, cfg, in_layout, out_layout, survivors, shift, w_base, bias_base, logits=False):
    if spec.kind != "dense":
        raise ShapeError("gen_dense_packed wants a dense layer")
    return gen_conv2d_packed(
        spec, cfg, in_layout, out_layout, survivors, shift, w_base, bias_base, logits
    )


def gen_dense_baseline(spec, in_layout, out_layout, survivors, shift, w_base, bias_base, logits=False):
    if spec.kind != "dense":
        raise ShapeError("gen_dense_baseline wants a dense layer")
    return gen_conv2d_baseline(
        spec, in_layout, out_layout, survivors, shift, w_base, bias_base, logits
    )


# ------------------------------------------------------------------ depthwise

def gen_depthwise_packed(
    spec: LayerSpec,
    cfg: PrecisionConfig,
    in_layout: ActLayout,
    out_layout: ActLayout,
    survivors,
    shift: int,
    w_base: int,
    bias_base: int,
) -> list[Instruction]:
    """Depthwise convolution over packed lanes.

    The reduction runs across kernel positions at a fixed channel, so lanes
    give no dot-product parallelism; four channels share each loaded word
    and products use scalar multiplies on extracted lanes.
    """
    if in_layout.lane_width != cfg.activation_bits:
        raise ConfigError("input layout width disagrees with config")
    survivor_set = set(survivors)
    a_bits, w_bits = cfg.activation_bits, cfg.weight_bits
    a_lanes, w_lanes = cfg.activation_lanes, cfg.weight_lanes
    c_slots = (spec.c_out + w_lanes - 1) // w_lanes * w_lanes
    w_words_per_pos = c_slots // w_lanes
    a_mask = (1 << a_bits) - 1
    max_w_off = spec.kh * spec.kw * w_words_per_pos * 4
    if max_w_off > 2040:
        raise ConfigError("depthwise weight table too large for offset addressing")

    asm = Asm()
    asm.li(R.W_BASE, w_base)
    asm.li(R.BIAS, bias_base)
    if shift:
        asm.li(R.ROUND, 1 << (shift - 1))
    asm.li(R.CMAX, (1 << out_layout.lane_width) - 1)
    max_act_off = (
        (spec.kh - 1) * in_layout.row_bytes
        + (spec.kw - 1) * in_layout.bytes_per_position
        + (spec.c_out // a_lanes) * 4
    )
    acts = _ActLoader(asm, max_act_off)

    groups = [
        (g0, [c for c in range(g0, min(g0 + BLOCK, spec.c_out)) if c in survivor_set])
        for g0 in range(0, spec.c_out, BLOCK)
    ]
    survivors = sorted(survivor_set)

    for g0, group in groups:
        if not group:
            continue
        preload = _preload_flags(out_layout, survivors, group)

        def body(g0=g0, group=group, preload=preload):
            acts.reset()
            packer = _OutWordPacker(asm, out_layout)
            accs = {ch: R.ACC[i] for i, ch in enumerate(group)}
            for ch, acc in accs.items():
                asm.lw(acc, R.BIAS, 4 * ch)
            for h_k in range(spec.kh):
                for w_k in range(spec.kw):
                    run_base = (
                        h_k * in_layout.row_bytes + w_k * in_layout.bytes_per_position
                    )
                    acts.load(R.AREG, run_base + (g0 // a_lanes) * 4, run_base)
                    w_word = (h_k * spec.kw + w_k) * w_words_per_pos + g0 // w_lanes
                    asm.lw(R.T2, R.W_BASE, w_word * 4)
                    for ch, acc in accs.items():
                        asm.srli(R.T0, R.AREG, (ch % a_lanes) * a_bits)
                        asm.andi(R.T0, R.T0, a_mask)
                        lane = ch % w_lanes
                        asm.slli(R.T1, R.T2, 32 - (lane + 1) * w_bits)
                        asm.srai(R.T1, R.T1, 32 - w_bits)
                        asm.mul(R.T0, R.T0, R.T1)
                        asm.add(acc, acc, R.T0)
            for ch, acc in accs.items():
                _emit_requant(asm, acc, shift)
                packer.put(acc, ch, preload=preload[ch])
            packer.flush()

        _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


def gen_depthwise_baseline(
    spec: LayerSpec,
    in_layout: ActLayout,
    out_layout: ActLayout,
    survivors,
    shift: int,
    w_base: int,
    bias_base: int,
) -> list[Instruction]:
    asm = Asm()
    asm.li(R.W_BASE, w_base)
    asm.li(R.BIAS, bias_base)
    if shift:
        asm.li(R.ROUND, 1 << (shift - 1))
    asm.li(R.CMAX, (1 << value_bits_of(out_layout)) - 1)

    def body():
        asm.mv(R.W_PTR, R.W_BASE)
        for ch in sorted(survivors):
            acc = R.ACC[0]
            asm.lw(acc, R.BIAS, 4 * ch)
            for h_k in range(spec.kh):
                asm.mv(R.ATMP, R.A_WIN)
                _add_const(asm, R.ATMP, h_k * in_layout.row_bytes + ch * 4)
                asm.li(R.T3, spec.kw)
                loop = asm.fresh("dwmac")
                asm.label(loop)
                asm.lw(R.T1, R.W_PTR, 0)
                asm.lw(R.T2, R.ATMP, 0)
                asm.mul(R.T1, R.T1, R.T2)
                asm.add(acc, acc, R.T1)
                asm.addi(R.W_PTR, R.W_PTR, 4)
                asm.addi(R.ATMP, R.ATMP, in_layout.bytes_per_position)
                asm.addi(R.T3, R.T3, -1)
                asm.branch("bne", R.T3, R.ZERO, loop)
            _emit_requant(asm, acc, shift)
            asm.sw(acc, R.OUT, 4 * ch)

    _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


# -------------------------------------------------------------------- pooling

def _emit_max(asm: Asm, dst: int, other: int):
    """dst = max(dst, other), branchless."""
    asm.sub(R.T0, other, dst)
    asm.srai(R.T1, R.T0, 31)
    asm.xori(R.T1, R.T1, -1)
    asm.and_(R.T0, R.T0, R.T1)
    asm.add(dst, dst, R.T0)


def _pool_window(in_layout: ActLayout):
    return [
        dy * in_layout.row_bytes + dx * in_layout.bytes_per_position
        for dy in range(2)
        for dx in range(2)
    ]


def gen_pool_packed(
    spec: LayerSpec, in_layout: ActLayout, out_layout: ActLayout
) -> list[Instruction]:
    if in_layout.lane_width != out_layout.lane_width:
        raise ConfigError("pooling keeps the lane width")
    bits = in_layout.lane_width
    lanes = in_layout.lanes_per_word
    mask = (1 << bits) - 1
    is_avg = spec.kind == "avgpool"
    asm = Asm()
    window = _pool_window(in_layout)

    def body():
        packer = _OutWordPacker(asm, out_layout)
        for wi in range(in_layout.c_pad // lanes):
            live = [l for l in range(lanes) if wi * lanes + l < spec.c_in]
            if not live:
                continue
            srcs = R.ACC
            for reg, off in zip(srcs, window):
                asm.lw(reg, R.A_WIN, off + 4 * wi)
            for lane in live:
                vals = (R.T2, R.T3, R.AREG, R.AEND)
                for v, src in zip(vals, srcs):
                    sh = lane * bits
                    if sh:
                        asm.srli(v, src, sh)
                    asm.andi(v, v if sh else src, mask)
                if is_avg:
                    asm.add(vals[0], vals[0], vals[1])
                    asm.add(vals[0], vals[0], vals[2])
                    asm.add(vals[0], vals[0], vals[3])
                    asm.addi(vals[0], vals[0], 2)
                    asm.srli(vals[0], vals[0], 2)
                else:
                    _emit_max(asm, vals[0], vals[1])
                    _emit_max(asm, vals[0], vals[2])
                    _emit_max(asm, vals[0], vals[3])
                packer.put(vals[0], wi * lanes + lane)
        packer.flush()

    _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


def gen_pool_baseline(
    spec: LayerSpec, in_layout: ActLayout, out_layout: ActLayout
) -> list[Instruction]:
    if not in_layout.word32 or not out_layout.word32:
        raise ConfigError("baseline streams use 32-bit element buffers")
    is_avg = spec.kind == "avgpool"
    asm = Asm()
    window = _pool_window(in_layout)

    def body():
        for c in range(spec.c_in):
            regs = (R.ACC[0], R.T2, R.T3, R.AEND)
            for reg, off in zip(regs, window):
                asm.lw(reg, R.A_WIN, off + 4 * c)
            if is_avg:
                asm.add(regs[0], regs[0], regs[1])
                asm.add(regs[0], regs[0], regs[2])
                asm.add(regs[0], regs[0], regs[3])
                asm.addi(regs[0], regs[0], 2)
                asm.srli(regs[0], regs[0], 2)
            else:
                _emit_max(asm, regs[0], regs[1])
                _emit_max(asm, regs[0], regs[2])
                _emit_max(asm, regs[0], regs[3])
            asm.sw(regs[0], R.OUT, 4 * c)

    _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


# --------------------------------------------------------------- residual add

def gen_residual_packed(
    spec: LayerSpec, in_layout: ActLayout, in2_base: int, out_layout: ActLayout
) -> list[Instruction]:
    """out = clamp(x + y) lanewise; both inputs share the same geometry."""
    bits = in_layout.lane_width
    lanes = in_layout.lanes_per_word
    mask = (1 << bits) - 1
    asm = Asm()
    asm.li(R.CMAX, mask)
    asm.li(R.IN2, in2_base - in_layout.base)

    def body():
        packer = _OutWordPacker(asm, out_layout)
        asm.add(R.ATMP, R.A_WIN, R.IN2)
        for wi in range(in_layout.c_pad // lanes):
            live = [l for l in range(lanes) if wi * lanes + l < spec.c_in]
            if not live:
                continue
            asm.lw(R.ACC[0], R.A_WIN, 4 * wi)
            asm.lw(R.ACC[1], R.ATMP, 4 * wi)
            for lane in live:
                sh = lane * bits
                for v, src in ((R.T2, R.ACC[0]), (R.T3, R.ACC[1])):
                    if sh:
                        asm.srli(v, src, sh)
                    asm.andi(v, v if sh else src, mask)
                asm.add(R.T2, R.T2, R.T3)
                asm.sub(R.T0, R.T2, R.CMAX)
                asm.srai(R.T1, R.T0, 31)
                asm.and_(R.T0, R.T0, R.T1)
                asm.add(R.T2, R.CMAX, R.T0)
                packer.put(R.T2, wi * lanes + lane)
        packer.flush()

    _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()


def gen_residual_baseline(
    spec: LayerSpec, in_layout: ActLayout, in2_base: int, out_layout: ActLayout
) -> list[Instruction]:
    asm = Asm()
    asm.li(R.CMAX, (1 << value_bits_of(out_layout)) - 1)
    asm.li(R.IN2, in2_base - in_layout.base)

    def body():
        asm.add(R.ATMP, R.A_WIN, R.IN2)
        for c in range(spec.c_in):
            asm.lw(R.T2, R.A_WIN, 4 * c)
            asm.lw(R.T3, R.ATMP, 4 * c)
            asm.add(R.T2, R.T2, R.T3)
            asm.sub(R.T0, R.T2, R.CMAX)
            asm.srai(R.T1, R.T0, 31)
            asm.and_(R.T0, R.T0, R.T1)
            asm.add(R.T2, R.CMAX, R.T0)
            asm.sw(R.T2, R.OUT, 4 * c)

    _spatial_loops(asm, spec, in_layout, out_layout, body)
    return asm.finalize()
