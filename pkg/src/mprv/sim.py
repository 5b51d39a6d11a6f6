"""Instruction-stream execution with a parameterized cycle model.

The machine is a 2-stage in-order core abstraction: 32 registers (x0 wired
to zero), a flat byte-addressable data memory with 32-bit little-endian
accesses, and a separate instruction list indexed by pc/4.  Execution halts
when the pc falls off the end of the program.

Cycle accounting charges each instruction its class cost; everything past
the first cycle of a multi-cycle instruction (loads, taken branches under
the defaults) is reported as stall cycles, so

    total_cycles == instruction_count + stall_cycles

holds for any cost table.  A packed MAC always costs one core cycle (two
fast cycles of the double-clocked unit), regardless of precision.

MARVIN_CYCLE_MODEL may point at a key=value file overriding the defaults.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

from . import isa
from .errors import (
    BudgetExceeded,
    IoError,
    MemoryOutOfBounds,
    ToolError,
    WorkloadMismatch,
)
from .isa import Kind

MASK32 = 0xFFFFFFFF
CYCLE_MODEL_ENV = "MARVIN_CYCLE_MODEL"


@dataclass(frozen=True)
class CycleModel:
    """Core-cycle cost per instruction class."""

    alu: int = 1
    mul: int = 1
    nn_mac: int = 1  # one core cycle = two fast cycles, every mode
    load: int = 2
    store: int = 1
    branch_taken: int = 2
    branch_not_taken: int = 1

    @classmethod
    def from_file(cls, path: str) -> "CycleModel":
        values = {}
        fields = cls().__dict__
        try:
            lines = open(path).read().splitlines()
        except OSError as e:
            raise IoError(f"cannot read cycle model file {path}: {e}") from e
        for ln, line in enumerate(lines, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace("=", " ").split()
            if len(parts) != 2 or parts[0] not in fields:
                raise IoError(f"{path}:{ln}: expected '<class> <cycles>', got {line!r}")
            try:
                values[parts[0]] = int(parts[1])
            except ValueError as e:
                raise IoError(f"{path}:{ln}: bad cycle count {parts[1]!r}") from e
        return cls(**values)

    @classmethod
    def from_env(cls) -> "CycleModel":
        path = os.environ.get(CYCLE_MODEL_ENV)
        return cls.from_file(path) if path else cls()


class MachineState:
    """Registers, flat memory and pc.  x0 reads as zero, writes are dropped."""

    def __init__(self, mem_size: int = 1 << 20):
        self.regs = [0] * 32
        self.mem = bytearray(mem_size)
        self.pc = 0

    def load_word(self, addr: int) -> int:
        if addr < 0 or addr + 4 > len(self.mem) or addr & 3:
            raise MemoryOutOfBounds(f"load at {addr:#x}")
        return int.from_bytes(self.mem[addr : addr + 4], "little")

    def store_word(self, addr: int, value: int):
        if addr < 0 or addr + 4 > len(self.mem) or addr & 3:
            raise MemoryOutOfBounds(f"store at {addr:#x}")
        self.mem[addr : addr + 4] = (value & MASK32).to_bytes(4, "little")


@dataclass
class LayerCounters:
    cycles: int = 0
    instructions: int = 0
    loads: int = 0
    stores: int = 0
    nn_macs: int = 0


@dataclass
class ExecutionReport:
    total_cycles: int
    instruction_count: int
    load_count: int
    store_count: int
    stall_cycles: int
    mac_count: int
    nn_mac_count: int
    mul_count: int
    alu_count: int
    branch_taken: int
    branch_not_taken: int
    per_layer: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


@dataclass
class SpeedupReport:
    cycle_ratio: float
    load_ratio: float
    store_ratio: float
    per_layer: dict = field(default_factory=dict)


@dataclass
class Program:
    """Immutable instruction stream plus its initial data segments.

    markers attribute contiguous instruction index ranges to layer labels;
    meta carries workload bookkeeping (analytic MAC counts, output buffer
    location, memory size).
    """

    instrs: list
    data_init: list = field(default_factory=list)  # [(addr, bytes)]
    markers: list = field(default_factory=list)  # [(label, start, end)]
    mem_size: int = 1 << 20
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- fast MACs

_SIGNED_LANE_LUT = {}
_UNSIGNED_LANE_LUT = {}


def _lane_luts(width: int, signed: bool):
    cache = _SIGNED_LANE_LUT if signed else _UNSIGNED_LANE_LUT
    if width not in cache:
        lanes = 8 // width
        table = []
        for byte in range(256):
            vals = []
            for k in range(lanes):
                v = (byte >> (k * width)) & ((1 << width) - 1)
                if signed and v & (1 << (width - 1)):
                    v -= 1 << width
                vals.append(v)
            table.append(tuple(vals))
        cache[width] = table
    return cache[width]


_PAIR_DOT_LUT = {}


def _pair_dot_lut(width: int):
    # dot product of one weight byte against one activation byte
    if width not in _PAIR_DOT_LUT:
        wl = _lane_luts(width, True)
        al = _lane_luts(width, False)
        table = [0] * 65536
        for wb in range(256):
            wv = wl[wb]
            base = wb << 8
            for ab in range(256):
                av = al[ab]
                table[base | ab] = sum(w * a for w, a in zip(wv, av))
        _PAIR_DOT_LUT[width] = table
    return _PAIR_DOT_LUT[width]


def _make_dot(cfg) -> "callable":
    """Return dot(act_word, weight_word) summing lane pairs 0..P-1."""
    p = cfg.products_per_instruction
    w_width, a_width = cfg.weight_bits, cfg.activation_bits
    if w_width == a_width:
        lut = _pair_dot_lut(w_width)
        n_bytes = p * w_width // 8

        def dot(araw, wraw, _lut=lut, _n=n_bytes):
            s = 0
            for i in range(_n):
                sh = 8 * i
                s += _lut[(((wraw >> sh) & 0xFF) << 8) | ((araw >> sh) & 0xFF)]
            return s

        return dot

    wlut = _lane_luts(w_width, True)
    alut = _lane_luts(a_width, False)
    nw = p * w_width // 8
    na = p * a_width // 8

    def dot(araw, wraw, _wl=wlut, _al=alut, _nw=nw, _na=na):
        wv = []
        for i in range(_nw):
            wv += _wl[(wraw >> (8 * i)) & 0xFF]
        av = []
        for i in range(_na):
            av += _al[(araw >> (8 * i)) & 0xFF]
        return sum(w * a for w, a in zip(wv, av))

    return dot


_DOT_FOR_CFG = {}


def mac_dot(cfg, act_word: int, weight_word: int) -> int:
    """Signed dot product an nn_mac adds to its accumulator."""
    fn = _DOT_FOR_CFG.get(cfg)
    if fn is None:
        fn = _DOT_FOR_CFG[cfg] = _make_dot(cfg)
    return fn(act_word, weight_word)


# ------------------------------------------------------------ interpretation

_OPIDS = {
    "lw": 0, "sw": 1, "add": 3, "addi": 4, "sub": 5, "and": 6, "andi": 7,
    "or": 8, "ori": 9, "xor": 10, "xori": 11, "sll": 12, "slli": 13,
    "srl": 14, "srli": 15, "sra": 16, "srai": 17, "slt": 18, "slti": 19,
    "sltu": 20, "sltiu": 21, "mul": 22, "lui": 23, "nop": 24,
    "beq": 25, "bne": 26, "blt": 27, "bge": 28, "bltu": 29, "bgeu": 30,
}
_OPID_NN_MAC = 2
_BRANCH_BASE = 25


def _translate(program: Program):
    """Lower Instructions to dispatch tuples; resolve branch targets to indices."""
    out = []
    n = len(program.instrs)
    for idx, i in enumerate(program.instrs):
        if i.kind is Kind.NN_MAC:
            out.append((_OPID_NN_MAC, i.rd, i.rs1, i.rs2, 0, mac_dot_fn(i.cfg),
                        i.cfg.products_per_instruction))
            continue
        opid = _OPIDS[i.op]
        imm = i.imm
        if opid >= _BRANCH_BASE:
            if imm % 4:
                raise ToolError(f"branch offset {imm} not word aligned")
            target = idx + imm // 4
            if not 0 <= target <= n:
                raise ToolError(f"branch target {target} outside program")
            out.append((opid, 0, i.rs1, i.rs2, target, None, 0))
        else:
            out.append((opid, i.rd, i.rs1, i.rs2, imm, None, 0))
    return out


def mac_dot_fn(cfg):
    fn = _DOT_FOR_CFG.get(cfg)
    if fn is None:
        fn = _DOT_FOR_CFG[cfg] = _make_dot(cfg)
    return fn


def run(
    program: Program,
    state: MachineState | None = None,
    model: CycleModel | None = None,
    max_instructions: int = 200_000_000,
) -> ExecutionReport:
    """Execute to completion and return counters; architectural effects land
    in the caller-supplied state (a fresh one is made otherwise)."""
    if model is None:
        model = CycleModel()
    if state is None:
        state = MachineState(program.mem_size)
    for addr, blob in program.data_init:
        if addr < 0 or addr + len(blob) > len(state.mem):
            raise MemoryOutOfBounds(f"data segment at {addr:#x} does not fit")
        state.mem[addr : addr + len(blob)] = blob

    code = program._translated if hasattr(program, "_translated") else None
    if code is None:
        code = _translate(program)
        program._translated = code

    regs = state.regs
    mem = state.mem
    mem_len = len(mem)
    n = len(code)

    # layer attribution: contiguous ranges, control flow stays inside a range
    markers = program.markers or [("all", 0, n)]
    layer_names = [m[0] for m in markers]
    counters = [LayerCounters() for _ in markers]
    bounds = [(m[1], m[2]) for m in markers]

    def locate(i):
        for li, (lo, hi) in enumerate(bounds):
            if lo <= i < hi:
                return li
        return -1

    c_alu = model.alu
    c_mul = model.mul
    c_mac = model.nn_mac
    c_load = model.load
    c_store = model.store
    c_bt = model.branch_taken
    c_bnt = model.branch_not_taken

    n_load = n_store = n_mac = n_mul = n_alu = n_bt = n_bnt = 0
    executed = 0
    idx = 0
    cur = locate(0) if n else -1
    lo, hi = bounds[cur] if cur >= 0 else (0, n)
    lc = counters[cur] if cur >= 0 else LayerCounters()

    budget = max_instructions
    while 0 <= idx < n:
        if executed >= budget:
            raise BudgetExceeded(f"exceeded {budget} instructions")
        if not lo <= idx < hi:
            cur = locate(idx)
            if cur < 0:
                raise ToolError(f"pc index {idx} outside all layer markers")
            lo, hi = bounds[cur]
            lc = counters[cur]
        op, rd, rs1, rs2, imm, dot, prods = code[idx]
        executed += 1
        lc.instructions += 1
        idx += 1
        if op == 0:  # lw
            addr = (regs[rs1] + imm) & MASK32
            if addr + 4 > mem_len or addr & 3:
                raise MemoryOutOfBounds(f"load at {addr:#x}")
            if rd:
                regs[rd] = int.from_bytes(mem[addr : addr + 4], "little")
            n_load += 1
            lc.cycles += c_load
            lc.loads += 1
        elif op == 2:  # nn_mac
            if rd:
                regs[rd] = (regs[rd] + dot(regs[rs1], regs[rs2])) & MASK32
            n_mac += 1
            lc.cycles += c_mac
            lc.nn_macs += 1
        elif op == 1:  # sw
            addr = (regs[rs1] + imm) & MASK32
            if addr + 4 > mem_len or addr & 3:
                raise MemoryOutOfBounds(f"store at {addr:#x}")
            mem[addr : addr + 4] = regs[rs2].to_bytes(4, "little")
            n_store += 1
            lc.cycles += c_store
            lc.stores += 1
        elif op == 4:  # addi
            if rd:
                regs[rd] = (regs[rs1] + imm) & MASK32
            n_alu += 1
            lc.cycles += c_alu
        elif op == 3:  # add
            if rd:
                regs[rd] = (regs[rs1] + regs[rs2]) & MASK32
            n_alu += 1
            lc.cycles += c_alu
        elif op == 15:  # srli
            if rd:
                regs[rd] = regs[rs1] >> imm
            n_alu += 1
            lc.cycles += c_alu
        elif op == 17:  # srai
            if rd:
                v = regs[rs1]
                regs[rd] = ((v - (1 << 32)) >> imm) & MASK32 if v & 0x80000000 else v >> imm
            n_alu += 1
            lc.cycles += c_alu
        elif op == 13:  # slli
            if rd:
                regs[rd] = (regs[rs1] << imm) & MASK32
            n_alu += 1
            lc.cycles += c_alu
        elif op == 6:  # and
            if rd:
                regs[rd] = regs[rs1] & regs[rs2]
            n_alu += 1
            lc.cycles += c_alu
        elif op == 7:  # andi
            if rd:
                regs[rd] = regs[rs1] & (imm & MASK32)
            n_alu += 1
            lc.cycles += c_alu
        elif op == 8:  # or
            if rd:
                regs[rd] = regs[rs1] | regs[rs2]
            n_alu += 1
            lc.cycles += c_alu
        elif op == 10:  # xor
            if rd:
                regs[rd] = regs[rs1] ^ regs[rs2]
            n_alu += 1
            lc.cycles += c_alu
        elif op == 11:  # xori
            if rd:
                regs[rd] = regs[rs1] ^ (imm & MASK32)
            n_alu += 1
            lc.cycles += c_alu
        elif op == 5:  # sub
            if rd:
                regs[rd] = (regs[rs1] - regs[rs2]) & MASK32
            n_alu += 1
            lc.cycles += c_alu
        elif op == 22:  # mul
            if rd:
                regs[rd] = (regs[rs1] * regs[rs2]) & MASK32
            n_mul += 1
            lc.cycles += c_mul
        elif op == 23:  # lui
            if rd:
                regs[rd] = (imm << 12) & MASK32
            n_alu += 1
            lc.cycles += c_alu
        elif op >= 25:  # branches
            a, b = regs[rs1], regs[rs2]
            if op == 25:
                taken = a == b
            elif op == 26:
                taken = a != b
            elif op == 27:
                taken = (a - (1 << 32) if a & 0x80000000 else a) < (
                    b - (1 << 32) if b & 0x80000000 else b
                )
            elif op == 28:
                taken = (a - (1 << 32) if a & 0x80000000 else a) >= (
                    b - (1 << 32) if b & 0x80000000 else b
                )
            elif op == 29:
                taken = a < b
            else:
                taken = a >= b
            if taken:
                idx = imm
                n_bt += 1
                lc.cycles += c_bt
            else:
                n_bnt += 1
                lc.cycles += c_bnt
        elif op == 24:  # nop
            n_alu += 1
            lc.cycles += c_alu
        else:  # remaining rare ALU ops
            if op == 18:  # slt
                a, b = regs[rs1], regs[rs2]
                v = int(
                    (a - (1 << 32) if a & 0x80000000 else a)
                    < (b - (1 << 32) if b & 0x80000000 else b)
                )
            elif op == 19:  # slti
                a = regs[rs1]
                v = int((a - (1 << 32) if a & 0x80000000 else a) < imm)
            elif op == 20:  # sltu
                v = int(regs[rs1] < regs[rs2])
            elif op == 21:  # sltiu
                v = int(regs[rs1] < (imm & MASK32))
            elif op == 9:  # ori
                v = regs[rs1] | (imm & MASK32)
            elif op == 12:  # sll
                v = (regs[rs1] << (regs[rs2] & 31)) & MASK32
            elif op == 14:  # srl
                v = regs[rs1] >> (regs[rs2] & 31)
            elif op == 16:  # sra
                a = regs[rs1]
                sh = regs[rs2] & 31
                v = ((a - (1 << 32)) >> sh) & MASK32 if a & 0x80000000 else a >> sh
            else:
                raise ToolError(f"unhandled opid {op}")
            if rd:
                regs[rd] = v
            n_alu += 1
            lc.cycles += c_alu

    state.pc = idx * 4
    total = (
        n_alu * c_alu
        + n_mul * c_mul
        + n_mac * c_mac
        + n_load * c_load
        + n_store * c_store
        + n_bt * c_bt
        + n_bnt * c_bnt
    )
    mac_count = program.meta.get("mac_count")
    if mac_count is None:
        mac_count = sum(
            i.cfg.products_per_instruction
            for i in program.instrs
            if i.kind is Kind.NN_MAC
        )
    per_layer = {}
    if program.markers:
        per_layer = {name: counters[i] for i, name in enumerate(layer_names)}
    return ExecutionReport(
        total_cycles=total,
        instruction_count=executed,
        load_count=n_load,
        store_count=n_store,
        stall_cycles=total - executed,
        mac_count=mac_count,
        nn_mac_count=n_mac,
        mul_count=n_mul,
        alu_count=n_alu,
        branch_taken=n_bt,
        branch_not_taken=n_bnt,
        per_layer=per_layer,
        meta=dict(program.meta),
    )


def compare_runs(baseline: ExecutionReport, optimized: ExecutionReport) -> SpeedupReport:
    """Cycle/load/store ratios of two runs of the same workload."""
    fp_b = baseline.meta.get("workload")
    fp_o = optimized.meta.get("workload")
    if fp_b is not None and fp_o is not None:
        if fp_b != fp_o:
            raise WorkloadMismatch("reports describe different workloads")
    elif baseline.mac_count != optimized.mac_count:
        raise WorkloadMismatch(
            f"MAC counts differ: {baseline.mac_count} vs {optimized.mac_count}"
        )

    def ratio(a, b):
        return a / b if b else float("inf") if a else 1.0

    per_layer = {}
    for name, bc in baseline.per_layer.items():
        oc = optimized.per_layer.get(name)
        if oc is not None:
            per_layer[name] = ratio(bc.cycles, oc.cycles)
    return SpeedupReport(
        cycle_ratio=ratio(baseline.total_cycles, optimized.total_cycles),
        load_ratio=ratio(baseline.load_count, optimized.load_count),
        store_ratio=ratio(baseline.store_count, optimized.store_count),
        per_layer=per_layer,
    )


def stall_fraction(report: ExecutionReport) -> float:
    if report.total_cycles == 0:
        return 0.0
    return report.stall_cycles / report.total_cycles


# ------------------------------------------------------------- serialization

def save_program(program: Program, path: str):
    """Flat binary of 32-bit LE words plus a JSON sidecar manifest."""
    words = b"".join(isa.encode(i).to_bytes(4, "little") for i in program.instrs)
    with open(path, "wb") as f:
        f.write(words)
    manifest = {
        "version": 1,
        "entry": 0,
        "mem_size": program.mem_size,
        "markers": [list(m) for m in program.markers],
        "data_init": [
            {"addr": addr, "data": base64.b64encode(bytes(blob)).decode()}
            for addr, blob in program.data_init
        ],
        "meta": program.meta,
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_program(path: str) -> Program:
    blob = open(path, "rb").read()
    if len(blob) % 4:
        raise IoError(f"{path}: length {len(blob)} is not a multiple of 4")
    instrs = [
        isa.decode(int.from_bytes(blob[i : i + 4], "little"))
        for i in range(0, len(blob), 4)
    ]
    try:
        manifest = json.load(open(path + ".json"))
    except OSError as e:
        raise IoError(f"missing program manifest {path}.json: {e}") from e
    return Program(
        instrs=instrs,
        data_init=[
            (seg["addr"], base64.b64decode(seg["data"]))
            for seg in manifest.get("data_init", [])
        ],
        markers=[tuple(m) for m in manifest.get("markers", [])],
        mem_size=manifest.get("mem_size", 1 << 20),
        meta=manifest.get("meta", {}),
    )
