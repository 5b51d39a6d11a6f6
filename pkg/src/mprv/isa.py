"""Instruction encoding/decoding for the packed-MAC extension and the small
RV32IM subset that the kernel generators emit.

The nine custom MAC instructions are R-type on the custom-0 opcode:

    funct7[31:25] | rs2[24:20] | rs1[19:15] | funct3[14:12] | rd[11:7] | opcode[6:0]

with opcode = 0b0001011 and funct3 = 0b010 for every MAC variant.  funct7
encodes the operand widths:

    bits [1:0]  weight width      10 -> 8-bit, 01 -> 4-bit, 00 -> 2-bit
    bits [3:2]  activation width  (same code)
    bits [6:4]  000

rs1 carries packed activations, rs2 packed weights, and rd is a single
32-bit accumulator.  Mnemonics follow the nn_mac_w<bits>a<bits> pattern,
e.g. nn_mac_w8a8 has funct7 0b0001010.

The baseline subset covers exactly what generated kernels need: integer
ALU ops (register and immediate forms, plus LUI for address materialising),
MUL, LW/SW with 12-bit offsets, and conditional branches.  Compressed,
CSR and privileged instructions are out of scope.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import InvalidConfig, InvalidRegister, UnknownInstruction

OPCODE_CUSTOM0 = 0b0001011
OPCODE_OP = 0b0110011
OPCODE_OP_IMM = 0b0010011
OPCODE_LOAD = 0b0000011
OPCODE_STORE = 0b0100011
OPCODE_BRANCH = 0b1100011
OPCODE_LUI = 0b0110111

NN_MAC_FUNCT3 = 0b010

# width <-> funct7 field code (2 bits per operand)
_WIDTH_CODE = {8: 0b10, 4: 0b01, 2: 0b00}
_CODE_WIDTH = {v: k for k, v in _WIDTH_CODE.items()}


class Kind(Enum):
    NN_MAC = "nn_mac"
    LOAD = "load"
    STORE = "store"
    ALU = "alu"
    MUL = "mul"
    BRANCH = "branch"
    NOP = "nop"


@dataclass(frozen=True)
class PrecisionConfig:
    """One of the nine (weight bits, activation bits) combinations."""

    weight_bits: int
    activation_bits: int

    def __post_init__(self):
        if self.weight_bits not in (2, 4, 8) or self.activation_bits not in (2, 4, 8):
            raise InvalidConfig(
                f"unsupported precision w{self.weight_bits}a{self.activation_bits}"
            )

    @property
    def mode(self) -> int:
        """Operating mode, a pure function of the weight width: 8->1, 4->2, 2->3."""
        return {8: 1, 4: 2, 2: 3}[self.weight_bits]

    @property
    def weight_lanes(self) -> int:
        return 32 // self.weight_bits

    @property
    def activation_lanes(self) -> int:
        return 32 // self.activation_bits

    @property
    def products_per_instruction(self) -> int:
        """Lane pairs consumed by one MAC: min(lane counts) = 32/max(w, a)."""
        return 32 // max(self.weight_bits, self.activation_bits)

    @property
    def mnemonic(self) -> str:
        return f"nn_mac_w{self.weight_bits}a{self.activation_bits}"

    @property
    def funct7(self) -> int:
        return (_WIDTH_CODE[self.activation_bits] << 2) | _WIDTH_CODE[self.weight_bits]


ALL_CONFIGS = tuple(
    PrecisionConfig(w, a) for w in (8, 4, 2) for a in (8, 4, 2)
)
_FUNCT7_TO_CONFIG = {c.funct7: c for c in ALL_CONFIGS}
_MNEMONIC_TO_CONFIG = {c.mnemonic: c for c in ALL_CONFIGS}


def config_for(name: str) -> PrecisionConfig:
    """'w4a2' or 'nn_mac_w4a2' -> PrecisionConfig."""
    key = name if name.startswith("nn_mac_") else "nn_mac_" + name
    if key not in _MNEMONIC_TO_CONFIG:
        raise InvalidConfig(f"unknown precision name {name!r}")
    return _MNEMONIC_TO_CONFIG[key]


# Baseline op tables: mnemonic -> (funct3, funct7) where applicable.
_R_OPS = {
    "add": (0b000, 0b0000000),
    "sub": (0b000, 0b0100000),
    "sll": (0b001, 0b0000000),
    "slt": (0b010, 0b0000000),
    "sltu": (0b011, 0b0000000),
    "xor": (0b100, 0b0000000),
    "srl": (0b101, 0b0000000),
    "sra": (0b101, 0b0100000),
    "or": (0b110, 0b0000000),
    "and": (0b111, 0b0000000),
    "mul": (0b000, 0b0000001),
}
_I_OPS = {
    "addi": 0b000,
    "slti": 0b010,
    "sltiu": 0b011,
    "xori": 0b100,
    "ori": 0b110,
    "andi": 0b111,
}
_SHIFT_OPS = {
    "slli": (0b001, 0b0000000),
    "srli": (0b101, 0b0000000),
    "srai": (0b101, 0b0100000),
}
_B_OPS = {
    "beq": 0b000,
    "bne": 0b001,
    "blt": 0b100,
    "bge": 0b101,
    "bltu": 0b110,
    "bgeu": 0b111,
}

_KIND_OF_OP = {}
for _m in _R_OPS:
    _KIND_OF_OP[_m] = Kind.MUL if _m == "mul" else Kind.ALU
for _m in list(_I_OPS) + list(_SHIFT_OPS) + ["lui"]:
    _KIND_OF_OP[_m] = Kind.ALU
for _m in _B_OPS:
    _KIND_OF_OP[_m] = Kind.BRANCH
_KIND_OF_OP["lw"] = Kind.LOAD
_KIND_OF_OP["sw"] = Kind.STORE
_KIND_OF_OP["nop"] = Kind.NOP
for _c in ALL_CONFIGS:
    _KIND_OF_OP[_c.mnemonic] = Kind.NN_MAC


@dataclass(frozen=True)
class Instruction:
    """Decoded instruction.

    imm holds the I/S-type immediate, the shift amount for slli/srli/srai,
    the byte offset for branches, or the upper-20 value for lui.
    """

    op: str
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    cfg: PrecisionConfig | None = None

    @property
    def kind(self) -> Kind:
        return _KIND_OF_OP[self.op]

    @property
    def raw(self) -> int:
        return encode(self)

    def __str__(self) -> str:
        return _format(self)


def _check_reg(r: int, field: str) -> int:
    if not 0 <= r < 32:
        raise InvalidRegister(f"{field}={r} out of range")
    return r


def _check_simm(v: int, bits: int, what: str) -> int:
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if not lo <= v <= hi:
        raise InvalidConfig(f"{what} immediate {v} does not fit {bits} bits")
    return v & ((1 << bits) - 1)


def encode(instr: Instruction) -> int:
    """Pack an Instruction into its 32-bit little-endian word value."""
    op = instr.op
    rd = _check_reg(instr.rd, "rd")
    rs1 = _check_reg(instr.rs1, "rs1")
    rs2 = _check_reg(instr.rs2, "rs2")

    if op == "nop":
        return OPCODE_OP_IMM  # addi x0, x0, 0

    kind = _KIND_OF_OP.get(op)
    if kind is Kind.NN_MAC:
        cfg = instr.cfg
        if cfg is None or cfg.mnemonic != op:
            raise InvalidConfig(f"{op}: cfg field missing or inconsistent")
        return (
            (cfg.funct7 << 25)
            | (rs2 << 20)
            | (rs1 << 15)
            | (NN_MAC_FUNCT3 << 12)
            | (rd << 7)
            | OPCODE_CUSTOM0
        )
    if op in _R_OPS:
        f3, f7 = _R_OPS[op]
        return (f7 << 25) | (rs2 << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | OPCODE_OP
    if op in _I_OPS:
        imm = _check_simm(instr.imm, 12, op)
        return (imm << 20) | (rs1 << 15) | (_I_OPS[op] << 12) | (rd << 7) | OPCODE_OP_IMM
    if op in _SHIFT_OPS:
        f3, f7 = _SHIFT_OPS[op]
        if not 0 <= instr.imm < 32:
            raise InvalidConfig(f"{op} shift amount {instr.imm} out of range")
        return (
            (f7 << 25) | (instr.imm << 20) | (rs1 << 15) | (f3 << 12) | (rd << 7) | OPCODE_OP_IMM
        )
    if op == "lui":
        if not 0 <= instr.imm < (1 << 20):
            raise InvalidConfig(f"lui immediate {instr.imm} out of range")
        return (instr.imm << 12) | (rd << 7) | OPCODE_LUI
    if op == "lw":
        imm = _check_simm(instr.imm, 12, op)
        return (imm << 20) | (rs1 << 15) | (0b010 << 12) | (rd << 7) | OPCODE_LOAD
    if op == "sw":
        imm = _check_simm(instr.imm, 12, op)
        return (
            ((imm >> 5) << 25)
            | (rs2 << 20)
            | (rs1 << 15)
            | (0b010 << 12)
            | ((imm & 0x1F) << 7)
            | OPCODE_STORE
        )
    if op in _B_OPS:
        if instr.imm % 2:
            raise InvalidConfig(f"branch offset {instr.imm} must be even")
        imm = _check_simm(instr.imm, 13, op)
        return (
            (((imm >> 12) & 1) << 31)
            | (((imm >> 5) & 0x3F) << 25)
            | (rs2 << 20)
            | (rs1 << 15)
            | (_B_OPS[op] << 12)
            | (((imm >> 1) & 0xF) << 8)
            | (((imm >> 11) & 1) << 7)
            | OPCODE_BRANCH
        )
    raise UnknownInstruction(f"cannot encode op {op!r}")


def _sext(value: int, bits: int) -> int:
    mask = (1 << bits) - 1
    value &= mask
    return value - (1 << bits) if value & (1 << (bits - 1)) else value


def decode(word: int) -> Instruction:
    """Inverse of encode on valid words; rejects anything else."""
    word &= 0xFFFFFFFF
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    f3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    f7 = (word >> 25) & 0x7F

    if opcode == OPCODE_CUSTOM0:
        if f3 != NN_MAC_FUNCT3 or f7 not in _FUNCT7_TO_CONFIG:
            raise UnknownInstruction(
                f"custom-0 word {word:#010x} has unlisted funct7/funct3"
            )
        cfg = _FUNCT7_TO_CONFIG[f7]
        return Instruction(cfg.mnemonic, rd, rs1, rs2, cfg=cfg)
    if opcode == OPCODE_OP:
        for m, (mf3, mf7) in _R_OPS.items():
            if f3 == mf3 and f7 == mf7:
                return Instruction(m, rd, rs1, rs2)
        raise UnknownInstruction(f"unsupported R-type word {word:#010x}")
    if opcode == OPCODE_OP_IMM:
        if word == OPCODE_OP_IMM:
            return Instruction("nop")
        if f3 == 0b001 or f3 == 0b101:  # shift-immediate forms
            for m, (mf3, mf7) in _SHIFT_OPS.items():
                if f3 == mf3 and f7 == mf7:
                    return Instruction(m, rd, rs1, imm=rs2)
            raise UnknownInstruction(f"bad shift-immediate word {word:#010x}")
        imm = _sext(word >> 20, 12)
        for m, mf3 in _I_OPS.items():
            if f3 == mf3:
                return Instruction(m, rd, rs1, imm=imm)
        raise UnknownInstruction(f"unsupported OP-IMM word {word:#010x}")
    if opcode == OPCODE_LUI:
        return Instruction("lui", rd, imm=word >> 12)
    if opcode == OPCODE_LOAD:
        if f3 != 0b010:
            raise UnknownInstruction(f"only lw is supported, word {word:#010x}")
        return Instruction("lw", rd, rs1, imm=_sext(word >> 20, 12))
    if opcode == OPCODE_STORE:
        if f3 != 0b010:
            raise UnknownInstruction(f"only sw is supported, word {word:#010x}")
        imm = _sext((f7 << 5) | rd, 12)
        return Instruction("sw", rs1=rs1, rs2=rs2, imm=imm)
    if opcode == OPCODE_BRANCH:
        for m, mf3 in _B_OPS.items():
            if f3 == mf3:
                imm = (
                    (((word >> 31) & 1) << 12)
                    | (((word >> 7) & 1) << 11)
                    | (((word >> 25) & 0x3F) << 5)
                    | (((word >> 8) & 0xF) << 1)
                )
                return Instruction(m, rs1=rs1, rs2=rs2, imm=_sext(imm, 13))
        raise UnknownInstruction(f"unsupported branch word {word:#010x}")
    raise UnknownInstruction(f"unsupported opcode in word {word:#010x}")


def _format(i: Instruction) -> str:
    op = i.op
    if op == "nop":
        return "nop"
    if _KIND_OF_OP[op] is Kind.NN_MAC or op in _R_OPS:
        return f"{op} x{i.rd}, x{i.rs1}, x{i.rs2}"
    if op in _I_OPS or op in _SHIFT_OPS:
        return f"{op} x{i.rd}, x{i.rs1}, {i.imm}"
    if op == "lui":
        return f"lui x{i.rd}, {i.imm:#x}"
    if op == "lw":
        return f"lw x{i.rd}, {i.imm}(x{i.rs1})"
    if op == "sw":
        return f"sw x{i.rs2}, {i.imm}(x{i.rs1})"
    if op in _B_OPS:
        return f"{op} x{i.rs1}, x{i.rs2}, {i.imm}"
    return f".word {encode(i):#010x}"


def disassemble(word: int) -> str:
    """Render one word as assembly text; unknown words become .word directives."""
    try:
        return _format(decode(word))
    except UnknownInstruction:
        return f".word 0x{word & 0xFFFFFFFF:08x}"
