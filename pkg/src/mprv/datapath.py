"""Functional and bit-level models of the modified multiply unit.

The unit has four 17-bit x 17-bit multipliers feeding a 34-bit accumulator
and runs at twice the core clock, so one packed-MAC instruction spans two
"fast" cycles.  A 32-bit register holds 4/8/16 lanes of 8/4/2-bit operands,
lane 0 in the least-significant bits.  Weights are signed two's-complement
lanes, activations unsigned.

One instruction consumes lane pairs 0..P-1 where P = 32/max(weight bits,
activation bits), i.e. the lane count of the wider operand.  Kernels cover
the remaining lanes of the narrower-width word by shifting it right between
instructions.

Products are scheduled onto the multipliers as follows:

    P = 4   two multipliers over two fast cycles, one product each
    P = 8   four multipliers over two fast cycles, one product each
    P = 16  four multipliers over two fast cycles, TWO products each:
            both 2-bit lane pairs are packed into a single 17-bit multiply
            with a 12-bit field offset and recovered exactly by field
            extraction with a borrow correction.

The 12-bit field pitch for 2-bit weights comes from the 10-bit worst-case
int2 x int8 product plus ceil(log2 4) = 2 guard bits for accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigMismatch, LaneOverflow, TooManyValues
from .isa import PrecisionConfig

MASK32 = 0xFFFFFFFF
FIELD_SHIFT = 12  # soft-SIMD field pitch: 10 product bits + 2 guard bits


@dataclass(frozen=True)
class PackedWord:
    """32-bit register image holding equal-width lanes, lane 0 in the LSBs."""

    raw: int
    lane_width: int
    signed: bool

    def __post_init__(self):
        if self.lane_width not in (2, 4, 8):
            raise LaneOverflow(f"unsupported lane width {self.lane_width}")
        if not 0 <= self.raw <= MASK32:
            raise LaneOverflow(f"raw value {self.raw:#x} is not a 32-bit word")

    @property
    def lanes(self) -> int:
        return 32 // self.lane_width


def lane_value(raw: int, index: int, width: int, signed: bool) -> int:
    v = (raw >> (index * width)) & ((1 << width) - 1)
    if signed and v & (1 << (width - 1)):
        v -= 1 << width
    return v


def pack(values, lane_width: int, signed: bool = True) -> PackedWord:
    """Pack integers into lanes; unfilled lanes are zero."""
    lanes = 32 // lane_width
    if len(values) > lanes:
        raise TooManyValues(f"{len(values)} values exceed {lanes} lanes")
    lo = -(1 << (lane_width - 1)) if signed else 0
    hi = (1 << (lane_width - 1)) - 1 if signed else (1 << lane_width) - 1
    raw = 0
    for k, v in enumerate(values):
        if not lo <= v <= hi:
            raise LaneOverflow(
                f"value {v} does not fit a {'signed' if signed else 'unsigned'} "
                f"{lane_width}-bit lane"
            )
        raw |= (v & ((1 << lane_width) - 1)) << (k * lane_width)
    return PackedWord(raw, lane_width, signed)


def unpack(word: PackedWord) -> list[int]:
    return [
        lane_value(word.raw, k, word.lane_width, word.signed) for k in range(word.lanes)
    ]


def mul32_partial_products(a, b):
    """32-bit wrapping multiply built from 17-bit x 17-bit products only.

    Splits both operands into 16-bit halves and combines three partial
    products; the high-high term falls entirely above bit 32.  Accepts
    plain ints or numpy uint64 arrays (same expression either way).
    """
    a_lo = a & 0xFFFF
    a_hi = (a >> 16) & 0xFFFF
    b_lo = b & 0xFFFF
    b_hi = (b >> 16) & 0xFFFF
    p_ll = a_lo * b_lo
    p_lh = a_lo * b_hi
    p_hl = a_hi * b_lo
    return (p_ll + ((p_lh + p_hl) << 16)) & MASK32


def guard_bits(n: int, k: int) -> int:
    """Extra field spacing needed when k n-bit results share an accumulator."""
    if n < 1 or k < 1:
        raise ValueError("n and k must be positive")
    return (k - 1).bit_length()


def wrap32(value: int) -> int:
    """Two's-complement wrap to a signed 32-bit integer."""
    value &= MASK32
    return value - (1 << 32) if value & 0x80000000 else value


def products_per_instruction(cfg: PrecisionConfig) -> int:
    return cfg.products_per_instruction


def nn_mac_functional(
    acc: int, weights: PackedWord, activations: PackedWord, cfg: PrecisionConfig
) -> int:
    """acc + sum of w_k * a_k over lane pairs 0..P-1, wrapping at 32 bits."""
    if weights.lane_width != cfg.weight_bits or not weights.signed:
        raise ConfigMismatch("weight word does not match config")
    if activations.lane_width != cfg.activation_bits or activations.signed:
        raise ConfigMismatch("activation word does not match config")
    total = acc
    wr, ar = weights.raw, activations.raw
    wb, ab = cfg.weight_bits, cfg.activation_bits
    for k in range(cfg.products_per_instruction):
        total += lane_value(wr, k, wb, True) * lane_value(ar, k, ab, False)
    return wrap32(total)


@dataclass(frozen=True)
class ScheduleEntry:
    multiplier: int
    weight_lanes: tuple[int, ...]
    activation_lanes: tuple[int, ...]


@dataclass(frozen=True)
class FastCycleSchedule:
    cfg: PrecisionConfig
    fast_cycles: tuple[tuple[ScheduleEntry, ...], ...]

    @property
    def total_products(self) -> int:
        return sum(
            len(e.weight_lanes) for fc in self.fast_cycles for e in fc
        )


def schedule(cfg: PrecisionConfig) -> FastCycleSchedule:
    """Lane -> multiplier -> fast-cycle mapping for one instruction."""
    p = cfg.products_per_instruction
    cycles = []
    if p == 4:
        for fc in range(2):
            cycles.append(
                tuple(
                    ScheduleEntry(m, (2 * fc + m,), (2 * fc + m,)) for m in range(2)
                )
            )
    elif p == 8:
        for fc in range(2):
            cycles.append(
                tuple(
                    ScheduleEntry(m, (4 * fc + m,), (4 * fc + m,)) for m in range(4)
                )
            )
    elif p == 16:
        # soft SIMD: each multiplier carries two lane pairs per fast cycle
        for fc in range(2):
            entries = []
            for m in range(4):
                base = 8 * fc + 2 * m
                entries.append(ScheduleEntry(m, (base, base + 1), (base, base + 1)))
            cycles.append(tuple(entries))
    else:  # pragma: no cover - configs only yield 4/8/16
        raise ConfigMismatch(f"no schedule for {p} products")
    return FastCycleSchedule(cfg, tuple(cycles))


def _extract_low_field(product: int) -> tuple[int, int]:
    """Split off the signed low 12-bit field, correcting the borrow.

    A negative low field borrows one unit from bit 12; adding 1 << 12 back
    before shifting restores the upper part exactly.
    """
    low = product & 0xFFF
    if low >= 0x800:
        low -= 0x1000
        product += 0x1000
    return low, product >> FIELD_SHIFT


def soft_simd_product(a: int, w_lo: int, w_hi: int) -> tuple[int, int]:
    """Two int2 x uint8 products from one 17-bit multiply.

    The composite operand places w_hi 12 bits above w_lo; after the single
    multiplication the low product sits in the low 10(+2 guard) bits and
    the high product from bit 12 up, separated exactly by field extraction.
    """
    if not 0 <= a <= 0xFF:
        raise LaneOverflow(f"activation {a} out of unsigned 8-bit range")
    if not -2 <= w_lo <= 1 or not -2 <= w_hi <= 1:
        raise LaneOverflow("weights must be signed 2-bit values")
    composite = (w_hi << FIELD_SHIFT) + w_lo
    assert -(1 << 16) <= composite < (1 << 16)  # fits a 17-bit signed operand
    product = a * composite
    p_lo, p_hi = _extract_low_field(product)
    return p_lo, p_hi


def _dual_lane_product(w0: int, w1: int, a0: int, a1: int) -> tuple[int, int]:
    """Two int2 x uint2 products from one 17-bit multiply.

    Both operands are composites with a 12-bit field pitch; the wanted
    products land in the lowest and highest fields, the mixed terms in the
    discarded middle field.
    """
    wc = (w1 << FIELD_SHIFT) + w0
    ac = (a1 << FIELD_SHIFT) + a0
    assert -(1 << 16) <= wc < (1 << 16) and 0 <= ac < (1 << 17)
    product = wc * ac
    p0, rest = _extract_low_field(product)
    _cross, p1 = _extract_low_field(rest)
    return p0, p1


ACC_LIMIT = 1 << 33  # 34-bit signed accumulator


def nn_mac_bit_level(
    acc: int, weights: PackedWord, activations: PackedWord, cfg: PrecisionConfig
) -> int:
    """Execute one MAC through the fast-cycle schedule and 17-bit multiplies.

    Matches nn_mac_functional exactly; every intermediate stays within the
    34-bit accumulator until the final 32-bit writeback.
    """
    if weights.lane_width != cfg.weight_bits or not weights.signed:
        raise ConfigMismatch("weight word does not match config")
    if activations.lane_width != cfg.activation_bits or activations.signed:
        raise ConfigMismatch("activation word does not match config")
    total = wrap32(acc)
    wr, ar = weights.raw, activations.raw
    wb, ab = cfg.weight_bits, cfg.activation_bits
    for fc in schedule(cfg).fast_cycles:
        for entry in fc:
            if len(entry.weight_lanes) == 1:
                wk = entry.weight_lanes[0]
                ak = entry.activation_lanes[0]
                w = lane_value(wr, wk, wb, True)
                a = lane_value(ar, ak, ab, False)
                assert -(1 << 16) <= w < (1 << 16) and 0 <= a < (1 << 17)
                total += w * a
            else:
                (w0l, w1l), (a0l, a1l) = entry.weight_lanes, entry.activation_lanes
                p0, p1 = _dual_lane_product(
                    lane_value(wr, w0l, wb, True),
                    lane_value(wr, w1l, wb, True),
                    lane_value(ar, a0l, ab, False),
                    lane_value(ar, a1l, ab, False),
                )
                total += p0 + p1
            assert -ACC_LIMIT <= total < ACC_LIMIT, "34-bit accumulator overflow"
    return wrap32(total)
