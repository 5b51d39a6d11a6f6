import pytest

from mprv import datapath as dp
from mprv import sim
from mprv.errors import BudgetExceeded, IoError, MemoryOutOfBounds, WorkloadMismatch
from mprv.isa import Instruction, PrecisionConfig, config_for
from mprv.sim import CycleModel, MachineState, Program


def I(op, rd=0, rs1=0, rs2=0, imm=0):
    return Instruction(op, rd, rs1, rs2, imm)


def nn_mac(cfg, rd, rs1, rs2):
    return Instruction(cfg.mnemonic, rd, rs1, rs2, cfg=cfg)


def test_empty_program_zero_cycles_state_unchanged():
    state = MachineState(64)
    before = (list(state.regs), bytes(state.mem))
    report = sim.run(Program([], mem_size=64), state=state)
    assert report.total_cycles == 0
    assert report.instruction_count == 0
    assert (state.regs, bytes(state.mem)) == (list(before[0]), before[1])


def test_single_nn_mac_matches_datapath_and_costs_one_cycle():
    cfg = PrecisionConfig(8, 8)
    w = dp.pack([3, -2, 7, 1], 8, signed=True)
    a = dp.pack([9, 250, 4, 17], 8, signed=False)
    state = MachineState(64)
    state.regs[10] = 123
    state.regs[11] = a.raw
    state.regs[12] = w.raw
    report = sim.run(Program([nn_mac(cfg, 10, 11, 12)], mem_size=64), state=state)
    want = dp.nn_mac_functional(123, w, a, cfg) & 0xFFFFFFFF
    assert state.regs[10] == want
    assert report.total_cycles == 1
    assert report.nn_mac_count == 1


def test_nn_mac_matches_functional_all_configs_random():
    import random

    rng = random.Random(5)
    for cfg in [PrecisionConfig(w, a) for w in (8, 4, 2) for a in (8, 4, 2)]:
        for _ in range(200):
            wr = rng.randrange(1 << 32)
            ar = rng.randrange(1 << 32)
            acc = rng.randrange(1 << 32)
            state = MachineState(64)
            state.regs[1], state.regs[2], state.regs[3] = acc, ar, wr
            sim.run(Program([nn_mac(cfg, 1, 2, 3)], mem_size=64), state=state)
            w = dp.PackedWord(wr, cfg.weight_bits, True)
            a = dp.PackedWord(ar, cfg.activation_bits, False)
            want = dp.nn_mac_functional(dp.wrap32(acc), w, a, cfg) & 0xFFFFFFFF
            assert state.regs[1] == want


def test_x0_reads_zero_ignores_writes():
    prog = Program([I("addi", 0, 0, imm=55), I("addi", 5, 0, imm=7)], mem_size=64)
    state = MachineState(64)
    sim.run(prog, state=state)
    assert state.regs[0] == 0
    assert state.regs[5] == 7


def test_loads_stores_and_memory():
    prog = Program(
        [
            I("addi", 1, 0, imm=16),
            I("addi", 2, 0, imm=-5),
            I("sw", rs1=1, rs2=2, imm=4),
            I("lw", 3, 1, imm=4),
        ],
        mem_size=64,
    )
    state = MachineState(64)
    report = sim.run(prog, state=state)
    assert state.regs[3] == (-5) & 0xFFFFFFFF
    assert report.load_count == 1 and report.store_count == 1
    # alu(2) + store(1) + load(2)
    assert report.total_cycles == 5
    assert report.stall_cycles == report.total_cycles - report.instruction_count == 1


def test_branch_loop_and_cycle_accounting():
    # sum 1..5 with a countdown loop
    prog = Program(
        [
            I("addi", 1, 0, imm=5),  # n
            I("addi", 2, 0, imm=0),  # acc
            I("add", 2, 2, 1),  # loop: acc += n
            I("addi", 1, 1, imm=-1),
            I("bne", rs1=1, rs2=0, imm=-8),  # back to loop
        ],
        mem_size=64,
    )
    state = MachineState(64)
    report = sim.run(prog, state=state)
    assert state.regs[2] == 15
    assert report.branch_taken == 4 and report.branch_not_taken == 1
    # 2 setup + 5*(add, addi) + 4 taken + 1 not taken
    assert report.total_cycles == 2 + 10 + 4 * 2 + 1
    assert report.instruction_count == 2 + 10 + 5


def test_signed_ops():
    prog = Program(
        [
            I("addi", 1, 0, imm=-8),
            I("srai", 2, 1, imm=2),  # -2
            I("srli", 3, 1, imm=28),  # high bits of two's complement
            I("slt", 4, 1, 0),  # -8 < 0 -> 1
            I("sltu", 5, 1, 0),  # unsigned huge < 0 -> 0
            I("mul", 6, 1, 1),  # 64
        ],
        mem_size=64,
    )
    state = MachineState(64)
    sim.run(prog, state=state)
    assert state.regs[2] == (-2) & 0xFFFFFFFF
    assert state.regs[3] == 0xF
    assert state.regs[4] == 1
    assert state.regs[5] == 0
    assert state.regs[6] == 64


def test_mul_wraps_like_hardware():
    state = MachineState(64)
    state.regs[1] = 0xFFFFFFFF
    state.regs[2] = 0xFFFFFFFF
    sim.run(Program([I("mul", 3, 1, 2)], mem_size=64), state=state)
    assert state.regs[3] == 1


def test_determinism():
    prog = Program(
        [I("addi", 1, 0, imm=100), I("sw", rs1=0, rs2=1, imm=32), I("lw", 2, 0, imm=32)],
        mem_size=64,
    )
    runs = []
    for _ in range(2):
        state = MachineState(64)
        report = sim.run(prog, state=state)
        runs.append((report.total_cycles, list(state.regs), bytes(state.mem)))
    assert runs[0] == runs[1]


def test_budget_exceeded():
    prog = Program([I("beq", rs1=0, rs2=0, imm=0)], mem_size=64)  # spin forever
    with pytest.raises(BudgetExceeded):
        sim.run(prog, max_instructions=100)


def test_memory_out_of_bounds():
    prog = Program([I("lw", 1, 0, imm=128)], mem_size=64)
    with pytest.raises(MemoryOutOfBounds):
        sim.run(prog)


def test_data_init_applied():
    prog = Program(
        [I("lw", 1, 0, imm=8)],
        data_init=[(8, (1234).to_bytes(4, "little"))],
        mem_size=64,
    )
    state = MachineState(64)
    sim.run(prog, state=state)
    assert state.regs[1] == 1234


def test_per_layer_attribution():
    prog = Program(
        [I("addi", 1, 0, imm=1), I("addi", 2, 0, imm=2), I("lw", 3, 0, imm=0)],
        markers=[("a", 0, 1), ("b", 1, 3)],
        mem_size=64,
    )
    report = sim.run(prog)
    assert report.per_layer["a"].instructions == 1
    assert report.per_layer["b"].instructions == 2
    assert report.per_layer["b"].loads == 1
    assert (
        report.per_layer["a"].cycles + report.per_layer["b"].cycles
        == report.total_cycles
    )


def test_counter_decomposition():
    prog = Program(
        [
            I("addi", 1, 0, imm=64),
            I("lw", 2, 0, imm=0),
            I("sw", rs1=0, rs2=1, imm=4),
            I("mul", 3, 1, 1),
            I("nop"),
        ],
        mem_size=128,
    )
    r = sim.run(prog)
    m = CycleModel()
    assert r.total_cycles == (
        r.alu_count * m.alu
        + r.mul_count * m.mul
        + r.nn_mac_count * m.nn_mac
        + r.load_count * m.load
        + r.store_count * m.store
        + r.branch_taken * m.branch_taken
        + r.branch_not_taken * m.branch_not_taken
    )
    assert r.stall_cycles == r.total_cycles - r.instruction_count


def test_cycle_model_file_and_env(tmp_path, monkeypatch):
    p = tmp_path / "model.txt"
    p.write_text("load = 3\nbranch_taken 4\n# comment\n")
    m = CycleModel.from_file(str(p))
    assert m.load == 3 and m.branch_taken == 4 and m.alu == 1
    monkeypatch.setenv(sim.CYCLE_MODEL_ENV, str(p))
    assert CycleModel.from_env().load == 3
    monkeypatch.delenv(sim.CYCLE_MODEL_ENV)
    assert CycleModel.from_env() == CycleModel()
    bad = tmp_path / "bad.txt"
    bad.write_text("load three\n")
    with pytest.raises(IoError):
        CycleModel.from_file(str(bad))


def test_custom_cycle_model_costs():
    prog = Program([I("lw", 1, 0, imm=0)], mem_size=64)
    r = sim.run(prog, model=CycleModel(load=5))
    assert r.total_cycles == 5 and r.stall_cycles == 4


def test_compare_runs_identity_and_mismatch():
    prog = Program([I("addi", 1, 0, imm=1)], mem_size=64)
    a = sim.run(prog)
    b = sim.run(prog)
    s = sim.compare_runs(a, b)
    assert s.cycle_ratio == 1.0
    a.meta["workload"] = "x"
    b.meta["workload"] = "y"
    with pytest.raises(WorkloadMismatch):
        sim.compare_runs(a, b)


def test_compare_runs_published_scale_ratio():
    # baseline cycle count of the published CIFAR10 CNN vs a 12x-reduced run
    base = sim.ExecutionReport(110_900_000, 1, 0, 0, 0, 12_300_000, 0, 0, 1, 0, 0)
    opt = sim.ExecutionReport(110_900_000 // 12, 1, 0, 0, 0, 12_300_000, 0, 0, 1, 0, 0)
    assert sim.compare_runs(base, opt).cycle_ratio >= 12


def test_stall_fraction_zero_load_program():
    prog = Program([I("addi", 1, 0, imm=3), I("add", 2, 1, 1)], mem_size=64)
    assert sim.stall_fraction(sim.run(prog)) == 0.0


def test_program_serialization_roundtrip(tmp_path):
    cfg = config_for("w4a2")
    prog = Program(
        [
            I("addi", 1, 0, imm=32),
            nn_mac(cfg, 5, 6, 7),
            I("bne", rs1=1, rs2=0, imm=-8),
            I("sw", rs1=1, rs2=5, imm=-4),
        ],
        data_init=[(16, b"\x01\x02\x03\x04")],
        markers=[("layer0", 0, 4)],
        mem_size=256,
        meta={"mac_count": 8},
    )
    path = str(tmp_path / "prog.bin")
    sim.save_program(prog, path)
    loaded = sim.load_program(path)
    assert loaded.instrs == prog.instrs
    assert loaded.data_init == [(16, b"\x01\x02\x03\x04")]
    assert loaded.markers == [("layer0", 0, 4)]
    assert loaded.mem_size == 256
    assert loaded.meta == {"mac_count": 8}
    # serialized bytes are little-endian encodings of each word
    blob = open(path, "rb").read()
    assert len(blob) == 16
