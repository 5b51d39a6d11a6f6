"""Acceptance criteria, one test per criterion.

Each test prints a PASS line with its measured values once its assertions
hold, so `pytest -v -s tests/test_acceptance.py` reads as a checklist.
"""

import random
import time

import numpy as np
import pytest

from mprv import datapath as dp
from mprv import dse, fixtures, isa, power, programs, quantize, sim
from mprv.dse import DseParams, ParetoPoint, hypervolume, pareto_front
from mprv.isa import ALL_CONFIGS, Instruction, PrecisionConfig, config_for
from mprv.kernels import LayerSpec
from mprv.programs import LayerExec, build_layer_program, build_network_program
from mprv.quantize import LayerQuantConfig


def ok(criterion, text):
    print(f"\nACCEPTANCE {criterion}: PASS - {text}")


# --------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def mlp():
    net, acc, (tr_x, tr_y, te_x, te_y) = fixtures.train_fixture("mlp", 42)
    return {
        "net": net, "float_acc": acc,
        "train": fixtures.to_network_input(tr_x, net.input_shape), "train_y": tr_y,
        "test": fixtures.to_network_input(te_x, net.input_shape), "test_y": te_y,
    }


@pytest.fixture(scope="module")
def cnn():
    net, acc, (tr_x, tr_y, te_x, te_y) = fixtures.train_fixture("cnn", 42)
    return {
        "net": net, "float_acc": acc,
        "train": fixtures.to_network_input(tr_x, net.input_shape), "train_y": tr_y,
        "test": fixtures.to_network_input(te_x, net.input_shape), "test_y": te_y,
    }


def reference_conv_layer(cfg, out_bits=8, prune=0.0):
    """Conv layer shaped like the mid-network layers of the evaluated CNNs."""
    rng = np.random.default_rng(42)
    spec = LayerSpec("conv2d", 16, 16, 8, 8, 3, 3, 1, 1, relu=True)
    lo, hi = -(1 << (cfg.weight_bits - 1)), (1 << (cfg.weight_bits - 1)) - 1
    weights = rng.integers(lo, hi + 1, size=(16, 3, 3, 16)).astype(np.int64)
    _, keep = quantize.prune_structured(weights.astype(np.float64), prune)
    return LayerExec(
        spec=spec, cfg=cfg, weights=weights,
        bias=rng.integers(-100, 100, size=16).astype(np.int64),
        survivors=tuple(int(c) for c in np.nonzero(keep)[0]),
        shift=4, in_bits=cfg.activation_bits, out_bits=out_bits,
    )


def run_layer(layer, packed, model=None):
    prog, _ = build_layer_program(layer, packed=packed)
    return sim.run(prog, model=model)


# -------------------------------------------------------------- criterion 1

def test_criterion_01_isa_roundtrip():
    start = time.time()
    funct7_table = {
        (8, 8): 0b0001010, (8, 4): 0b0000110, (8, 2): 0b0000010,
        (4, 8): 0b0001001, (4, 4): 0b0000101, (4, 2): 0b0000001,
        (2, 8): 0b0001000, (2, 4): 0b0000100, (2, 2): 0b0000000,
    }
    for cfg in ALL_CONFIGS:
        word = isa.encode(Instruction(cfg.mnemonic, 1, 2, 3, cfg=cfg))
        assert (word >> 25) == funct7_table[(cfg.weight_bits, cfg.activation_bits)]
        assert (word >> 12) & 0x7 == 0b010
    rng = random.Random(2024)
    mism = 0
    for _ in range(10_000):
        cfg = rng.choice(ALL_CONFIGS)
        i = Instruction(cfg.mnemonic, rng.randrange(32), rng.randrange(32),
                        rng.randrange(32), cfg=cfg)
        if isa.decode(isa.encode(i)) != i:
            mism += 1
    assert mism == 0
    elapsed = time.time() - start
    assert elapsed < 1.0
    ok(1, f"9 encodings match the table, 10^4 round-trips, {elapsed:.2f}s")


# -------------------------------------------------------------- criterion 2

def test_criterion_02_partial_product_multiplier():
    start = time.time()
    rng = np.random.default_rng(7)
    a = rng.integers(0, 1 << 32, size=1_000_000, dtype=np.uint64)
    b = rng.integers(0, 1 << 32, size=1_000_000, dtype=np.uint64)
    got = dp.mul32_partial_products(a, b)
    want = (a * b) & np.uint64(0xFFFFFFFF)
    assert np.array_equal(got, want)
    bounds = [0, 1, 0xFFFF, 0x10000, 0x80000000, 0xFFFFFFFF]
    for x in bounds:
        for y in bounds:
            assert dp.mul32_partial_products(x, y) == (x * y) & 0xFFFFFFFF
    elapsed = time.time() - start
    assert elapsed < 5.0
    ok(2, f"10^6 random pairs + boundary set, zero mismatches, {elapsed:.2f}s")


# -------------------------------------------------------------- criterion 3

def test_criterion_03_lane_semantics_oracle():
    start = time.time()
    for a in range(256):
        for w_lo in range(-2, 2):
            for w_hi in range(-2, 2):
                assert dp.soft_simd_product(a, w_lo, w_hi) == (a * w_lo, a * w_hi)
    cases = 0
    for cfg in ALL_CONFIGS:
        rng = random.Random(1000 + cfg.funct7)
        wb, ab = cfg.weight_bits, cfg.activation_bits
        for _ in range(10_000):
            wr = rng.randrange(1 << 32)
            ar = rng.randrange(1 << 32)
            acc = rng.randrange(-(1 << 31), 1 << 31)
            w = dp.PackedWord(wr, wb, True)
            a = dp.PackedWord(ar, ab, False)
            want = dp.wrap32(
                acc + sum(
                    dp.lane_value(wr, k, wb, True) * dp.lane_value(ar, k, ab, False)
                    for k in range(cfg.products_per_instruction)
                )
            )
            assert dp.nn_mac_functional(acc, w, a, cfg) == want
            assert dp.nn_mac_bit_level(acc, w, a, cfg) == want
            cases += 1
    elapsed = time.time() - start
    assert elapsed < 30.0
    ok(3, f"{cases} functional==bit-level==oracle cases + 4096 soft-SIMD, {elapsed:.1f}s")


# -------------------------------------------------------------- criterion 4

def test_criterion_04_throughput_law():
    expected = {8: 4, 4: 8, 2: 16}
    for width, products in expected.items():
        cfg = PrecisionConfig(width, width)
        assert cfg.products_per_instruction == products
        assert dp.schedule(cfg).total_products == products
    ok(4, "products per instruction = 4/8/16 for weight widths 8/4/2")


# -------------------------------------------------------------- criterion 5

def test_criterion_05_value_preservation():
    start = time.time()
    rng = np.random.default_rng(505)
    checked = 0
    for cfg in ALL_CONFIGS:
        for kind in ("conv2d", "depthwise_conv2d", "dense"):
            if kind == "dense":
                c_in, c_out = int(rng.integers(4, 33)), int(rng.integers(1, 9))
                spec = LayerSpec("dense", c_in, c_out, 1, 1, relu=True)
                shape = (c_out, 1, 1, c_in)
            elif kind == "depthwise_conv2d":
                c = int(rng.integers(2, 9))
                spec = LayerSpec(kind, c, c, 6, 5, 3, 3, 1, 1, relu=True)
                shape = (c, 3, 3)
            else:
                c_in, c_out = int(rng.integers(1, 8)), int(rng.integers(1, 9))
                spec = LayerSpec("conv2d", c_in, c_out, int(rng.integers(4, 8)),
                                 int(rng.integers(4, 8)), 3, 3, 1, 1, relu=True)
                shape = (c_out, 3, 3, c_in)
            lo = -(1 << (cfg.weight_bits - 1))
            hi = (1 << (cfg.weight_bits - 1)) - 1
            prune = int(rng.integers(0, max(1, spec.c_out // 3)))
            survivors = tuple(
                sorted(rng.choice(spec.c_out, spec.c_out - prune, replace=False).tolist())
            )
            layer = LayerExec(
                spec=spec, cfg=cfg,
                weights=rng.integers(lo, hi + 1, size=shape).astype(np.int64),
                bias=rng.integers(-100, 100, size=spec.c_out).astype(np.int64),
                survivors=survivors, shift=int(rng.integers(2, 7)),
                in_bits=cfg.activation_bits, out_bits=int(rng.choice([2, 4, 8])),
            )
            x = rng.integers(
                0, 1 << cfg.activation_bits,
                size=(spec.h_in, spec.w_in, spec.c_in),
            ).astype(np.int64)
            want = programs.host_layer_forward(layer, x[None])[0]
            for packed in (True, False):
                prog, out_layout = build_layer_program(layer, packed=packed, inputs=x)
                state = sim.MachineState(prog.mem_size)
                sim.run(prog, state=state)
                got = out_layout.host_read(state.mem)
                assert np.array_equal(got, want), (kind, cfg.mnemonic, packed)
            checked += 1
    for kind in ("maxpool", "avgpool", "residual_add"):
        for bits in (2, 4, 8):
            if kind == "residual_add":
                spec = LayerSpec(kind, 5, 5, 4, 3)
            else:
                spec = LayerSpec(kind, 6, 6, 4, 4, 2, 2, 2, 0)
            layer = LayerExec(spec=spec, in_bits=bits, out_bits=bits)
            x = rng.integers(0, 1 << bits, size=(spec.h_in, spec.w_in, spec.c_in))
            y = rng.integers(0, 1 << bits, size=x.shape)
            inputs = [x, y] if kind == "residual_add" else x
            want = programs.host_layer_forward(
                layer, x[None], y[None] if kind == "residual_add" else None
            )[0]
            for packed in (True, False):
                prog, out_layout = build_layer_program(layer, packed=packed, inputs=inputs)
                state = sim.MachineState(prog.mem_size)
                sim.run(prog, state=state)
                assert np.array_equal(out_layout.host_read(state.mem), want)
            checked += 1
    elapsed = time.time() - start
    assert elapsed < 120.0
    ok(5, f"{checked} layer/config combos bit-identical (packed, baseline, host), {elapsed:.1f}s")


# ----------------------------------------------------------- criteria 6 & 7

@pytest.fixture(scope="module")
def conv_reference_runs():
    base = run_layer(reference_conv_layer(PrecisionConfig(8, 8)), packed=False)
    packed = {cfg: run_layer(reference_conv_layer(cfg), packed=True) for cfg in ALL_CONFIGS}
    return base, packed


def test_criterion_06_memory_access_reduction(conv_reference_runs):
    base, packed = conv_reference_runs
    ratios = {
        cfg: base.load_count / packed[cfg].load_count for cfg in ALL_CONFIGS
    }
    diag = [ratios[PrecisionConfig(b, b)] for b in (8, 4, 2)]
    assert diag[0] < diag[1] < diag[2]
    assert diag[2] >= 2 * diag[0]
    for r in diag:
        assert 4.0 <= r <= 32.0
    # cross-check against the whole-run comparison path
    rep = sim.compare_runs(base, packed[PrecisionConfig(2, 2)])
    assert 13.0 <= rep.load_ratio <= 30.0
    ok(6, "load ratios W8A8/W4A4/W2A2 = "
          + "/".join(f"{r:.1f}x" for r in diag) + " (monotone, in [4, 32])")


def test_criterion_07_mode_speedups(conv_reference_runs):
    base, packed = conv_reference_runs
    speedups = {
        cfg: base.total_cycles / packed[cfg].total_cycles for cfg in ALL_CONFIGS
    }
    modes = {m: speedups[PrecisionConfig(b, b)] for m, b in ((1, 8), (2, 4), (3, 2))}
    targets = {1: 14.0, 2: 24.0, 3: 34.0}
    assert modes[1] < modes[2] < modes[3]
    for m, target in targets.items():
        assert 0.65 * target <= modes[m] <= 1.35 * target, (m, modes[m])
    # cycle-model sensitivity: the mode ordering must be stable when the
    # memory and branch costs move
    print("\n  cycle-model sensitivity (Mode-1/2/3 speedups):")
    for name, model in [
        ("default (load=2, taken=2)", sim.CycleModel()),
        ("slow memory (load=3)", sim.CycleModel(load=3)),
        ("flat branches (taken=1)", sim.CycleModel(branch_taken=1)),
    ]:
        b = run_layer(reference_conv_layer(PrecisionConfig(8, 8)), packed=False, model=model)
        trio = [
            b.total_cycles
            / run_layer(reference_conv_layer(PrecisionConfig(w, w)), packed=True,
                        model=model).total_cycles
            for w in (8, 4, 2)
        ]
        print(f"    {name:28} {trio[0]:5.1f}x {trio[1]:5.1f}x {trio[2]:5.1f}x")
        assert trio[0] < trio[1] < trio[2]
    print("  per-config speedups under the default model:")
    for cfg in ALL_CONFIGS:
        print(f"    {cfg.mnemonic:14} {speedups[cfg]:6.2f}x")
    ok(7, "mode speedups "
          + "/".join(f"{modes[m]:.1f}x" for m in (1, 2, 3))
          + " vs 14/24/34 +-35%, strict ordering under every model")


# -------------------------------------------------------------- criterion 8

def test_criterion_08_end_to_end_reduction(cnn):
    start = time.time()
    net, facc = cnn["net"], cnn["float_acc"]
    calib = quantize.calibrate(net, cnn["train"][: len(cnn["train"]) // 10])
    params = DseParams(accuracy_loss_limit=0.01, prune_step=0.25, prune_max=0.5,
                       max_evals=500)
    table = dse.layer_latency_table(net, params.prune_rates)
    evaluator = dse.network_evaluator(net, calib, cnn["test"], cnn["test_y"])
    result = dse.greedy_dse(net, params, evaluator, table, facc)
    assert not result.infeasible
    best = min(result.points, key=lambda p: p.total_cycles)
    assert best.accuracy >= facc - 0.01

    base_qnet = quantize.quantize_network(
        net, [LayerQuantConfig(config_for("w8a8"))] * 3, calib
    )
    image = quantize.quantize_input(base_qnet, cnn["test"][:1])[0]
    base_prog, _ = build_network_program(list(base_qnet.layers), image, packed=False)
    base_cycles = sim.run(base_prog).total_cycles

    qnet = quantize.quantize_network(net, list(best.configs), calib)
    image_q = quantize.quantize_input(qnet, cnn["test"][:1])[0]
    prog, _ = build_network_program(list(qnet.layers), image_q, packed=True)
    cycles = sim.run(prog).total_cycles
    reduction = 1 - cycles / base_cycles
    assert reduction >= 0.90
    # per-layer estimates agree with the full-network run
    assert abs(best.total_cycles - cycles) / cycles < 0.05
    elapsed = time.time() - start
    assert elapsed < 600.0
    label = "|".join(
        f"w{qc.cfg.weight_bits}a{qc.cfg.activation_bits}p{qc.prune:g}"
        for qc in best.configs
    )
    ok(8, f"{label}: accuracy {best.accuracy:.4f} (float {facc:.4f}), "
          f"{reduction:.1%} cycle reduction, {elapsed:.0f}s")


# -------------------------------------------------------------- criterion 9

def test_criterion_09_dse_quality(mlp):
    start = time.time()
    net, facc = mlp["net"], mlp["float_acc"]
    calib = quantize.calibrate(net, mlp["train"][: len(mlp["train"]) // 10])
    params = DseParams(accuracy_loss_limit=0.01, prune_step=0.25, prune_max=0.5,
                       max_evals=500)
    table = dse.layer_latency_table(net, params.prune_rates)
    greedy = dse.greedy_dse(
        net, params, dse.network_evaluator(net, calib, mlp["test"], mlp["test_y"]),
        table, facc,
    )
    exhaustive = dse.exhaustive_dse(
        net, params, dse.network_evaluator(net, calib, mlp["test"], mlp["test_y"]),
        table, facc,
    )
    assert exhaustive.eval_count == 19683  # (9 configs x 3 rates)^3
    assert greedy.eval_count <= exhaustive.eval_count / 10

    base_qnet = quantize.quantize_network(
        net, [LayerQuantConfig(config_for("w8a8"))] * 3, calib
    )
    image = quantize.quantize_input(base_qnet, mlp["test"][:1])[0]
    base_prog, _ = build_network_program(list(base_qnet.layers), image, packed=False)
    ref = (0.0, sim.run(base_prog).total_cycles)
    hv_g = hypervolume(greedy.front, ref)
    hv_e = hypervolume(exhaustive.front, ref)
    ratio = hv_g / hv_e
    assert ratio >= 0.70
    elapsed = time.time() - start
    assert elapsed < 900.0
    ok(9, f"hypervolume ratio {ratio:.3f} (>=0.70), evals {greedy.eval_count} vs "
          f"{exhaustive.eval_count} (<=1/10), {elapsed:.0f}s")


# ------------------------------------------------------------- criterion 10

def test_criterion_10_pareto_and_hypervolume():
    rng = random.Random(99)
    for _ in range(1000):
        pts = [
            ParetoPoint((), rng.random(), rng.randint(0, 10**6))
            for _ in range(rng.randint(1, 40))
        ]
        got = sorted((p.accuracy, p.total_cycles) for p in pareto_front(pts))
        want = sorted(
            (q.accuracy, q.total_cycles)
            for q in pts
            if not any(dse.dominates(p, q) for p in pts)
        )
        assert got == want
    nprng = np.random.default_rng(17)
    for trial in range(5):
        pts = [
            ParetoPoint((), 0.1 + 0.9 * rng.random(), rng.randint(1, 900))
            for _ in range(rng.randint(3, 12))
        ]
        front = pareto_front(pts)
        ref = (0.0, 1000)
        exact = hypervolume(front, ref)
        min_cyc = min(p.total_cycles for p in front)
        acc_hi = max(p.accuracy for p in front)
        xs = nprng.uniform(min_cyc, 1000, 400_000)
        ys = nprng.uniform(0.0, acc_hi, 400_000)
        hit = np.zeros(len(xs), dtype=bool)
        for p in front:
            hit |= (xs >= p.total_cycles) & (ys <= p.accuracy)
        approx = hit.mean() * (1000 - min_cyc) * acc_hi
        assert abs(approx - exact) / exact < 0.01
    ok(10, "front matches the O(n^2) oracle on 10^3 sets; hypervolume within 1% of Monte Carlo")


# ------------------------------------------------------------- criterion 11

def test_criterion_11_power_model():
    params = power.default_power_params()
    dyn_ratio = power.dynamic_power(params, 0.7) / power.dynamic_power(params, 1.0)
    assert abs(dyn_ratio - 0.49) < 1e-12
    total_ratio = power.total_power(params, 0.7) / power.total_power(params, 1.0)
    assert abs((1 - total_ratio) - 0.58) < 0.02
    gain = 1 / total_ratio
    assert abs(gain - 2.38) < 0.1
    v_min = power.min_valid_voltage(power.default_slack_table())
    assert v_min == 0.62
    ok(11, f"dynamic ratio {dyn_ratio:.4f}, reduction {1-total_ratio:.1%}, "
           f"gain {gain:.2f}x, min valid voltage {v_min:.2f} V")


# ------------------------------------------------------------- criterion 12

@pytest.mark.parametrize("fixture_name", ["mlp", "cnn"])
def test_criterion_12_host_simulator_consistency(fixture_name, mlp, cnn):
    data = mlp if fixture_name == "mlp" else cnn
    net = data["net"]
    calib = quantize.calibrate(net, data["train"][: len(data["train"]) // 10])
    configs = [
        LayerQuantConfig(config_for("w8a8")),
        LayerQuantConfig(config_for("w4a4"), 0.25),
        LayerQuantConfig(config_for("w4a8")),
    ]
    qnet = quantize.quantize_network(net, configs, calib)
    rng = np.random.default_rng(12)
    picks = rng.choice(len(data["test"]), size=20, replace=False)
    images = data["test"][picks]
    want = quantize.quantized_forward(qnet, images)
    images_q = quantize.quantize_input(qnet, images)
    for i in range(20):
        prog, out_layout = build_network_program(
            list(qnet.layers), images_q[i], packed=True
        )
        state = sim.MachineState(prog.mem_size)
        sim.run(prog, state=state)
        got = programs.read_logits(out_layout, state.mem)
        assert np.array_equal(got, want[i]), i
    ok(12, f"{fixture_name}: 20 random inputs, logits bit-identical to the simulator")
