import numpy as np
import pytest

from mprv import fixtures, programs, quantize, sim
from mprv.errors import EmptySample, InvalidRate, ShapeError
from mprv.isa import PrecisionConfig, config_for
from mprv.kernels import LayerSpec
from mprv.quantize import (
    FloatLayer,
    FloatNetwork,
    LayerQuantConfig,
    calibrate,
    dequantize,
    prune_structured,
    quantize_layer,
    quantize_network,
    quantize_weights_int,
    quantized_forward,
)


def identity_net(n=8):
    spec = LayerSpec("dense", n, n, 1, 1)
    return FloatNetwork(
        "id", (FloatLayer(spec, np.eye(n, dtype=np.float32).reshape(n, 1, 1, n)),)
    )


# ----------------------------------------------------------------- calibrate

def test_calibrate_zero_inputs():
    net = identity_net()
    ranges = calibrate(net, np.zeros((4, 1, 1, 8)))
    assert ranges == [0.0]


def test_calibrate_identity_range_tracks_max_input():
    net = identity_net()
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, size=(32, 1, 1, 8))
    ranges = calibrate(net, x)
    assert ranges[0] == pytest.approx(float(np.abs(x).max()))


def test_calibrate_monotone_under_sample_union():
    net = identity_net()
    rng = np.random.default_rng(1)
    a = rng.uniform(0, 1, size=(16, 1, 1, 8))
    b = rng.uniform(0, 2, size=(16, 1, 1, 8))
    ra = calibrate(net, a)
    rab = calibrate(net, np.concatenate([a, b]))
    assert all(u >= v for u, v in zip(rab, ra))


def test_calibrate_empty_sample():
    with pytest.raises(EmptySample):
        calibrate(identity_net(), np.zeros((0, 1, 1, 8)))


# ------------------------------------------------------------ weight quantize

def test_quantize_layer_two_bit_example():
    w = np.array([-1.0, 0.5, 0.25, 1.0], dtype=np.float32).reshape(1, 1, 1, 4)
    qt = quantize_layer(w, PrecisionConfig(2, 8))
    q, e = quantize_weights_int(w, 2)
    assert q.min() >= -2 and q.max() <= 1
    err = np.abs(w - dequantize(q, e))
    assert err.max() <= 2.0**e / 2 + 1e-12
    assert qt.lane_width == 2 and qt.scale_exp == e


def test_quantize_all_zero_tensor():
    q, e = quantize_weights_int(np.zeros((3, 3)), 4)
    assert e == 0
    assert not q.any()


def test_quantize_eight_bit_relative_rms_below_one_percent():
    rng = np.random.default_rng(123)
    w = rng.normal(0, 1, size=256)
    q, e = quantize_weights_int(w, 8)
    err = w - dequantize(q, e)
    rel_rms = np.sqrt((err**2).mean()) / np.sqrt((w**2).mean())
    assert rel_rms < 0.01


def test_dequantization_error_bound_every_width():
    rng = np.random.default_rng(5)
    for bits in (2, 4, 8):
        w = rng.normal(0, 1, size=500)
        q, e = quantize_weights_int(w, bits)
        qmax = (1 << (bits - 1)) - 1
        in_range = np.abs(w) <= qmax * 2.0**e
        err = np.abs(w - dequantize(q, e))
        assert err[in_range].max() <= 2.0 ** (e - 1) + 1e-12


def test_quantize_layer_packs_per_datapath_layout():
    w = np.array([1, 2, 3, 4, 5], dtype=np.float32)
    qt = quantize_layer(w, PrecisionConfig(8, 8), max_abs=127.0)
    # scale exponent 0: lanes are the rounded values, little-endian lanes
    assert qt.scale_exp == 0
    assert qt.data[0] == 0x04030201
    assert qt.data[1] == 0x00000005


# -------------------------------------------------------------------- pruning

def test_prune_identity_at_zero():
    w = np.arange(24, dtype=np.float32).reshape(4, 1, 1, 6)
    pruned, keep = prune_structured(w, 0.0)
    assert np.array_equal(pruned, w)
    assert keep.all()


def test_prune_half_by_l1_norm():
    w = np.array([[1.0], [4.0], [2.0], [3.0]]).reshape(4, 1, 1, 1)
    pruned, keep = prune_structured(w, 0.5)
    assert keep.tolist() == [False, True, False, True]  # drops norms 1 and 2
    assert not pruned[0].any() and not pruned[2].any()


def test_prune_rate_validation():
    with pytest.raises(InvalidRate):
        prune_structured(np.ones((4, 1, 1, 1)), 1.5)


def test_pruned_mac_count_law():
    spec = LayerSpec("conv2d", 4, 8, 4, 4, 3, 3, 1, 1)
    full = spec.mac_count()
    for p in (0.0, 0.25, 0.5):
        surviving = 8 - int(np.floor(p * 8))
        assert spec.mac_count(surviving) == full * surviving // 8


# ---------------------------------------------------------- network pipeline

@pytest.fixture(scope="module")
def mlp():
    net, acc, (tr_x, tr_y, te_x, te_y) = fixtures.train_fixture("mlp", 42)
    data = {
        "train": fixtures.to_network_input(tr_x, net.input_shape),
        "train_y": tr_y,
        "test": fixtures.to_network_input(te_x, net.input_shape),
        "test_y": te_y,
    }
    return net, acc, data


def test_eight_bit_quantization_loses_at_most_two_points(mlp):
    net, facc, data = mlp
    ranges = calibrate(net, data["train"][:140])
    qnet = quantize_network(net, [LayerQuantConfig(config_for("w8a8"))] * 3, ranges)
    qacc = quantize.quantized_accuracy(qnet, data["test"], data["test_y"])
    assert qacc >= facc - 0.02


def test_quantize_network_wiring(mlp):
    net, _, data = mlp
    ranges = calibrate(net, data["train"][:140])
    configs = [
        LayerQuantConfig(config_for("w4a8"), 0.25),
        LayerQuantConfig(config_for("w2a4")),
        LayerQuantConfig(config_for("w8a2")),
    ]
    qnet = quantize_network(net, configs, ranges)
    l0, l1, l2 = qnet.layers
    # edge widths follow the consumer's activation grid
    assert l0.in_bits == 8 and l0.out_bits == 4
    assert l1.in_bits == 4 and l1.out_bits == 2
    assert l2.in_bits == 2
    assert l0.shift >= 0 and l1.shift >= 0
    assert l2.shift == 0  # classifier emits raw scores
    assert len(l0.survivors) == 24  # 25% of 32 channels pruned
    # resolved scale shifts are recorded on the configs
    assert all(qc.weight_scale_shift is not None for qc in qnet.configs)


def test_quantized_forward_deterministic(mlp):
    net, _, data = mlp
    ranges = calibrate(net, data["train"][:140])
    qnet = quantize_network(net, [LayerQuantConfig(config_for("w4a4"))] * 3, ranges)
    a = quantized_forward(qnet, data["test"][:8])
    b = quantized_forward(qnet, data["test"][:8])
    assert np.array_equal(a, b)
    zero = quantized_forward(qnet, np.zeros_like(data["test"][:2]))
    assert np.array_equal(zero[0], zero[1])


def test_host_path_matches_simulator(mlp):
    net, _, data = mlp
    ranges = calibrate(net, data["train"][:140])
    configs = [
        LayerQuantConfig(config_for("w8a8")),
        LayerQuantConfig(config_for("w4a4"), 0.25),
        LayerQuantConfig(config_for("w2a8")),
    ]
    qnet = quantize_network(net, configs, ranges)
    x = data["test"][:4]
    want = quantized_forward(qnet, x)
    x_q = quantize.quantize_input(qnet, x)
    for packed in (True, False):
        for i in range(len(x)):
            prog, out_layout = programs.build_network_program(
                list(qnet.layers), x_q[i], packed=packed
            )
            state = sim.MachineState(prog.mem_size)
            sim.run(prog, state=state)
            got = programs.read_logits(out_layout, state.mem)
            assert np.array_equal(got, want[i])


def test_shift_calibration_never_hurts_calibration_accuracy(mlp):
    net, _, data = mlp
    ranges = calibrate(net, data["train"][:140])
    configs = [LayerQuantConfig(config_for("w4a4"))] * 3
    cal_x, cal_y = data["train"][:140], data["train_y"][:140]
    base = quantize.quantized_accuracy(
        quantize_network(net, configs, ranges), cal_x, cal_y
    )
    deltas = quantize.calibrate_shifts(net, configs, ranges, cal_x, cal_y)
    tuned = quantize.quantized_accuracy(
        quantize_network(net, configs, ranges, deltas), cal_x, cal_y
    )
    assert tuned >= base


def test_config_count_validation(mlp):
    net, _, data = mlp
    ranges = calibrate(net, data["train"][:140])
    with pytest.raises(ShapeError):
        quantize_network(net, [LayerQuantConfig(config_for("w8a8"))], ranges)
