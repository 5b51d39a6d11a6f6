"""Command-line entry point.

Commands:

    fixtures   train the benchmark models deterministically, emit model and
               dataset files
    quantize   post-training quantization of a float model file
    run        simulate a network (scalar baseline + packed), emit report CSV
    dse        greedy (optionally exhaustive) mixed-precision exploration
    power      voltage sweep over a run report
    disasm     disassemble a saved program

Every command is deterministic given its inputs and --seed; outputs are
written atomically, and any error exits nonzero without leaving partial
files behind.  MARVIN_CYCLE_MODEL may point at a cycle-model override file
used when a manifest names none.
"""

from __future__ import annotations

import argparse
import os
import sys

from . import dse as dse_mod
from . import fileio, fixtures, isa, power, programs, quantize, sim
from .errors import ManifestError, ToolError
from .quantize import LayerQuantConfig


def _out_path(out_dir: str, name: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


# ------------------------------------------------------------- orchestration

def _manifest_from_args(args) -> fileio.RunManifest:
    """Manifest file, or an equivalent built from --model/--dataset/--seed."""
    if getattr(args, "manifest", None):
        return fileio.load_manifest(args.manifest)
    if not getattr(args, "model", None) or not getattr(args, "dataset", None):
        raise ManifestError("provide --manifest, or both --model and --dataset")
    seed = getattr(args, "seed", None)
    return fileio.RunManifest(
        model=args.model, dataset=args.dataset, seed=42 if seed is None else seed
    )


def _read_dse_config(path: str, args):
    """key=value file supplying threshold/granularity/pmax/iters/seed.
    Explicit command-line flags win over file values (unset flags are None
    until the defaults are applied)."""
    keys = {"threshold": float, "granularity": float, "pmax": float,
            "iters": int, "seed": int}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read DSE config {path}: {e}") from e
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace("=", " ").split()
        if len(parts) != 2 or parts[0] not in keys:
            raise ManifestError(f"{path}:{ln}: expected '<name> <value>', got {raw!r}")
        if getattr(args, parts[0], None) is None:
            setattr(args, parts[0], keys[parts[0]](parts[1]))


_DSE_DEFAULTS = {"threshold": 0.01, "granularity": 0.25, "pmax": 0.5,
                 "iters": 500, "seed": 42}


def _load_inputs(manifest: fileio.RunManifest):
    net = fileio.load_float_network(manifest.model)
    blob = open(manifest.dataset, "rb").read()
    images, labels = fixtures.parse_dataset(blob)
    tr_x, tr_y, te_x, te_y = fixtures.split_dataset(images, labels, manifest.seed)
    shape = net.input_shape
    data = {
        "train_images": fixtures.to_network_input(tr_x, shape),
        "train_labels": tr_y,
        "test_images": fixtures.to_network_input(te_x, shape),
        "test_labels": te_y,
    }
    return net, data


def _calibration_sample(data):
    n = max(1, len(data["train_images"]) // 10)  # 10% of the training split
    return data["train_images"][:n], data["train_labels"][:n]


def _configs_from_manifest(net, manifest: fileio.RunManifest):
    n = len(net.mac_layer_indices)
    default = manifest.default_config or "w8a8"
    configs = []
    for i in range(n):
        configs.append(
            manifest.layer_configs.get(i, LayerQuantConfig(isa.config_for(default)))
        )
    return configs


def _cycle_model(manifest: fileio.RunManifest | None):
    if manifest is not None and manifest.cycle_model:
        return sim.CycleModel.from_file(manifest.cycle_model)
    return sim.CycleModel.from_env()


def _simulate_network(qnet, image_q, packed, model):
    prog, out_layout = programs.build_network_program(
        list(qnet.layers), image_q, packed=packed
    )
    state = sim.MachineState(prog.mem_size)
    report = sim.run(prog, state=state, model=model)
    scores = programs.read_logits(out_layout, state.mem)
    return report, scores


def _config_label(qc: LayerQuantConfig) -> str:
    label = f"w{qc.cfg.weight_bits}a{qc.cfg.activation_bits}"
    if qc.prune:
        label += f"+p{qc.prune:g}"
    return label


# ----------------------------------------------------------------- commands

def cmd_fixtures(args) -> int:
    images, labels = fixtures.load_bundled_digits()
    ds_path = _out_path(args.out, "digits.ds")
    fileio.atomic_write(ds_path, fixtures.serialize_dataset(images, labels))
    print(f"dataset: {ds_path} ({len(images)} samples)")
    for name in ("mlp", "cnn"):
        net, acc, _ = fixtures.train_fixture(name, args.seed)
        path = _out_path(args.out, f"{name}_float.nnw")
        fileio.save_float_network(net, path)
        print(f"{name}: float accuracy {acc:.4f} -> {path}")
    return 0


def cmd_quantize(args) -> int:
    manifest = _manifest_from_args(args)
    net, data = _load_inputs(manifest)
    cal_x, cal_y = _calibration_sample(data)
    ranges = quantize.calibrate(net, cal_x)
    configs = _configs_from_manifest(net, manifest)
    deltas = None
    if args.calibrate_shifts:
        deltas = quantize.calibrate_shifts(net, configs, ranges, cal_x, cal_y)
    qnet = quantize.quantize_network(net, configs, ranges, deltas)
    acc = quantize.quantized_accuracy(qnet, data["test_images"], data["test_labels"])
    fileio.save_quantized_network(qnet, args.out)
    print(f"quantized accuracy {acc:.4f} -> {args.out}")
    return 0


def cmd_run(args) -> int:
    manifest = _manifest_from_args(args)
    net, data = _load_inputs(manifest)
    model = _cycle_model(manifest)
    cal_x, cal_y = _calibration_sample(data)
    ranges = quantize.calibrate(net, cal_x)
    configs = _configs_from_manifest(net, manifest)

    base_qnet = quantize.quantize_network(
        net, [LayerQuantConfig(isa.config_for("w8a8"))] * len(configs), ranges
    )
    if manifest.weights:  # pre-quantized model wins over on-the-fly PTQ
        qnet = fileio.load_quantized_network(manifest.weights)
        configs = list(qnet.configs)
    else:
        qnet = quantize.quantize_network(net, configs, ranges)
    image = data["test_images"][:1]
    base_rep, _ = _simulate_network(
        base_qnet, quantize.quantize_input(base_qnet, image)[0], packed=False, model=model
    )
    packed_rep, _ = _simulate_network(
        qnet, quantize.quantize_input(qnet, image)[0], packed=True, model=model
    )
    speedup = sim.compare_runs(base_rep, packed_rep)
    acc = quantize.quantized_accuracy(qnet, data["test_images"], data["test_labels"])

    rows = []
    mac_positions = {f"layer{i}": pos for pos, i in enumerate(net.mac_layer_indices)}
    for label, counters in packed_rep.per_layer.items():
        base_counters = base_rep.per_layer[label]
        pos = mac_positions.get(label.split(":")[0])
        qc = configs[pos] if pos is not None else None
        rows.append(
            [
                label,
                _config_label(qc) if qc else "-",
                f"{qc.prune:g}" if qc else "0",
                base_counters.cycles,
                counters.cycles,
                f"{base_counters.cycles / max(1, counters.cycles):.3f}",
                base_counters.loads,
                counters.loads,
            ]
        )
    rows.append(
        [
            "total", "-", "-", base_rep.total_cycles, packed_rep.total_cycles,
            f"{speedup.cycle_ratio:.3f}", base_rep.load_count, packed_rep.load_count,
        ]
    )
    rows.append(["mac_count", "-", "-", base_rep.mac_count, packed_rep.mac_count, "", "", ""])
    rows.append(["accuracy", "-", "-", "", "", f"{acc:.6f}", "", ""])
    report_path = _out_path(args.out, "report.csv")
    fileio.write_csv(
        report_path,
        ["layer", "config", "prune", "baseline_cycles", "packed_cycles",
         "speedup", "baseline_loads", "packed_loads"],
        rows,
    )
    print(f"speedup {speedup.cycle_ratio:.2f}x, load ratio {speedup.load_ratio:.2f}x, "
          f"accuracy {acc:.4f} -> {report_path}")
    return 0


def cmd_dse(args) -> int:
    if args.config:
        _read_dse_config(args.config, args)
    for key, value in _DSE_DEFAULTS.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    manifest = _manifest_from_args(args)
    net, data = _load_inputs(manifest)
    model = _cycle_model(manifest)
    cal_x, cal_y = _calibration_sample(data)
    ranges = quantize.calibrate(net, cal_x)
    params = dse_mod.DseParams(
        accuracy_loss_limit=args.threshold,
        prune_step=args.granularity,
        prune_max=args.pmax,
        max_evals=args.iters,
    )
    base_acc = quantize.float_accuracy(net, data["test_images"], data["test_labels"])
    table = dse_mod.layer_latency_table(net, params.prune_rates, model)
    evaluator = dse_mod.network_evaluator(
        net, ranges, data["test_images"], data["test_labels"]
    )
    result = dse_mod.greedy_dse(net, params, evaluator, table, base_acc)

    def point_rows(evals):
        rows = []
        for rec in evals:
            rows.append(
                ["|".join(_config_label(qc) for qc in rec["configs"]),
                 f"{rec['accuracy']:.6f}", rec["cycles"], rec.get("loads", 0),
                 "|".join(f"{qc.prune:g}" for qc in rec["configs"]),
                 int(rec["acceptable"])]
            )
        return rows

    fileio.write_csv(
        _out_path(args.out, "all_points.csv"),
        ["configs", "accuracy", "cycles", "loads", "prune_rates", "acceptable"],
        point_rows(result.evaluations),
    )
    fileio.write_csv(
        _out_path(args.out, "pareto.csv"),
        ["configs", "accuracy", "cycles"],
        [["|".join(_config_label(qc) for qc in p.configs), f"{p.accuracy:.6f}",
          p.total_cycles] for p in result.front],
    )
    summary = [
        f"baseline_accuracy {base_acc:.6f}",
        f"evaluations {result.eval_count}",
        f"acceptable_points {len(result.points)}",
        f"infeasible {int(result.infeasible)}",
    ]
    if result.front:
        best = min(result.front, key=lambda p: p.total_cycles)
        summary.append(
            "best_point " + "|".join(_config_label(qc) for qc in best.configs)
            + f" accuracy {best.accuracy:.6f} cycles {best.total_cycles}"
        )
    if args.exhaustive:
        ex_eval = dse_mod.network_evaluator(
            net, ranges, data["test_images"], data["test_labels"]
        )
        exhaustive = dse_mod.exhaustive_dse(net, params, ex_eval, table, base_acc)
        ref = (0.0, max(p.total_cycles for p in exhaustive.front) * 2)
        hv_g = dse_mod.hypervolume(result.front, ref)
        hv_e = dse_mod.hypervolume(exhaustive.front, ref)
        summary.append(f"exhaustive_evaluations {exhaustive.eval_count}")
        summary.append(f"hypervolume_ratio {hv_g / hv_e:.6f}")
        fileio.write_csv(
            _out_path(args.out, "exhaustive_pareto.csv"),
            ["configs", "accuracy", "cycles"],
            [["|".join(_config_label(qc) for qc in p.configs), f"{p.accuracy:.6f}",
              p.total_cycles] for p in exhaustive.front],
        )
    fileio.atomic_write(_out_path(args.out, "summary.txt"), "\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_power(args) -> int:
    header, rows = fileio.read_csv(args.report)
    total = {r[0]: r for r in rows}.get("total")
    macs = {r[0]: r for r in rows}.get("mac_count")
    if total is None or macs is None:
        raise ToolError(f"{args.report} carries no total/mac_count rows")
    cycles = int(total[4])
    mac_count = int(macs[4])
    report = sim.ExecutionReport(cycles, cycles, 0, 0, 0, mac_count, 0, 0, cycles, 0, 0)
    params = (
        power.PowerParams.from_file(args.params)
        if args.params
        else power.default_power_params()
    )
    table = power.default_slack_table()
    rows_out = power.voltage_sweep(report, params, table)
    v_min = power.min_valid_voltage(table)
    fileio.write_csv(
        _out_path(args.out, "sweep.csv"),
        ["voltage", "p_static_mw", "p_dynamic_mw", "p_total_mw", "gops",
         "gops_per_watt", "valid"],
        [[f"{r['voltage']:.2f}", f"{r['p_static_mw']:.6f}", f"{r['p_dynamic_mw']:.6f}",
          f"{r['p_total_mw']:.6f}", f"{r['gops']:.6f}", f"{r['gops_per_watt']:.3f}",
          int(r["valid"])] for r in rows_out],
    )
    fileio.atomic_write(
        _out_path(args.out, "power_summary.txt"),
        f"min_valid_voltage {v_min:.2f}\n",
    )
    print(f"min valid voltage {v_min:.2f} V -> {args.out}/sweep.csv")
    return 0


def cmd_disasm(args) -> int:
    blob = open(args.program, "rb").read()
    if len(blob) % 4:
        raise ToolError(f"{args.program}: not a whole number of words")
    for i in range(0, len(blob), 4):
        word = int.from_bytes(blob[i : i + 4], "little")
        print(f"{i:08x}: {word:08x}  {isa.disassemble(word)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mprv",
        description="mixed-precision packed-MAC RISC-V toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fixtures", help="train benchmark models deterministically")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", default="fixtures")
    p.set_defaults(fn=cmd_fixtures)

    def input_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--model")
        p.add_argument("--dataset")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("quantize", help="post-training quantization")
    input_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--calibrate-shifts", action="store_true")
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("run", help="simulate baseline and packed streams")
    input_flags(p)
    p.add_argument("--out", default="run_out")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("dse", help="mixed-precision design space exploration")
    input_flags(p)
    p.add_argument("--config", default=None,
                   help="key=value file with threshold/granularity/pmax/iters/seed")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--granularity", type=float, default=None)
    p.add_argument("--pmax", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--exhaustive", action="store_true")
    p.add_argument("--out", default="dse_out")
    p.set_defaults(fn=cmd_dse)

    p = sub.add_parser("power", help="voltage sweep over a run report")
    p.add_argument("--report", required=True)
    p.add_argument("--params", default=None)
    p.add_argument("--out", default="power_out")
    p.set_defaults(fn=cmd_power)

    p = sub.add_parser("disasm", help="disassemble a program binary")
    p.add_argument("program")
    p.set_defaults(fn=cmd_disasm)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ToolError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
