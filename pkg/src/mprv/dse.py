"""Greedy mixed-precision + pruning design-space exploration.

The search runs one sweep per global pruning rate.  Each sweep starts every
layer at its medium-latency configuration; if that start satisfies the
accuracy constraint, a restricted exploration enumerates the remaining
combinations that are nowhere higher-precision than the start (cheapest
estimated first).  Otherwise the layer with the lowest compute intensity
(fewest cycles under the current choice) is bumped to the next
higher-latency configuration until the constraint holds or every layer is
maxed out.  One iteration = one accuracy evaluation; the budget is global.

Per-layer cycle estimates come from single-layer simulator runs (pooling
stages are attributed to the downstream compute layer whose activation
width they carry), so full-model simulation is never needed inside the
search loop.  The classifier layer is exempt from pruning sweeps: zeroing
its output channels would remove classes outright.

An exhaustive enumerator over the full per-layer (config x pruning) grid
serves as the ground-truth oracle for small networks, with Pareto fronts
compared by 2-D hypervolume.
"""

from __future__ import annotations

import itertools
from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from . import programs, quantize, sim
from .errors import BudgetExceeded, InvalidReference, ShapeError
from .isa import ALL_CONFIGS, PrecisionConfig
from .kernels import MAC_KINDS
from .programs import LayerExec, build_layer_program
from .quantize import FloatNetwork, LayerQuantConfig

LatencyEntry = namedtuple("LatencyEntry", ["cycles", "loads"])


@dataclass(frozen=True)
class DseParams:
    accuracy_loss_limit: float = 0.01  # accepted drop below the float baseline
    prune_step: float = 0.25
    prune_max: float = 0.5
    max_evals: int = 500
    exhaustive_guard: int = 100_000

    def __post_init__(self):
        if self.accuracy_loss_limit < 0:
            raise ShapeError("accuracy loss limit must be non-negative")
        if not 0 < self.prune_step <= 1 or not 0 <= self.prune_max <= 1:
            raise ShapeError("pruning grid outside [0, 1]")
        if self.prune_step > self.prune_max and self.prune_max > 0:
            raise ShapeError("pruning step exceeds the maximum rate")
        if self.max_evals < 1:
            raise ShapeError("iteration budget must be positive")

    @property
    def prune_rates(self) -> tuple:
        rates = [0.0]
        p = self.prune_step
        while p <= self.prune_max + 1e-9:
            rates.append(round(p, 6))
            p += self.prune_step
        return tuple(rates)


@dataclass(frozen=True)
class ParetoPoint:
    configs: tuple  # LayerQuantConfig per compute layer
    accuracy: float
    total_cycles: int


@dataclass
class DseResult:
    points: list  # accuracy-acceptable points
    front: list
    evaluations: list  # dicts: configs/accuracy/cycles/acceptable
    eval_count: int
    infeasible: bool
    baseline_accuracy: float


# ----------------------------------------------------------- latency tables

def _mac_layers(net: FloatNetwork):
    return [(i, net.layers[i]) for i in net.mac_layer_indices]


def _unit_members(net: FloatNetwork, mac_pos: int):
    """Layer indices whose cycles are attributed to this compute layer:
    the layer itself plus any non-compute layers directly before it."""
    idx = net.mac_layer_indices[mac_pos]
    members = [idx]
    j = idx - 1
    while j >= 0 and net.layers[j].spec.kind not in MAC_KINDS:
        members.insert(0, j)
        j -= 1
    return members


def layer_latency_table(
    net: FloatNetwork,
    prune_rates,
    model: sim.CycleModel | None = None,
) -> dict:
    """(mac layer position, PrecisionConfig, prune rate) -> LatencyEntry.

    Each estimate is a single-layer packed simulation; weight values do not
    influence cycle counts (streams are branchless in the data), only the
    surviving-channel set does.
    """
    mac = _mac_layers(net)
    table = {}
    pool_cache = {}
    for pos, (idx, fl) in enumerate(mac):
        spec = fl.spec
        last = pos == len(mac) - 1
        members = _unit_members(net, pos)
        for cfg in ALL_CONFIGS:
            pool_cycles = pool_loads = 0
            for j in members[:-1]:
                pspec = net.layers[j].spec
                key = (j, cfg.activation_bits)
                if key not in pool_cache:
                    pl = LayerExec(spec=pspec, in_bits=cfg.activation_bits,
                                   out_bits=cfg.activation_bits)
                    prog, _ = build_layer_program(pl, packed=True)
                    rep = sim.run(prog, model=model)
                    pool_cache[key] = (rep.total_cycles, rep.load_count)
                pool_cycles += pool_cache[key][0]
                pool_loads += pool_cache[key][1]
            for p in prune_rates:
                rate = 0.0 if last else p
                _, keep = quantize.prune_structured(fl.weights, rate)
                survivors = tuple(int(c) for c in np.nonzero(keep)[0])
                layer = LayerExec(
                    spec=spec, cfg=cfg,
                    weights=np.zeros_like(fl.weights, dtype=np.int64),
                    bias=None, survivors=survivors, shift=4,
                    in_bits=cfg.activation_bits, out_bits=8,
                )
                prog, _ = build_layer_program(layer, packed=True, logits=last)
                rep = sim.run(prog, model=model)
                table[(pos, cfg, round(p, 6))] = LatencyEntry(
                    rep.total_cycles + pool_cycles, rep.load_count + pool_loads
                )
    return table


def _entry(table, i, qc):
    value = table[(i, qc.cfg, round(qc.prune, 6))]
    if isinstance(value, LatencyEntry):
        return value
    return LatencyEntry(value, 0)  # plain-cycle tables (synthetic oracles)


def config_cycles(table: dict, configs) -> int:
    return sum(_entry(table, i, qc).cycles for i, qc in enumerate(configs))


def config_loads(table: dict, configs) -> int:
    return sum(_entry(table, i, qc).loads for i, qc in enumerate(configs))


# ------------------------------------------------------------------ evaluator

def network_evaluator(net: FloatNetwork, calib, images, labels):
    """Accuracy evaluator over quantized variants, memoized per configuration."""
    cache = {}
    counter = {"evals": 0}

    def evaluate(configs) -> float:
        key = tuple((qc.cfg, round(qc.prune, 6)) for qc in configs)
        if key not in cache:
            qnet = quantize.quantize_network(net, list(configs), calib)
            cache[key] = quantize.quantized_accuracy(qnet, images, labels)
            counter["evals"] += 1
        return cache[key]

    evaluate.counter = counter
    return evaluate


# -------------------------------------------------------------------- greedy

def _cycles(table, layer_pos, cfg, p) -> int:
    value = table[(layer_pos, cfg, p)]
    return value.cycles if isinstance(value, LatencyEntry) else value


def _median_config(table, layer_pos, p) -> PrecisionConfig:
    # medium-latency start; ties broken toward lower weight bits
    ranked = sorted(
        ALL_CONFIGS,
        key=lambda c: (_cycles(table, layer_pos, c, p), c.weight_bits,
                       c.activation_bits),
    )
    return ranked[len(ranked) // 2]


def _next_higher(table, layer_pos, p, current: PrecisionConfig):
    """Cheapest configuration strictly slower than the current one; weight
    width increases win ties."""
    cur = _cycles(table, layer_pos, current, p)
    cand = [c for c in ALL_CONFIGS if _cycles(table, layer_pos, c, p) > cur]
    if not cand:
        return None
    return min(
        cand,
        key=lambda c: (
            _cycles(table, layer_pos, c, p),
            -(c.weight_bits > current.weight_bits),
            -c.weight_bits,
            -c.activation_bits,
        ),
    )


def _restricted_space(start_cfgs):
    """Per-layer candidate sets for the post-acceptance exploration: never
    higher precision than the accepted starting point in any layer."""
    return [
        [c for c in ALL_CONFIGS
         if c.weight_bits <= s.weight_bits and c.activation_bits <= s.activation_bits]
        for s in start_cfgs
    ]


def greedy_dse(
    net: FloatNetwork,
    params: DseParams,
    evaluator,
    table: dict,
    baseline_accuracy: float,
) -> DseResult:
    n_layers = len(net.mac_layer_indices)
    floor = baseline_accuracy - params.accuracy_loss_limit
    sweeps = params.prune_rates
    quota = max(1, params.max_evals // len(sweeps))
    evaluations = []
    acceptable = []
    infeasible = False
    seen = set()

    def spent():
        return evaluator.counter["evals"]

    def record(configs, acc):
        cycles = config_cycles(table, configs)
        ok = acc >= floor
        key = tuple((qc.cfg, round(qc.prune, 6)) for qc in configs)
        if key not in seen:
            seen.add(key)
            evaluations.append(
                {"configs": tuple(configs), "accuracy": acc, "cycles": cycles,
                 "loads": config_loads(table, configs), "acceptable": ok}
            )
            if ok:
                acceptable.append(ParetoPoint(tuple(configs), acc, cycles))
        return ok

    for sweep_i, p in enumerate(sweeps):
        sweep_budget = params.max_evals if sweep_i == len(sweeps) - 1 else (
            (sweep_i + 1) * quota
        )

        def budget_left():
            return spent() < min(sweep_budget, params.max_evals)

        if not budget_left():
            break
        prunes = [p] * (n_layers - 1) + [0.0]  # classifier exempt
        current = [
            LayerQuantConfig(_median_config(table, li, round(pl, 6)), pl)
            for li, pl in enumerate(prunes)
        ]
        acc = evaluator(current)
        ok = record(current, acc)

        # repair: raise the cheapest layer until the constraint holds
        exhausted = set()
        while not ok and budget_left():
            order = sorted(
                (li for li in range(n_layers) if li not in exhausted),
                key=lambda li: _cycles(table, li, current[li].cfg,
                                       round(current[li].prune, 6)),
            )
            bumped = False
            for li in order:
                higher = _next_higher(
                    table, li, round(current[li].prune, 6), current[li].cfg
                )
                if higher is None:
                    exhausted.add(li)
                    continue
                current = list(current)
                current[li] = LayerQuantConfig(higher, current[li].prune)
                bumped = True
                break
            if not bumped:
                break  # every layer maxed out within this sweep
            acc = evaluator(current)
            ok = record(current, acc)

        if not ok:
            if not budget_left():
                break
            continue

        # restricted exploration below the accepted start, cheapest first
        space = _restricted_space([qc.cfg for qc in current])
        combos = sorted(
            itertools.product(*space),
            key=lambda cs: (
                sum(_cycles(table, li, c, round(prunes[li], 6))
                    for li, c in enumerate(cs)),
                tuple((c.weight_bits, c.activation_bits) for c in cs),
            ),
        )
        start_key = tuple(qc.cfg for qc in current)
        for combo in combos:
            if combo == start_key:
                continue
            if not budget_left():
                break
            cfgs = [LayerQuantConfig(c, prunes[li]) for li, c in enumerate(combo)]
            record(cfgs, evaluator(cfgs))

    if not acceptable:
        # constraint unreachable: return the full-precision point, flagged
        infeasible = True
        full = [LayerQuantConfig(PrecisionConfig(8, 8), 0.0)] * n_layers
        acceptable.append(
            ParetoPoint(tuple(full), evaluator(full), config_cycles(table, full))
        )
    return DseResult(
        points=acceptable,
        front=pareto_front(acceptable),
        evaluations=evaluations,
        eval_count=spent(),
        infeasible=infeasible,
        baseline_accuracy=baseline_accuracy,
    )


# ---------------------------------------------------------------- exhaustive

def exhaustive_dse(
    net: FloatNetwork,
    params: DseParams,
    evaluator,
    table: dict,
    baseline_accuracy: float,
) -> DseResult:
    """Ground-truth enumeration of every per-layer (config, pruning) vector."""
    n_layers = len(net.mac_layer_indices)
    if n_layers > 4:
        raise BudgetExceeded("exhaustive search is limited to four layers")
    per_layer = [
        [(c, p) for c in ALL_CONFIGS for p in params.prune_rates]
    ] * n_layers
    total = len(per_layer[0]) ** n_layers
    if total > params.exhaustive_guard:
        raise BudgetExceeded(f"{total} evaluations exceed the exhaustive guard")
    floor = baseline_accuracy - params.accuracy_loss_limit
    evaluations = []
    acceptable = []
    for combo in itertools.product(*per_layer):
        cfgs = [LayerQuantConfig(c, p) for c, p in combo]
        acc = evaluator(cfgs)
        cycles = config_cycles(table, cfgs)
        ok = acc >= floor
        evaluations.append(
            {"configs": tuple(cfgs), "accuracy": acc, "cycles": cycles,
             "loads": config_loads(table, cfgs), "acceptable": ok}
        )
        if ok:
            acceptable.append(ParetoPoint(tuple(cfgs), acc, cycles))
    return DseResult(
        points=acceptable,
        front=pareto_front(acceptable),
        evaluations=evaluations,
        eval_count=len(evaluations),
        infeasible=not acceptable,
        baseline_accuracy=baseline_accuracy,
    )


# ------------------------------------------------------------ pareto algebra

def dominates(p: ParetoPoint, q: ParetoPoint) -> bool:
    return (
        p.accuracy >= q.accuracy
        and p.total_cycles <= q.total_cycles
        and (p.accuracy > q.accuracy or p.total_cycles < q.total_cycles)
    )


def pareto_front(points) -> list:
    """Maximal non-dominated subset under (accuracy up, cycles down),
    ordered by cycles; exact duplicates of surviving points are kept."""
    pts = sorted(points, key=lambda p: (p.total_cycles, -p.accuracy))
    front = []
    best = None
    for p in pts:
        if front and (p.total_cycles, p.accuracy) == (
            front[-1].total_cycles, front[-1].accuracy
        ):
            front.append(p)
        elif best is None or p.accuracy > best:
            front.append(p)
            best = p.accuracy
    return front


def hypervolume(front, reference) -> float:
    """2-D staircase area dominated by the front relative to (accuracy,
    cycles) reference; the reference must be dominated by every point."""
    ref_acc, ref_cyc = reference
    if not front:
        return 0.0
    for p in front:
        if not (p.accuracy >= ref_acc and p.total_cycles <= ref_cyc) or (
            p.accuracy == ref_acc and p.total_cycles == ref_cyc
        ):
            raise InvalidReference(
                f"point ({p.accuracy}, {p.total_cycles}) does not dominate the reference"
            )
    pts = sorted(front, key=lambda p: p.total_cycles)
    area = 0.0
    best = None
    for i, p in enumerate(pts):
        right = pts[i + 1].total_cycles if i + 1 < len(pts) else ref_cyc
        best = p.accuracy if best is None else max(best, p.accuracy)
        area += (best - ref_acc) * (right - p.total_cycles)
    return area
