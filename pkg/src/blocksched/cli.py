"""Command-line front end: config parsing, experiment orchestration and
artifact serialization.

Commands: gen-trace, schedule, plan, simulate, sweep, compare. All outputs
are deterministic for a fixed config and seed; files are written to a
temporary name and renamed so failures never leave partial artifacts.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence as Seq

import yaml

from .costmodel import (DEFAULT_EFFICIENCY, EfficiencyCurve, HardwareConfig, ModelConfig,
                        unit_costs)
from .distributor import AssignParams, Assignment
from .errors import ParameterError, SchedulerError
from .metrics import (SweepConfig, SweepRow, evaluate_schedule, rows_to_csv,
                      run_scheduler, sweep_point)
from .pipeline import DEFAULT_COALESCE_DEGREE, ScheduleResult
from .planner import CommPlan, Edge
from .sharding import Chunk, ScheduleUnit, ShardingConfig
from .simulator import SimOptions, SimReport, simulate
from .workload import (Batch, DistributionSpec, Sequence, build_batches, generate_trace,
                       load_trace, save_trace)

log = logging.getLogger("blocksched")

SCHEDULE_FORMAT = "blocksched.schedule/1"
PLAN_FORMAT = "blocksched.plan/1"
REPORT_FORMAT = "blocksched.report/1"

# Offsets expanding the top-level seed into per-component streams.
TRACE_SEED_OFFSET = 0
SIM_SEED_OFFSET = 1000003


# ---------------------------------------------------------------------------
# Experiment configuration

_SCHEMA: dict[str, Any] = {
    "seed": None,
    "scheduler": None,
    "batch_index": None,
    "output_dir": None,
    "efficiency_anchors": None,
    "workload": {"kind", "sigma", "mean_length", "sigma_b", "mean_b", "weight_a",
                 "components", "min_length", "max_length", "count", "path"},
    "cluster": {"n_workers", "tokens_per_worker", "peak_flops", "mem_bandwidth",
                "nic_bandwidth"},
    "model": {"q_heads", "kv_heads", "head_dim", "dtype_bytes", "backward_multiplier"},
    "sharding": {"block_size", "mask"},
    "assign": {"alpha", "beta", "mem_limit", "delta"},
    "planner": {"coalesce_degree"},
    "sim": {"pipeline_depth", "model_reshuffle", "congestion_mode", "backward"},
    "sweep": {"worker_counts", "block_sizes", "schedulers", "trials"},
}


def _reject_unknown_keys(raw: Mapping[str, Any]) -> None:
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ParameterError(f"unknown config key {key!r}")
        allowed = _SCHEMA[key]
        if allowed is not None:
            if not isinstance(value, Mapping):
                raise ParameterError(f"config section {key!r} must be a mapping")
            unknown = set(value) - allowed
            if unknown:
                raise ParameterError(
                    f"unknown key(s) {sorted(unknown)} in config section {key!r}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    scheduler: str = "fcp"
    batch_index: int = 0
    output_dir: str = "out"
    workload_spec: DistributionSpec | None = None
    trace_path: str | None = None
    trace_count: int = 1000
    n_workers: int = 16
    tokens_per_worker: int = 32768
    hw: HardwareConfig = field(default_factory=HardwareConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    sharding: ShardingConfig = field(default_factory=ShardingConfig)
    curve: EfficiencyCurve = DEFAULT_EFFICIENCY
    assign_params: AssignParams | None = None
    coalesce_degree: int = DEFAULT_COALESCE_DEGREE
    sim: SimOptions = field(default_factory=SimOptions)
    sweep: SweepConfig | None = None


def _workload_from(section: Mapping[str, Any]) -> tuple[DistributionSpec | None, str | None, int]:
    kind = section.get("kind", "lognormal")
    bounds = {"min_length": int(section.get("min_length", 1)),
              "max_length": int(section.get("max_length", 1 << 19))}
    count = int(section.get("count", 1000))
    if kind == "file":
        path = section.get("path")
        if not path:
            raise ParameterError("workload.kind 'file' requires workload.path")
        return None, str(path), count
    if kind == "lognormal":
        spec = DistributionSpec.lognormal(float(section.get("sigma", 0.7)),
                                          float(section.get("mean_length", 16384)),
                                          **bounds)
    elif kind == "bimodal":
        spec = DistributionSpec.bimodal(float(section.get("sigma", 0.5)),
                                        float(section.get("mean_length", 16384)),
                                        float(section.get("sigma_b", 0.5)),
                                        float(section.get("mean_b", 65536)),
                                        float(section.get("weight_a", 0.5)),
                                        **bounds)
    elif kind == "mixture":
        comps = section.get("components") or []
        spec = DistributionSpec.mixture(
            [(float(c["sigma"]), float(c["mean_length"])) for c in comps],
            [float(c["weight"]) for c in comps], **bounds)
    else:
        raise ParameterError(f"unknown workload.kind {kind!r}")
    return spec, None, count


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ParameterError("config file must hold a mapping")
    _reject_unknown_keys(raw)
    cfg = ExperimentConfig()
    cfg.seed = int(raw.get("seed", 0))
    cfg.scheduler = str(raw.get("scheduler", "fcp"))
    cfg.batch_index = int(raw.get("batch_index", 0))
    cfg.output_dir = str(raw.get("output_dir", "out"))
    if "workload" in raw:
        cfg.workload_spec, cfg.trace_path, cfg.trace_count = _workload_from(raw["workload"])
    else:
        cfg.workload_spec = DistributionSpec.lognormal(0.7, 16384)
    cluster = raw.get("cluster", {})
    cfg.n_workers = int(cluster.get("n_workers", 16))
    cfg.tokens_per_worker = int(cluster.get("tokens_per_worker", 32768))
    cfg.hw = HardwareConfig(
        peak_flops=float(cluster.get("peak_flops", 989e12)),
        mem_bandwidth=float(cluster.get("mem_bandwidth", 4.8e12)),
        nic_bandwidth=float(cluster.get("nic_bandwidth", 50e9)))
    model = raw.get("model", {})
    cfg.model = ModelConfig(
        q_heads=int(model.get("q_heads", 64)),
        kv_heads=int(model.get("kv_heads", 8)),
        head_dim=int(model.get("head_dim", 128)),
        dtype_bytes=int(model.get("dtype_bytes", 2)),
        backward_multiplier=float(model.get("backward_multiplier", 2.5)))
    sharding = raw.get("sharding", {})
    cfg.sharding = ShardingConfig(block_size=int(sharding.get("block_size", 4096)),
                                  mask=str(sharding.get("mask", "causal")))
    if raw.get("efficiency_anchors"):
        cfg.curve = EfficiencyCurve(tuple((float(t), float(f))
                                          for t, f in raw["efficiency_anchors"]))
    assign = raw.get("assign", {})
    mem_limit = assign.get("mem_limit")
    cfg.assign_params = AssignParams(
        alpha=float(assign.get("alpha", 1.0)),
        beta=float(assign.get("beta", 1.0)),
        mem_limit=float(cfg.tokens_per_worker) if mem_limit is None else float(mem_limit),
        delta=float(assign.get("delta", 0.05)))
    cfg.coalesce_degree = int(raw.get("planner", {}).get("coalesce_degree",
                                                         DEFAULT_COALESCE_DEGREE))
    sim = raw.get("sim", {})
    cfg.sim = SimOptions(
        pipeline_depth=int(sim.get("pipeline_depth", 3)),
        model_reshuffle=bool(sim.get("model_reshuffle", False)),
        congestion_mode=str(sim.get("congestion_mode", "planned")),
        backward=bool(sim.get("backward", False)),
        random_seed=cfg.seed + SIM_SEED_OFFSET)
    if "sweep" in raw:
        sw = raw["sweep"]
        cfg.sweep = SweepConfig(
            worker_counts=tuple(int(n) for n in sw.get("worker_counts", (16,))),
            tokens_per_worker=cfg.tokens_per_worker,
            block_sizes=tuple(int(b) for b in sw.get("block_sizes",
                                                     (cfg.sharding.block_size,))),
            schedulers=tuple(str(s) for s in sw.get("schedulers", (cfg.scheduler,))),
            trials=int(sw.get("trials", 1)))
    return cfg


# ---------------------------------------------------------------------------
# Artifact serialization

def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _dump_json(path: Path, payload: dict) -> None:
    _write_atomic(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")


def schedule_payload(result: ScheduleResult, cfg_model: ModelConfig) -> dict:
    units = [{"unit_id": u.unit_id, "kind": u.kind,
              "members": [[c.seq_id, c.chunk_index, c.token_count] for c in u.members]}
             for u in result.units]
    rows = []
    for u in result.units:
        cv = unit_costs(u, result.deps, cfg_model)
        rows.append([u.unit_id, result.assignment.worker_of(u.unit_id),
                     cv.memory, cv.compute])
    return {"format": SCHEDULE_FORMAT, "scheduler": result.label,
            "n_workers": result.assignment.n_workers, "mask": result.deps.mask,
            "units": units, "assignment": rows}


def load_schedule(path: str | os.PathLike) -> tuple[list[ScheduleUnit], Assignment, str]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != SCHEDULE_FORMAT:
        raise ParameterError(f"{path}: not a schedule file")
    units = [ScheduleUnit(u["unit_id"], u["kind"],
                          tuple(Chunk(*m) for m in u["members"]))
             for u in payload["units"]]
    n = payload["n_workers"]
    mapping = {}
    memory = [0.0] * n
    for unit_id, worker, mem, _comp in payload["assignment"]:
        mapping[unit_id] = worker
        memory[worker] += mem
    assignment = Assignment(n, mapping, memory, [0.0] * n)
    return units, assignment, payload["mask"]


def plan_payload(plan: CommPlan, degree: int) -> dict:
    stages = [[[e.src, e.dst, e.nbytes, [list(c) for c in e.chunks]] for e in stage]
              for stage in plan.sub_stages]
    return {"format": PLAN_FORMAT, "n_workers": plan.n, "coalesce_degree": degree,
            "sub_stages": stages}


def load_plan(path: str | os.PathLike) -> tuple[CommPlan, int]:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != PLAN_FORMAT:
        raise ParameterError(f"{path}: not a plan file")
    stages = [[Edge(src, dst, tuple(tuple(c) for c in chunks), nbytes)
               for src, dst, nbytes, chunks in stage]
              for stage in payload["sub_stages"]]
    return CommPlan(payload["n_workers"], stages), payload["coalesce_degree"]


def report_payload(report: SimReport) -> dict:
    return {"format": REPORT_FORMAT,
            "total_time_s": report.total_time,
            "total_flops": report.total_flops,
            "total_bytes": report.total_bytes,
            "per_worker": [{"compute_time": w.compute_time, "send_time": w.send_time,
                            "recv_time": w.recv_time, "idle_time": w.idle_time,
                            "eta": w.eta} for w in report.per_worker],
            "stages": [{"duration": s.duration, "binding": s.binding}
                       for s in report.stages]}


def load_report(path: str | os.PathLike) -> SimReport:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != REPORT_FORMAT:
        raise ParameterError(f"{path}: not a report file")
    from .simulator import StageRecord, WorkerStats
    return SimReport(
        total_time=payload["total_time_s"],
        per_worker=[WorkerStats(**w) for w in payload["per_worker"]],
        stages=[StageRecord(**s) for s in payload["stages"]],
        total_flops=payload["total_flops"],
        total_bytes=payload["total_bytes"])


def timeline_csv(report: SimReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stage", "duration_s", "binding"])
    for idx, record in enumerate(report.stages):
        writer.writerow([idx, record.duration, record.binding])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Shared pipeline steps

def _trace_for(cfg: ExperimentConfig) -> list[Sequence]:
    if cfg.trace_path is not None:
        return load_trace(cfg.trace_path)
    return generate_trace(cfg.workload_spec, cfg.seed + TRACE_SEED_OFFSET,
                          cfg.trace_count)


def _batch_for(cfg: ExperimentConfig) -> Batch:
    batches = build_batches(_trace_for(cfg), cfg.n_workers, cfg.tokens_per_worker)
    if not 0 <= cfg.batch_index < len(batches):
        raise ParameterError(
            f"batch_index {cfg.batch_index} out of range; trace yields {len(batches)}")
    return batches[cfg.batch_index]


def _schedule_for(cfg: ExperimentConfig, scheduler: str | None = None) -> ScheduleResult:
    batch = _batch_for(cfg)
    name = scheduler or cfg.scheduler
    log.info("scheduling batch %d (%d sequences, %d tokens) with %s on %d workers",
             cfg.batch_index, len(batch.sequences), batch.total_tokens, name,
             cfg.n_workers)
    return run_scheduler(name, batch, cfg.n_workers, cfg.sharding,
                         cfg.hw, cfg.model, cfg.curve, params=cfg.assign_params,
                         coalesce_degree=cfg.coalesce_degree, opts=cfg.sim)


# ---------------------------------------------------------------------------
# Commands

def cmd_gen_trace(args: argparse.Namespace) -> int:
    if args.config:
        cfg = load_config(args.config)
        spec = cfg.workload_spec
        if spec is None:
            raise ParameterError("gen-trace needs a generative workload spec, "
                                 "not workload.kind: file")
        seed = cfg.seed if args.seed is None else args.seed
        count = cfg.trace_count if args.count is None else args.count
    else:
        bounds = {"min_length": args.min_length, "max_length": args.max_length}
        if args.spec == "lognormal":
            spec = DistributionSpec.lognormal(args.sigma, args.mean, **bounds)
        elif args.spec == "bimodal":
            spec = DistributionSpec.bimodal(args.sigma, args.mean, args.sigma_b,
                                            args.mean_b, args.weight_a, **bounds)
        else:
            raise ParameterError(f"unknown spec {args.spec!r}")
        seed = args.seed if args.seed is not None else 0
        count = args.count if args.count is not None else 1000
    trace = generate_trace(spec, seed, count)
    save_trace(trace, args.out)
    print(f"wrote {len(trace)} sequences to {args.out}")
    return 0


def cmd_schedule(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    result = _schedule_for(cfg, args.scheduler)
    out = Path(args.out or Path(cfg.output_dir) / "schedule.json")
    _dump_json(out, schedule_payload(result, cfg.model))
    from .distributor import worker_loads
    from .metrics import imbalance_ratio
    loads = worker_loads(result.assignment, result.units, result.deps, cfg.model)
    print(f"scheduler={result.label} units={len(result.units)} "
          f"comp_imbalance={imbalance_ratio(loads.compute_flops):.4f} "
          f"comm_imbalance={imbalance_ratio(loads.comm_bytes):.4f}")
    print(f"wrote {out}")
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    result = _schedule_for(cfg, args.scheduler)
    out = Path(args.out or Path(cfg.output_dir) / "plan.json")
    _dump_json(out, plan_payload(result.sub_stage_plan, result.plan.degree))
    real = sum(len(s) for s in result.sub_stage_plan.sub_stages)
    print(f"stages={result.sub_stage_plan.stage_count} edges={real} "
          f"coalesce_degree={result.plan.degree}")
    print(f"wrote {out}")
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    result = _schedule_for(cfg, args.scheduler)
    report = simulate(result.assignment, result.plan, result.units, result.deps,
                      cfg.hw, cfg.model, cfg.curve, cfg.sim)
    out = Path(args.out or Path(cfg.output_dir) / "report.json")
    _dump_json(out, report_payload(report))
    _write_atomic(out.with_suffix(".timeline.csv"), timeline_csv(report))
    from .metrics import attention_mfu
    mfu = attention_mfu(report, cfg.hw, cfg.n_workers, cfg.curve)
    print(f"total_time={report.total_time:.6f}s mfu={mfu:.4f} "
          f"stages={len(report.stages)}")
    print(f"wrote {out}")
    return 0


def _sweep_one(item: tuple) -> SweepRow:
    spec, sweep, n, block, scheduler, seed, hw, model, curve, mask, sim = item
    return sweep_point(spec, sweep, n, block, scheduler, seed, hw, model, curve,
                       mask, sim)


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if cfg.sweep is None:
        raise ParameterError("config has no sweep section")
    if cfg.trace_path is not None:
        raise ParameterError("sweep requires a generative workload, not a trace file")
    points = []
    for n in cfg.sweep.worker_counts:
        for block in cfg.sweep.block_sizes:
            for trial in range(cfg.sweep.trials):
                for scheduler in cfg.sweep.schedulers:
                    points.append((cfg.workload_spec, cfg.sweep, n, block, scheduler,
                                   cfg.seed + trial, cfg.hw, cfg.model, cfg.curve,
                                   cfg.sharding.mask, cfg.sim))
    if args.jobs and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_sweep_one, points))
    else:
        rows = [_sweep_one(p) for p in points]
    out = Path(args.out or Path(cfg.output_dir) / "sweep.csv")
    _write_atomic(out, rows_to_csv(rows))
    print(f"wrote {len(rows)} rows to {out}")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    schedulers = [s.strip() for s in args.schedulers.split(",") if s.strip()]
    if len(schedulers) < 2:
        raise ParameterError("compare needs at least two schedulers")
    batch = _batch_for(cfg)
    rows = []
    for name in schedulers:
        result = run_scheduler(name, batch, cfg.n_workers, cfg.sharding, cfg.hw,
                               cfg.model, cfg.curve, params=cfg.assign_params,
                               coalesce_degree=cfg.coalesce_degree, opts=cfg.sim)
        comp, comm, mfu, report = evaluate_schedule(result, cfg.hw, cfg.model,
                                                    cfg.curve, cfg.n_workers, cfg.sim)
        rows.append(SweepRow(cfg.n_workers, cfg.sharding.block_size, name, cfg.seed,
                             comp, comm, mfu, report.total_time))
    out = Path(args.out or Path(cfg.output_dir) / "compare.csv")
    _write_atomic(out, rows_to_csv(rows))
    header = f"{'scheduler':>12} {'comp_imb':>9} {'comm_imb':>9} {'mfu':>7} {'time_s':>11}"
    print(header)
    for row in rows:
        print(f"{row.scheduler:>12} {row.comp_imbalance:9.4f} {row.comm_imbalance:9.4f} "
              f"{row.mfu:7.4f} {row.total_time_s:11.6f}")
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blocksched",
        description="Block-level context-parallel scheduler and simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-trace", help="generate a synthetic sequence trace")
    p.add_argument("--config", default=None)
    p.add_argument("--spec", choices=("lognormal", "bimodal"), default="lognormal")
    p.add_argument("--sigma", type=float, default=0.7)
    p.add_argument("--mean", type=float, default=16384)
    p.add_argument("--sigma-b", type=float, default=0.5)
    p.add_argument("--mean-b", type=float, default=65536)
    p.add_argument("--weight-a", type=float, default=0.5)
    p.add_argument("--min", dest="min_length", type=int, default=1024)
    p.add_argument("--max", dest="max_length", type=int, default=1 << 19)
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_trace)

    for name, func, helptext in (
            ("schedule", cmd_schedule, "shard a batch and assign units to workers"),
            ("plan", cmd_plan, "derive the congestion-free communication plan"),
            ("simulate", cmd_simulate, "run the pipeline simulation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--scheduler", default=None,
                       help="override the config's scheduler")
        p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="weak-scaling sweep over the config grid")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="run several schedulers on one batch")
    p.add_argument("--config", required=True)
    p.add_argument("--schedulers", required=True,
                   help="comma-separated, e.g. fcp,ring,bytescale")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: Seq[str] | None = None) -> int:
    # BLOCKSCHED_LOG controls verbosity only (DEBUG/INFO/WARNING/ERROR).
    logging.basicConfig(level=os.environ.get("BLOCKSCHED_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SchedulerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
