"""Evaluation metrics: imbalance ratio, normalized attention MFU, sweeps."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import Sequence

from .baselines import bytescale_schedule, ring_schedule, wlb_oracle
from .costmodel import EfficiencyCurve, HardwareConfig, ModelConfig
from .distributor import AssignParams, worker_loads
from .errors import InfeasibleError, ParameterError
from .pipeline import DEFAULT_COALESCE_DEGREE, ScheduleResult, fcp_schedule
from .sharding import ShardingConfig
from .simulator import SimOptions, SimReport, simulate
from .workload import Batch, DistributionSpec, generate_batch

SCHEDULERS = ("fcp", "ring", "bytescale", "wlb_oracle")

SWEEP_COLUMNS = ("n_workers", "block_size", "scheduler", "seed", "comp_imbalance",
                 "comm_imbalance", "mfu", "total_time_s", "status")


def imbalance_ratio(loads: Sequence[float]) -> float:
    """(max - mean) / max over per-worker loads; 0 when all loads are zero."""
    if len(loads) == 0:
        raise ParameterError("imbalance_ratio needs at least one worker")
    peak = max(loads)
    if peak <= 0:
        return 0.0
    # mean <= max mathematically; clamp the float rounding residue.
    return max(0.0, (peak - sum(loads) / len(loads)) / peak)


def attention_mfu(report: SimReport, hw: HardwareConfig, n_workers: int,
                  curve: EfficiencyCurve) -> float:
    """Achieved FLOP rate over peak, normalized by the kernel's saturated MFU
    so a balanced, fully overlapped run at saturated block size scores 1."""
    if report.total_time <= 0:
        raise ParameterError("report has non-positive total_time")
    raw = report.total_flops / (n_workers * hw.peak_flops * report.total_time)
    return raw / curve.saturation


@dataclass(frozen=True)
class SweepConfig:
    worker_counts: tuple[int, ...]
    tokens_per_worker: int
    block_sizes: tuple[int, ...] = (4096,)
    schedulers: tuple[str, ...] = ("fcp",)
    trials: int = 1

    def __post_init__(self):
        if not self.worker_counts or not self.block_sizes or not self.schedulers:
            raise ParameterError("sweep lists must be non-empty")
        if self.trials < 1:
            raise ParameterError("trials must be >= 1")
        for name in self.schedulers:
            if name not in SCHEDULERS:
                raise ParameterError(f"unknown scheduler {name!r}; known: {SCHEDULERS}")


@dataclass
class SweepRow:
    n_workers: int
    block_size: int
    scheduler: str
    seed: int
    comp_imbalance: float
    comm_imbalance: float
    mfu: float
    total_time_s: float
    status: str = "ok"

    def as_record(self) -> list:
        return [self.n_workers, self.block_size, self.scheduler, self.seed,
                self.comp_imbalance, self.comm_imbalance, self.mfu,
                self.total_time_s, self.status]


def run_scheduler(name: str, batch: Batch, n_workers: int, sharding: ShardingConfig,
                  hw: HardwareConfig, cfg: ModelConfig, curve: EfficiencyCurve,
                  params: AssignParams | None = None,
                  coalesce_degree: int = DEFAULT_COALESCE_DEGREE,
                  opts: SimOptions | None = None) -> ScheduleResult:
    if name == "fcp":
        return fcp_schedule(batch, n_workers, sharding, cfg, curve, params, coalesce_degree)
    if name == "ring":
        return ring_schedule(batch, n_workers, cfg, sharding.mask)
    if name == "bytescale":
        return bytescale_schedule(batch, n_workers, batch.tokens_per_worker, cfg, sharding.mask)
    if name == "wlb_oracle":
        result, _ = wlb_oracle(batch, n_workers, batch.tokens_per_worker, hw, cfg,
                               curve, opts, sharding.mask)
        return result
    raise ParameterError(f"unknown scheduler {name!r}; known: {SCHEDULERS}")


def evaluate_schedule(result: ScheduleResult, hw: HardwareConfig, cfg: ModelConfig,
                      curve: EfficiencyCurve, n_workers: int,
                      opts: SimOptions | None = None) -> tuple[float, float, float, SimReport]:
    """(compute imbalance, comm imbalance, normalized MFU) plus the report."""
    loads = worker_loads(result.assignment, result.units, result.deps, cfg)
    comp = imbalance_ratio(loads.compute_flops)
    comm = imbalance_ratio(loads.comm_bytes)
    report = simulate(result.assignment, result.plan, result.units, result.deps,
                      hw, cfg, curve, opts)
    mfu = attention_mfu(report, hw, n_workers, curve)
    return comp, comm, mfu, report


def sweep_point(spec: DistributionSpec, sweep: SweepConfig, n_workers: int,
                block_size: int, scheduler: str, seed: int, hw: HardwareConfig,
                cfg: ModelConfig, curve: EfficiencyCurve, mask: str = "causal",
                opts: SimOptions | None = None) -> SweepRow:
    """One weak-scaling point: fresh budget-filling batch, schedule, simulate."""
    batch = generate_batch(spec, seed, n_workers, sweep.tokens_per_worker)
    sharding = ShardingConfig(block_size=block_size, mask=mask)
    try:
        result = run_scheduler(scheduler, batch, n_workers, sharding, hw, cfg, curve,
                               opts=opts)
        comp, comm, mfu, report = evaluate_schedule(result, hw, cfg, curve, n_workers, opts)
    except InfeasibleError:
        return SweepRow(n_workers, block_size, scheduler, seed,
                        float("nan"), float("nan"), float("nan"), float("nan"),
                        status="infeasible")
    return SweepRow(n_workers, block_size, scheduler, seed, comp, comm, mfu,
                    report.total_time)


def weak_scaling_sweep(spec: DistributionSpec, sweep: SweepConfig, hw: HardwareConfig,
                       cfg: ModelConfig, curve: EfficiencyCurve, base_seed: int = 0,
                       mask: str = "causal", opts: SimOptions | None = None,
                       ) -> list[SweepRow]:
    """Grid over (N, block size, scheduler, trial); tokens per worker fixed.

    Every trial at the same (N, trial index) reuses one batch seed so
    schedulers are compared on identical workloads.
    """
    rows = []
    for n_workers in sweep.worker_counts:
        for block_size in sweep.block_sizes:
            for trial in range(sweep.trials):
                seed = base_seed + trial
                for scheduler in sweep.schedulers:
                    rows.append(sweep_point(spec, sweep, n_workers, block_size,
                                            scheduler, seed, hw, cfg, curve, mask, opts))
    return rows


def rows_to_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(row.as_record())
    return buf.getvalue()


def write_sweep_csv(rows: Sequence[SweepRow], path: str | os.PathLike) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(rows_to_csv(rows))
    os.replace(tmp, path)
