"""End-to-end schedule construction: shard, assign, plan, coalesce."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .costmodel import EfficiencyCurve, ModelConfig
from .distributor import AssignParams, Assignment, assign, effective_unit_loads
from .errors import InfeasibleError
from .planner import (CoalescedPlan, CommPlan, build_comm_graph, coalesce,
                      decompose_matchings, stage_ordering)
from .sharding import DependencyMap, ScheduleUnit, ShardingConfig, kv_dependencies, shard_batch
from .workload import Batch

DEFAULT_COALESCE_DEGREE = 16


@dataclass
class ScheduleResult:
    """Everything a simulation or metrics pass needs about one schedule."""

    label: str
    units: list[ScheduleUnit]
    deps: DependencyMap
    assignment: Assignment
    sub_stage_plan: CommPlan
    plan: CoalescedPlan
    params: AssignParams | None = None


def fcp_schedule(batch: Batch, n_workers: int, sharding: ShardingConfig,
                 cfg: ModelConfig, curve: EfficiencyCurve,
                 params: AssignParams | None = None,
                 coalesce_degree: int = DEFAULT_COALESCE_DEGREE,
                 delta_retries: int = 3) -> ScheduleResult:
    """Block-level schedule: zigzag sharding, greedy balanced assignment,
    Delta-optimal congestion-free rounds, density-ordered and coalesced.

    On an assignment infeasibility the memory tolerance doubles, up to
    ``delta_retries`` times; a batch near 100% of the token budget sometimes
    needs the extra slack. The params that succeeded are reported back.
    """
    if params is None:
        params = AssignParams(mem_limit=float(batch.tokens_per_worker))
    units = shard_batch(batch, sharding)
    deps = kv_dependencies(units, sharding.mask)
    loads = effective_unit_loads(units, deps, cfg, curve)
    attempt = params
    for retry in range(delta_retries + 1):
        try:
            assignment = assign(loads, n_workers, attempt)
            break
        except InfeasibleError:
            if retry == delta_retries:
                raise
            attempt = replace(attempt, delta=max(attempt.delta * 2, 0.01))
    graph = build_comm_graph(assignment, deps, units, cfg)
    rounds = stage_ordering(decompose_matchings(graph))
    plan = coalesce(rounds, coalesce_degree)
    return ScheduleResult("fcp", units, deps, assignment, rounds, plan, attempt)
