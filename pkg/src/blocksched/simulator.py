"""Stage-synchronous simulation of the block-level pipeline.

Communication advances in global rounds taken from the plan; a stage lasts
as long as the slowest worker's NIC time for it. Remote tiles unlock when
the stage delivering their KV chunk completes and are computed in arrival
order; dependency-free local tiles yield to arrived work and fill the gaps
(the pipeline reorders local computation to the start and end of the run).
The pipeline depth bounds in-flight stages: a stage may not start until the
tiles of the stage ``depth`` rounds back have been consumed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .costmodel import (EfficiencyCurve, HardwareConfig, ModelConfig,
                        qkv_bytes_per_token, unit_efficiency, tile_token_pairs)
from .distributor import Assignment
from .errors import ConsistencyError, ParameterError
from .planner import BipartiteMultigraph, CoalescedPlan, Edge
from .sharding import CAUSAL, ChunkKey, DependencyMap, ScheduleUnit, unit_by_chunk

PLANNED = "planned"
RANDOM_ORDER = "random_order"


@dataclass(frozen=True)
class SimOptions:
    pipeline_depth: int = 3
    model_reshuffle: bool = False
    congestion_mode: str = PLANNED
    backward: bool = False
    random_seed: int = 0

    def __post_init__(self):
        if self.pipeline_depth < 1:
            raise ParameterError("pipeline_depth must be >= 1")
        if self.congestion_mode not in (PLANNED, RANDOM_ORDER):
            raise ParameterError(f"unknown congestion_mode {self.congestion_mode!r}")


@dataclass
class WorkerStats:
    compute_time: float
    send_time: float
    recv_time: float
    idle_time: float
    eta: float


@dataclass
class StageRecord:
    duration: float
    binding: str  # "comm", "compute" (pipeline gate stalled the NIC) or "drain"


@dataclass
class SimReport:
    total_time: float
    per_worker: list[WorkerStats]
    stages: list[StageRecord]
    total_flops: float
    total_bytes: int

    @property
    def max_compute_time(self) -> float:
        return max((w.compute_time for w in self.per_worker), default=0.0)


def _tile_seconds_by_release(assignment: Assignment, units: Sequence[ScheduleUnit],
                             deps: DependencyMap, hw: HardwareConfig, cfg: ModelConfig,
                             curve: EfficiencyCurve, opts: SimOptions,
                             arrival_stage: Mapping[tuple[ChunkKey, int], int],
                             n_stages: int) -> tuple[list[list[float]], float]:
    """Per-worker compute seconds bucketed by release stage.

    Bucket -1 (index 0) holds the local prologue; bucket s holds work whose
    KV arrives when stage s completes. Also returns total pair count.
    """
    owner_unit = unit_by_chunk(units)
    unit_index = {u.unit_id: u for u in units}
    chunk_worker = {key: assignment.worker_of(uid) for key, uid in owner_unit.items()}
    scale = cfg.backward_multiplier if opts.backward else 1.0
    causal = deps.mask == CAUSAL

    work = [[0.0] * (n_stages + 1) for _ in range(assignment.n_workers)]
    total_pairs = 0
    for q_key, kv_keys in deps.q_to_kv.items():
        w = chunk_worker[q_key]
        unit = unit_index[owner_unit[q_key]]
        eff = unit_efficiency(curve, unit)
        q_tokens = deps.chunk_tokens[q_key]
        for kv in kv_keys:
            pairs = tile_token_pairs(q_tokens, deps.chunk_tokens[kv],
                                     diagonal=causal and kv == q_key)
            total_pairs += pairs
            seconds = pairs * scale * cfg.flops_per_token_pair / (hw.peak_flops * eff)
            if chunk_worker[kv] == w:
                work[w][0] += seconds
            else:
                stage = arrival_stage.get((kv, w))
                if stage is None:
                    raise ConsistencyError(
                        f"plan never delivers chunk {kv} to worker {w}")
                work[w][stage + 1] += seconds
    return work, total_pairs * scale


def _arrival_stages(stages: Sequence[Sequence[Edge]], chunk_worker: Mapping[ChunkKey, int],
                    ) -> dict[tuple[ChunkKey, int], int]:
    """First stage after which each (chunk, worker) is available.

    Validates possession: an edge's sender must own the chunk or have received
    it in an earlier stage (ring-style relays are legal, teleports are not).
    """
    arrival: dict[tuple[ChunkKey, int], int] = {}
    for s, stage in enumerate(stages):
        for e in stage:
            for chunk in e.chunks:
                owner = chunk_worker[chunk]
                if e.src != owner:
                    got = arrival.get((chunk, e.src))
                    if got is None or got >= s:
                        raise ConsistencyError(
                            f"stage {s}: worker {e.src} sends chunk {chunk} it neither "
                            f"owns (owner {owner}) nor received earlier")
        for e in stage:
            for chunk in e.chunks:
                arrival.setdefault((chunk, e.dst), s)
    return arrival


def _stage_comm(stages: Sequence[Sequence[Edge]], n: int,
                bandwidth: float) -> tuple[list[float], np.ndarray, np.ndarray]:
    """Durations plus per-worker send/recv byte totals.

    The NIC is full duplex but serialises its own transfers, so a stage lasts
    as long as the busiest direction of the busiest worker.
    """
    send = np.zeros((len(stages), n))
    recv = np.zeros((len(stages), n))
    for s, stage in enumerate(stages):
        for e in stage:
            send[s, e.src] += e.nbytes
            recv[s, e.dst] += e.nbytes
    durations = [float(np.max(np.maximum(send[s], recv[s]))) / bandwidth
                 for s in range(len(stages))]
    return durations, send.sum(axis=0), recv.sum(axis=0)


def simulate(assignment: Assignment, plan: CoalescedPlan, units: Sequence[ScheduleUnit],
             deps: DependencyMap, hw: HardwareConfig, cfg: ModelConfig,
             curve: EfficiencyCurve, opts: SimOptions | None = None) -> SimReport:
    """Run the stage-synchronous pipeline model and report times per worker."""
    opts = opts or SimOptions()
    owner_unit = unit_by_chunk(units)
    chunk_worker = {key: assignment.worker_of(uid) for key, uid in owner_unit.items()}
    stages = plan.stages
    arrival = _arrival_stages(stages, chunk_worker)
    n_stages = len(stages)
    work, total_pairs = _tile_seconds_by_release(
        assignment, units, deps, hw, cfg, curve, opts, arrival, n_stages)

    n = assignment.n_workers
    durations, send_bytes, recv_bytes = _stage_comm(stages, n, hw.nic_bandwidth)

    # Per worker, remote tiles form a chain consumed in arrival order:
    # R_w = finish of all arrived remote work, G_w = idle gaps inside that
    # chain (filled by local prologue/epilogue tiles, which always yield).
    local = [work[w][0] for w in range(n)]
    remote_chain = [0.0] * n
    gaps = [0.0] * n
    chain_after_stage = []  # max_w remote chain finish once stage s is consumed
    records: list[StageRecord] = []
    clock = 0.0
    last_comm = np.zeros(n)
    for s in range(n_stages):
        gate_idx = s - opts.pipeline_depth
        gate = chain_after_stage[gate_idx] if gate_idx >= 0 else 0.0
        start = max(clock, gate)
        end = start + durations[s]
        records.append(StageRecord(end - clock, "compute" if gate > clock else "comm"))
        for w in range(n):
            if any(e.src == w or e.dst == w for e in stages[s]):
                last_comm[w] = end
        clock = end
        for w in range(n):
            if work[w][s + 1] > 0.0:
                if clock > remote_chain[w]:
                    gaps[w] += clock - remote_chain[w]
                    remote_chain[w] = clock
                remote_chain[w] += work[w][s + 1]
        chain_after_stage.append(max(remote_chain) if n else 0.0)

    compute_end_by_worker = [remote_chain[w] + max(0.0, local[w] - gaps[w])
                             for w in range(n)]
    compute_end = max(compute_end_by_worker) if n else 0.0
    total_time = max(clock, compute_end)
    if total_time > clock:
        records.append(StageRecord(total_time - clock, "drain"))

    reshuffle_time = 0.0
    if opts.model_reshuffle:
        report = reshuffle_cost(default_contiguous_layout(units, assignment.n_workers),
                                assignment, units, deps, hw, cfg, curve)
        reshuffle_time = report.time * (1.0 - report.hidden_fraction)
        if reshuffle_time > 0.0:
            records.insert(0, StageRecord(reshuffle_time, "comm"))
            total_time += reshuffle_time

    per_worker = []
    for w in range(n):
        compute = sum(work[w])
        busy = max(compute_end_by_worker[w], float(last_comm[w]))
        per_worker.append(WorkerStats(
            compute_time=compute,
            send_time=float(send_bytes[w]) / hw.nic_bandwidth,
            recv_time=float(recv_bytes[w]) / hw.nic_bandwidth,
            idle_time=total_time - compute,
            eta=busy / compute if compute > 0 else 1.0,
        ))
    total_bytes = int(sum(e.nbytes for stage in stages for e in stage))
    return SimReport(
        total_time=total_time,
        per_worker=per_worker,
        stages=records,
        total_flops=total_pairs * cfg.flops_per_token_pair,
        total_bytes=total_bytes,
    )


def random_order_stages(graph: BipartiteMultigraph, seed: int) -> list[list[Edge]]:
    """Group shuffled edges into pull rounds without congestion control.

    Each worker pulls at most one payload per round (first round with a free
    receive slot), but nothing stops several rounds' pulls from draining the
    same sender, whose link then serialises.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(graph.edges))
    stages: list[list[Edge]] = []
    busy_recv: list[set[int]] = []
    for idx in order:
        e = graph.edges[int(idx)]
        for s, taken in enumerate(busy_recv):
            if e.dst not in taken:
                stages[s].append(e)
                taken.add(e.dst)
                break
        else:
            stages.append([e])
            busy_recv.append({e.dst})
    return stages


def simulate_random_order(assignment: Assignment, graph: BipartiteMultigraph,
                          units: Sequence[ScheduleUnit], deps: DependencyMap,
                          hw: HardwareConfig, cfg: ModelConfig, curve: EfficiencyCurve,
                          opts: SimOptions | None = None) -> SimReport:
    """Ablation of the congestion-free solver: seeded arbitrary pull order."""
    opts = opts or SimOptions(congestion_mode=RANDOM_ORDER)
    stages = random_order_stages(graph, opts.random_seed)
    plan = CoalescedPlan(graph.n, 1, stages)
    return simulate(assignment, plan, units, deps, hw, cfg, curve, opts)


@dataclass
class ReshuffleReport:
    out_bytes: list[int]
    in_bytes: list[int]
    total_bytes: int
    time: float
    hidden_fraction: float


def default_contiguous_layout(units: Sequence[ScheduleUnit], n_workers: int,
                              ) -> dict[ChunkKey, int]:
    """User-style layout: chunks fill workers contiguously in unit order."""
    total = sum(u.token_count for u in units)
    per_worker = -(-total // n_workers)
    layout: dict[ChunkKey, int] = {}
    w, used = 0, 0
    for unit in units:
        for chunk in unit.members:
            if used + chunk.token_count > per_worker and w < n_workers - 1:
                w, used = w + 1, 0
            layout[chunk.key] = w
            used += chunk.token_count
    return layout


def reshuffle_cost(initial_layout: Mapping[ChunkKey, int], assignment: Assignment,
                   units: Sequence[ScheduleUnit], deps: DependencyMap,
                   hw: HardwareConfig, cfg: ModelConfig,
                   curve: EfficiencyCurve) -> ReshuffleReport:
    """Cost of moving chunks from a user layout into the scheduled layout.

    Each token exists exactly once, so the total volume is bounded by the
    batch's token count times the per-token QKV footprint. The report also
    states how much of the transfer hides behind dependency-free local
    compute (the pipeline prologue).
    """
    owner_unit = unit_by_chunk(units)
    scheduled = {key: assignment.worker_of(uid) for key, uid in owner_unit.items()}
    if set(initial_layout) != set(scheduled):
        raise ConsistencyError("initial layout covers a different chunk set")
    n = assignment.n_workers
    out_bytes = [0] * n
    in_bytes = [0] * n
    token_bytes = qkv_bytes_per_token(cfg)
    for key, src in initial_layout.items():
        dst = scheduled[key]
        if src == dst:
            continue
        nbytes = deps.chunk_tokens[key] * token_bytes
        out_bytes[src] += nbytes
        in_bytes[dst] += nbytes
    time = max((max(o, i) for o, i in zip(out_bytes, in_bytes)), default=0) / hw.nic_bandwidth

    # Local-only tiles per worker, under the scheduled placement.
    causal = deps.mask == CAUSAL
    unit_index = {u.unit_id: u for u in units}
    prologue = [0.0] * n
    for q_key, kv_keys in deps.q_to_kv.items():
        w = scheduled[q_key]
        if any(scheduled[kv] != w for kv in kv_keys):
            continue
        eff = unit_efficiency(curve, unit_index[owner_unit[q_key]])
        for kv in kv_keys:
            pairs = tile_token_pairs(deps.chunk_tokens[q_key], deps.chunk_tokens[kv],
                                     diagonal=causal and kv == q_key)
            prologue[w] += pairs * cfg.flops_per_token_pair / (hw.peak_flops * eff)

    if time <= 0.0:
        hidden = 1.0
    else:
        movers = [w for w in range(n) if out_bytes[w] or in_bytes[w]]
        hidden = min(1.0, min(prologue[w] for w in movers) / time)
    return ReshuffleReport(out_bytes, in_bytes, sum(out_bytes), time, hidden)
