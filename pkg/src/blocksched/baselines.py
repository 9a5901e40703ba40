"""Reference schedulers: monolithic ring, length-proportional grouping, and
an oracle that simulates both and keeps the faster one."""

from __future__ import annotations

from .costmodel import EfficiencyCurve, HardwareConfig, ModelConfig, kv_chunk_bytes
from .distributor import Assignment
from .errors import InfeasibleError
from .pipeline import ScheduleResult
from .planner import CoalescedPlan, CommPlan, Edge
from .sharding import (CAUSAL, Chunk, ScheduleUnit, ZIGZAG_PAIR, chunk_token_counts,
                       kv_dependencies, zigzag_pairs)
from .simulator import SimOptions, simulate
from .workload import Batch, Sequence


def _zigzag_units_over_group(seq: Sequence, group: list[int], next_unit_id: int,
                             ) -> tuple[list[ScheduleUnit], dict[int, int], dict[int, list[Chunk]]]:
    """Shard one sequence into 2g chunks zigzag-assigned over ``group``.

    Returns the units, unit -> worker, and the original chunk pair held by
    each group member (the rotating ring payload).
    """
    g = len(group)
    sizes = chunk_token_counts(seq.length, 2 * g)
    chunks = {i: Chunk(seq.id, i, t) for i, t in enumerate(sizes) if t > 0}
    units: list[ScheduleUnit] = []
    unit_worker: dict[int, int] = {}
    holdings: dict[int, list[Chunk]] = {w: [] for w in group}
    for rank, (lo, hi) in enumerate(zigzag_pairs(g)):
        members = tuple(chunks[i] for i in (lo, hi) if i in chunks)
        if not members:
            continue
        uid = next_unit_id + len(units)
        units.append(ScheduleUnit(uid, ZIGZAG_PAIR, members))
        unit_worker[uid] = group[rank]
        holdings[group[rank]].extend(members)
    return units, unit_worker, holdings


def _ring_rounds(groups: list[tuple[list[int], dict[int, list[Chunk]]]],
                 cfg: ModelConfig, n_workers: int) -> list[list[Edge]]:
    """Merge per-group KV rotations round by round.

    Round r of a group of size g (r < g - 1): member at rank w forwards the
    bundle that originated at rank (w - r) mod g to rank (w + 1) mod g.
    Bundles travelling between the same worker pair in the same round merge
    into a single edge.
    """
    max_rounds = max((len(group) - 1 for group, _ in groups), default=0)
    rounds: list[list[Edge]] = []
    for r in range(max_rounds):
        transfers: dict[tuple[int, int], list[Chunk]] = {}
        for group, holdings in groups:
            g = len(group)
            if r >= g - 1:
                continue
            for rank, worker in enumerate(group):
                origin = group[(rank - r) % g]
                bundle = holdings[origin]
                if not bundle:
                    continue
                dst = group[(rank + 1) % g]
                transfers.setdefault((worker, dst), []).extend(bundle)
        stage = []
        for (src, dst) in sorted(transfers):
            bundle = transfers[(src, dst)]
            nbytes = sum(kv_chunk_bytes(c.token_count, cfg) for c in bundle)
            stage.append(Edge(src, dst, tuple(c.key for c in bundle), nbytes))
        if stage:
            rounds.append(stage)
    return rounds


def ring_schedule(batch: Batch, n_workers: int, cfg: ModelConfig,
                  mask: str = CAUSAL) -> ScheduleResult:
    """Monolithic ring: every sequence sharded into 2N chunks, pair i on
    worker i, KV rotated one neighbour per round for N-1 rounds."""
    units: list[ScheduleUnit] = []
    unit_worker: dict[int, int] = {}
    holdings: dict[int, list[Chunk]] = {w: [] for w in range(n_workers)}
    group = list(range(n_workers))
    for seq in batch.sequences:
        seq_units, seq_workers, seq_holdings = _zigzag_units_over_group(seq, group, len(units))
        units.extend(seq_units)
        unit_worker.update(seq_workers)
        for w, bundle in seq_holdings.items():
            holdings[w].extend(bundle)
    deps = kv_dependencies(units, mask)
    memory = [0.0] * n_workers
    for u in units:
        memory[unit_worker[u.unit_id]] += u.token_count
    assignment = Assignment(n_workers, dict(unit_worker), memory, [0.0] * n_workers)
    rounds = _ring_rounds([(group, holdings)], cfg, n_workers)
    sub_plan = CommPlan(n_workers, rounds)
    # Rotation round r forwards what arrived in round r - 1, so rounds must
    # not be merged; the coalesced view keeps degree 1.
    plan = CoalescedPlan(n_workers, 1, [list(stage) for stage in rounds])
    return ScheduleResult("ring", units, deps, assignment, sub_plan, plan)


def _group_size(length: int, tokens_per_worker: int) -> int:
    g = max(1, -(-length // tokens_per_worker))
    return 1 << (g - 1).bit_length()


def bytescale_schedule(batch: Batch, n_workers: int, tokens_per_worker: int,
                       cfg: ModelConfig, mask: str = CAUSAL) -> ScheduleResult:
    """Length-proportional grouping: a sequence of length L gets a power-of-two
    group of ceil(L / tokens_per_worker) workers and runs a ring inside it.

    Groups are placed first-fit onto aligned worker windows with remaining
    token capacity; several small groups may stack on the same workers.
    """
    order = sorted(batch.sequences,
                   key=lambda s: (-_group_size(s.length, tokens_per_worker), -s.length, s.id))
    capacity = [float(tokens_per_worker)] * n_workers
    units: list[ScheduleUnit] = []
    unit_worker: dict[int, int] = {}
    group_states: list[tuple[list[int], dict[int, list[Chunk]]]] = []
    for seq in order:
        g = _group_size(seq.length, tokens_per_worker)
        if g > n_workers:
            raise InfeasibleError(
                f"sequence {seq.id} needs a group of {g} workers, cluster has {n_workers}")
        sizes = chunk_token_counts(seq.length, 2 * g)
        per_worker = [sizes[i] + sizes[2 * g - 1 - i] for i in range(g)]
        chosen = None
        for start in range(0, n_workers - g + 1, g):
            window = list(range(start, start + g))
            if all(capacity[w] >= per_worker[rank] for rank, w in enumerate(window)):
                chosen = window
                break
        if chosen is None:
            # Token capacity fragmented: fall back to the least-loaded window.
            # Length-proportional grouping balances memory by construction, so
            # overload (not failure) is the faithful outcome on a full batch.
            best_start = min(
                range(0, n_workers - g + 1, g),
                key=lambda s: max(per_worker[rank] - capacity[s + rank]
                                  for rank in range(g)))
            chosen = list(range(best_start, best_start + g))
        seq_units, seq_workers, seq_holdings = _zigzag_units_over_group(
            seq, chosen, len(units))
        units.extend(seq_units)
        unit_worker.update(seq_workers)
        group_states.append((chosen, seq_holdings))
        for rank, w in enumerate(chosen):
            capacity[w] -= per_worker[rank]
    deps = kv_dependencies(units, mask)
    memory = [0.0] * n_workers
    for u in units:
        memory[unit_worker[u.unit_id]] += u.token_count
    assignment = Assignment(n_workers, dict(unit_worker), memory, [0.0] * n_workers)
    rounds = _ring_rounds(group_states, cfg, n_workers)
    sub_plan = CommPlan(n_workers, rounds)
    plan = CoalescedPlan(n_workers, 1, [list(stage) for stage in rounds])
    return ScheduleResult("bytescale", units, deps, assignment, sub_plan, plan)


def wlb_oracle(batch: Batch, n_workers: int, tokens_per_worker: int,
               hw: HardwareConfig, cfg: ModelConfig, curve: EfficiencyCurve,
               opts: SimOptions | None = None,
               mask: str = CAUSAL) -> tuple[ScheduleResult, str]:
    """Simulate ring and the grouped scheduler, keep whichever finishes first."""
    opts = opts or SimOptions()
    candidates: list[tuple[float, ScheduleResult]] = []
    ring = ring_schedule(batch, n_workers, cfg, mask)
    ring_time = simulate(ring.assignment, ring.plan, ring.units, ring.deps,
                         hw, cfg, curve, opts).total_time
    candidates.append((ring_time, ring))
    try:
        grouped = bytescale_schedule(batch, n_workers, tokens_per_worker, cfg, mask)
    except InfeasibleError:
        grouped = None
    if grouped is not None:
        grouped_time = simulate(grouped.assignment, grouped.plan, grouped.units,
                                grouped.deps, hw, cfg, curve, opts).total_time
        candidates.append((grouped_time, grouped))
    best_time, best = min(candidates, key=lambda item: item[0])
    return best, best.label
