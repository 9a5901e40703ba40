"""Greedy load-balanced assignment of schedule units to workers.

A longest-processing-time variant over two dimensions: units are placed in
descending order of their dominant normalised cost onto the worker whose
updated max(memory, compute) normalised load is smallest, subject to a hard
per-worker memory cap.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .costmodel import (EfficiencyCurve, ModelConfig, kv_chunk_bytes, unit_costs,
                        unit_efficiency)
from .errors import InfeasibleError, ParameterError
from .sharding import ChunkKey, DependencyMap, ScheduleUnit, unit_by_chunk


@dataclass(frozen=True)
class AssignParams:
    alpha: float = 1.0
    beta: float = 1.0
    mem_limit: float = float("inf")  # tokens per worker
    delta: float = 0.05

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ParameterError("alpha and beta must be positive")
        if self.mem_limit <= 0:
            raise ParameterError("mem_limit must be positive")
        if self.delta < 0:
            raise ParameterError("delta must be non-negative")

    @property
    def mem_cap(self) -> float:
        return self.mem_limit * (1.0 + self.delta)


@dataclass(frozen=True)
class UnitLoad:
    """Costs of one unit as seen by the assignment algorithm."""

    unit_id: int
    memory: float
    compute: float


@dataclass
class Assignment:
    """unit_id -> worker mapping plus the per-worker load vectors."""

    n_workers: int
    workers: dict[int, int]
    memory: list[float]
    compute: list[float]

    def worker_of(self, unit_id: int) -> int:
        return self.workers[unit_id]


def effective_unit_loads(units: Sequence[ScheduleUnit], deps: DependencyMap,
                         cfg: ModelConfig, curve: EfficiencyCurve) -> list[UnitLoad]:
    """Memory in tokens, compute in efficiency-adjusted token pairs."""
    loads = []
    for unit in units:
        cv = unit_costs(unit, deps, cfg)
        eff = unit_efficiency(curve, unit)
        loads.append(UnitLoad(unit.unit_id, float(cv.memory), cv.compute / eff))
    return loads


def assign(loads: Sequence[UnitLoad], n_workers: int, params: AssignParams) -> Assignment:
    """Greedy load-balanced assignment.

    Raises InfeasibleError naming the first unit no worker can take under
    the memory cap; callers may retry with a larger delta.
    """
    if n_workers < 1:
        raise ParameterError("n_workers must be >= 1")
    mem = np.zeros(n_workers)
    comp = np.zeros(n_workers)
    mapping: dict[int, int] = {}
    if not loads:
        return Assignment(n_workers, mapping, mem.tolist(), comp.tolist())

    m_hat = sum(l.memory for l in loads) / n_workers
    c_hat = sum(l.compute for l in loads) / n_workers
    # Degenerate all-zero dimensions contribute nothing to the load score.
    m_scale = params.alpha / m_hat if m_hat > 0 else 0.0
    c_scale = params.beta / c_hat if c_hat > 0 else 0.0

    def sort_key(l: UnitLoad) -> float:
        return max(l.memory / m_hat if m_hat > 0 else 0.0,
                   l.compute / c_hat if c_hat > 0 else 0.0)

    ordered = sorted(loads, key=lambda l: (-sort_key(l), l.unit_id))
    cap = params.mem_cap
    for load in ordered:
        score = np.maximum((mem + load.memory) * m_scale, (comp + load.compute) * c_scale)
        score[mem + load.memory > cap] = np.inf
        best = score.min()
        if not np.isfinite(best):
            raise InfeasibleError(
                f"unit {load.unit_id} ({load.memory:.0f} tokens) fits no worker under "
                f"the memory cap {cap:.0f}; retry with a larger delta")
        # Tie-break by worker index rotated by the unit id. Always taking the
        # lowest index would start every sequence's remainder stripe at worker
        # 0, piling the comm-heaviest units onto low indices batch after batch.
        ties = np.flatnonzero(score == best)
        w = int(ties[np.argmin((ties - load.unit_id) % n_workers)])
        mapping[load.unit_id] = w
        mem[w] += load.memory
        comp[w] += load.compute
    return Assignment(n_workers, mapping, mem.tolist(), comp.tolist())


@dataclass
class WorkerLoads:
    """Measured per-worker loads: tokens, FLOPs, and deduplicated KV bytes."""

    memory_tokens: list[int]
    compute_flops: list[float]
    send_bytes: list[int]
    recv_bytes: list[int]

    @property
    def comm_bytes(self) -> list[int]:
        return [s + r for s, r in zip(self.send_bytes, self.recv_bytes)]


def worker_loads(assignment: Assignment, units: Sequence[ScheduleUnit],
                 deps: DependencyMap, cfg: ModelConfig) -> WorkerLoads:
    """Accumulate memory, compute and communication per worker.

    Communication counts each (KV chunk, destination worker) transfer once on
    the sender and once on the receiver; chunks consumed only locally move
    nothing.
    """
    n = assignment.n_workers
    memory = [0] * n
    flops = [0.0] * n
    send = [0] * n
    recv = [0] * n
    owner_unit = unit_by_chunk(units)
    unit_worker = {u.unit_id: assignment.worker_of(u.unit_id) for u in units}
    chunk_worker: dict[ChunkKey, int] = {key: unit_worker[uid] for key, uid in owner_unit.items()}

    for unit in units:
        w = unit_worker[unit.unit_id]
        cv = unit_costs(unit, deps, cfg)
        memory[w] += cv.memory
        flops[w] += cv.compute * cfg.flops_per_token_pair

    seen: set[tuple[ChunkKey, int]] = set()
    for q_key, kv_keys in deps.q_to_kv.items():
        dst = chunk_worker[q_key]
        for kv in kv_keys:
            src = chunk_worker[kv]
            if src == dst or (kv, dst) in seen:
                continue
            seen.add((kv, dst))
            nbytes = kv_chunk_bytes(deps.chunk_tokens[kv], cfg)
            send[src] += nbytes
            recv[dst] += nbytes
    return WorkerLoads(memory, flops, send, recv)
