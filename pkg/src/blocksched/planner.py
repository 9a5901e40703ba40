"""Congestion-free communication planning.

Cross-worker KV traffic forms a bipartite multigraph over send/receive nodes.
Its edge set decomposes into exactly Delta disjoint matchings (Delta = max
node degree): pad the graph with dummy edges until it is Delta-regular, then
peel off one perfect matching per round with Hopcroft-Karp. Each matching is
one congestion-free round; consecutive rounds may be coalesced.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .costmodel import ModelConfig, kv_chunk_bytes
from .distributor import Assignment
from .errors import InternalError, ParameterError
from .sharding import ChunkKey, DependencyMap, ScheduleUnit, unit_by_chunk


@dataclass(frozen=True)
class Edge:
    """One transfer: sender -> receiver carrying one or more chunks."""

    src: int
    dst: int
    chunks: tuple[ChunkKey, ...]
    nbytes: int
    dummy: bool = False


@dataclass
class BipartiteMultigraph:
    n: int
    edges: list[Edge] = field(default_factory=list)

    def send_degrees(self) -> list[int]:
        deg = [0] * self.n
        for e in self.edges:
            deg[e.src] += 1
        return deg

    def recv_degrees(self) -> list[int]:
        deg = [0] * self.n
        for e in self.edges:
            deg[e.dst] += 1
        return deg

    def max_degree(self) -> int:
        if not self.edges:
            return 0
        return max(max(self.send_degrees()), max(self.recv_degrees()))


@dataclass
class CommPlan:
    """Ordered congestion-free rounds; every round is a matching."""

    n: int
    sub_stages: list[list[Edge]]

    @property
    def stage_count(self) -> int:
        return len(self.sub_stages)


@dataclass
class CoalescedPlan:
    """Groups of consecutive rounds executed as one stage."""

    n: int
    degree: int
    stages: list[list[Edge]]

    @property
    def stage_count(self) -> int:
        return len(self.stages)


def build_comm_graph(assignment: Assignment, deps: DependencyMap,
                     units: Sequence[ScheduleUnit], cfg: ModelConfig) -> BipartiteMultigraph:
    """One edge per (KV chunk, distinct remote consumer worker).

    Local dependencies produce no edge; a chunk with several consumers on one
    worker is sent there once.
    """
    owner_unit = unit_by_chunk(units)
    chunk_worker = {key: assignment.worker_of(uid) for key, uid in owner_unit.items()}
    targets: dict[ChunkKey, set[int]] = {}
    for q_key, kv_keys in deps.q_to_kv.items():
        dst = chunk_worker[q_key]
        for kv in kv_keys:
            if chunk_worker[kv] != dst:
                targets.setdefault(kv, set()).add(dst)
    graph = BipartiteMultigraph(assignment.n_workers)
    for kv in sorted(targets):
        src = chunk_worker[kv]
        nbytes = kv_chunk_bytes(deps.chunk_tokens[kv], cfg)
        for dst in sorted(targets[kv]):
            graph.edges.append(Edge(src, dst, (kv,), nbytes))
    return graph


def _hopcroft_karp(adj: dict[int, list[int]], lefts: list[int],
                   match_l: dict[int, int], match_r: dict[int, int]) -> None:
    """Grow (match_l, match_r) to a maximum matching of the bipartite graph.

    Standard Hopcroft-Karp: BFS layers from free left vertices, then
    vertex-disjoint augmenting DFS passes. Mutates the matchings in place so
    callers can warm-start from a partial matching.
    """
    INF = float("inf")

    while True:
        dist = {}
        queue = deque()
        for u in lefts:
            if u not in match_l:
                dist[u] = 0
                queue.append(u)
            else:
                dist[u] = INF
        reachable_free = INF
        while queue:
            u = queue.popleft()
            if dist[u] >= reachable_free:
                continue
            for v in adj[u]:
                w = match_r.get(v)
                if w is None:
                    if reachable_free == INF:
                        reachable_free = dist[u] + 1
                elif dist[w] == INF:
                    dist[w] = dist[u] + 1
                    queue.append(w)
        if reachable_free == INF:
            return

        def try_augment(u: int) -> bool:
            for v in adj[u]:
                w = match_r.get(v)
                if w is None:
                    if dist[u] + 1 == reachable_free:
                        match_l[u] = v
                        match_r[v] = u
                        return True
                elif dist[w] == dist[u] + 1:
                    if try_augment(w):
                        match_l[u] = v
                        match_r[v] = u
                        return True
            dist[u] = INF
            return False

        for u in lefts:
            if u not in match_l:
                try_augment(u)


def decompose_matchings(graph: BipartiteMultigraph) -> CommPlan:
    """Partition the edge multiset into exactly Delta disjoint matchings.

    Dummy edges pad the graph to Delta-regular (lowest under-degree send node
    paired with the lowest under-degree receive node, repeatedly); Hall's
    theorem then guarantees a perfect matching per round. Extracted matchings
    are stripped of dummies. Deterministic for a fixed edge insertion order.
    """
    delta = graph.max_degree()
    if delta == 0:
        return CommPlan(graph.n, [])
    n = graph.n
    send_deg = graph.send_degrees()
    recv_deg = graph.recv_degrees()

    # Edge instances per (src, dst); real edges first, dummies appended after,
    # so FIFO extraction prefers real payloads.
    instances: dict[tuple[int, int], deque[Edge]] = {}
    for e in graph.edges:
        instances.setdefault((e.src, e.dst), deque()).append(e)

    under_send = deque(i for i in range(n) if send_deg[i] < delta)
    under_recv = deque(j for j in range(n) if recv_deg[j] < delta)
    while under_send:
        i = under_send[0]
        j = under_recv[0]
        instances.setdefault((i, j), deque()).append(Edge(i, j, (), 0, dummy=True))
        send_deg[i] += 1
        recv_deg[j] += 1
        if send_deg[i] == delta:
            under_send.popleft()
        if recv_deg[j] == delta:
            under_recv.popleft()

    count = {pair: len(q) for pair, q in instances.items()}
    adj = {i: sorted(j for (si, j) in count if si == i) for i in range(n)}
    lefts = list(range(n))
    match_l: dict[int, int] = {}
    match_r: dict[int, int] = {}

    sub_stages: list[list[Edge]] = []
    for _ in range(delta):
        _hopcroft_karp(adj, lefts, match_l, match_r)
        if len(match_l) != n:
            raise InternalError("no perfect matching in a regular bipartite graph")
        stage = []
        for i in range(n):
            j = match_l[i]
            edge = instances[(i, j)].popleft()
            if not edge.dummy:
                stage.append(edge)
            count[(i, j)] -= 1
            if count[(i, j)] == 0:
                # Pair exhausted: retract it from the adjacency and matching
                # so the next round starts from a valid partial matching.
                adj[i].remove(j)
                del match_l[i]
                del match_r[j]
        sub_stages.append(stage)
    if any(q for q in instances.values()):
        raise InternalError("edges left over after Delta rounds")
    return CommPlan(graph.n, sub_stages)


def stage_ordering(plan: CommPlan) -> CommPlan:
    """Put dense rounds first so heavy traffic overlaps the compute prologue.

    Stable sort by descending real-edge count; matchings are unchanged.
    """
    ordered = sorted(plan.sub_stages, key=lambda stage: -len(stage))
    return CommPlan(plan.n, ordered)


def coalesce(plan: CommPlan, degree: int) -> CoalescedPlan:
    """Merge runs of ``degree`` consecutive rounds into single stages.

    Each worker then sends at most ``degree`` and receives at most ``degree``
    payloads per stage; the last stage may be partial.
    """
    if degree < 1:
        raise ParameterError(f"coalesce degree must be >= 1, got {degree}")
    stages = []
    for start in range(0, len(plan.sub_stages), degree):
        merged: list[Edge] = []
        for stage in plan.sub_stages[start:start + degree]:
            merged.extend(stage)
        stages.append(merged)
    return CoalescedPlan(plan.n, degree, stages)


def is_matching(edges: Iterable[Edge]) -> bool:
    """True when no worker appears twice as sender or twice as receiver."""
    senders: set[int] = set()
    receivers: set[int] = set()
    for e in edges:
        if e.src in senders or e.dst in receivers:
            return False
        senders.add(e.src)
        receivers.add(e.dst)
    return True
