"""Fixed-size blocking of sequences into schedulable units.

Sequences at least one block long are cut into half-block chunks; chunk i is
paired with chunk 2k-1-i so that, under a causal mask, every pair of one
sequence carries the same compute and the same KV transfer demand. Sequences
shorter than a block are packed whole into shared varlen units.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .errors import ParameterError
from .workload import Batch, Sequence

# A chunk is addressed by (sequence id, chunk index within the sequence).
ChunkKey = tuple[int, int]

ZIGZAG_PAIR = "zigzag_pair"
VARLEN_PACK = "varlen_pack"

CAUSAL = "causal"
FULL = "full"


@dataclass(frozen=True)
class Chunk:
    seq_id: int
    chunk_index: int
    token_count: int

    def __post_init__(self):
        if self.token_count < 1:
            raise ParameterError(
                f"chunk ({self.seq_id},{self.chunk_index}): token_count must be >= 1")

    @property
    def key(self) -> ChunkKey:
        return (self.seq_id, self.chunk_index)


@dataclass(frozen=True)
class ShardingConfig:
    block_size: int = 4096
    mask: str = CAUSAL

    def __post_init__(self):
        if self.block_size < 2 or self.block_size % 2 != 0:
            raise ParameterError(f"block_size must be even and >= 2, got {self.block_size}")
        if self.mask not in (CAUSAL, FULL):
            raise ParameterError(f"mask must be '{CAUSAL}' or '{FULL}', got {self.mask!r}")

    @property
    def chunk_size(self) -> int:
        return self.block_size // 2


@dataclass(frozen=True)
class ScheduleUnit:
    """Atomic scheduling/transfer unit: one chunk pair or one varlen pack."""

    unit_id: int
    kind: str
    members: tuple[Chunk, ...]

    def __post_init__(self):
        if self.kind not in (ZIGZAG_PAIR, VARLEN_PACK):
            raise ParameterError(f"unknown unit kind {self.kind!r}")
        if not self.members:
            raise ParameterError(f"unit {self.unit_id} has no members")
        if self.kind == ZIGZAG_PAIR and len(self.members) > 2:
            raise ParameterError(f"zigzag unit {self.unit_id} has {len(self.members)} chunks")

    @property
    def token_count(self) -> int:
        return sum(c.token_count for c in self.members)

    @property
    def source_seq_ids(self) -> frozenset[int]:
        return frozenset(c.seq_id for c in self.members)


def zigzag_pairs(k: int) -> list[tuple[int, int]]:
    """Front-to-back pairing of 2k chunk indices: (i, 2k-1-i) for i in 0..k-1."""
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    return [(i, 2 * k - 1 - i) for i in range(k)]


def chunk_token_counts(length: int, n_chunks: int) -> list[int]:
    """Even split of ``length`` tokens into ``n_chunks`` parts.

    The first ``length % n_chunks`` chunks take one extra token, so sizes
    differ by at most one and trailing chunks are the shorter ones. Returns
    zeros for chunks past the token supply (only possible for block sizes < 4).
    """
    base, rem = divmod(length, n_chunks)
    return [base + (1 if i < rem else 0) for i in range(n_chunks)]


def shard_sequence(seq: Sequence, cfg: ShardingConfig, next_unit_id: int) -> list[ScheduleUnit]:
    """Shard one long sequence (length >= block_size) into k zigzag pairs."""
    k = -(-seq.length // cfg.block_size)  # ceil division
    sizes = chunk_token_counts(seq.length, 2 * k)
    chunks = {i: Chunk(seq.id, i, t) for i, t in enumerate(sizes) if t > 0}
    units = []
    for offset, (lo, hi) in enumerate(zigzag_pairs(k)):
        members = tuple(chunks[i] for i in (lo, hi) if i in chunks)
        units.append(ScheduleUnit(next_unit_id + offset, ZIGZAG_PAIR, members))
    return units


def pack_short_sequences(shorts: Iterable[Sequence], block_size: int,
                         start_unit_id: int = 0) -> list[ScheduleUnit]:
    """First-fit-decreasing packing of whole short sequences into varlen units.

    Every input must be shorter than block_size. Ties in length break by
    sequence id so the packing is deterministic.
    """
    ordered = sorted(shorts, key=lambda s: (-s.length, s.id))
    bins: list[list[Sequence]] = []
    room: list[int] = []
    for seq in ordered:
        if seq.length >= block_size:
            raise ParameterError(
                f"sequence {seq.id} ({seq.length} tokens) is not shorter than a block")
        for b, free in enumerate(room):
            if seq.length <= free:
                bins[b].append(seq)
                room[b] -= seq.length
                break
        else:
            bins.append([seq])
            room.append(block_size - seq.length)
    units = []
    for offset, members in enumerate(bins):
        chunks = tuple(Chunk(s.id, 0, s.length) for s in members)
        units.append(ScheduleUnit(start_unit_id + offset, VARLEN_PACK, chunks))
    return units


def shard_batch(batch: Batch, cfg: ShardingConfig) -> list[ScheduleUnit]:
    """Shard a batch: zigzag pairs for long sequences, varlen packs for short."""
    units: list[ScheduleUnit] = []
    shorts: list[Sequence] = []
    for seq in batch.sequences:
        if seq.length >= cfg.block_size:
            units.extend(shard_sequence(seq, cfg, len(units)))
        else:
            shorts.append(seq)
    units.extend(pack_short_sequences(shorts, cfg.block_size, start_unit_id=len(units)))
    return units


@dataclass(frozen=True)
class DependencyMap:
    """Consumer -> producer relation over chunks, plus chunk token counts."""

    q_to_kv: Mapping[ChunkKey, tuple[ChunkKey, ...]]
    chunk_tokens: Mapping[ChunkKey, int]
    mask: str

    def consumers_by_producer(self) -> dict[ChunkKey, list[ChunkKey]]:
        inverse: dict[ChunkKey, list[ChunkKey]] = {}
        for q, kvs in self.q_to_kv.items():
            for kv in kvs:
                inverse.setdefault(kv, []).append(q)
        return inverse


def kv_dependencies(units: Iterable[ScheduleUnit], mask: str) -> DependencyMap:
    """Derive the per-chunk KV dependency relation for one batch.

    Causal: the Q side of chunk p needs KV chunks 0..p of the same sequence.
    Full: every chunk needs every chunk of its sequence. Packed short
    sequences are whole, so they only ever depend on themselves.
    """
    if mask not in (CAUSAL, FULL):
        raise ParameterError(f"mask must be '{CAUSAL}' or '{FULL}', got {mask!r}")
    zig_chunks: dict[int, list[ChunkKey]] = {}
    tokens: dict[ChunkKey, int] = {}
    pack_chunks: list[ChunkKey] = []
    for unit in units:
        for chunk in unit.members:
            tokens[chunk.key] = chunk.token_count
            if unit.kind == ZIGZAG_PAIR:
                zig_chunks.setdefault(chunk.seq_id, []).append(chunk.key)
            else:
                pack_chunks.append(chunk.key)
    q_to_kv: dict[ChunkKey, tuple[ChunkKey, ...]] = {}
    for seq_id, keys in zig_chunks.items():
        keys.sort(key=lambda key: key[1])
        for pos, q in enumerate(keys):
            if mask == CAUSAL:
                q_to_kv[q] = tuple(keys[: pos + 1])
            else:
                q_to_kv[q] = tuple(keys)
    for q in pack_chunks:
        q_to_kv[q] = (q,)
    return DependencyMap(q_to_kv=q_to_kv, chunk_tokens=tokens, mask=mask)


def unit_by_chunk(units: Iterable[ScheduleUnit]) -> dict[ChunkKey, int]:
    """Map every chunk key to the unit id holding it."""
    owner: dict[ChunkKey, int] = {}
    for unit in units:
        for chunk in unit.members:
            owner[chunk.key] = unit.unit_id
    return owner
