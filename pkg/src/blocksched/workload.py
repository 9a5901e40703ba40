"""Synthetic sequence traces and batch construction.

Sequence lengths are drawn from a lognormal distribution (or a mixture of
them, e.g. bimodal), truncated to a configurable range. Batches group
consecutive sequences under a global token budget of
``n_workers * tokens_per_worker``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, ParameterError, TraceFormatError

DEFAULT_MAX_LENGTH = 1 << 19  # 512K tokens


@dataclass(frozen=True)
class Sequence:
    """One input sequence: a unique id and its token count."""

    id: int
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ParameterError(f"sequence {self.id}: length must be >= 1, got {self.length}")


@dataclass(frozen=True)
class LengthComponent:
    """One lognormal mixture component, parameterised by (sigma, mean length).

    The location parameter mu is solved from mean = exp(mu + sigma^2 / 2).
    """

    sigma: float
    mean_length: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")
        if self.mean_length <= 0:
            raise ParameterError(f"mean_length must be positive, got {self.mean_length}")

    @property
    def mu(self) -> float:
        return math.log(self.mean_length) - self.sigma**2 / 2.0


@dataclass(frozen=True)
class DistributionSpec:
    """Sequence-length distribution: mixture of lognormals with truncation."""

    components: tuple[LengthComponent, ...]
    weights: tuple[float, ...]
    min_length: int = 1
    max_length: int = DEFAULT_MAX_LENGTH

    def __post_init__(self):
        if not self.components:
            raise ParameterError("distribution needs at least one component")
        if len(self.weights) != len(self.components):
            raise ParameterError("one weight per component required")
        if any(w < 0 or w > 1 for w in self.weights):
            raise ParameterError("weights must lie in [0, 1]")
        if not math.isclose(sum(self.weights), 1.0, rel_tol=1e-9, abs_tol=1e-9):
            raise ParameterError(f"weights must sum to 1, got {sum(self.weights)}")
        if self.min_length < 1:
            raise ParameterError("min_length must be >= 1")
        if self.max_length < self.min_length:
            raise ParameterError("max_length must be >= min_length")

    @classmethod
    def lognormal(cls, sigma: float, mean_length: float,
                  min_length: int = 1, max_length: int = DEFAULT_MAX_LENGTH) -> "DistributionSpec":
        return cls((LengthComponent(sigma, mean_length),), (1.0,), min_length, max_length)

    @classmethod
    def mixture(cls, components: list[tuple[float, float]], weights: list[float],
                min_length: int = 1, max_length: int = DEFAULT_MAX_LENGTH) -> "DistributionSpec":
        comps = tuple(LengthComponent(s, m) for s, m in components)
        return cls(comps, tuple(weights), min_length, max_length)

    @classmethod
    def bimodal(cls, sigma_a: float, mean_a: float, sigma_b: float, mean_b: float,
                weight_a: float = 0.5,
                min_length: int = 1, max_length: int = DEFAULT_MAX_LENGTH) -> "DistributionSpec":
        return cls.mixture([(sigma_a, mean_a), (sigma_b, mean_b)],
                           [weight_a, 1.0 - weight_a], min_length, max_length)


def generate_trace(spec: DistributionSpec, seed: int, count: int) -> list[Sequence]:
    """Draw ``count`` sequences from ``spec``, deterministic for a fixed seed.

    Lengths are clamped (not resampled) into [min_length, max_length] so the
    draw count, and therefore the RNG stream, is independent of truncation.
    """
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    mus = np.array([c.mu for c in spec.components])
    sigmas = np.array([c.sigma for c in spec.components])
    which = rng.choice(len(spec.components), size=count, p=np.array(spec.weights))
    raw = rng.lognormal(mean=mus[which], sigma=sigmas[which])
    lengths = np.clip(np.rint(raw).astype(np.int64), spec.min_length, spec.max_length)
    return [Sequence(i, int(l)) for i, l in enumerate(lengths)]


def trace_tokens(trace: list[Sequence]) -> int:
    return sum(s.length for s in trace)


def save_trace(trace: list[Sequence], path: str | os.PathLike) -> None:
    """Write a trace as line-delimited JSON records {"id": .., "len": ..}."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for seq in trace:
            fh.write(json.dumps({"id": seq.id, "len": seq.length}) + "\n")
    os.replace(tmp, path)


def load_trace(path: str | os.PathLike) -> list[Sequence]:
    """Parse a line-delimited trace file, enforcing all Sequence invariants."""
    trace: list[Sequence] = []
    seen: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceFormatError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict) or "id" not in record or "len" not in record:
                raise TraceFormatError("record must be an object with 'id' and 'len'", line=lineno)
            sid, length = record["id"], record["len"]
            if not isinstance(sid, int) or not isinstance(length, int):
                raise TraceFormatError("'id' and 'len' must be integers", line=lineno)
            if length < 1:
                raise TraceFormatError(f"non-positive length {length}", line=lineno)
            if sid in seen:
                raise TraceFormatError(f"duplicate id {sid}", line=lineno)
            seen.add(sid)
            trace.append(Sequence(sid, length))
    return trace


@dataclass(frozen=True)
class Batch:
    """Sequences grouped under a per-worker token budget."""

    sequences: tuple[Sequence, ...]
    n_workers: int
    tokens_per_worker: int

    def __post_init__(self):
        if self.n_workers < 1:
            raise ParameterError("n_workers must be >= 1")
        if self.tokens_per_worker < 1:
            raise ParameterError("tokens_per_worker must be >= 1")
        if self.total_tokens > self.token_budget:
            raise ParameterError(
                f"batch holds {self.total_tokens} tokens, budget is {self.token_budget}")

    @property
    def total_tokens(self) -> int:
        return sum(s.length for s in self.sequences)

    @property
    def token_budget(self) -> int:
        return self.n_workers * self.tokens_per_worker


def build_batches(trace: list[Sequence], n_workers: int, tokens_per_worker: int) -> list[Batch]:
    """Greedy first-fit batching in trace order; sequences are never split.

    A new batch starts whenever adding the next sequence would exceed the
    global budget. A single sequence larger than the whole budget is
    unschedulable and raises InfeasibleError.
    """
    budget = n_workers * tokens_per_worker
    batches: list[Batch] = []
    current: list[Sequence] = []
    used = 0
    for seq in trace:
        if seq.length > budget:
            raise InfeasibleError(
                f"sequence {seq.id} ({seq.length} tokens) exceeds the batch budget {budget}")
        if used + seq.length > budget and current:
            batches.append(Batch(tuple(current), n_workers, tokens_per_worker))
            current, used = [], 0
        current.append(seq)
        used += seq.length
    if current:
        batches.append(Batch(tuple(current), n_workers, tokens_per_worker))
    return batches


def generate_batch(spec: DistributionSpec, seed: int, n_workers: int,
                   tokens_per_worker: int) -> Batch:
    """Generate a single budget-filling batch (used by weak-scaling sweeps).

    Draws a deterministic oversized trace and keeps the longest prefix that
    fits n_workers * tokens_per_worker tokens.
    """
    budget = n_workers * tokens_per_worker
    upper = budget // spec.min_length + 1
    trace = generate_trace(spec, seed, upper)
    prefix: list[Sequence] = []
    used = 0
    for seq in trace:
        if seq.length > budget:
            continue  # a single over-budget draw is unbatchable at this scale
        if used + seq.length > budget:
            break
        prefix.append(seq)
        used += seq.length
    if not prefix:
        raise InfeasibleError(f"no generated sequence fits the batch budget {budget}")
    return Batch(tuple(prefix), n_workers, tokens_per_worker)
