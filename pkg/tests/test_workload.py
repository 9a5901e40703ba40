import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksched.errors import InfeasibleError, ParameterError, TraceFormatError
from blocksched.workload import (DistributionSpec, Sequence, build_batches,
                                 generate_batch, generate_trace, load_trace, save_trace,
                                 trace_tokens)


def test_lognormal_trace_mean_within_10pct():
    spec = DistributionSpec.lognormal(0.7, 16384, min_length=1024, max_length=524288)
    trace = generate_trace(spec, seed=7, count=10000)
    assert len(trace) == 10000
    mean = trace_tokens(trace) / len(trace)
    assert abs(mean - 16384) / 16384 < 0.10


def test_generation_is_deterministic():
    spec = DistributionSpec.lognormal(0.7, 16384, min_length=1024, max_length=524288)
    a = generate_trace(spec, seed=3, count=500)
    b = generate_trace(spec, seed=3, count=500)
    assert a == b
    c = generate_trace(spec, seed=4, count=500)
    assert a != c


def test_degenerate_truncation_pins_all_lengths():
    spec = DistributionSpec.lognormal(0.7, 16384, min_length=4096, max_length=4096)
    trace = generate_trace(spec, seed=0, count=100)
    assert all(s.length == 4096 for s in trace)


def test_bimodal_trace_shows_two_modes():
    spec = DistributionSpec.bimodal(0.5, 16384, 0.5, 65536,
                                    min_length=1024, max_length=524288)
    trace = generate_trace(spec, seed=11, count=20000)
    logs = [math.log2(s.length) for s in trace]
    # Histogram over log2-length; modes should sit near 14 (16K) and 16 (64K)
    # with a valley between them.
    lo = sum(1 for x in logs if 13.5 <= x < 14.5)
    mid = sum(1 for x in logs if 14.5 <= x < 15.5)
    hi = sum(1 for x in logs if 15.5 <= x < 16.5)
    assert lo > mid and hi > mid
    assert lo > 3000 and hi > 3000


def test_truncation_bounds_respected():
    spec = DistributionSpec.lognormal(1.2, 16384, min_length=2048, max_length=32768)
    trace = generate_trace(spec, seed=5, count=5000)
    assert all(2048 <= s.length <= 32768 for s in trace)


def test_invalid_specs_rejected():
    with pytest.raises(ParameterError):
        DistributionSpec.lognormal(0.7, -5)
    with pytest.raises(ParameterError):
        DistributionSpec(components=(), weights=())
    with pytest.raises(ParameterError):
        DistributionSpec.mixture([(0.5, 1000), (0.5, 2000)], [0.8, 0.8])
    with pytest.raises(ParameterError):
        DistributionSpec.lognormal(0.7, 16384, min_length=100, max_length=50)
    spec = DistributionSpec.lognormal(0.7, 16384)
    with pytest.raises(ParameterError):
        generate_trace(spec, seed=0, count=0)


def test_trace_round_trip(tmp_path):
    path = tmp_path / "trace.jsonl"
    trace = [Sequence(0, 8192), Sequence(1, 1024)]
    save_trace(trace, path)
    assert load_trace(path) == trace


def test_load_trace_empty_file_is_valid(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_trace(path) == []


def test_load_trace_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "len": 8192}\n{"id": 1, "len": 0}\n')
    with pytest.raises(TraceFormatError) as err:
        load_trace(path)
    assert err.value.line == 2

    path.write_text('{"id": 0, "len": 10}\n{"id": 0, "len": 20}\n')
    with pytest.raises(TraceFormatError, match="duplicate"):
        load_trace(path)

    path.write_text("not json\n")
    with pytest.raises(TraceFormatError) as err:
        load_trace(path)
    assert err.value.line == 1


def test_build_batches_first_fit_example():
    # Three 32K sequences into a 2 x 32K budget: two fit, the third overflows.
    trace = [Sequence(i, 32768) for i in range(3)]
    batches = build_batches(trace, n_workers=2, tokens_per_worker=32768)
    assert [len(b.sequences) for b in batches] == [2, 1]
    assert [s.id for s in batches[0].sequences] == [0, 1]


def test_build_batches_exact_fit_single_sequence():
    batches = build_batches([Sequence(0, 65536)], n_workers=2, tokens_per_worker=32768)
    assert len(batches) == 1 and len(batches[0].sequences) == 1


def test_build_batches_oversized_sequence_errors():
    with pytest.raises(InfeasibleError):
        build_batches([Sequence(0, 65537)], n_workers=2, tokens_per_worker=32768)


@given(st.lists(st.integers(min_value=1, max_value=5000), min_size=0, max_size=60),
       st.integers(min_value=1, max_value=8),
       st.integers(min_value=1000, max_value=8000))
@settings(max_examples=60, deadline=None)
def test_build_batches_conserves_and_respects_budget(lengths, n_workers, per_worker):
    budget = n_workers * per_worker
    trace = [Sequence(i, l) for i, l in enumerate(lengths) if l <= budget]
    batches = build_batches(trace, n_workers, per_worker)
    ids = [s.id for b in batches for s in b.sequences]
    assert sorted(ids) == sorted(s.id for s in trace)
    assert sum(b.total_tokens for b in batches) == trace_tokens(trace)
    assert all(b.total_tokens <= budget for b in batches)


def test_generate_batch_fills_budget():
    spec = DistributionSpec.lognormal(0.7, 16384, min_length=1024, max_length=524288)
    batch = generate_batch(spec, seed=2, n_workers=16, tokens_per_worker=32768)
    assert batch.total_tokens <= batch.token_budget
    # A lognormal at mean 16K should get within one max-length of the budget.
    assert batch.total_tokens > batch.token_budget - 524288
    assert batch == generate_batch(spec, seed=2, n_workers=16, tokens_per_worker=32768)


def test_generate_batch_infeasible_when_nothing_fits():
    spec = DistributionSpec.lognormal(0.1, 8192, min_length=8192, max_length=8192)
    with pytest.raises(InfeasibleError):
        generate_batch(spec, seed=0, n_workers=1, tokens_per_worker=1024)
