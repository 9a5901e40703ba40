from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blocksched.costmodel import (DEFAULT_EFFICIENCY, HardwareConfig, ModelConfig,
                                  batch_token_pairs)
from blocksched.distributor import AssignParams
from blocksched.errors import InfeasibleError
from blocksched.pipeline import fcp_schedule
from blocksched.planner import is_matching
from blocksched.sharding import ShardingConfig
from blocksched.simulator import simulate
from blocksched.workload import Batch, Sequence

CFG = ModelConfig()
CURVE = DEFAULT_EFFICIENCY
HW = HardwareConfig()


@given(st.lists(st.integers(min_value=1, max_value=20000), min_size=1, max_size=12),
       st.integers(min_value=2, max_value=8),
       st.sampled_from([1024, 2048, 4096]))
@settings(max_examples=40, deadline=None)
def test_whole_pipeline_invariants(lengths, n_workers, block_size):
    batch = Batch(tuple(Sequence(i, l) for i, l in enumerate(lengths)),
                  n_workers, 1 << 20)
    sharding = ShardingConfig(block_size=block_size)
    result = fcp_schedule(batch, n_workers, sharding, CFG, CURVE,
                          params=AssignParams(), coalesce_degree=4)

    # Token conservation and complete assignment.
    assert sum(u.token_count for u in result.units) == sum(lengths)
    assert sorted(result.assignment.workers) == sorted(u.unit_id for u in result.units)

    # Every congestion-free round is a matching; coalesced stages stay within
    # the degree bound; the union of rounds covers the traffic exactly once.
    for stage in result.sub_stage_plan.sub_stages:
        assert is_matching(stage)
    for stage in result.plan.stages:
        sends = Counter(e.src for e in stage)
        recvs = Counter(e.dst for e in stage)
        assert all(v <= result.plan.degree for v in sends.values())
        assert all(v <= result.plan.degree for v in recvs.values())
    round_edges = Counter((e.src, e.dst, e.chunks)
                          for s in result.sub_stage_plan.sub_stages for e in s)
    stage_edges = Counter((e.src, e.dst, e.chunks)
                          for s in result.plan.stages for e in s)
    assert round_edges == stage_edges

    # The simulation respects the compute lower bound and conserves work.
    report = simulate(result.assignment, result.plan, result.units, result.deps,
                      HW, CFG, CURVE)
    assert report.total_time >= report.max_compute_time - 1e-15
    expected = batch_token_pairs(list(lengths), sharding.mask)
    assert report.total_flops == pytest.approx(expected * CFG.flops_per_token_pair,
                                               rel=1e-12)


def test_delta_retry_escalates_until_feasible():
    # Five 4K blocks on two workers: a 10240-token cap only admits the
    # unavoidable 3-unit worker once delta reaches 0.2 (two doublings).
    batch = Batch((Sequence(0, 20480),), 2, 20480)
    params = AssignParams(mem_limit=10240.0, delta=0.05)
    result = fcp_schedule(batch, 2, ShardingConfig(), CFG, CURVE, params=params)
    assert result.params.delta == pytest.approx(0.2)
    assert max(result.assignment.memory) <= 10240 * 1.2 + 1e-9

    with pytest.raises(InfeasibleError):
        fcp_schedule(batch, 2, ShardingConfig(), CFG, CURVE, params=params,
                     delta_retries=1)
