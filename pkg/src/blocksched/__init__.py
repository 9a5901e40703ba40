"""Block-level scheduling, communication planning and simulation for
context-parallel attention training."""

from .costmodel import (DEFAULT_EFFICIENCY, CostVector, EfficiencyCurve, HardwareConfig,
                        ModelConfig, arithmetic_intensity_threshold, efficiency,
                        required_bandwidth, unit_costs)
from .distributor import AssignParams, Assignment, UnitLoad, assign, worker_loads
from .errors import (ConsistencyError, InfeasibleError, InternalError, ParameterError,
                     SchedulerError, TraceFormatError)
from .metrics import (SweepConfig, SweepRow, attention_mfu, imbalance_ratio,
                      weak_scaling_sweep)
from .pipeline import ScheduleResult, fcp_schedule
from .planner import (BipartiteMultigraph, CoalescedPlan, CommPlan, Edge, build_comm_graph,
                      coalesce, decompose_matchings, stage_ordering)
from .sharding import (Chunk, DependencyMap, ScheduleUnit, ShardingConfig, kv_dependencies,
                       pack_short_sequences, shard_batch, zigzag_pairs)
from .simulator import (SimOptions, SimReport, reshuffle_cost, simulate,
                        simulate_random_order)
from .workload import (Batch, DistributionSpec, Sequence, build_batches, generate_trace,
                       load_trace, save_trace)

__version__ = "0.1.0"
