"""Discrete-event simulator for spatially shared GPUs with virtual/physical
contexts, cooperative preemption, migration, and deterministic reductions."""
from .errors import *  # noqa: F401,F403
from .model import (Device, Kernel, MemoryRegion, Phase, PhysicalContext, PriorityClass,
                    QuotaTier, ReductionSpec, VirtualContext, VStatus, BindingTable,
                    create_pool, bind, unbind)
from .runtime import (CostParameters, Decision, DispatchOutcome, MigrationRecord,
                      PreemptionRecord, compute_migration_set, dispatch, migrate)
from .engine import (ContentionSnapshot, Event, EventQueue, SimulationReport, Simulator,
                     fmt_time, kernel_speed, schedule)
from .policies import (DurationPredictor, Policy, SloAwarePolicy, SloSpec,
                       StaticPartitionPolicy, TemporalPolicy, TpotFirstPolicy, get_policy,
                       predict_hol_blocking)
from .determinism import (ReductionPlan, batch_stats_divergence, coupling_delta,
                          divergence_sweep, reduce_exact, reduce_with_plan, round_to,
                          verify_immutable_equivalence)
from .faults import Fault, detect_soft_hang, quarantine
from .workload import RequestTraceRecord, gen_burst, gen_poisson, parse_trace, dump_trace
from .metrics import MetricsReport, compute_metrics, percentile
from .scenario import Scenario, load_scenario, scenario_from_dict

__version__ = "0.1.0"
