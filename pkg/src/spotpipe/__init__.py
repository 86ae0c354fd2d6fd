"""Simulator for resilient pipeline-parallel training on preemptible nodes."""
from .profile import (ClusterSpec, CommModel, InvalidConfiguration, LayerCost, ModelProfile,
                      StageCosts, StagePartition, partition_layers, stage_times)
from .schedule import Instruction, Kind, RCMode, Schedule, generate_1f1b, generate_gpipe, merge_failover, plan_frc
from .engine import KERNEL, EngineParams, InfeasibleRun, IterationTrace, execute_iteration, measure_bubble, rc_overhead
from .resilience import Bamboo, CheckpointRestart, ResilienceParams, SampleDrop, recovery_pause, reconfigure
from .churn import ChurnEvent, ChurnModel, TraceError, load_trace, place_nodes, synthesize, write_trace
from .metrics import PRICES, BatchSummary, RunResult, cost_rate, summarize_batch, throughput, value
from .runner import DataParallelConfig, RunConfig, ideal_throughput, simulate, simulate_data_parallel

__version__ = "0.1.0"

__all__ = [
    "ClusterSpec", "CommModel", "InvalidConfiguration", "LayerCost", "ModelProfile", "StageCosts",
    "StagePartition", "partition_layers", "stage_times",
    "Instruction", "Kind", "RCMode", "Schedule", "generate_1f1b", "generate_gpipe", "merge_failover", "plan_frc",
    "KERNEL", "EngineParams", "InfeasibleRun", "IterationTrace", "execute_iteration", "measure_bubble",
    "rc_overhead",
    "Bamboo", "CheckpointRestart", "ResilienceParams", "SampleDrop", "recovery_pause", "reconfigure",
    "ChurnEvent", "ChurnModel", "TraceError", "load_trace", "place_nodes", "synthesize", "write_trace",
    "PRICES", "BatchSummary", "RunResult", "cost_rate", "summarize_batch", "throughput", "value",
    "DataParallelConfig", "RunConfig", "ideal_throughput", "simulate", "simulate_data_parallel",
]
