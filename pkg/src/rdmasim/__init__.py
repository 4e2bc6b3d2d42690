"""Discrete-event simulator for RDMA request batching, admission control
and completion polling."""

from .admission import TrafficRegulator
from .batching import Batcher, BatchMode, BatchPolicy, MergeQueue, merge_check
from .config import ConfigError
from .kernel import Simulator, SimulationError
from .nic import MrCostModel, Nic, NicConfig
from .polling import Adaptive, Busy, CpuModel, EventBatch, EventTriggered, Hybrid, Poller, SharedCq
from .scenario import Scenario, run
from .workload import TraceRecord, gen_burst, gen_kv, load_trace, save_trace

__all__ = [
    "Adaptive",
    "Batcher",
    "BatchMode",
    "BatchPolicy",
    "Busy",
    "ConfigError",
    "CpuModel",
    "EventBatch",
    "EventTriggered",
    "Hybrid",
    "MergeQueue",
    "MrCostModel",
    "Nic",
    "NicConfig",
    "Poller",
    "Scenario",
    "SharedCq",
    "SimulationError",
    "Simulator",
    "TraceRecord",
    "TrafficRegulator",
    "gen_burst",
    "gen_kv",
    "load_trace",
    "merge_check",
    "run",
    "save_trace",
]
