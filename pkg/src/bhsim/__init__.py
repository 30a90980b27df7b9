"""bhsim: a deterministic simulator of history-based branch prediction and
the speculative side-channel primitives it enables.

The package models global branch history (pure path history or a hybrid
outcome-buffer/path-history pair), bias-free history filtering through a
branch status table, a tagged multi-table predictor with congruence-pressure
eviction, and a speculative execution engine with checkpointed history and
retained cache fills.  On top of that it ships scenario harnesses for four
attack primitives (BiasScope, Spectre-BSE, Spectre-BHS, Chimera) plus the
mistrain-threshold and speculation-window sweeps.
"""

from .config import (BUILTIN_PROFILE_NAMES, ConfigError, HistoryKind,
                     MicroarchProfile, MitigationSet, ScenarioId, ScenarioSpec,
                     UnsupportedScenarioError, builtin_profile, load_profile,
                     load_scenario, serialize_profile, validate_scenario)
from .engine import (CacheModel, Engine, ExecutionReport, inject_noise,
                     probe_latency, run_trace)
from .history import HistoryState, HistoryValue, footprint_of
from .bst import BiasVerdict, BstEntry, BstTable
from .predictor import Prediction, PredictorState, TableEntry
from .scenarios import ScenarioResult, run_scenario, scenario_traces
from .trace import (Branch, BranchKind, TraceBuilder, TraceProgram,
                    dump_trace, parse_trace)

__version__ = "0.1.0"

__all__ = [
    "BUILTIN_PROFILE_NAMES", "BiasVerdict", "Branch", "BranchKind",
    "BstEntry", "BstTable", "CacheModel", "ConfigError", "Engine",
    "ExecutionReport", "HistoryKind", "HistoryState", "HistoryValue",
    "MicroarchProfile", "MitigationSet", "Prediction", "PredictorState",
    "ScenarioId", "ScenarioResult", "ScenarioSpec", "TableEntry",
    "TraceBuilder", "TraceProgram", "UnsupportedScenarioError",
    "builtin_profile", "dump_trace", "footprint_of", "inject_noise",
    "load_profile", "load_scenario", "parse_trace", "probe_latency",
    "run_scenario", "run_trace", "scenario_traces", "serialize_profile",
    "validate_scenario",
]
