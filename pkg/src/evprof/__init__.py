"""Trace-driven evasion profiler.

Detects and mitigates anti-dynamic-analysis techniques over replayed
process-execution traces, and aggregates per-sample reports into
corpus-level statistics.
"""

from .catalog import (
    DetectionRecord,
    FP_PRONE_TECHNIQUES,
    RULES,
    TechniqueRule,
    apply_mitigation,
    catalog_listing,
    is_fp_prone,
    match_event,
)
from .clock import VirtualClock
from .config import ClockConfig, RunConfig
from .injection import InjectionRouter
from .memory import MemoryRegion, MemoryTracker, WatchPoint
from .profiler import SampleProfiler, SampleReport, run_sample, timeline_slot
from .trace import (
    Diagnostic,
    TraceError,
    TraceEvent,
    parse_trace,
    parse_trace_file,
    serialize_event,
    serialize_trace,
    validate_trace,
)

__version__ = "0.1.0"
