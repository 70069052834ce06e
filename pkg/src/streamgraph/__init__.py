"""Adaptive ingestion of JSON record streams into a property graph.

The pipeline: a replayed or live JSON stream is filtered, buffered into
buckets, transformed into a deduplicated edge table, rendered as batch
statements and pushed to a graph sink. A feedback controller sizes the
buffer and paces pushes against the sink's CPU, spilling to disk when the
sink cannot keep up.
"""

from .clock import SimClock, WallClock
from .committer import (
    Archive,
    FileSink,
    MockDbSink,
    SinkError,
    StatementBatch,
    WireSink,
    build_statements,
    compression_ratio,
    push,
)
from .controller import (
    Action,
    ActionKind,
    ConfigError,
    ControllerConfig,
    Engine,
    RunReport,
    SpillQueue,
    run_loop,
)
from .edge_table import EdgeTable, NodeRef, build_table, create_edges, insert_edge
from .mapping import MappingConfig, MappingError, extract_edges, extract_nodes, load_mapping
from .metrics import BucketHistory, DelayLedger, PerfSample, density, diversity_ratio
from .predictor import (
    BufferModel,
    CpuModel,
    FitError,
    candidate_basis_sweep,
    fit_buffer_model,
    fit_cpu_model,
    predict_buffer,
    predict_cpu,
)
from .stream_source import FilterSpec, RateSchedule, RawRecord, Segment, apply_filter, open_replay

__version__ = "0.1.0"

__all__ = [
    "Action",
    "ActionKind",
    "Archive",
    "BucketHistory",
    "BufferModel",
    "ConfigError",
    "ControllerConfig",
    "CpuModel",
    "DelayLedger",
    "EdgeTable",
    "Engine",
    "FileSink",
    "FilterSpec",
    "FitError",
    "MappingConfig",
    "MappingError",
    "MockDbSink",
    "NodeRef",
    "PerfSample",
    "RateSchedule",
    "RawRecord",
    "RunReport",
    "Segment",
    "SimClock",
    "SinkError",
    "SpillQueue",
    "StatementBatch",
    "WallClock",
    "WireSink",
    "apply_filter",
    "build_statements",
    "build_table",
    "candidate_basis_sweep",
    "compression_ratio",
    "create_edges",
    "density",
    "diversity_ratio",
    "extract_edges",
    "extract_nodes",
    "fit_buffer_model",
    "fit_cpu_model",
    "insert_edge",
    "load_mapping",
    "open_replay",
    "predict_buffer",
    "predict_cpu",
    "push",
    "run_loop",
]
