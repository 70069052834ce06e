"""Content and performance metrics that drive buffer control.

Two families live here: graph-shape signals computed from staged buckets
(density, diversity of newly seen nodes) and time-series helpers over
performance samples (velocity, trend slope, cumulative delay).
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .edge_table import EdgeTable, Ident


@dataclass(frozen=True)
class PerfSample:
    """One reading from a performance provider."""

    ts: float
    cpu_user: float            # percent, 0..100
    mem_available: int         # bytes
    ctx_switches: float = 0.0  # per second
    interrupts: float = 0.0    # per second

    def __post_init__(self):
        if not 0.0 <= self.cpu_user <= 100.0:
            raise ValueError(f"cpu_user out of range: {self.cpu_user}")


@dataclass(frozen=True)
class BucketMeta:
    """Shape summary of one staged bucket."""

    index: int
    n_raw_records: int
    n_nodes: int
    n_edges: int
    n_new_nodes: int
    first_arrival_ms: float | None = None
    last_arrival_ms: float | None = None


def density(table: EdgeTable) -> float:
    """Graph density 2|E| / (|V| (|V|-1)), clamped to [0, 1].

    Fewer than two nodes means density 0. Because edges are directed and the
    numerator uses the undirected convention, a saturated directed graph
    would hit 2; values are clamped at 1.
    """
    v = table.n_nodes
    if v < 2:
        return 0.0
    d = 2.0 * table.n_edges / (v * (v - 1))
    return min(d, 1.0)


class BucketHistory:
    """Sliding record of recent buckets' node-key sets.

    A node counts as new when it was absent from the union of the previous
    ``window`` buckets' key sets; the first bucket is all new by definition.
    """

    def __init__(self, window: int = 5):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._key_sets: deque[frozenset[Ident]] = deque(maxlen=window)
        self.metas: list[BucketMeta] = []

    def observe(self, table: EdgeTable) -> BucketMeta:
        keys = frozenset(table.index.idents())
        seen: set[Ident] = set()
        for s in self._key_sets:
            seen |= s
        meta = BucketMeta(
            index=len(self.metas),
            n_raw_records=table.meta.n_raw_records,
            n_nodes=len(keys),
            n_edges=table.n_edges,
            n_new_nodes=len(keys - seen),
            first_arrival_ms=table.meta.first_arrival_ms,
            last_arrival_ms=table.meta.last_arrival_ms,
        )
        self._key_sets.append(keys)
        self.metas.append(meta)
        return meta


def diversity_ratio(history: BucketHistory, window: int | None = None) -> float:
    """Mean share of new nodes over the most recent buckets.

    Buckets with zero nodes are excluded from the mean; with no usable
    buckets at all the stream is treated as maximally diverse (1.0).
    """
    k = window if window is not None else history.window
    if k < 1:
        raise ValueError("window must be >= 1")
    recent = history.metas[-k:]
    shares = [m.n_new_nodes / m.n_nodes for m in recent if m.n_nodes > 0]
    if not shares:
        return 1.0
    return float(sum(shares) / len(shares))


def velocity_and_slope(values, timestamps=None, window: int = 10
                       ) -> tuple[float | None, float | None]:
    """Backward-difference velocity and least-squares trend slope.

    Velocity needs two samples, the slope needs two inside the trailing
    window; with fewer, the corresponding result is None and callers fall
    back to treating the trend as flat.
    """
    vals = list(values)
    n = len(vals)
    if timestamps is None:
        ts = list(range(n))
    else:
        ts = list(timestamps)
        if len(ts) != n:
            raise ValueError("timestamps and values must have equal length")
    velocity = None
    if n >= 2:
        dt = ts[-1] - ts[-2]
        velocity = (vals[-1] - vals[-2]) / dt if dt > 0 else None
    slope = None
    tail_v = vals[-window:]
    tail_t = ts[-window:]
    if len(tail_v) >= 2 and max(tail_t) > min(tail_t):
        slope = float(np.polyfit(tail_t, tail_v, 1)[0])
    return velocity, slope


@dataclass
class DelayLedger:
    """Cumulative ingestion delay: buffer wait plus sink latency per bucket."""

    entries: dict[int, tuple[float, float]] = field(default_factory=dict)

    def record_delay(self, bucket_index: int, buffer_wait: float,
                     sink_latency: float) -> None:
        if buffer_wait < 0 or sink_latency < 0:
            raise ValueError(
                f"bucket {bucket_index}: delay components must be >= 0, "
                f"got buffer_wait={buffer_wait}, sink_latency={sink_latency}")
        self.entries[bucket_index] = (buffer_wait, sink_latency)

    def total_delay(self) -> float:
        return float(sum(b + s for b, s in self.entries.values()))
