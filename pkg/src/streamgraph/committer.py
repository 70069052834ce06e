"""Turn edge tables into idempotent graph statements and push them to a sink.

Statements are MERGE-based and deterministic: nodes sorted by (label, key),
edges in edge-id order, properties sorted by name, values escaped. Re-running
a batch can only change edge counts (which accumulate on match), never the
set of nodes or edges.

Three sinks: an in-memory mock with a synthetic CPU response (the default
test double), a file sink that writes one .cypher file per batch, and a thin
wire sink that hands statement text to a caller-supplied runner.
"""

from __future__ import annotations

import logging
import math
import random
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import framing
from .edge_table import EdgeTable, Ident
from .metrics import PerfSample

log = logging.getLogger(__name__)


class SinkError(RuntimeError):
    """Permanent sink failure after retries were exhausted."""


# -- statement text ----------------------------------------------------------


def _ident(name: str) -> str:
    return "`" + name.replace("`", "``") + "`"


def _value(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        s = (v.replace("\\", "\\\\").replace("'", "\\'")
             .replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t"))
        return f"'{s}'"
    raise TypeError(f"unsupported property value type: {type(v).__name__}")


def _prop_map(props: dict) -> str:
    parts = [f"{_ident(k)}: {_value(v)}" for k, v in sorted(props.items())]
    return "{" + ", ".join(parts) + "}"


@dataclass(frozen=True)
class NodeOp:
    label: str
    key: str
    props: dict = field(hash=False, compare=False, default_factory=dict)


@dataclass(frozen=True)
class EdgeOp:
    start: Ident
    end: Ident
    label: str
    count: int
    props: dict = field(hash=False, compare=False, default_factory=dict)


@dataclass
class StatementBatch:
    """One bucket's worth of statements plus their structured form."""

    node_statements: list[str]
    edge_statements: list[str]
    node_ops: list[NodeOp]
    edge_ops: list[EdgeOp]
    n_source_records: int
    bucket_index: int

    @property
    def statements(self) -> list[str]:
        return self.node_statements + self.edge_statements

    @property
    def total_statements(self) -> int:
        return len(self.node_statements) + len(self.edge_statements)


def build_statements(table: EdgeTable, bucket_index: int) -> StatementBatch:
    """Deterministic statement batch for one table.

    Every node in the table's index gets a MERGE (covering endpoint nodes
    and node-only mappings alike); every row gets a MERGE whose count
    accumulates when the edge already exists in the store.
    """
    node_stmts: list[str] = []
    node_ops: list[NodeOp] = []
    for label, key in sorted(table.index.idents()):
        props = table.index.props((label, key))
        stmt = f"MERGE (n:{_ident(label)} {{key: {_value(key)}}})"
        if props:
            stmt += f" ON CREATE SET n += {_prop_map(props)}"
        node_stmts.append(stmt)
        node_ops.append(NodeOp(label, key, dict(props)))

    edge_stmts: list[str] = []
    edge_ops: list[EdgeOp] = []
    for row in table.rows:
        sl, sk = row.start.ident
        el, ek = row.end.ident
        props = dict(row.props)
        count = props["count"]
        stmt = (
            f"MATCH (a:{_ident(sl)} {{key: {_value(sk)}}})"
            f" MATCH (b:{_ident(el)} {{key: {_value(ek)}}})"
            f" MERGE (a)-[r:{_ident(row.label)}]->(b)"
            f" ON CREATE SET r += {_prop_map(props)}"
            f" ON MATCH SET r.`count` = r.`count` + {count}"
        )
        edge_stmts.append(stmt)
        edge_ops.append(EdgeOp(row.start.ident, row.end.ident, row.label,
                               count, props))
    return StatementBatch(node_stmts, edge_stmts, node_ops, edge_ops,
                          table.meta.n_raw_records, bucket_index)


def compression_ratio(batch: StatementBatch, uncompressed_count: int) -> float:
    """Batch statement volume relative to its dedup-free equivalent.

    Stays in (0, 1]: a batch that deduplicated nothing scores 1.0, and an
    empty batch is defined as 1.0 (nothing to compress).
    """
    total = batch.total_statements
    if uncompressed_count <= 0 or total == 0:
        return 1.0
    if total > uncompressed_count:
        raise ValueError(
            f"batch has {total} statements but uncompressed count is "
            f"{uncompressed_count}")
    return total / uncompressed_count


# -- sinks -------------------------------------------------------------------


@dataclass(frozen=True)
class SinkReport:
    committed: bool
    latency: float
    statements_applied: int
    error: str | None = None

    def __post_init__(self):
        if not self.committed and self.error is None:
            raise ValueError("failed sink report must carry an error")


class MockDbSink:
    """In-memory graph store with a synthetic CPU response.

    CPU follows a first-order recurrence: each second it decays toward a
    floor, and an applied batch adds a drive term that grows with the log of
    the statement count. Latency is affine in statement count, inflated by a
    congestion factor once CPU crosses 90 percent.
    """

    def __init__(self, decay: float = 0.6, load_gain: float = 8.0,
                 floor: float = 5.0, noise_sigma: float = 1.0,
                 seed: int = 0, latency_base: float = 0.05,
                 latency_per_statement: float = 0.0002,
                 mem_available: int = 8 << 30):
        self.decay = decay
        self.load_gain = load_gain
        self.floor = floor
        self.noise_sigma = noise_sigma
        self.latency_base = latency_base
        self.latency_per_statement = latency_per_statement
        self.mem_available = mem_available
        self.nodes: dict[Ident, dict] = {}
        self.edges: dict[tuple[Ident, Ident, str], dict] = {}
        self._rng = random.Random(seed)
        self._cpu = floor / max(1.0 - decay, 1e-6)  # start at the idle fixed point
        self._stepped_until = 0.0
        self._fail_budget = 0
        self.unreachable = False
        self.batches_applied = 0

    # CPU evolves on a one-second grid; idle seconds just decay.
    def _advance(self, now: float) -> None:
        while self._stepped_until + 1.0 <= now:
            self._cpu = self._clamp(self.decay * self._cpu + self.floor
                                    + self._rng.gauss(0.0, self.noise_sigma))
            self._stepped_until += 1.0

    @staticmethod
    def _clamp(v: float) -> float:
        return min(100.0, max(0.0, v))

    def fail_next(self, n: int) -> None:
        """Make the next n apply() calls fail (transient error injection)."""
        self._fail_budget = n

    def sample(self, now: float) -> PerfSample:
        self._advance(now)
        cpu = self._cpu
        return PerfSample(ts=now, cpu_user=cpu,
                          mem_available=self.mem_available,
                          ctx_switches=900.0 + 40.0 * cpu,
                          interrupts=400.0 + 15.0 * cpu)

    def apply(self, batch: StatementBatch, now: float) -> SinkReport:
        self._advance(now)
        n = batch.total_statements
        latency = self.latency_base + self.latency_per_statement * n
        if self._cpu > 90.0:
            # Saturated CPU pins the factor rather than dividing by zero.
            latency *= 1.0 / max(1.0 - self._cpu / 100.0, 0.01)
        if self.unreachable:
            return SinkReport(False, latency, 0, "sink unreachable")
        if self._fail_budget > 0:
            self._fail_budget -= 1
            return SinkReport(False, latency, 0, "injected transient failure")
        for op in batch.node_ops:
            self.nodes.setdefault((op.label, op.key), dict(op.props))
        for op in batch.edge_ops:
            key = (op.start, op.end, op.label)
            existing = self.edges.get(key)
            if existing is None:
                self.edges[key] = dict(op.props)
            else:
                existing["count"] = existing.get("count", 0) + op.count
        self._cpu = self._clamp(self.decay * self._cpu
                                + self.load_gain * math.log1p(n)
                                + self.floor
                                + self._rng.gauss(0.0, self.noise_sigma))
        self._stepped_until = max(self._stepped_until, math.floor(now)) + 1.0
        self.batches_applied += 1
        return SinkReport(True, latency, n)

    def integrity_violations(self) -> list[str]:
        """Edges whose endpoints are not in the node store (should be none)."""
        out = []
        for (start, end, label) in self.edges:
            if start not in self.nodes:
                out.append(f"edge {label} start {start} has no node")
            if end not in self.nodes:
                out.append(f"edge {label} end {end} has no node")
        return out


class FileSink:
    """Writes each batch as <out_dir>/batch-<index>.cypher, one statement
    per line, UTF-8 with trailing newline."""

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.batches_applied = 0

    def sample(self, now: float) -> PerfSample:
        return PerfSample(ts=now, cpu_user=0.0, mem_available=8 << 30)

    def apply(self, batch: StatementBatch, now: float) -> SinkReport:
        t0 = time.perf_counter()
        target = self.out_dir / f"batch-{batch.bucket_index}.cypher"
        text = "\n".join(batch.statements)
        target.write_text(text + "\n" if text else "", encoding="utf-8")
        self.batches_applied += 1
        return SinkReport(True, time.perf_counter() - t0,
                          batch.total_statements)


class WireSink:
    """Adapter for a real database client: runner gets the statement list.

    Not used by the test suite; exists so a live endpoint can be wired in
    without touching the engine.
    """

    def __init__(self, runner):
        self.runner = runner
        self.batches_applied = 0

    def sample(self, now: float) -> PerfSample:
        return PerfSample(ts=now, cpu_user=0.0, mem_available=8 << 30)

    def apply(self, batch: StatementBatch, now: float) -> SinkReport:
        t0 = time.perf_counter()
        try:
            self.runner(batch.statements)
        except Exception as exc:  # transport owns the failure taxonomy
            return SinkReport(False, time.perf_counter() - t0, 0, str(exc))
        self.batches_applied += 1
        return SinkReport(True, time.perf_counter() - t0,
                          batch.total_statements)


# -- archive and push --------------------------------------------------------


class Archive:
    """Failed-batch archive: raw records plus the statement text.

    A stored batch can be replayed later by re-transforming its records,
    which reproduces the statements bit for bit (the pipeline is
    deterministic in the record sequence).
    """

    def __init__(self, root: str | Path, run_id: str):
        self.dir = Path(root) / run_id
        self.dir.mkdir(parents=True, exist_ok=True)

    def store(self, batch: StatementBatch, records=None) -> Path:
        cypher = self.dir / f"batch-{batch.bucket_index}.cypher"
        text = "\n".join(batch.statements)
        cypher.write_text(text + "\n" if text else "", encoding="utf-8")
        if records is not None:
            frames = [framing.encode_record(r.payload, r.arrival_ms, r.source_seq)
                      for r in records]
            framing.write_segment(self.dir / f"batch-{batch.bucket_index}.records",
                                  frames)
        return cypher

    def batch_indices(self) -> list[int]:
        return sorted(int(p.stem.split("-", 1)[1])
                      for p in self.dir.glob("batch-*.records"))

    def load_records(self, index: int):
        from .stream_source import RawRecord
        frames = framing.read_segment(self.dir / f"batch-{index}.records")
        return [RawRecord(*framing.decode_record(f)) for f in frames]


def push(batch: StatementBatch, sink, *, now: float = 0.0, retries: int = 3,
         pool: threading.Semaphore | None = None, archive: Archive | None = None,
         records=None) -> SinkReport:
    """Apply a batch with bounded retries; archive it if all attempts fail.

    The pool semaphore bounds in-flight batches; waiting for a slot counts
    toward the reported latency.
    """
    t0 = time.perf_counter()
    if pool is not None:
        pool.acquire()
    try:
        report = None
        for attempt in range(1 + retries):
            report = sink.apply(batch, now)
            if report.committed:
                break
            log.warning("push of batch %d failed (attempt %d/%d): %s",
                        batch.bucket_index, attempt + 1, 1 + retries,
                        report.error)
        assert report is not None
    finally:
        if pool is not None:
            pool.release()
    if not report.committed and archive is not None:
        archive.store(batch, records)
        log.error("batch %d archived after %d failed attempts",
                  batch.bucket_index, 1 + retries)
    wall = time.perf_counter() - t0
    return SinkReport(report.committed, max(report.latency, wall)
                      if pool is not None else report.latency,
                      report.statements_applied, report.error)
