"""In-memory edge-centric staging table with duplicate folding.

A bucket of records is transformed into an EdgeTable before it is turned into
database statements. Repeated edges collapse into a single row whose ``count``
property carries the multiplicity; nodes are registered once per (label, key).
The table is what makes batch compression measurable: statement volume is
``len(index) + len(rows)`` no matter how many raw tuples went in.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

log = logging.getLogger(__name__)

Ident = tuple[str, str]  # (label, key) is the sole node identity


@dataclass(frozen=True)
class NodeRef:
    """Reference to a graph node extracted from one record."""

    label: str
    key: str
    props: dict = field(default_factory=dict, hash=False, compare=False)

    @property
    def ident(self) -> Ident:
        return (self.label, self.key)

    def canonical(self) -> str:
        return f"{self.label}:{self.key}"


@dataclass
class EdgeRow:
    """One deduplicated edge. count >= 1 tracks folded duplicates."""

    edge_id: int
    start: NodeRef
    end: NodeRef
    label: str
    props: dict

    @property
    def count(self) -> int:
        return self.props["count"]

    @property
    def key(self) -> tuple[Ident, Ident, str]:
        return (self.start.ident, self.end.ident, self.label)


class NodeIndex:
    """Node registry plus adjacency, used for duplicate checks and stats.

    Node properties are fixed by the first write (same visible behaviour as a
    MERGE that only sets properties on create). Adjacency keeps direction so
    that an entry always names an existing row.
    """

    def __init__(self) -> None:
        self._nodes: dict[Ident, dict] = {}
        self._out: dict[Ident, set[tuple[Ident, str]]] = {}
        self._in: dict[Ident, set[tuple[Ident, str]]] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def __contains__(self, ident: Ident) -> bool:
        return ident in self._nodes

    def idents(self) -> Iterable[Ident]:
        return self._nodes.keys()

    def props(self, ident: Ident) -> dict:
        return self._nodes[ident]

    def register(self, ref: NodeRef) -> None:
        """Add a node if unseen; later writes never change its properties."""
        if ref.ident not in self._nodes:
            self._nodes[ref.ident] = dict(ref.props)
            self._out[ref.ident] = set()
            self._in[ref.ident] = set()

    def connect(self, start: NodeRef, end: NodeRef, label: str) -> None:
        self.register(start)
        self.register(end)
        self._out[start.ident].add((end.ident, label))
        self._in[end.ident].add((start.ident, label))

    def out_adjacency(self, ident: Ident) -> set[tuple[Ident, str]]:
        return self._out[ident]

    def in_adjacency(self, ident: Ident) -> set[tuple[Ident, str]]:
        return self._in[ident]

    def neighbours(self, ident: Ident) -> set[Ident]:
        """Undirected view, the duplicate-check lookup."""
        return {n for n, _ in self._out[ident]} | {n for n, _ in self._in[ident]}


@dataclass
class TableMeta:
    """Bookkeeping carried by a table; merged additively."""

    n_raw_records: int = 0
    n_node_occurrences: int = 0
    n_edge_occurrences: int = 0
    n_skipped_tuples: int = 0
    first_arrival_ms: float | None = None
    last_arrival_ms: float | None = None

    def observe_arrival(self, arrival_ms: float | None) -> None:
        if arrival_ms is None:
            return
        if self.first_arrival_ms is None or arrival_ms < self.first_arrival_ms:
            self.first_arrival_ms = arrival_ms
        if self.last_arrival_ms is None or arrival_ms > self.last_arrival_ms:
            self.last_arrival_ms = arrival_ms

    def absorb(self, other: "TableMeta") -> None:
        self.n_raw_records += other.n_raw_records
        self.n_node_occurrences += other.n_node_occurrences
        self.n_edge_occurrences += other.n_edge_occurrences
        self.n_skipped_tuples += other.n_skipped_tuples
        self.observe_arrival(other.first_arrival_ms)
        self.observe_arrival(other.last_arrival_ms)


class EdgeTable:
    """Rows + node index for one bucket (or a merge of partial buckets)."""

    def __init__(self) -> None:
        self.rows: list[EdgeRow] = []
        self.index = NodeIndex()
        self.meta = TableMeta()
        self._row_by_key: dict[tuple[Ident, Ident, str], EdgeRow] = {}
        self._next_edge_id = 0

    @property
    def n_nodes(self) -> int:
        return len(self.index)

    @property
    def n_edges(self) -> int:
        return len(self.rows)

    @property
    def statement_size(self) -> int:
        """Number of statements this table turns into: one per node + row."""
        return len(self.index) + len(self.rows)

    def uncompressed_statement_count(self) -> int:
        """Statement volume had nothing been deduplicated.

        Every extracted node occurrence would be its own node statement and
        every edge occurrence would emit two endpoint statements plus the
        edge statement.
        """
        return self.meta.n_node_occurrences + 3 * self.meta.n_edge_occurrences

    def register_node(self, ref: NodeRef) -> None:
        self.index.register(ref)
        self.meta.n_node_occurrences += 1

    def find_row(self, start: NodeRef, end: NodeRef, label: str) -> EdgeRow | None:
        return self._row_by_key.get((start.ident, end.ident, label))

    def _insert(self, start: NodeRef, end: NodeRef, label: str, props: dict,
                count: int) -> EdgeRow:
        key = (start.ident, end.ident, label)
        row = self._row_by_key.get(key)
        if row is not None:
            row.props["count"] += count
            return row
        row_props = {k: v for k, v in props.items() if k != "count"}
        row_props["count"] = count
        row = EdgeRow(self._next_edge_id, start, end, label, row_props)
        self._next_edge_id += 1
        self.rows.append(row)
        self._row_by_key[key] = row
        self.index.connect(start, end, label)
        return row


def insert_edge(start: NodeRef, end: NodeRef, label: str, props: dict,
                table: EdgeTable) -> EdgeRow:
    """Upsert one directed edge occurrence.

    A repeat of (start, end, label) increments the existing row's count and
    leaves its other properties alone; endpoints are registered in the index
    either way. (start, end, label) is directional: the reverse pairing is a
    different edge.
    """
    table.meta.n_edge_occurrences += 1
    return table._insert(start, end, label, props, 1)


def create_edges(batch: Sequence, mapping) -> EdgeTable:
    """Transform a batch of records into a fresh EdgeTable.

    ``mapping`` must offer ``nodes_of(payload)`` and ``edges_of(payload)``
    (see streamgraph.mapping). Records may be RawRecord objects or bare
    payload dicts. Runs in one pass over the batch.
    """
    table = EdgeTable()
    for record in batch:
        payload = getattr(record, "payload", record)
        arrival = getattr(record, "arrival_ms", None)
        table.meta.n_raw_records += 1
        table.meta.observe_arrival(arrival)
        nodes, n_skip = mapping.nodes_of(payload)
        for ref in nodes:
            table.register_node(ref)
        table.meta.n_skipped_tuples += n_skip
        edges, e_skip = mapping.edges_of(payload)
        table.meta.n_skipped_tuples += e_skip
        for start, end, label, props in edges:
            insert_edge(start, end, label, props, table)
    return table


def merge_tables(parts: Sequence[EdgeTable]) -> EdgeTable:
    """Fold partial tables (in order) into one, re-accumulating counts.

    Equivalent to building a single table from the concatenated batches:
    node properties keep their first writer, duplicate rows across parts sum
    their counts, and edge ids are reassigned in first-occurrence order.
    """
    merged = EdgeTable()
    for part in parts:
        for ident in part.index.idents():
            label, key = ident
            merged.index.register(NodeRef(label, key, part.index.props(ident)))
        for row in part.rows:
            merged._insert(row.start, row.end, row.label, row.props, row.count)
        merged.meta.absorb(part.meta)
    return merged


def build_table(batch: Sequence, mapping, workers: int = 1) -> EdgeTable:
    """create_edges, optionally split across worker threads then merged."""
    if workers <= 1 or len(batch) < workers * 2:
        return create_edges(batch, mapping)
    from concurrent.futures import ThreadPoolExecutor

    step = (len(batch) + workers - 1) // workers
    chunks = [batch[i:i + step] for i in range(0, len(batch), step)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda c: create_edges(c, mapping), chunks))
    return merge_tables(parts)


def dump_csv(table: EdgeTable, path: str | Path) -> None:
    """Debug dump of the rows; not part of the ingest path."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["edge_id", "start", "end", "label", "count"])
        for row in table.rows:
            writer.writerow([row.edge_id, row.start.canonical(),
                             row.end.canonical(), row.label, row.count])


def timed_create(batch: Sequence, mapping) -> tuple[EdgeTable, float]:
    t0 = time.perf_counter()
    table = create_edges(batch, mapping)
    return table, time.perf_counter() - t0
