"""Record-to-graph mapping driven by an XML config file.

The config names node types (label + key path + property paths) and edge
types (label + two endpoints). Paths are dotted, with a single optional
``[]`` marker to unnest a list, e.g. ``entities.hashtags[].text``. When both
endpoints of an edge unnest, the edge multiplies over the cross product (one
edge per hashtag-mention pair, say).

Extraction is pure: a missing key skips that node or edge and bumps a skip
counter, it never raises and never invents a value.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .edge_table import NodeRef

log = logging.getLogger(__name__)

# Explicit absent marker for failed path resolution. Distinct from None,
# which is a legitimate JSON value.
MISSING = object()

EdgeTuple = tuple[NodeRef, NodeRef, str, dict]


class MappingError(ValueError):
    """Bad mapping file: malformed XML or inconsistent declarations."""


@dataclass(frozen=True)
class PathExpr:
    """Parsed dotted path. At most one segment may carry the [] marker."""

    raw: str
    segments: tuple[str, ...]
    unnest_at: int | None  # index of the [] segment, if any

    @classmethod
    def parse(cls, raw: str) -> "PathExpr":
        if not raw:
            raise MappingError("empty path expression")
        segments = []
        unnest_at = None
        for i, seg in enumerate(raw.split(".")):
            if seg.endswith("[]"):
                seg = seg[:-2]
                if unnest_at is not None:
                    raise MappingError(
                        f"path {raw!r} has more than one [] marker")
                unnest_at = i
            if not seg:
                raise MappingError(f"path {raw!r} has an empty segment")
            segments.append(seg)
        return cls(raw, tuple(segments), unnest_at)

    @property
    def base(self) -> tuple[str, ...] | None:
        """Segments up to and including the unnested list, if any."""
        if self.unnest_at is None:
            return None
        return self.segments[: self.unnest_at + 1]

    @property
    def leaf(self) -> tuple[str, ...]:
        """Segments below the unnest point (whole path when no unnest)."""
        if self.unnest_at is None:
            return self.segments
        return self.segments[self.unnest_at + 1:]


@lru_cache(maxsize=512)
def parse_path(raw: str) -> PathExpr:
    """Memoised PathExpr.parse for per-record hot paths."""
    return PathExpr.parse(raw)


def _walk(obj, segments: tuple[str, ...]):
    for seg in segments:
        if not isinstance(obj, dict) or seg not in obj:
            return MISSING
        obj = obj[seg]
    return obj


def resolve_scalar(payload: dict, path: PathExpr):
    """Value at a plain path, or MISSING. Paths with [] are not scalar."""
    if path.unnest_at is not None:
        return MISSING
    return _walk(payload, path.segments)


def resolve_items(payload: dict, path: PathExpr) -> list[tuple[object, object]]:
    """Resolve a path to (context, value) pairs.

    Without a [] marker this is a single pair with context None. With one,
    each element of the unnested list is a context and the value is the leaf
    inside it; a missing or non-list base yields no pairs at all.
    """
    if path.unnest_at is None:
        value = _walk(payload, path.segments)
        return [] if value is MISSING else [(None, value)]
    base = _walk(payload, path.base)
    if base is MISSING or not isinstance(base, list):
        return []
    out = []
    for element in base:
        value = _walk(element, path.leaf) if isinstance(element, dict) else MISSING
        out.append((element, value))
    return out


def _key_str(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return value if isinstance(value, str) else str(value)


_SCALARS = (str, int, float, bool, type(None))


@dataclass(frozen=True)
class PropertySpec:
    name: str
    path: PathExpr


@dataclass(frozen=True)
class NodeTypeSpec:
    label: str
    key_path: PathExpr
    props: tuple[PropertySpec, ...] = ()
    lowercase_key: bool = False


@dataclass(frozen=True)
class EndpointSpec:
    node_label: str
    key_path: PathExpr
    # None means: inherit the node type's property map, but only when this
    # endpoint uses the node type's own key path (otherwise the node type's
    # paths would resolve against the wrong context).
    props: tuple[PropertySpec, ...] | None = None


@dataclass(frozen=True)
class EdgeTypeSpec:
    label: str
    start: EndpointSpec
    end: EndpointSpec
    props: tuple[PropertySpec, ...] = ()

    @property
    def unnest_paths(self) -> tuple[str, ...]:
        """The list paths this edge multiplies over (0, 1 or 2 of them)."""
        out = []
        for ep in (self.start, self.end):
            if ep.key_path.unnest_at is not None:
                out.append(ep.key_path.raw)
        return tuple(out)


@dataclass
class MappingConfig:
    """Validated mapping: node types by label plus ordered edge types."""

    node_types: dict[str, NodeTypeSpec] = field(default_factory=dict)
    edge_types: list[EdgeTypeSpec] = field(default_factory=list)
    source: str = ""

    # -- extraction ------------------------------------------------------

    def _node_props(self, spec: NodeTypeSpec, payload: dict, context) -> dict:
        return self._eval_props(spec.props, spec.key_path, payload, context)

    @staticmethod
    def _eval_props(props: tuple[PropertySpec, ...], key_path: PathExpr,
                    payload: dict, context) -> dict:
        """Evaluate property paths; ones sharing the key's unnest base read
        from the current element, the rest from the record root."""
        out = {}
        base = key_path.base
        for p in props:
            if base is not None and p.path.base == base and context is not None:
                value = _walk(context, p.path.leaf)
            else:
                value = resolve_scalar(payload, p.path)
            if value is not MISSING and isinstance(value, _SCALARS):
                out[p.name] = value
        return out

    def _node_ref(self, spec: NodeTypeSpec, payload: dict, context,
                  key_value) -> NodeRef | None:
        if key_value is MISSING or not isinstance(key_value, _SCALARS) \
                or key_value is None:
            return None
        key = _key_str(key_value)
        if spec.lowercase_key:
            key = key.lower()
        return NodeRef(spec.label, key, self._node_props(spec, payload, context))

    def nodes_of(self, payload: dict) -> tuple[list[NodeRef], int]:
        """All node instances a record yields, plus a skip count for
        instances whose key could not be resolved."""
        refs: list[NodeRef] = []
        skipped = 0
        for spec in self.node_types.values():
            items = resolve_items(payload, spec.key_path)
            if not items and spec.key_path.unnest_at is None:
                skipped += 1
                continue
            for context, value in items:
                ref = self._node_ref(spec, payload, context, value)
                if ref is None:
                    skipped += 1
                else:
                    refs.append(ref)
        return refs, skipped

    def _endpoint_refs(self, ep: EndpointSpec, payload: dict) -> tuple[list[NodeRef], int]:
        node_type = self.node_types[ep.node_label]
        if ep.props is not None:
            props_spec: tuple[PropertySpec, ...] = ep.props
        elif ep.key_path.raw == node_type.key_path.raw:
            props_spec = node_type.props
        else:
            props_spec = ()
        refs: list[NodeRef] = []
        skipped = 0
        items = resolve_items(payload, ep.key_path)
        if not items and ep.key_path.unnest_at is None:
            return [], 1
        for context, value in items:
            if value is MISSING or not isinstance(value, _SCALARS) or value is None:
                skipped += 1
                continue
            key = _key_str(value)
            if node_type.lowercase_key:
                key = key.lower()
            props = self._eval_props(props_spec, ep.key_path, payload, context)
            refs.append(NodeRef(ep.node_label, key, props))
        return refs, skipped

    def edges_of(self, payload: dict) -> tuple[list[EdgeTuple], int]:
        """Edge tuples in declaration order, plus count of skipped tuples.

        An edge whose endpoint unnests a list yields one tuple per element;
        with both endpoints unnesting, one per cross-product pair. A missing
        endpoint key skips the affected tuples and counts them.
        """
        tuples: list[EdgeTuple] = []
        skipped = 0
        for spec in self.edge_types:
            starts, s_skip = self._endpoint_refs(spec.start, payload)
            ends, e_skip = self._endpoint_refs(spec.end, payload)
            # A skipped endpoint kills every pairing it would have been in.
            skipped += s_skip * max(len(ends) + e_skip, 1)
            skipped += e_skip * max(len(starts), 1)
            if not starts or not ends:
                continue
            props = self._eval_props(spec.props, spec.start.key_path, payload, None)
            for start in starts:
                for end in ends:
                    tuples.append((start, end, spec.label, dict(props)))
        return tuples, skipped


def extract_edges(record, config: MappingConfig) -> list[EdgeTuple]:
    """Edge tuples for one record (RawRecord or payload dict). Pure."""
    payload = getattr(record, "payload", record)
    return config.edges_of(payload)[0]


def extract_nodes(record, config: MappingConfig) -> list[NodeRef]:
    """Node instances for one record, including types unused by any edge."""
    payload = getattr(record, "payload", record)
    return config.nodes_of(payload)[0]


# -- loading ---------------------------------------------------------------


def _parse_props(elem: ET.Element, errors: list[str], owner: str) -> tuple[PropertySpec, ...]:
    out = []
    for child in elem.findall("property"):
        name = child.get("name")
        path = child.get("path")
        if not name or not path:
            errors.append(f"{owner}: property needs both name and path")
            continue
        try:
            out.append(PropertySpec(name, PathExpr.parse(path)))
        except MappingError as exc:
            errors.append(f"{owner}: {exc}")
    return tuple(out)


def _parse_endpoint(edge_label: str, elem: ET.Element | None, which: str,
                    node_labels: set[str], errors: list[str]) -> EndpointSpec | None:
    if elem is None:
        errors.append(f"edge {edge_label!r}: missing <{which}> endpoint")
        return None
    node = elem.get("node")
    key = elem.get("key")
    if not node or not key:
        errors.append(f"edge {edge_label!r}: <{which}> needs node and key attributes")
        return None
    if node not in node_labels:
        errors.append(
            f"edge {edge_label!r} references undeclared node type {node!r}")
        return None
    try:
        key_path = PathExpr.parse(key)
    except MappingError as exc:
        errors.append(f"edge {edge_label!r}: {exc}")
        return None
    props = None
    if elem.findall("property"):
        props = _parse_props(elem, errors, f"edge {edge_label!r} <{which}>")
    return EndpointSpec(node, key_path, props)


def load_mapping(path: str | Path) -> MappingConfig:
    """Parse and validate a mapping file.

    All structural problems are collected and reported together; malformed
    XML is reported with its line number.
    """
    path = Path(path)
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        line, col = exc.position
        raise MappingError(
            f"{path}: malformed XML at line {line}, column {col}: {exc.msg}"
        ) from exc
    root = tree.getroot()
    if root.tag != "graph-map":
        raise MappingError(f"{path}: root element must be <graph-map>, got <{root.tag}>")

    errors: list[str] = []
    if root.find("nodes") is None:
        errors.append("missing <nodes> section")
    node_types: dict[str, NodeTypeSpec] = {}
    for elem in root.findall("nodes/node"):
        label = elem.get("label")
        key = elem.get("key")
        if not label or not key:
            errors.append("node declaration needs label and key attributes")
            continue
        if label in node_types:
            errors.append(f"duplicate node type {label!r}")
            continue
        try:
            key_path = PathExpr.parse(key)
        except MappingError as exc:
            errors.append(f"node {label!r}: {exc}")
            continue
        props = _parse_props(elem, errors, f"node {label!r}")
        lowercase = (elem.get("lowercase", "false").lower() == "true")
        node_types[label] = NodeTypeSpec(label, key_path, props, lowercase)

    if not node_types and not errors:
        errors.append("mapping declares no node types")

    edge_types: list[EdgeTypeSpec] = []
    seen_edges: set[str] = set()
    for elem in root.findall("mapping/edge"):
        label = elem.get("label")
        if not label:
            errors.append("edge declaration needs a label attribute")
            continue
        if label in seen_edges:
            errors.append(f"duplicate edge type {label!r}")
            continue
        seen_edges.add(label)
        start = _parse_endpoint(label, elem.find("start"), "start",
                                set(node_types), errors)
        end = _parse_endpoint(label, elem.find("end"), "end",
                              set(node_types), errors)
        props = _parse_props(elem, errors, f"edge {label!r}")
        if start and end:
            edge_types.append(EdgeTypeSpec(label, start, end, props))

    if errors:
        raise MappingError(f"{path}: " + "; ".join(errors))
    config = MappingConfig(node_types, edge_types, str(path))
    log.debug("loaded mapping %s: %d node types, %d edge types",
              path, len(node_types), len(edge_types))
    return config
