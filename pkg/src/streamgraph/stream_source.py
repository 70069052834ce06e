"""Replay of recorded JSON streams with rate control and duplicate injection.

A replay walks a JSONL file according to a schedule of (duration, rate,
duplicate fraction) segments. Duplicate emissions are verbatim re-emissions
drawn from a sliding window of recent records in the same segment, chosen by
a seeded RNG, so the full emission sequence is reproducible. In paced mode
the replay sleeps toward each record's deadline (checking every ten
emissions); unpaced, it stamps the scheduled arrival times and returns
immediately, which is what simulated runs consume.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .clock import WallClock
from .mapping import MISSING, parse_path, resolve_scalar

log = logging.getLogger(__name__)

DUPLICATE_WINDOW = 1000  # recent emissions eligible for re-emission
PACING_BATCH = 10        # deadline check interval, in emissions


@dataclass(frozen=True)
class RawRecord:
    """One parsed record as it entered the pipeline."""

    payload: dict
    arrival_ms: float
    source_seq: int  # ordinal of the payload in the replay file


@dataclass(frozen=True)
class Segment:
    duration_s: float
    rate_per_s: float
    duplicate_fraction: float = 0.0

    def __post_init__(self):
        problems = []
        if self.duration_s <= 0:
            problems.append(f"duration_s must be > 0, got {self.duration_s}")
        if self.rate_per_s <= 0:
            problems.append(f"rate_per_s must be > 0, got {self.rate_per_s}")
        if not 0.0 <= self.duplicate_fraction < 1.0:
            problems.append("duplicate_fraction must be in [0, 1), got "
                            f"{self.duplicate_fraction}")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass(frozen=True)
class RateSchedule:
    segments: tuple[Segment, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.segments:
            raise ValueError("schedule needs at least one segment")

    @property
    def total_duration(self) -> float:
        return sum(s.duration_s for s in self.segments)


class Replay:
    """Iterator over RawRecords produced from a file under a schedule.

    Counters (emitted, duplicates, malformed lines skipped) accumulate as
    the iterator is consumed.
    """

    def __init__(self, path: str | Path, schedule: RateSchedule, *,
                 paced: bool = True, clock=None):
        self.path = Path(path)
        self.schedule = schedule
        self.paced = paced
        self.clock = clock if clock is not None else WallClock()
        self.emitted = 0
        self.duplicates = 0
        self.malformed_skipped = 0
        self._source_seq = -1

    def _fresh_records(self):
        """Valid payloads from the file; malformed lines are counted."""
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                self._source_seq += 1
                try:
                    payload = json.loads(line)
                except json.JSONDecodeError:
                    self.malformed_skipped += 1
                    continue
                if not isinstance(payload, dict):
                    self.malformed_skipped += 1
                    continue
                yield payload, self._source_seq

    def __iter__(self):
        import random

        rng = random.Random(self.schedule.seed)
        reader = self._fresh_records()
        exhausted = False
        start = self.clock.now()
        seg_start = start
        for segment in self.schedule.segments:
            if exhausted:
                break
            window: deque[tuple[dict, int]] = deque(maxlen=DUPLICATE_WINDOW)
            n_slots = int(segment.duration_s * segment.rate_per_s)
            for slot in range(n_slots):
                deadline = seg_start + slot / segment.rate_per_s
                duplicate = (segment.duplicate_fraction > 0.0 and window
                             and rng.random() < segment.duplicate_fraction)
                if duplicate:
                    payload, seq = window[rng.randrange(len(window))]
                    self.duplicates += 1
                else:
                    try:
                        payload, seq = next(reader)
                    except StopIteration:
                        exhausted = True
                        break
                if self.paced and slot % PACING_BATCH == 0:
                    self.clock.sleep(deadline - self.clock.now())
                arrival = self.clock.now() if self.paced else deadline
                window.append((payload, seq))
                self.emitted += 1
                yield RawRecord(payload, arrival * 1000.0, seq)
            seg_start += segment.duration_s


def open_replay(path: str | Path, schedule: RateSchedule, *,
                paced: bool = True, clock=None) -> Replay:
    """Replay handle for a JSONL file under the given schedule."""
    return Replay(path, schedule, paced=paced, clock=clock)


# -- filtering ---------------------------------------------------------------

# Codepoint ranges treated as emoji for the only-emoji predicate. Covers the
# common pictograph blocks plus joiners, variation selectors and skin tones.
_EMOJI_RANGES = (
    (0x1F000, 0x1FAFF),
    (0x2600, 0x27BF),
    (0x2B00, 0x2BFF),
    (0x2190, 0x21FF),
    (0xFE00, 0xFE0F),
    (0x200D, 0x200D),
    (0x20E3, 0x20E3),
    (0x1F1E6, 0x1F1FF),
)


def _is_emoji_char(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _EMOJI_RANGES)


def _only_emoji(text: str) -> bool:
    seen_any = False
    for ch in text:
        if ch.isspace():
            continue
        if not _is_emoji_char(ch):
            return False
        seen_any = True
    return seen_any


@dataclass(frozen=True)
class FilterSpec:
    """Keyword and content-rule filter applied at the pipeline mouth.

    ``text_path`` names the one field keyword matching looks at. An empty
    keyword tuple disables keyword matching; predicates are named content
    rules, optionally parameterized as ``name:argument``.
    """

    text_path: str = "text"
    keywords: tuple[str, ...] = ()
    predicates: tuple[str, ...] = ()

    def __post_init__(self):
        for p in self.predicates:
            name = p.split(":", 1)[0]
            if name not in _PREDICATES:
                raise ValueError(f"unknown filter predicate {name!r}")


def _pred_only_emoji(payload: dict, text: str, arg: str | None) -> bool:
    return not _only_emoji(text)


def _pred_require_field(payload: dict, text: str, arg: str | None) -> bool:
    if not arg:
        return False
    return resolve_scalar(payload, parse_path(arg)) is not MISSING


_PREDICATES = {
    "reject-if-only-emoji": _pred_only_emoji,
    "require-field-present": _pred_require_field,
}


def filter_verdict(record, spec: FilterSpec) -> str:
    """Why a record is kept or dropped: 'keep', 'no-text-field',
    'keyword-miss' or 'predicate:<name>'."""
    payload = getattr(record, "payload", record)
    text = resolve_scalar(payload, parse_path(spec.text_path))
    if text is MISSING or not isinstance(text, str):
        return "no-text-field"
    if spec.keywords:
        lowered = text.lower()
        if not any(k.lower() in lowered for k in spec.keywords):
            return "keyword-miss"
    for pred in spec.predicates:
        name, _, arg = pred.partition(":")
        if not _PREDICATES[name](payload, text, arg or None):
            return f"predicate:{name}"
    return "keep"


def apply_filter(record, spec: FilterSpec) -> bool:
    """True iff the record passes the keyword match and every predicate."""
    return filter_verdict(record, spec) == "keep"
