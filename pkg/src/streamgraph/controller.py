"""Closed-loop buffer control between the record stream and the graph sink.

Each control step the engine samples the sink's CPU, predicts what ingesting
the staged bucket would do to it, and picks one disposition: push the bucket
(optionally shrinking the buffer and reloading spilled work), sleep and grow
the buffer to ride out pressure, throttle the bucket to disk, or hold. The
spill queue on disk absorbs what the sink cannot take and is drained when
the CPU budget allows.
"""

from __future__ import annotations

import logging
import queue as queue_mod
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import framing
from .clock import SimClock, WallClock
from .committer import Archive, StatementBatch, build_statements, compression_ratio, push
from .edge_table import build_table
from .metrics import BucketHistory, DelayLedger, density, diversity_ratio, velocity_and_slope
from .predictor import BufferModel, CpuModel, predict_buffer, predict_cpu
from .predictor import FitError, fit_buffer_model, fit_cpu_model
from .stream_source import RawRecord, FilterSpec, filter_verdict

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid controller or engine configuration."""


@dataclass
class ControllerConfig:
    """Tunables of the control loop. validate() reports every problem."""

    cpu_min: float = 20.0
    cpu_max: float = 55.0
    buffer_min: int = 500
    buffer_max: int = 50000
    memory_fraction: float = 0.1   # share of available memory the buffer may use
    adjust_factor: float = 0.5     # grow/shrink step, as a share of current cap
    sleep_quantum: float = 1.0
    flush_after: float = 2.0       # stage a partial bucket after this long
    diversity_window: int = 5
    slope_window: int = 10
    cpu_headroom: float = 3.0      # guard band under cpu_max for push admission
    record_bytes: int = 512        # rough record size for the memory cap
    refit_every: int = 60          # buckets between model refits; 0 disables
    drain_patience: int = 30       # pushless drain steps before giving up
    enabled: bool = True

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.cpu_min < self.cpu_max <= 100:
            out.append(f"need 0 < cpu_min < cpu_max <= 100, got "
                       f"cpu_min={self.cpu_min}, cpu_max={self.cpu_max}")
        if not 0 < self.buffer_min < self.buffer_max:
            out.append(f"need 0 < buffer_min < buffer_max, got "
                       f"buffer_min={self.buffer_min}, buffer_max={self.buffer_max}")
        if not 0 < self.memory_fraction <= 1:
            out.append(f"memory_fraction must be in (0, 1], got {self.memory_fraction}")
        if not 0 < self.adjust_factor < 1:
            out.append(f"adjust_factor must be in (0, 1), got {self.adjust_factor}")
        if self.sleep_quantum <= 0:
            out.append(f"sleep_quantum must be > 0, got {self.sleep_quantum}")
        if self.flush_after <= 0:
            out.append(f"flush_after must be > 0, got {self.flush_after}")
        if self.diversity_window < 1:
            out.append(f"diversity_window must be >= 1, got {self.diversity_window}")
        if self.slope_window < 2:
            out.append(f"slope_window must be >= 2, got {self.slope_window}")
        if self.cpu_headroom < 0:
            out.append(f"cpu_headroom must be >= 0, got {self.cpu_headroom}")
        if self.record_bytes <= 0:
            out.append(f"record_bytes must be > 0, got {self.record_bytes}")
        if self.refit_every < 0:
            out.append(f"refit_every must be >= 0, got {self.refit_every}")
        if self.drain_patience < 1:
            out.append(f"drain_patience must be >= 1, got {self.drain_patience}")
        return out

    def validate(self) -> None:
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))


class ActionKind(str, Enum):
    GROW = "grow"
    SHRINK = "shrink"
    PUSH = "push"
    THROTTLE = "throttle"
    RELOAD = "reload"
    SLEEP = "sleep"


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    value: float | None = None  # new cap, record count or duration


# -- durable spill queue -----------------------------------------------------


class SpillQueue:
    """FIFO record overflow on disk, one checksummed segment per bucket.

    Survives restarts: segments are discovered by name order on open. A
    partially consumed head segment is tracked in memory only, so a crash
    between reloads re-delivers that segment from its start (at-least-once).
    """

    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._paths = sorted(self.dir.glob("seg-*.spill"))
        self._seg_no = 1 + max(
            (int(p.stem.split("-")[1]) for p in self._paths), default=-1)
        self._head_frames: list[bytes] | None = None
        self._head_path: Path | None = None
        self._head_offset = 0
        self.corrupt_segments = 0
        self.records_written = 0
        self.records_reloaded = 0

    @property
    def depth_segments(self) -> int:
        return len(self._paths) + (1 if self._head_frames else 0)

    def depth_records(self) -> int:
        """Records still on disk (head-segment remainder included)."""
        n = 0
        if self._head_frames is not None:
            n += len(self._head_frames) - self._head_offset
        for path in self._paths:
            try:
                n += len(framing.read_segment(path))
            except framing.CorruptSegmentError:
                continue
        return n

    def write_bucket(self, records: list[RawRecord]) -> Path:
        frames = [framing.encode_record(r.payload, r.arrival_ms, r.source_seq)
                  for r in records]
        path = self.dir / f"seg-{self._seg_no:08d}.spill"
        self._seg_no += 1
        framing.write_segment(path, frames)
        self._paths.append(path)
        self.records_written += len(records)
        return path

    def _load_head(self) -> bool:
        while self._head_frames is None and self._paths:
            path = self._paths.pop(0)
            try:
                self._head_frames = framing.read_segment(path)
                self._head_offset = 0
                self._head_path = path
            except framing.CorruptSegmentError as exc:
                self.corrupt_segments += 1
                log.error("skipping corrupt spill segment: %s", exc)
                path.rename(path.with_suffix(".corrupt"))
        return self._head_frames is not None

    def reload(self, budget: int) -> list[RawRecord]:
        """Oldest records, in write order, up to budget many."""
        out: list[RawRecord] = []
        while len(out) < budget and self._load_head():
            frames = self._head_frames
            take = min(budget - len(out), len(frames) - self._head_offset)
            for frame in frames[self._head_offset:self._head_offset + take]:
                out.append(RawRecord(*framing.decode_record(frame)))
            self._head_offset += take
            if self._head_offset >= len(frames):
                self._head_path.unlink(missing_ok=True)
                self._head_frames = None
        self.records_reloaded += len(out)
        return out


def throttle_to_disk(records: list[RawRecord], spill: SpillQueue) -> Path:
    """Persist one bucket's records as a spill segment."""
    return spill.write_bucket(records)


def reload_from_disk(spill: SpillQueue, budget: int) -> list[RawRecord]:
    """Take back up to budget records, oldest first."""
    return spill.reload(budget)


# -- telemetry ---------------------------------------------------------------

TELEMETRY_COLUMNS = [
    "ts", "rate_in", "buffer_cap", "batch_stmts", "diversity", "density",
    "cpu_user", "cpu_pred", "action", "spill_depth", "committed_total",
    "compression",
]


class TelemetryWriter:
    """CSV writer on its own thread, fed immutable row snapshots."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self._queue: queue_mod.Queue = queue_mod.Queue()
        self._thread = None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w", encoding="utf-8", newline="")
            self._fh.write(",".join(TELEMETRY_COLUMNS) + "\n")
            self._thread = threading.Thread(target=self._drain, daemon=True)
            self._thread.start()

    def _drain(self):
        while True:
            row = self._queue.get()
            if row is None:
                break
            self._fh.write(row + "\n")
        self._fh.close()

    @staticmethod
    def _fmt(value) -> str:
        if value is None:
            return ""
        if isinstance(value, float):
            return f"{value:.6g}"
        return str(value)

    def write(self, **fields) -> None:
        if not self._thread:
            return
        row = ",".join(self._fmt(fields.get(c)) for c in TELEMETRY_COLUMNS)
        self._queue.put(row)

    def close(self) -> None:
        if self._thread:
            self._queue.put(None)
            self._thread.join()
            self._thread = None


# -- engine ------------------------------------------------------------------


@dataclass
class StagedBucket:
    index: int
    records: list[RawRecord]
    table: object  # EdgeTable
    staged_at: float
    from_spill: bool = False


@dataclass
class RunReport:
    """End-of-run accounting; totals must satisfy the conservation identity."""

    run_id: str = ""
    sim_duration_s: float = 0.0
    wall_s: float = 0.0
    records_in: int = 0
    records_carried_in: int = 0  # spill backlog inherited from a previous run
    records_filtered: int = 0
    records_skipped: int = 0
    records_committed: int = 0
    records_in_spill: int = 0
    records_shed: int = 0
    records_archived: int = 0
    duplicates_emitted: int = 0
    tuples_skipped: int = 0
    buckets_pushed: int = 0
    buckets_throttled: int = 0
    buckets_reloaded: int = 0
    mean_rate_in: float = 0.0
    max_rate_in: float = 0.0
    mean_compression: float | None = None
    total_steps: int = 0
    steps_over_cpu_max: int = 0
    steps_over_cpu_max_tol: int = 0
    max_consecutive_over: int = 0
    max_consecutive_over_tol: int = 0
    total_delay_s: float = 0.0
    spill_corrupt_segments: int = 0
    filter_reasons: dict = field(default_factory=dict)

    def conservation_holds(self) -> bool:
        inputs = self.records_in + self.records_carried_in
        return inputs == (self.records_committed + self.records_in_spill
                          + self.records_filtered + self.records_skipped
                          + self.records_shed)

    def totals(self) -> dict:
        """Deterministic subset used for reproducibility comparisons."""
        return {
            "records_in": self.records_in,
            "records_filtered": self.records_filtered,
            "records_skipped": self.records_skipped,
            "records_committed": self.records_committed,
            "records_in_spill": self.records_in_spill,
            "records_shed": self.records_shed,
            "duplicates_emitted": self.duplicates_emitted,
            "buckets_pushed": self.buckets_pushed,
            "buckets_throttled": self.buckets_throttled,
        }


class Engine:
    """Wires stream, buffer control, transformation and sink into one run."""

    def __init__(self, *, replay, mapping, filter_spec: FilterSpec | None,
                 cfg: ControllerConfig, buffer_model: BufferModel,
                 cpu_model: CpuModel, sink, spill: SpillQueue,
                 archive: Archive | None = None, clock=None,
                 telemetry_path=None, run_id: str = "run",
                 duration_s: float | None = None, workers: int = 1,
                 pool_size: int = 4, retries: int = 3,
                 queue_bound: int = 0, wall: bool = False):
        cfg.validate()
        self.replay = replay
        self.mapping = mapping
        self.filter_spec = filter_spec
        self.cfg = cfg
        self.buffer_model = buffer_model
        self.cpu_model = cpu_model
        self.sink = sink
        self.spill = spill
        self.archive = archive
        self.wall = wall
        self.clock = clock if clock is not None else (WallClock() if wall else SimClock())
        self.run_id = run_id
        self.duration_s = duration_s
        self.workers = workers
        self.pool = threading.Semaphore(pool_size)
        self.retries = retries
        self.queue_bound = queue_bound or cfg.buffer_max
        self.telemetry = TelemetryWriter(telemetry_path)

        self.history = BucketHistory(cfg.diversity_window)
        self.ledger = DelayLedger()
        self.report = RunReport(run_id=run_id)
        self.buffer_cap = cfg.buffer_min
        self.pending: deque[RawRecord] = deque()
        self.pending_since: float | None = None
        self.staged: StagedBucket | None = None
        self.cpu_track: deque[tuple[float, float]] = deque(maxlen=cfg.slope_window)
        self.bucket_seq = 0
        self.compressions: list[float] = []
        self.cur_diversity = 1.0
        self.cur_density = 0.0
        self._over = self._over_tol = 0
        self._streak = self._streak_tol = 0
        self._buffer_samples: list[tuple[float, float, float]] = []
        self._cpu_samples: list[tuple[float, float, float]] = []
        self._pending_cpu_obs: tuple[float, float] | None = None
        self._buckets_since_refit = 0
        self._audit_path = self.spill.dir / "shed-audit.log"
        self._last_compression: float | None = None
        self._last_cpu_pred: float | None = None
        self._arrived = 0
        self._spill_carryover = spill.depth_records()
        self.report.records_carried_in = self._spill_carryover

    # -- staging -------------------------------------------------------------

    def _stage(self, records: list[RawRecord], from_spill: bool = False) -> StagedBucket:
        table = build_table(records, self.mapping, self.workers)
        bucket = StagedBucket(self.bucket_seq, records, table,
                              self.clock.now(), from_spill)
        self.bucket_seq += 1
        self.report.tuples_skipped += table.meta.n_skipped_tuples
        if not from_spill:
            self.history.observe(table)
            self.cur_diversity = diversity_ratio(self.history)
            self.cur_density = density(table)
            self._buffer_samples.append(
                (self.cur_diversity, self.cur_density, table.statement_size))
            self._buckets_since_refit += 1
        return bucket

    def _bucket_ready(self, now: float) -> bool:
        if self.staged is not None or not self.pending:
            return False
        if len(self.pending) >= self.buffer_cap:
            return True
        return (self.pending_since is not None
                and now - self.pending_since >= self.cfg.flush_after)

    def _take_pending(self) -> list[RawRecord]:
        n = min(len(self.pending), self.buffer_cap)
        out = [self.pending.popleft() for _ in range(n)]
        self.pending_since = (self.pending[0].arrival_ms / 1000.0
                              if self.pending else None)
        return out

    # -- CPU bookkeeping -------------------------------------------------------

    def _observe_cpu(self, sample) -> None:
        self.cpu_track.append((sample.ts, sample.cpu_user))
        if self._pending_cpu_obs is not None:
            cpu_prev, load = self._pending_cpu_obs
            self._cpu_samples.append((cpu_prev, load, sample.cpu_user))
            self._pending_cpu_obs = None
        if sample.cpu_user > self.cfg.cpu_max:
            self._over += 1
            self._streak += 1
        else:
            self._streak = 0
        if sample.cpu_user > self.cfg.cpu_max + 5.0:
            self._over_tol += 1
            self._streak_tol += 1
        else:
            self._streak_tol = 0
        self.report.steps_over_cpu_max = self._over
        self.report.steps_over_cpu_max_tol = self._over_tol
        self.report.max_consecutive_over = max(
            self.report.max_consecutive_over, self._streak)
        self.report.max_consecutive_over_tol = max(
            self.report.max_consecutive_over_tol, self._streak_tol)

    def _cpu_slope(self) -> float:
        ts = [t for t, _ in self.cpu_track]
        vs = [v for _, v in self.cpu_track]
        _, slope = velocity_and_slope(vs, ts, self.cfg.slope_window)
        return slope if slope is not None else 0.0

    # -- bucket dispositions ---------------------------------------------------

    def _do_push(self, bucket: StagedBucket, blocking: bool = True) -> bool:
        batch = build_statements(bucket.table, bucket.index)
        cpu_before = self.cpu_track[-1][1] if self.cpu_track else 0.0
        report = push(batch, self.sink, now=self.clock.now(),
                      retries=self.retries, pool=self.pool,
                      archive=self.archive, records=bucket.records)
        if report.committed:
            self.report.records_committed += len(bucket.records)
            self.report.buckets_pushed += 1
            ratio = compression_ratio(
                batch, bucket.table.uncompressed_statement_count())
            self.compressions.append(ratio)
            self._last_compression = ratio
            arrivals = [r.arrival_ms / 1000.0 for r in bucket.records]
            wait = max(0.0, bucket.staged_at - sum(arrivals) / len(arrivals)) \
                if arrivals else 0.0
            self.ledger.record_delay(bucket.index, wait, report.latency)
            self.report.total_delay_s = self.ledger.total_delay()
            self._pending_cpu_obs = (cpu_before, batch.total_statements)
            if blocking:
                self.clock.sleep(report.latency)
        else:
            if self.archive is not None:
                self.report.records_archived += len(bucket.records)
            self.report.records_shed += len(bucket.records)
        return report.committed

    def _do_throttle(self, bucket: StagedBucket) -> None:
        self._spill_records(bucket.records, bucket.index)

    def _spill_records(self, records: list[RawRecord], index: int) -> None:
        try:
            throttle_to_disk(records, self.spill)
            self.report.buckets_throttled += 1
        except OSError as exc:
            self.report.records_shed += len(records)
            with open(self._audit_path, "a", encoding="utf-8") as fh:
                fh.write(f"{self.clock.now():.3f} shed bucket={index} "
                         f"records={len(records)} reason={exc}\n")
            log.error("spill failed, shed %d records: %s",
                      len(records), exc)

    # -- the decision tree -----------------------------------------------------

    def control_step(self, bucket: StagedBucket | None) -> list[Action]:
        """One controlled step; returns the actions taken, in order."""
        cfg = self.cfg
        perf = self.sink.sample(self.clock.now())
        self._observe_cpu(perf)
        load = float(bucket.table.statement_size) if bucket else 0.0
        cpu_pred = predict_cpu(load, perf.cpu_user, self.cpu_model)
        slope = self._cpu_slope()
        actions: list[Action] = []

        if bucket is not None and cpu_pred >= cfg.cpu_max:
            self.clock.sleep(cfg.sleep_quantum)
            actions.append(Action(ActionKind.SLEEP, cfg.sleep_quantum))
            limit = min(cfg.buffer_max, self._memory_cap(perf))
            grown = int(self.buffer_cap + cfg.adjust_factor * self.buffer_cap)
            if grown <= limit:
                self.buffer_cap = grown
                actions.append(Action(ActionKind.GROW, grown))
            perf = self.sink.sample(self.clock.now())
            self._observe_cpu(perf)
            cpu_pred = predict_cpu(load, perf.cpu_user, self.cpu_model)
            slope = self._cpu_slope()
            if cpu_pred >= cfg.adjust_factor * cfg.cpu_max and slope >= 0:
                self._do_throttle(bucket)
                actions.append(Action(ActionKind.THROTTLE, len(bucket.records)))
                self.staged = None
                self._last_cpu_pred = cpu_pred
                return actions

        if bucket is not None and cpu_pred < cfg.cpu_max - cfg.cpu_headroom:
            self._do_push(bucket)
            actions.append(Action(ActionKind.PUSH, load))
            self.staged = None
            shrunk = int(self.buffer_cap - cfg.adjust_factor * self.buffer_cap)
            if shrunk >= cfg.buffer_min:
                self.buffer_cap = shrunk
                actions.append(Action(ActionKind.SHRINK, shrunk))

        if (cpu_pred <= cfg.adjust_factor * cfg.cpu_min
                and self.spill.depth_segments > 0 and self.staged is None):
            reloaded = reload_from_disk(self.spill, self.buffer_cap)
            if reloaded:
                actions.append(Action(ActionKind.RELOAD, len(reloaded)))
                self.report.buckets_reloaded += 1
                bucket = self._stage(reloaded, from_spill=True)
                self._do_push(bucket)
                actions.append(Action(ActionKind.PUSH,
                                      float(bucket.table.statement_size)))
        self._last_cpu_pred = cpu_pred
        return actions

    def _memory_cap(self, perf) -> int:
        return int(self.cfg.memory_fraction * perf.mem_available
                   / self.cfg.record_bytes)

    def _uncontrolled_step(self) -> list[Action]:
        """Direct ingestion: push whatever arrived, no prediction, no spill.

        Pushes are fire-and-forget here. A producer that ignores sink state
        does not wait out the sink's (congested) latency either; that
        coupling is exactly what the controller adds.
        """
        perf = self.sink.sample(self.clock.now())
        self._observe_cpu(perf)
        self._last_cpu_pred = perf.cpu_user
        actions: list[Action] = []
        if self.pending:
            records = list(self.pending)
            self.pending.clear()
            self.pending_since = None
            bucket = self._stage(records)
            self.staged = None
            self._do_push(bucket, blocking=False)
            actions.append(Action(ActionKind.PUSH,
                                  float(bucket.table.statement_size)))
        return actions

    # -- model refits ----------------------------------------------------------

    def _maybe_refit(self) -> None:
        cfg = self.cfg
        if cfg.refit_every <= 0 or self._buckets_since_refit < cfg.refit_every:
            return
        self._buckets_since_refit = 0
        try:
            self.buffer_model, rep = fit_buffer_model(
                self._buffer_samples,
                self.buffer_model.diversity_basis, self.buffer_model.density_basis)
            log.info("refit buffer model on %d samples (rmse %.3g)",
                     rep.n_samples, rep.rmse)
        except FitError as exc:
            log.warning("buffer model refit skipped: %s", exc)
        try:
            self.cpu_model, rep = fit_cpu_model(
                self._cpu_samples,
                self.cpu_model.cpu_basis, self.cpu_model.load_basis)
            log.info("refit cpu model on %d samples (rmse %.3g)",
                     rep.n_samples, rep.rmse)
        except FitError as exc:
            log.warning("cpu model refit skipped: %s", exc)

    # -- main loop ---------------------------------------------------------------

    def run(self) -> RunReport:
        import time as _time
        wall_start = _time.perf_counter()
        try:
            self._run_stream()
            self._drain()
        finally:
            self.telemetry.close()
        rep = self.report
        rep.records_skipped = self.replay.malformed_skipped
        rep.duplicates_emitted = self.replay.duplicates
        # Counted at ingestion, not from replay.emitted: a duration cutoff
        # can strand a prefetched record that never entered the pipeline.
        rep.records_in = self._arrived + self.replay.malformed_skipped
        rep.records_in_spill = (self._spill_carryover + self.spill.records_written
                                - self.spill.records_reloaded)
        rep.spill_corrupt_segments = self.spill.corrupt_segments
        rep.sim_duration_s = self.clock.now()
        rep.wall_s = _time.perf_counter() - wall_start
        schedule = getattr(self.replay, "schedule", None)
        span = schedule.total_duration if schedule is not None else rep.sim_duration_s
        rep.mean_rate_in = rep.records_in / span if span > 0 else 0.0
        if self.compressions:
            rep.mean_compression = sum(self.compressions) / len(self.compressions)
        if not rep.conservation_holds():
            log.error("conservation violated: %s", rep.totals())
        return rep

    def _ingest(self, record: RawRecord) -> None:
        self._arrived += 1
        if self.filter_spec is not None:
            verdict = filter_verdict(record, self.filter_spec)
            if verdict != "keep":
                self.report.records_filtered += 1
                reasons = self.report.filter_reasons
                reasons[verdict] = reasons.get(verdict, 0) + 1
                return
        if not self.pending:
            self.pending_since = record.arrival_ms / 1000.0
        self.pending.append(record)

    def _step_and_log(self, arrived: int, quantum: float) -> None:
        now = self.clock.now()
        self._last_compression = None
        if self.cfg.enabled:
            if self._bucket_ready(now):
                self.staged = self._stage(self._take_pending())
            actions = self.control_step(self.staged)
        else:
            actions = self._uncontrolled_step()
        self._maybe_refit()
        rate = arrived / quantum if quantum > 0 else 0.0
        self.report.max_rate_in = max(self.report.max_rate_in, rate)
        self.report.total_steps += 1
        if self.staged is not None:
            stmts = self.staged.table.statement_size
        else:
            stmts = self._pushed_load(actions)
        self.telemetry.write(
            ts=now,
            rate_in=rate,
            buffer_cap=self.buffer_cap,
            batch_stmts=stmts,
            diversity=self.cur_diversity,
            density=self.cur_density,
            cpu_user=self.cpu_track[-1][1] if self.cpu_track else None,
            cpu_pred=self._last_cpu_pred,
            action="+".join(a.kind.value for a in actions) or "idle",
            spill_depth=self._spill_depth(),
            committed_total=self.report.records_committed,
            compression=self._last_compression,
        )

    def _spill_depth(self) -> int:
        return (self._spill_carryover + self.spill.records_written
                - self.spill.records_reloaded)

    @staticmethod
    def _pushed_load(actions: list[Action]) -> float | None:
        for a in actions:
            if a.kind is ActionKind.PUSH:
                return a.value
        return None

    def _run_stream(self) -> None:
        if self.wall:
            self._run_stream_wall()
        else:
            self._run_stream_sim()

    def _run_stream_sim(self) -> None:
        quantum = self.cfg.sleep_quantum
        feed = iter(self.replay)
        lookahead: RawRecord | None = None
        exhausted = False
        while True:
            step_end = self.clock.now() + quantum
            if self.duration_s is not None and step_end > self.duration_s:
                break
            arrived = 0
            while not exhausted:
                if lookahead is None:
                    try:
                        lookahead = next(feed)
                    except StopIteration:
                        exhausted = True
                        break
                if lookahead.arrival_ms / 1000.0 <= step_end:
                    self._ingest(lookahead)
                    arrived += 1
                    lookahead = None
                else:
                    break
            self.clock.advance_to(step_end)
            self._step_and_log(arrived, quantum)
            if exhausted and not self.pending and self.staged is None:
                break

    def _run_stream_wall(self) -> None:
        quantum = self.cfg.sleep_quantum
        handoff: queue_mod.Queue = queue_mod.Queue(maxsize=self.queue_bound)
        done = object()

        def produce():
            for record in self.replay:
                handoff.put(record)
            handoff.put(done)

        producer = threading.Thread(target=produce, daemon=True)
        producer.start()
        exhausted = False
        while True:
            step_end = self.clock.now() + quantum
            if self.duration_s is not None and step_end > self.duration_s:
                break
            arrived = 0
            while not exhausted:
                timeout = step_end - self.clock.now()
                if timeout <= 0:
                    break
                try:
                    item = handoff.get(timeout=timeout)
                except queue_mod.Empty:
                    break
                if item is done:
                    exhausted = True
                    break
                self._ingest(item)
                arrived += 1
            self.clock.sleep(step_end - self.clock.now())
            self._step_and_log(arrived, quantum)
            if exhausted and not self.pending and self.staged is None:
                break
        producer.join(timeout=5.0)

    def _drain(self) -> None:
        """Dispose of everything still buffered, then flush the spill queue
        while the CPU budget allows; give up after drain_patience pushless
        steps and leave the rest on disk."""
        cfg = self.cfg
        idle = 0
        while idle < cfg.drain_patience:
            if self.staged is None and self.pending:
                self.staged = self._stage(self._take_pending())
            if self.staged is None and self.spill.depth_segments > 0 and cfg.enabled:
                reloaded = self.spill.reload(self.buffer_cap)
                if reloaded:
                    self.staged = self._stage(reloaded, from_spill=True)
                    self.report.buckets_reloaded += 1
            if self.staged is None:
                break
            perf = self.sink.sample(self.clock.now())
            self._observe_cpu(perf)
            load = float(self.staged.table.statement_size)
            cpu_pred = predict_cpu(load, perf.cpu_user, self.cpu_model)
            self._last_cpu_pred = cpu_pred
            self._last_compression = None
            pushed = False
            if not cfg.enabled or cpu_pred < cfg.cpu_max - cfg.cpu_headroom:
                bucket = self.staged
                self.staged = None
                self._do_push(bucket)
                pushed = True
                idle = 0
                action = "push"
            else:
                self.clock.sleep(cfg.sleep_quantum)
                idle += 1
                action = "sleep"
            self.report.total_steps += 1
            self.telemetry.write(
                ts=self.clock.now(), rate_in=0.0, buffer_cap=self.buffer_cap,
                batch_stmts=(None if pushed or self.staged is None
                             else self.staged.table.statement_size),
                diversity=self.cur_diversity, density=self.cur_density,
                cpu_user=self.cpu_track[-1][1] if self.cpu_track else None,
                cpu_pred=cpu_pred, action=action,
                spill_depth=self._spill_depth(),
                committed_total=self.report.records_committed,
                compression=self._last_compression,
            )
        if self.staged is not None:
            # Could not push within patience: put it back on disk.
            self._do_throttle(self.staged)
            if self.staged.from_spill:
                self.report.buckets_reloaded -= 1
                self.report.buckets_throttled -= 1
            self.staged = None
        while self.pending:
            # A duration cutoff can leave arrivals that were never staged.
            # Park them on disk too, or they would vanish from the books.
            chunk = self._take_pending()
            self._spill_records(chunk, self.bucket_seq)
            self.bucket_seq += 1
        if self.spill.depth_segments > 0:
            log.warning("run ended with unflushed spill backlog: %d segments",
                        self.spill.depth_segments)


def run_loop(**kwargs) -> RunReport:
    """Build an Engine from components and run it to completion."""
    return Engine(**kwargs).run()
