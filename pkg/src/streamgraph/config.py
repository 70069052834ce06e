"""Engine configuration: one XML file describes a whole run.

A config names the input stream, replay schedule, filter, controller
tunables, prediction models (by preset or explicit coefficients), sink and
run parameters, and optionally a synthetic corpus to generate when the
input file is absent. parse_config collects every problem before failing;
serialize_config round-trips losslessly.

Relative paths resolve against the current working directory, so a config
is a location-independent recipe: runs drop their outputs under the
caller's directory, not next to the config file. The mapping path is the
exception: when omitted it falls back to the packaged reference tweet map.
"""

from __future__ import annotations

import logging
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .clock import SimClock, WallClock
from .committer import Archive, FileSink, MockDbSink
from .controller import ConfigError, ControllerConfig, Engine, SpillQueue
from .corpus import CorpusSpec, generate_corpus
from .mapping import load_mapping
from .predictor import BUFFER_PRESETS, CPU_PRESETS, BufferModel, CpuModel
from .stream_source import FilterSpec, RateSchedule, Segment, open_replay

log = logging.getLogger(__name__)


@dataclass
class PathsConfig:
    input: str = ""
    mapping: str | None = None      # None = packaged reference map
    spill_dir: str = ""
    archive_dir: str = ""
    telemetry: str = ""
    models: str = ""
    report: str = ""


@dataclass
class SinkConfig:
    kind: str = "mock"              # mock | file
    decay: float = 0.6
    load_gain: float = 8.0
    floor: float = 5.0
    noise_sigma: float = 1.0
    seed: int = 0
    latency_base: float = 0.05
    latency_per_statement: float = 0.0002
    out_dir: str = ""               # file sink target


@dataclass
class RunConfig:
    duration: float | None = None   # None = run until the stream ends
    workers: int = 1                # transformation threads per bucket
    pool_size: int = 4              # concurrent sink connections
    retries: int = 3
    wall: bool = False              # real time instead of simulated time
    queue_bound: int = 0            # wall-mode handoff queue size, 0 = auto


@dataclass
class EngineConfig:
    run_id: str = "run"
    paths: PathsConfig = field(default_factory=PathsConfig)
    schedule: RateSchedule | None = None
    filter_spec: FilterSpec | None = None
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    buffer_preset: str | None = None
    buffer_model: BufferModel | None = None
    cpu_preset: str | None = None
    cpu_model: CpuModel | None = None
    sink: SinkConfig = field(default_factory=SinkConfig)
    run: RunConfig = field(default_factory=RunConfig)
    corpus: CorpusSpec | None = None


# -- parsing -----------------------------------------------------------------


def _attr_float(elem, name, default, errors, ctx):
    raw = elem.get(name)
    if raw is None:
        return default
    try:
        return float(raw)
    except ValueError:
        errors.append(f"{ctx}: attribute {name}={raw!r} is not a number")
        return default


def _attr_int(elem, name, default, errors, ctx):
    raw = elem.get(name)
    if raw is None:
        return default
    try:
        return int(raw)
    except ValueError:
        errors.append(f"{ctx}: attribute {name}={raw!r} is not an integer")
        return default


def _attr_bool(elem, name, default, errors, ctx):
    raw = elem.get(name)
    if raw is None:
        return default
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    errors.append(f"{ctx}: attribute {name}={raw!r} is not true/false")
    return default


def _parse_schedule(elem, errors) -> RateSchedule | None:
    if elem is None:
        errors.append("missing <schedule> element")
        return None
    seed = _attr_int(elem, "seed", 0, errors, "<schedule>")
    segments = []
    for i, seg in enumerate(elem.findall("segment")):
        ctx = f"<segment> #{i + 1}"
        duration = _attr_float(seg, "duration", 0.0, errors, ctx)
        rate = _attr_float(seg, "rate", 0.0, errors, ctx)
        dup = _attr_float(seg, "duplicates", 0.0, errors, ctx)
        try:
            segments.append(Segment(duration, rate, dup))
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
    if not segments:
        errors.append("<schedule> needs at least one <segment>")
        return None
    try:
        return RateSchedule(tuple(segments), seed)
    except ValueError as exc:
        errors.append(f"<schedule>: {exc}")
        return None


def _parse_filter(elem, errors) -> FilterSpec | None:
    if elem is None:
        return None
    keywords = tuple(k.text.strip() for k in elem.findall("keyword")
                     if k.text and k.text.strip())
    predicates = tuple(p.text.strip() for p in elem.findall("predicate")
                       if p.text and p.text.strip())
    text_path = elem.get("text-path", "text")
    try:
        return FilterSpec(text_path, keywords, predicates)
    except ValueError as exc:
        errors.append(f"<filter>: {exc}")
        return None


def _parse_controller(elem, errors) -> ControllerConfig:
    cfg = ControllerConfig()
    if elem is None:
        return cfg
    ctx = "<controller>"
    cfg.enabled = _attr_bool(elem, "enabled", True, errors, ctx)
    cfg.cpu_min = _attr_float(elem, "cpu-min", cfg.cpu_min, errors, ctx)
    cfg.cpu_max = _attr_float(elem, "cpu-max", cfg.cpu_max, errors, ctx)
    cfg.buffer_min = _attr_int(elem, "buffer-min", cfg.buffer_min, errors, ctx)
    cfg.buffer_max = _attr_int(elem, "buffer-max", cfg.buffer_max, errors, ctx)
    cfg.memory_fraction = _attr_float(elem, "memory-fraction",
                                      cfg.memory_fraction, errors, ctx)
    cfg.adjust_factor = _attr_float(elem, "adjust-factor",
                                    cfg.adjust_factor, errors, ctx)
    cfg.sleep_quantum = _attr_float(elem, "sleep-quantum",
                                    cfg.sleep_quantum, errors, ctx)
    cfg.flush_after = _attr_float(elem, "flush-after", cfg.flush_after, errors, ctx)
    cfg.diversity_window = _attr_int(elem, "diversity-window",
                                     cfg.diversity_window, errors, ctx)
    cfg.slope_window = _attr_int(elem, "slope-window", cfg.slope_window, errors, ctx)
    cfg.cpu_headroom = _attr_float(elem, "cpu-headroom",
                                   cfg.cpu_headroom, errors, ctx)
    cfg.record_bytes = _attr_int(elem, "record-bytes", cfg.record_bytes, errors, ctx)
    cfg.refit_every = _attr_int(elem, "refit-every", cfg.refit_every, errors, ctx)
    cfg.drain_patience = _attr_int(elem, "drain-patience",
                                   cfg.drain_patience, errors, ctx)
    errors.extend(f"<controller>: {p}" for p in cfg.problems())
    return cfg


def _parse_predictors(elem, errors) -> tuple:
    buffer_preset = cpu_preset = None
    buffer_model = cpu_model = None
    if elem is None:
        return None, None, None, None
    buffer_preset = elem.get("buffer-preset")
    cpu_preset = elem.get("cpu-preset")
    if buffer_preset is not None and buffer_preset not in BUFFER_PRESETS:
        errors.append(f"unknown buffer preset {buffer_preset!r}; "
                      f"choices: {sorted(BUFFER_PRESETS)}")
    if cpu_preset is not None and cpu_preset not in CPU_PRESETS \
            and cpu_preset != "sink-true":
        errors.append(f"unknown cpu preset {cpu_preset!r}; "
                      f"choices: {sorted(CPU_PRESETS) + ['sink-true']}")
    buf = elem.find("buffer")
    if buf is not None:
        ctx = "<buffer>"
        try:
            buffer_model = BufferModel(
                diversity_coef=_attr_float(buf, "diversity-coef", 0.0, errors, ctx),
                density_coef=_attr_float(buf, "density-coef", 0.0, errors, ctx),
                diversity_basis=buf.get("diversity-basis", "linear"),
                density_basis=buf.get("density-basis", "quadratic"),
                intercept=_attr_float(buf, "intercept", 0.0, errors, ctx),
            )
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
    cpu = elem.find("cpu")
    if cpu is not None:
        ctx = "<cpu>"
        try:
            cpu_model = CpuModel(
                cpu_coef=_attr_float(cpu, "cpu-coef", 0.0, errors, ctx),
                load_coef=_attr_float(cpu, "load-coef", 0.0, errors, ctx),
                intercept=_attr_float(cpu, "intercept", 0.0, errors, ctx),
                cpu_basis=cpu.get("cpu-basis", "linear"),
                load_basis=cpu.get("load-basis", "log"),
            )
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
    return buffer_preset, buffer_model, cpu_preset, cpu_model


def _parse_corpus(elem, errors) -> CorpusSpec | None:
    if elem is None:
        return None
    ctx = "<corpus>"
    keywords = tuple(k for k in elem.get("keywords", "").split(",") if k)
    spec = CorpusSpec(
        n_records=_attr_int(elem, "records", 2000, errors, ctx),
        seed=_attr_int(elem, "seed", 7, errors, ctx),
        vocab=_attr_int(elem, "vocab", 500, errors, ctx),
        zipf_s=_attr_float(elem, "zipf-s", 1.15, errors, ctx),
        users=_attr_int(elem, "users", 350, errors, ctx),
        dirty_fraction=_attr_float(elem, "dirty-fraction", 0.0, errors, ctx),
        keywords=keywords,
        keyword_fraction=_attr_float(elem, "keyword-fraction", 0.0, errors, ctx),
    )
    errors.extend(f"{ctx}: {p}" for p in spec.problems())
    return spec


def parse_config(path: str | Path) -> EngineConfig:
    """Parse an .xmlcfg file; raises ConfigError listing every problem."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        tree = ET.parse(path)
    except ET.ParseError as exc:
        line, col = exc.position
        raise ConfigError(
            f"{path}: malformed XML at line {line}, column {col}: {exc.msg}")
    root = tree.getroot()
    if root.tag != "engine-config":
        raise ConfigError(
            f"{path}: root element must be <engine-config>, got <{root.tag}>")

    errors: list[str] = []
    cfg = EngineConfig()
    cfg.run_id = root.get("run-id", "run")

    p = root.find("paths")
    if p is None:
        errors.append("missing <paths> element")
    else:
        cfg.paths.input = p.get("input", "")
        if not cfg.paths.input:
            errors.append("<paths> needs an input attribute")
        cfg.paths.mapping = p.get("mapping")
        out = f"out/{cfg.run_id}"
        cfg.paths.spill_dir = p.get("spill-dir", f"{out}/spill")
        cfg.paths.archive_dir = p.get("archive-dir", f"{out}/archive")
        cfg.paths.telemetry = p.get("telemetry", f"{out}/telemetry.csv")
        cfg.paths.models = p.get("models", f"{out}/models.txt")
        cfg.paths.report = p.get("report", f"{out}/report.json")

    cfg.schedule = _parse_schedule(root.find("schedule"), errors)
    cfg.filter_spec = _parse_filter(root.find("filter"), errors)
    cfg.controller = _parse_controller(root.find("controller"), errors)
    (cfg.buffer_preset, cfg.buffer_model,
     cfg.cpu_preset, cfg.cpu_model) = _parse_predictors(
        root.find("predictors"), errors)

    s = root.find("sink")
    if s is not None:
        ctx = "<sink>"
        cfg.sink.kind = s.get("kind", "mock")
        if cfg.sink.kind not in ("mock", "file"):
            errors.append(f"{ctx}: kind must be mock or file, got {cfg.sink.kind!r}")
        cfg.sink.decay = _attr_float(s, "decay", cfg.sink.decay, errors, ctx)
        cfg.sink.load_gain = _attr_float(s, "load-gain", cfg.sink.load_gain,
                                         errors, ctx)
        cfg.sink.floor = _attr_float(s, "floor", cfg.sink.floor, errors, ctx)
        cfg.sink.noise_sigma = _attr_float(s, "noise-sigma",
                                           cfg.sink.noise_sigma, errors, ctx)
        cfg.sink.seed = _attr_int(s, "seed", cfg.sink.seed, errors, ctx)
        cfg.sink.latency_base = _attr_float(s, "latency-base",
                                            cfg.sink.latency_base, errors, ctx)
        cfg.sink.latency_per_statement = _attr_float(
            s, "latency-per-statement", cfg.sink.latency_per_statement,
            errors, ctx)
        cfg.sink.out_dir = s.get("out-dir", "")
        if cfg.sink.kind == "file" and not cfg.sink.out_dir:
            errors.append("<sink kind='file'> needs an out-dir attribute")

    r = root.find("run")
    if r is not None:
        ctx = "<run>"
        raw = r.get("duration")
        if raw not in (None, ""):
            cfg.run.duration = _attr_float(r, "duration", None, errors, ctx)
        cfg.run.workers = _attr_int(r, "workers", 1, errors, ctx)
        cfg.run.pool_size = _attr_int(r, "pool-size", 4, errors, ctx)
        cfg.run.retries = _attr_int(r, "retries", 3, errors, ctx)
        cfg.run.wall = _attr_bool(r, "wall", False, errors, ctx)
        cfg.run.queue_bound = _attr_int(r, "queue-bound", 0, errors, ctx)
        if cfg.run.workers < 1:
            errors.append(f"{ctx}: workers must be >= 1")
        if cfg.run.pool_size < 1:
            errors.append(f"{ctx}: pool-size must be >= 1")
        if cfg.run.retries < 0:
            errors.append(f"{ctx}: retries must be >= 0")

    cfg.corpus = _parse_corpus(root.find("corpus"), errors)

    if errors:
        raise ConfigError(f"{path}: " + "; ".join(errors))
    return cfg


# -- serialization -----------------------------------------------------------


def _num(x) -> str:
    return repr(x) if isinstance(x, float) else str(x)


def serialize_config(cfg: EngineConfig) -> str:
    """Inverse of parse_config: emits XML that parses back to an equal config."""
    lines = [f'<engine-config run-id="{cfg.run_id}">']
    p = cfg.paths
    mapping_attr = f' mapping="{p.mapping}"' if p.mapping else ""
    lines.append(
        f'  <paths input="{p.input}"{mapping_attr} spill-dir="{p.spill_dir}"'
        f' archive-dir="{p.archive_dir}" telemetry="{p.telemetry}"'
        f' models="{p.models}" report="{p.report}"/>')
    if cfg.schedule is not None:
        lines.append(f'  <schedule seed="{cfg.schedule.seed}">')
        for seg in cfg.schedule.segments:
            lines.append(
                f'    <segment duration="{_num(seg.duration_s)}"'
                f' rate="{_num(seg.rate_per_s)}"'
                f' duplicates="{_num(seg.duplicate_fraction)}"/>')
        lines.append("  </schedule>")
    if cfg.filter_spec is not None:
        f = cfg.filter_spec
        lines.append(f'  <filter text-path="{f.text_path}">')
        for kw in f.keywords:
            lines.append(f"    <keyword>{kw}</keyword>")
        for pred in f.predicates:
            lines.append(f"    <predicate>{pred}</predicate>")
        lines.append("  </filter>")
    c = cfg.controller
    lines.append(
        f'  <controller enabled="{str(c.enabled).lower()}"'
        f' cpu-min="{_num(c.cpu_min)}" cpu-max="{_num(c.cpu_max)}"'
        f' buffer-min="{c.buffer_min}" buffer-max="{c.buffer_max}"'
        f' memory-fraction="{_num(c.memory_fraction)}"'
        f' adjust-factor="{_num(c.adjust_factor)}"'
        f' sleep-quantum="{_num(c.sleep_quantum)}"'
        f' flush-after="{_num(c.flush_after)}"'
        f' diversity-window="{c.diversity_window}"'
        f' slope-window="{c.slope_window}"'
        f' cpu-headroom="{_num(c.cpu_headroom)}"'
        f' record-bytes="{c.record_bytes}" refit-every="{c.refit_every}"'
        f' drain-patience="{c.drain_patience}"/>')
    if (cfg.buffer_preset or cfg.cpu_preset
            or cfg.buffer_model or cfg.cpu_model):
        attrs = ""
        if cfg.buffer_preset:
            attrs += f' buffer-preset="{cfg.buffer_preset}"'
        if cfg.cpu_preset:
            attrs += f' cpu-preset="{cfg.cpu_preset}"'
        inner = []
        if cfg.buffer_model is not None:
            m = cfg.buffer_model
            inner.append(
                f'    <buffer diversity-coef="{_num(m.diversity_coef)}"'
                f' density-coef="{_num(m.density_coef)}"'
                f' diversity-basis="{m.diversity_basis}"'
                f' density-basis="{m.density_basis}"'
                f' intercept="{_num(m.intercept)}"/>')
        if cfg.cpu_model is not None:
            m = cfg.cpu_model
            inner.append(
                f'    <cpu cpu-coef="{_num(m.cpu_coef)}"'
                f' load-coef="{_num(m.load_coef)}" intercept="{_num(m.intercept)}"'
                f' cpu-basis="{m.cpu_basis}" load-basis="{m.load_basis}"/>')
        if inner:
            lines.append(f"  <predictors{attrs}>")
            lines.extend(inner)
            lines.append("  </predictors>")
        else:
            lines.append(f"  <predictors{attrs}/>")
    s = cfg.sink
    out_attr = f' out-dir="{s.out_dir}"' if s.out_dir else ""
    lines.append(
        f'  <sink kind="{s.kind}" decay="{_num(s.decay)}"'
        f' load-gain="{_num(s.load_gain)}" floor="{_num(s.floor)}"'
        f' noise-sigma="{_num(s.noise_sigma)}" seed="{s.seed}"'
        f' latency-base="{_num(s.latency_base)}"'
        f' latency-per-statement="{_num(s.latency_per_statement)}"{out_attr}/>')
    r = cfg.run
    duration_attr = f' duration="{_num(r.duration)}"' if r.duration is not None else ""
    lines.append(
        f'  <run{duration_attr} workers="{r.workers}" pool-size="{r.pool_size}"'
        f' retries="{r.retries}" wall="{str(r.wall).lower()}"'
        f' queue-bound="{r.queue_bound}"/>')
    if cfg.corpus is not None:
        co = cfg.corpus
        kw_attr = f' keywords="{",".join(co.keywords)}"' if co.keywords else ""
        lines.append(
            f'  <corpus records="{co.n_records}" seed="{co.seed}"'
            f' vocab="{co.vocab}" zipf-s="{_num(co.zipf_s)}" users="{co.users}"'
            f' dirty-fraction="{_num(co.dirty_fraction)}"{kw_attr}'
            f' keyword-fraction="{_num(co.keyword_fraction)}"/>')
    lines.append("</engine-config>")
    return "\n".join(lines) + "\n"


def save_config(cfg: EngineConfig, path: str | Path) -> None:
    Path(path).write_text(serialize_config(cfg), encoding="utf-8")


# -- wiring ------------------------------------------------------------------


def packaged_map_path() -> Path:
    """Filesystem path of the packaged reference tweet map."""
    return Path(resources.files("streamgraph").joinpath("maps/tweet-map.xml"))


def resolve_models(cfg: EngineConfig) -> tuple[BufferModel, CpuModel]:
    """Preset and override resolution. Explicit coefficients beat presets;
    the sink-true cpu preset mirrors the mock sink's own response."""
    buffer_model = cfg.buffer_model
    if buffer_model is None:
        buffer_model = BUFFER_PRESETS[cfg.buffer_preset or "reference-fit"]
    cpu_model = cfg.cpu_model
    if cpu_model is None:
        preset = cfg.cpu_preset or "sink-true"
        if preset == "sink-true":
            cpu_model = CpuModel(cpu_coef=cfg.sink.decay,
                                 load_coef=cfg.sink.load_gain,
                                 intercept=cfg.sink.floor,
                                 cpu_basis="linear", load_basis="log")
        else:
            cpu_model = CPU_PRESETS[preset]
    return buffer_model, cpu_model


def prepare_input(cfg: EngineConfig) -> Path:
    """Ensure the input corpus exists, generating it when configured."""
    input_path = Path(cfg.paths.input)
    if not input_path.exists():
        if cfg.corpus is None:
            raise ConfigError(
                f"input file not found: {input_path} (no <corpus> to generate it)")
        log.info("generating corpus at %s", input_path)
        generate_corpus(input_path, cfg.corpus)
    return input_path


def build_engine(cfg: EngineConfig) -> Engine:
    """Construct a ready-to-run Engine from a parsed config."""
    if cfg.schedule is None:
        raise ConfigError("config has no schedule")
    input_path = prepare_input(cfg)
    map_path = Path(cfg.paths.mapping) if cfg.paths.mapping else packaged_map_path()
    if not map_path.exists():
        raise ConfigError(f"mapping file not found: {map_path}")
    mapping = load_mapping(map_path)
    buffer_model, cpu_model = resolve_models(cfg)

    clock = WallClock() if cfg.run.wall else SimClock()
    replay = open_replay(input_path, cfg.schedule, paced=cfg.run.wall,
                         clock=clock)
    if cfg.sink.kind == "file":
        sink = FileSink(cfg.sink.out_dir)
    else:
        sink = MockDbSink(decay=cfg.sink.decay, load_gain=cfg.sink.load_gain,
                          floor=cfg.sink.floor, noise_sigma=cfg.sink.noise_sigma,
                          seed=cfg.sink.seed, latency_base=cfg.sink.latency_base,
                          latency_per_statement=cfg.sink.latency_per_statement)
    spill = SpillQueue(cfg.paths.spill_dir)
    archive = Archive(cfg.paths.archive_dir, cfg.run_id)
    return Engine(
        replay=replay, mapping=mapping, filter_spec=cfg.filter_spec,
        cfg=cfg.controller, buffer_model=buffer_model, cpu_model=cpu_model,
        sink=sink, spill=spill, archive=archive, clock=clock,
        telemetry_path=cfg.paths.telemetry, run_id=cfg.run_id,
        duration_s=cfg.run.duration, workers=cfg.run.workers,
        pool_size=cfg.run.pool_size, retries=cfg.run.retries,
        queue_bound=cfg.run.queue_bound, wall=cfg.run.wall)
