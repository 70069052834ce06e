import pytest

from streamgraph.clock import SimClock, WallClock
from streamgraph.committer import FileSink, MockDbSink
from streamgraph.config import (
    EngineConfig,
    PathsConfig,
    RunConfig,
    SinkConfig,
    build_engine,
    packaged_map_path,
    parse_config,
    prepare_input,
    resolve_models,
    save_config,
    serialize_config,
)
from streamgraph.controller import ConfigError, ControllerConfig
from streamgraph.corpus import CorpusSpec
from streamgraph.predictor import BUFFER_PRESETS, CPU_PRESETS, BufferModel, CpuModel
from streamgraph.stream_source import FilterSpec, RateSchedule, Segment

from conftest import make_tweet, write_jsonl

MINIMAL = """
<engine-config>
  <paths input="in.jsonl"/>
  <schedule>
    <segment duration="10" rate="5"/>
  </schedule>
</engine-config>
"""


def _parse(tmp_path, text, name="cfg.xmlcfg"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return parse_config(path)


# -- parsing ------------------------------------------------------------------


def test_minimal_config_defaults(tmp_path):
    cfg = _parse(tmp_path, MINIMAL)
    assert cfg.run_id == "run"
    assert cfg.paths.input == "in.jsonl"
    assert cfg.paths.mapping is None
    assert cfg.paths.spill_dir == "out/run/spill"
    assert cfg.paths.archive_dir == "out/run/archive"
    assert cfg.paths.telemetry == "out/run/telemetry.csv"
    assert cfg.paths.models == "out/run/models.txt"
    assert cfg.paths.report == "out/run/report.json"
    assert cfg.schedule == RateSchedule((Segment(10.0, 5.0, 0.0),), seed=0)
    assert cfg.filter_spec is None
    assert cfg.controller == ControllerConfig()
    assert (cfg.buffer_preset, cfg.buffer_model) == (None, None)
    assert (cfg.cpu_preset, cfg.cpu_model) == (None, None)
    assert cfg.sink == SinkConfig()
    assert cfg.run == RunConfig()
    assert cfg.corpus is None


def test_run_id_names_default_outputs(tmp_path):
    cfg = _parse(tmp_path, MINIMAL.replace(
        "<engine-config>", '<engine-config run-id="exp7">'))
    assert cfg.paths.spill_dir == "out/exp7/spill"
    assert cfg.paths.report == "out/exp7/report.json"


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="config file not found"):
        parse_config(tmp_path / "nope.xmlcfg")


def test_malformed_xml_reports_position(tmp_path):
    with pytest.raises(ConfigError, match="malformed XML at line"):
        _parse(tmp_path, "<engine-config><paths</engine-config>")


def test_wrong_root_element(tmp_path):
    with pytest.raises(ConfigError,
                       match="root element must be <engine-config>, got <run>"):
        _parse(tmp_path, "<run/>")


def test_missing_sections_reported(tmp_path):
    with pytest.raises(ConfigError) as err:
        _parse(tmp_path, "<engine-config/>")
    assert "missing <paths> element" in str(err.value)
    assert "missing <schedule> element" in str(err.value)


def test_every_problem_collected_in_one_error(tmp_path):
    text = """
<engine-config>
  <paths/>
  <schedule>
    <segment duration="5" rate="0"/>
  </schedule>
  <filter><predicate>bogus</predicate></filter>
  <controller cpu-min="80" cpu-max="40"/>
  <predictors buffer-preset="nope"/>
  <sink kind="weird"/>
  <run workers="0"/>
</engine-config>
"""
    with pytest.raises(ConfigError) as err:
        _parse(tmp_path, text)
    msg = str(err.value)
    for expected in ("<paths> needs an input attribute",
                     "rate_per_s must be > 0",
                     "unknown filter predicate 'bogus'",
                     "<controller>: need 0 < cpu_min < cpu_max",
                     "unknown buffer preset 'nope'",
                     "kind must be mock or file, got 'weird'",
                     "workers must be >= 1"):
        assert expected in msg


def test_attribute_type_errors(tmp_path):
    text = """
<engine-config>
  <paths input="a.jsonl"/>
  <schedule seed="zz">
    <segment duration="ten" rate="5"/>
  </schedule>
  <controller enabled="maybe"/>
  <run pool-size="many"/>
</engine-config>
"""
    with pytest.raises(ConfigError) as err:
        _parse(tmp_path, text)
    msg = str(err.value)
    assert "attribute seed='zz' is not an integer" in msg
    assert "<segment> #1: attribute duration='ten' is not a number" in msg
    assert "attribute enabled='maybe' is not true/false" in msg
    assert "attribute pool-size='many' is not an integer" in msg


def test_schedule_without_segments(tmp_path):
    text = MINIMAL.replace('<segment duration="10" rate="5"/>', "")
    with pytest.raises(ConfigError,
                       match="<schedule> needs at least one <segment>"):
        _parse(tmp_path, text)


def test_file_sink_needs_out_dir(tmp_path):
    text = MINIMAL.replace("</engine-config>",
                           '<sink kind="file"/></engine-config>')
    with pytest.raises(ConfigError, match="needs an out-dir attribute"):
        _parse(tmp_path, text)


def test_unknown_cpu_preset_lists_choices(tmp_path):
    text = MINIMAL.replace("</engine-config>",
                           '<predictors cpu-preset="x"/></engine-config>')
    with pytest.raises(ConfigError, match="unknown cpu preset 'x'.*sink-true"):
        _parse(tmp_path, text)


# -- serialization round trip ----------------------------------------------------


def _maximal_config() -> EngineConfig:
    return EngineConfig(
        run_id="maximal",
        paths=PathsConfig(input="data/in.jsonl", mapping="maps/m.xml",
                          spill_dir="s", archive_dir="a", telemetry="t.csv",
                          models="m.txt", report="r.json"),
        schedule=RateSchedule((Segment(20.0, 10.0, 0.0),
                               Segment(30.0, 50.5, 0.25)), seed=42),
        filter_spec=FilterSpec(text_path="body.note", keywords=("go", "ai"),
                               predicates=("reject-if-only-emoji",
                                           "require-field-present:user.id")),
        controller=ControllerConfig(
            cpu_min=15.0, cpu_max=60.0, buffer_min=200, buffer_max=9000,
            memory_fraction=0.25, adjust_factor=0.4, sleep_quantum=0.5,
            flush_after=1.5, diversity_window=7, slope_window=12,
            cpu_headroom=2.5, record_bytes=256, refit_every=30,
            drain_patience=10, enabled=False),
        buffer_preset="inverse-diversity",
        buffer_model=BufferModel(diversity_coef=0.6, density_coef=1.5,
                                 diversity_basis="inverse",
                                 density_basis="linear", intercept=0.125),
        cpu_preset="ceiling-40",
        cpu_model=CpuModel(cpu_coef=0.01, load_coef=0.002, intercept=4.5,
                           cpu_basis="quadratic", load_basis="linear"),
        sink=SinkConfig(kind="file", decay=0.5, load_gain=6.0, floor=4.0,
                        noise_sigma=0.0, seed=9, latency_base=0.1,
                        latency_per_statement=0.0005, out_dir="cypher-out"),
        run=RunConfig(duration=12.5, workers=3, pool_size=2, retries=1,
                      wall=True, queue_bound=5000),
        corpus=CorpusSpec(n_records=500, seed=13, vocab=80, zipf_s=1.05,
                          users=40, dirty_fraction=0.1,
                          keywords=("gurex", "pylon"), keyword_fraction=0.3),
    )


def test_maximal_round_trip(tmp_path):
    cfg = _maximal_config()
    path = tmp_path / "max.xmlcfg"
    save_config(cfg, path)
    assert parse_config(path) == cfg


def test_presets_only_round_trip(tmp_path):
    cfg = _parse(tmp_path, MINIMAL)
    cfg.buffer_preset = "reference-fit"
    cfg.cpu_preset = "ceiling-50"
    reparsed = _parse(tmp_path, serialize_config(cfg), name="rt.xmlcfg")
    assert reparsed == cfg


def test_serializer_omits_optional_sections(tmp_path):
    cfg = _parse(tmp_path, MINIMAL)
    text = serialize_config(cfg)
    assert "<predictors" not in text
    assert "<corpus" not in text
    assert "<filter" not in text
    assert "duration=" not in text.split("<run")[1].split("/>")[0]


# -- model resolution -----------------------------------------------------------


def test_resolve_defaults_mirror_the_sink():
    cfg = EngineConfig()
    buffer_model, cpu_model = resolve_models(cfg)
    assert buffer_model == BUFFER_PRESETS["reference-fit"]
    assert cpu_model == CpuModel(cpu_coef=0.6, load_coef=8.0, intercept=5.0,
                                 cpu_basis="linear", load_basis="log")


def test_sink_true_tracks_custom_sink_parameters():
    cfg = EngineConfig(sink=SinkConfig(decay=0.5, load_gain=6.0, floor=4.0))
    _, cpu_model = resolve_models(cfg)
    assert (cpu_model.cpu_coef, cpu_model.load_coef, cpu_model.intercept) == \
           (0.5, 6.0, 4.0)


def test_named_presets_resolve():
    cfg = EngineConfig(buffer_preset="inverse-diversity",
                       cpu_preset="ceiling-50")
    buffer_model, cpu_model = resolve_models(cfg)
    assert buffer_model == BUFFER_PRESETS["inverse-diversity"]
    assert cpu_model == CPU_PRESETS["ceiling-50"]


def test_explicit_models_beat_presets():
    mine_b = BufferModel(diversity_coef=1.0, density_coef=0.0)
    mine_c = CpuModel(cpu_coef=1.0, load_coef=0.0, intercept=0.0)
    cfg = EngineConfig(buffer_preset="reference-fit", buffer_model=mine_b,
                       cpu_preset="ceiling-40", cpu_model=mine_c)
    assert resolve_models(cfg) == (mine_b, mine_c)


# -- input preparation ------------------------------------------------------------


def test_packaged_map_exists():
    assert packaged_map_path().exists()


def test_prepare_input_generates_once(tmp_path):
    target = tmp_path / "gen.jsonl"
    cfg = EngineConfig(paths=PathsConfig(input=str(target)),
                       corpus=CorpusSpec(n_records=50, seed=3, vocab=30,
                                         users=10))
    assert prepare_input(cfg) == target
    first = target.read_bytes()
    assert len(first.splitlines()) == 50
    assert prepare_input(cfg) == target
    assert target.read_bytes() == first  # never regenerated


def test_prepare_input_without_corpus_fails(tmp_path):
    cfg = EngineConfig(paths=PathsConfig(input=str(tmp_path / "absent.jsonl")))
    with pytest.raises(ConfigError,
                       match=r"input file not found.*no <corpus>"):
        prepare_input(cfg)


# -- engine wiring -----------------------------------------------------------------


def _engine_config(tmp_path, **overrides) -> EngineConfig:
    input_path = tmp_path / "in.jsonl"
    if not input_path.exists():
        write_jsonl(input_path, [make_tweet(f"t{i}", "u") for i in range(20)])
    cfg = EngineConfig(
        paths=PathsConfig(input=str(input_path),
                          spill_dir=str(tmp_path / "spill"),
                          archive_dir=str(tmp_path / "archive"),
                          telemetry=str(tmp_path / "telemetry.csv")),
        schedule=RateSchedule((Segment(2.0, 10.0),)),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


def test_build_engine_simulated_mock(tmp_path):
    engine = build_engine(_engine_config(tmp_path))
    try:
        assert isinstance(engine.clock, SimClock)
        assert isinstance(engine.sink, MockDbSink)
        assert engine.replay.paced is False
        assert (tmp_path / "telemetry.csv").exists()
    finally:
        engine.telemetry.close()


def test_build_engine_file_sink(tmp_path):
    cfg = _engine_config(tmp_path, sink=SinkConfig(
        kind="file", out_dir=str(tmp_path / "cypher")))
    engine = build_engine(cfg)
    try:
        assert isinstance(engine.sink, FileSink)
        assert engine.sink.out_dir == tmp_path / "cypher"
    finally:
        engine.telemetry.close()


def test_build_engine_wall_clock(tmp_path):
    cfg = _engine_config(tmp_path, run=RunConfig(wall=True))
    engine = build_engine(cfg)
    try:
        assert isinstance(engine.clock, WallClock)
        assert engine.replay.paced is True
    finally:
        engine.telemetry.close()


def test_build_engine_missing_mapping(tmp_path):
    cfg = _engine_config(tmp_path)
    cfg.paths.mapping = str(tmp_path / "nope-map.xml")
    with pytest.raises(ConfigError, match="mapping file not found"):
        build_engine(cfg)


def test_build_engine_requires_schedule(tmp_path):
    cfg = _engine_config(tmp_path, schedule=None)
    with pytest.raises(ConfigError, match="config has no schedule"):
        build_engine(cfg)
