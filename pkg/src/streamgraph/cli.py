"""Command line entry point: run scenarios, fit models, slice telemetry.

Subcommands: run, fit-models, report, validate-config.
Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from dataclasses import asdict
from pathlib import Path

from .committer import SinkError
from .config import build_engine, packaged_map_path, parse_config
from .controller import ConfigError, RunReport
from .mapping import MappingError, load_mapping
from .predictor import (
    CPU_PRESETS,
    CpuModel,
    FitError,
    candidate_basis_sweep,
    fit_buffer_model,
    save_models,
)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _print_report(report: RunReport) -> None:
    r = report
    carried = f" (carried {r.records_carried_in})" if r.records_carried_in else ""
    print(f"run {r.run_id} complete in {r.wall_s:.2f} s (stream clock {r.sim_duration_s:.1f} s)")
    print(f"  records     in={r.records_in} committed={r.records_committed}"
          f" filtered={r.records_filtered} skipped={r.records_skipped}"
          f" shed={r.records_shed} in-spill={r.records_in_spill}{carried}")
    print(f"  buckets     pushed={r.buckets_pushed} throttled={r.buckets_throttled}"
          f" reloaded={r.buckets_reloaded}")
    print(f"  rates       mean={r.mean_rate_in:.1f}/s max={r.max_rate_in:.1f}/s")
    if r.mean_compression is not None:
        print(f"  compression mean={r.mean_compression:.3f}")
    over_pct = 100.0 * r.steps_over_cpu_max / r.total_steps if r.total_steps else 0.0
    print(f"  cpu         steps={r.total_steps} over-max={r.steps_over_cpu_max}"
          f" ({over_pct:.1f}%) max-consecutive={r.max_consecutive_over}")
    print(f"  delay       total={r.total_delay_s:.2f} s")
    print(f"  conservation: {'ok' if r.conservation_holds() else 'VIOLATED'}")


def cmd_run(args) -> int:
    try:
        cfg = parse_config(args.config)
        if args.disable_controller:
            cfg.controller.enabled = False
        engine = build_engine(cfg)
    except (ConfigError, MappingError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        report = engine.run()
    except Exception as exc:  # noqa: BLE001 - report any mid-run failure
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    payload = asdict(report)
    payload["conservation_ok"] = report.conservation_holds()
    report_path = Path(cfg.paths.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    _print_report(report)
    print(f"  report:    {report_path}")
    print(f"  telemetry: {cfg.paths.telemetry}")
    if not report.conservation_holds():
        print("runtime failure: conservation identity violated", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- fit-models ----------------------------------------------------------------


def _read_telemetry(path: Path) -> tuple[list[dict], int]:
    """Rows as dicts plus the count of malformed rows skipped."""
    rows: list[dict] = []
    bad = 0
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            if raw.get("ts") in (None, ""):
                bad += 1
                continue
            try:
                float(raw["ts"])
            except (ValueError, TypeError):
                bad += 1
                continue
            rows.append(raw)
    return rows, bad


def _fnum(row: dict, key: str) -> float | None:
    raw = row.get(key)
    if raw in (None, ""):
        return None
    try:
        return float(raw)
    except ValueError:
        return None


def _cpu_pairs(rows: list[dict]) -> list[tuple[float, float, float]]:
    """(cpu before, statements pushed, cpu after) for every push step."""
    out = []
    for i, row in enumerate(rows[:-1]):
        if "push" not in (row.get("action") or ""):
            continue
        cpu_prev = _fnum(row, "cpu_user")
        load = _fnum(row, "batch_stmts")
        cpu_next = _fnum(rows[i + 1], "cpu_user")
        if cpu_prev is None or load is None or cpu_next is None:
            continue
        out.append((cpu_prev, load, cpu_next))
    return out


def cmd_fit_models(args) -> int:
    path = Path(args.telemetry)
    if not path.exists():
        print(f"config error: telemetry file not found: {path}", file=sys.stderr)
        return EXIT_CONFIG
    rows, bad = _read_telemetry(path)
    if bad:
        log.warning("skipped %d malformed telemetry rows", bad)
    if len(rows) < args.min_rows:
        print(f"config error: need at least {args.min_rows} telemetry rows, "
              f"got {len(rows)}", file=sys.stderr)
        return EXIT_CONFIG

    buffer_model = None
    buffer_samples = []
    for row in rows:
        d = _fnum(row, "diversity")
        g = _fnum(row, "density")
        y = _fnum(row, "batch_stmts")
        if d is not None and g is not None and y is not None:
            buffer_samples.append((d, g, y))
    try:
        buffer_model, buf_report = fit_buffer_model(buffer_samples)
        print(f"buffer model: diversity_coef={buffer_model.diversity_coef:.4g} "
              f"density_coef={buffer_model.density_coef:.4g} "
              f"intercept={buffer_model.intercept:.4g} "
              f"(n={buf_report.n_samples} rmse={buf_report.rmse:.4g})")
    except FitError as exc:
        print(f"buffer model not fitted: {exc}")

    if args.preset:
        cpu_model = CPU_PRESETS[args.preset]
        print(f"cpu model: preset {args.preset} "
              f"(cpu_coef={cpu_model.cpu_coef} load_coef={cpu_model.load_coef} "
              f"intercept={cpu_model.intercept})")
    else:
        pairs = _cpu_pairs(rows)
        if len(pairs) < 9:
            print(f"config error: only {len(pairs)} push steps in telemetry; "
                  "cannot fit a cpu model", file=sys.stderr)
            return EXIT_CONFIG
        targets = [p[2] for p in pairs]
        if statistics.pstdev(targets) < 1e-9:
            # Constant CPU: nothing to regress on, intercept carries it all.
            cpu_model = CpuModel(0.0, 0.0, statistics.fmean(targets))
            print(f"cpu model: constant target, intercept-only "
                  f"(intercept={cpu_model.intercept:.4g})")
        else:
            entries = candidate_basis_sweep(pairs)
            print(f"{'candidate':<20} {'MAE':>10} {'MSE':>10} {'RMSE':>10}")
            for e in entries:
                if e.report is None:
                    print(f"{e.tag:<20} {'-':>10} {'-':>10} {'-':>10}")
                else:
                    print(f"{e.tag:<20} {e.report.mae:>10.4g} "
                          f"{e.report.mse:>10.4g} {e.report.rmse:>10.4g}")
            best = entries[0]
            if best.model is None:
                print("runtime failure: every candidate basis failed to fit",
                      file=sys.stderr)
                return EXIT_RUNTIME
            cpu_model = best.model
            print(f"cpu model: {best.tag} cpu_coef={cpu_model.cpu_coef:.4g} "
                  f"load_coef={cpu_model.load_coef:.4g} "
                  f"intercept={cpu_model.intercept:.4g}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_models(out, buffer_model, cpu_model)
    print(f"models written to {out}")
    return EXIT_OK


# -- report --------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_report(args) -> int:
    path = Path(args.telemetry)
    if not path.exists():
        print(f"config error: telemetry file not found: {path}", file=sys.stderr)
        return EXIT_CONFIG
    rows, bad = _read_telemetry(path)
    if bad:
        print(f"warning: skipped {bad} malformed rows", file=sys.stderr)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rate_rows = [[row["ts"], row["rate_in"]] for row in rows
                 if _fnum(row, "rate_in") is not None]
    _write_csv(out_dir / "rate_vs_time.csv", ["ts", "rate_in"], rate_rows)

    cpu_rows = [[row["ts"], row["cpu_user"], row.get("cpu_pred", "")]
                for row in rows if _fnum(row, "cpu_user") is not None]
    _write_csv(out_dir / "cpu_vs_time.csv", ["ts", "cpu_user", "cpu_pred"],
               cpu_rows)

    comp_pairs = [(r1, c) for r1, c in
                  (((_fnum(row, "batch_stmts"), _fnum(row, "compression")))
                   for row in rows)
                  if r1 is not None and c is not None]
    comp_pairs.sort(key=lambda p: p[0])
    _write_csv(out_dir / "compression_vs_load.csv",
               ["batch_stmts", "compression"],
               [[f"{a:g}", f"{b:g}"] for a, b in comp_pairs])

    lines = [f"rows: {len(rows)}", f"malformed rows skipped: {bad}"]
    cpus = [v for row in rows if (v := _fnum(row, "cpu_user")) is not None]
    rates = [v for row in rows if (v := _fnum(row, "rate_in")) is not None]
    comps = [b for _, b in comp_pairs]
    if rows:
        lines.append(f"time span: {rows[0]['ts']} .. {rows[-1]['ts']} s")
        lines.append(f"mean rate: {statistics.fmean(rates):.2f}/s"
                     if rates else "mean rate: n/a")
        lines.append(f"max cpu: {max(cpus):.1f}" if cpus else "max cpu: n/a")
        lines.append(f"mean compression: {statistics.fmean(comps):.3f}"
                     if comps else "mean compression: n/a")
        last = rows[-1]
        lines.append(f"committed total: {last.get('committed_total', '')}")
        lines.append(f"spill depth at end: {last.get('spill_depth', '')}")
    if args.paired:
        other_rows, _ = _read_telemetry(Path(args.paired))
        other_cpus = [v for row in other_rows
                      if (v := _fnum(row, "cpu_user")) is not None]
        mine = max(cpus) if cpus else float("nan")
        theirs = max(other_cpus) if other_cpus else float("nan")
        lines.append(f"max cpu comparison: this={mine:.1f} paired={theirs:.1f}")
    summary = "\n".join(lines) + "\n"
    (out_dir / "summary.txt").write_text(summary, encoding="utf-8")
    print(summary, end="")
    print(f"slices written to {out_dir}")
    return EXIT_OK


def cmd_validate_config(args) -> int:
    try:
        cfg = parse_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    problems = []
    input_path = Path(cfg.paths.input)
    if not input_path.exists() and cfg.corpus is None:
        problems.append(f"input file not found: {input_path} "
                        "(no <corpus> to generate it)")
    map_path = Path(cfg.paths.mapping) if cfg.paths.mapping else packaged_map_path()
    if not map_path.exists():
        problems.append(f"mapping file not found: {map_path}")
    else:
        try:
            load_mapping(map_path)
        except MappingError as exc:
            problems.append(str(exc))
    if problems:
        print("config error: " + "; ".join(problems), file=sys.stderr)
        return EXIT_CONFIG
    pending = (" (input will be generated)"
               if not input_path.exists() else "")
    print(f"{args.config}: ok{pending}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="streamgraph",
        description="Adaptive ingestion of JSON record streams into a "
                    "property graph.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="-v for info, -vv for debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario config")
    p_run.add_argument("config", help="path to an .xmlcfg file")
    p_run.add_argument("--disable-controller", action="store_true",
                       help="push every bucket immediately (direct ingestion)")
    p_run.set_defaults(func=cmd_run)

    p_fit = sub.add_parser("fit-models",
                           help="fit prediction models from telemetry")
    p_fit.add_argument("telemetry", help="telemetry CSV from a run")
    p_fit.add_argument("--out", default="models.txt",
                       help="model file to write (default models.txt)")
    p_fit.add_argument("--min-rows", type=int, default=100)
    p_fit.add_argument("--preset", choices=sorted(CPU_PRESETS),
                       help="use a named cpu model instead of fitting")
    p_fit.set_defaults(func=cmd_fit_models)

    p_rep = sub.add_parser("report", help="summarize telemetry into CSV slices")
    p_rep.add_argument("telemetry", help="telemetry CSV from a run")
    p_rep.add_argument("--out-dir", default="report",
                       help="directory for slices (default ./report)")
    p_rep.add_argument("--paired",
                       help="second telemetry CSV to compare max cpu against")
    p_rep.set_defaults(func=cmd_report)

    p_val = sub.add_parser("validate-config", help="check a config and exit")
    p_val.add_argument("config", help="path to an .xmlcfg file")
    p_val.set_defaults(func=cmd_validate_config)

    args = parser.parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SinkError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
