"""Command-line entry point: one subcommand per pipeline stage plus simulate, narrate, query, audit and run.

Exit codes: 0 success, 1 input error, 2 computation error, 3 external-client error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from bip import __version__
from bip.audit import audit_traceability
from bip.bkg import FactStore
from bip.canonical import atomic_write_text, write_json
from bip.config import PipelineConfig, default_config_path, dump_config, load_config
from bip.domain import parse_timestamp
from bip.errors import BipError, ConfigError, MissingArtifact
from bip.gll import (
    BundleLimits,
    ExternalGenerator,
    HttpTextClient,
    answer_query,
    build_fact_bundle,
    render_narrative,
    snapshot_index,
    validate_grounding,
)
from bip.pipeline import (
    StageReport,
    run_stage,
    versioned,
    derive,
    detect,
    facts,
    feed,
    ingest,
    load_derived,
    load_detector_errors,
    load_events,
    load_findings,
    load_snapshots,
    load_window,
    metrics,
    resolve_run_window,
    run_pipeline,
    score_findings,
    snapshot,
    snapshot_set_from_disk,
    write_manifest,
)
from bip.simulate import load_chain_spec, example_funnel_spec, simulate_events, write_events

log = logging.getLogger("bip")


def _config(args: argparse.Namespace) -> PipelineConfig:
    return load_config(args.config or default_config_path())


def _stage_config(args: argparse.Namespace, out: Path) -> PipelineConfig:
    # later stages reuse the configuration the run started with
    if args.config is None and (out / "config.resolved.yaml").exists():
        return load_config(out / "config.resolved.yaml")
    return _config(args)


def _out(args: argparse.Namespace) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _window_end(args: argparse.Namespace) -> int | None:
    if args.window_end is None:
        return None
    try:
        return parse_timestamp(args.window_end)
    except ValueError as exc:
        raise ConfigError(f"--window-end: {exc}") from None


def _generator(args: argparse.Namespace) -> ExternalGenerator | None:
    return ExternalGenerator(HttpTextClient.from_env()) if getattr(args, "external", False) else None


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    spec = load_chain_spec(args.chain) if args.chain else example_funnel_spec()
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    out = _out(args)
    t0 = time.perf_counter()
    records, summary = simulate_events(spec, args.n, args.seed)
    target = Path(args.output) if args.output else out / "events.jsonl"
    write_events(target, records)
    write_json(out / "trajectory_summary.json", versioned(summary.to_dict()))
    reports.append(StageReport(0, "simulate", time.perf_counter() - t0, {"journeys": args.n, "events": len(records)}))
    return {"events": str(target), "summary": summary.to_dict()}


def _begin_run(args: argparse.Namespace, out: Path):
    cfg = _config(args)
    records = load_events(args.events or out / "events.jsonl")
    window = resolve_run_window(cfg, records, _window_end(args), args.window_days)
    atomic_write_text(out / "config.resolved.yaml", dump_config(cfg))
    write_json(out / "run.json", versioned({"window": window.to_dict()}))
    return cfg, records, window


def cmd_ingest(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg, records, window = _begin_run(args, out)
    events = run_stage(reports, 1, "ingest", lambda: ingest(cfg, records, window, out))
    run_stage(reports, 2, "derive", lambda: derive(cfg, events, window, out))
    return {"window": window.to_dict()}


def cmd_snapshot(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    window = load_window(out)
    derived, props = load_derived(out)
    snaps = run_stage(reports, 3, "snapshot", lambda: snapshot(cfg, derived, props, window, out))
    run_stage(reports, 4, "metrics", lambda: metrics(snaps.current, out))
    return {"snapshot_id": snaps.current.snapshot_id}


def cmd_detect(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    snaps = snapshot_set_from_disk(cfg, out)
    result = run_stage(reports, 5, "detect", lambda: detect(cfg, snaps, out, args.workers))
    return {"findings": len(result.findings), "errors": result.errors}


def cmd_facts(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    findings = load_findings(out)
    store = run_stage(reports, 6, "facts", lambda: facts(cfg, findings, load_snapshots(out), out))
    return {"facts": len(store)}


def cmd_feed(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    snaps = snapshot_set_from_disk(cfg, out)
    scored = score_findings(cfg, load_findings(out), snaps)
    store = FactStore.load(_require_file(out / "facts.jsonl"))
    window = load_window(out)
    entries = run_stage(reports, 7, "feed", lambda: feed(cfg, scored, store, window, snaps.current.snapshot_id,
                                                       load_detector_errors(out), out, _generator(args)))
    write_manifest(out)
    return {"insights": len(entries)}


def _require_file(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}; run the earlier stage first")
    return path


def cmd_narrate(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    store = FactStore.load(_require_file(out / "facts.jsonl"))
    findings = load_findings(out)
    if args.finding:
        findings = [f for f in findings if f.finding_id in set(args.finding)]
        if not findings:
            raise ConfigError("no stored finding matches --finding")
    limits = BundleLimits(cfg.facts.max_facts, cfg.facts.min_confidence)
    generator = _generator(args)
    narratives = []
    for f in findings:
        bundle = build_fact_bundle(f, store, limits)
        report = validate_grounding(bundle, cfg.detectors.n_min)
        entry: dict[str, Any] = {"finding_id": f.finding_id, "grounding": report.to_dict(), "narrative": None}
        if report.overall:
            entry["narrative"] = render_narrative(bundle, report, generator).to_dict()
        narratives.append(entry)
    return {"narratives": narratives}


def cmd_query(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _stage_config(args, out)
    store = FactStore.load(_require_file(out / "facts.jsonl"))
    index = snapshot_index(load_snapshots(out))
    limits = BundleLimits(cfg.facts.max_facts, cfg.facts.min_confidence)
    return answer_query(args.question, store, index, cfg.detectors.n_min, limits, top_k=args.top_k).to_dict()


def cmd_audit(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    report = audit_traceability(args.out_dir, args.sample_size, args.seed)
    return report.to_dict()


def cmd_run(args: argparse.Namespace, reports: list[StageReport]) -> dict[str, Any]:
    out = _out(args)
    cfg = _config(args)
    records = load_events(args.events or out / "events.jsonl")
    window = resolve_run_window(cfg, records, _window_end(args), args.window_days)
    result = run_pipeline(cfg, records, out, window, args.workers, _generator(args))
    reports.extend(result.reports)
    return {"window": window.to_dict(), "findings": len(result.findings), "facts": len(result.store)}


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config YAML (default: the bundled example funnel)")
    common.add_argument("--out-dir", default="bip-out", help="artifact directory (default: %(default)s)")
    common.add_argument("--seed", type=int, default=None, help="random seed for simulate and audit sampling")
    common.add_argument("--window-end", help="exclusive window end, ISO-8601 UTC (default: from the data)")
    common.add_argument("--window-days", type=int, default=None, help="window length in days")
    common.add_argument("--workers", type=int, default=1, help="detector worker threads")
    common.add_argument("--json", action="store_true", help="print machine-readable stage reports")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")

    parser = argparse.ArgumentParser(prog="bip", description="Behavioral insight pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate journeys from an absorbing chain")
    p.add_argument("--chain", help="chain spec JSON (default: the bundled example funnel)")
    p.add_argument("--n", type=int, default=50_000, help="number of journeys")
    p.add_argument("--output", help="events file (default: <out-dir>/events.jsonl)")
    p.set_defaults(fn=cmd_simulate)

    for name, fn, text in (("ingest", cmd_ingest, "normalize events and derive states"),
                           ("run", cmd_run, "run every stage")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--events", help="raw events JSONL (default: <out-dir>/events.jsonl)")
        if name == "run":
            p.add_argument("--external", action="store_true", help="narrate with the external text generator")
        p.set_defaults(fn=fn)

    for name, fn, text in (("snapshot", cmd_snapshot, "build graph snapshots and chain metrics"),
                           ("detect", cmd_detect, "run the detector DAG"),
                           ("facts", cmd_facts, "assert facts from findings")):
        sub.add_parser(name, parents=[common], help=text).set_defaults(fn=fn)

    p = sub.add_parser("feed", parents=[common], help="rank insights and write the feed")
    p.add_argument("--external", action="store_true", help="narrate with the external text generator")
    p.set_defaults(fn=cmd_feed)

    p = sub.add_parser("narrate", parents=[common], help="render narratives for stored findings")
    p.add_argument("--finding", action="append", help="finding id (repeatable; default: all)")
    p.add_argument("--external", action="store_true", help="use the external text generator")
    p.set_defaults(fn=cmd_narrate)

    p = sub.add_parser("query", parents=[common], help="answer a question from stored facts")
    p.add_argument("question")
    p.add_argument("--top-k", type=int, default=3)
    p.set_defaults(fn=cmd_query)

    p = sub.add_parser("audit", parents=[common], help="recompute sampled fact evidence")
    p.add_argument("--sample-size", type=int, default=200)
    p.set_defaults(fn=cmd_audit)
    return parser


def _print_human(command: str, payload: dict[str, Any], reports: Sequence[StageReport]) -> None:
    for r in reports:
        extras = ", ".join(f"{k}={v}" for k, v in r.counts.items() if not isinstance(v, (dict, list)))
        print(f"stage {r.stage} {r.name}: {r.seconds:.2f}s {extras}".rstrip())
    if command == "audit":
        print(f"traceability rate {payload['rate']:.2f} over {len(payload['sampled'])} facts")
        for fid in payload["mismatches"]:
            print(f"  mismatch: {fid}")
    elif command == "query":
        answer = payload["answer"]
        print(answer["text"] if answer else "no grounded answer")
    elif command == "narrate":
        for n in payload["narratives"]:
            print(f"[{n['finding_id']}]")
            print(n["narrative"]["text"] if n["narrative"] else "(bundle failed grounding)")
            print()
    elif command == "simulate":
        print(f"wrote {payload['events']}")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "audit" and args.seed is None:
        args.seed = 0
    reports: list[StageReport] = []
    try:
        payload = args.fn(args, reports)
    except BipError as exc:
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            print(json.dumps({"command": args.command, "error": str(exc), "exit_code": exc.exit_code}))
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.json:
        doc = {"command": args.command, "stages": [r.to_dict() for r in reports], "result": payload}
        print(json.dumps(doc, sort_keys=True, default=str))
    else:
        _print_human(args.command, payload, reports)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
