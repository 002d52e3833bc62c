"""Operator command line: init, run-round, inspect, export, report, replay.

Exit codes: 0 success, 1 engine error (diagnostic on stderr), 2 usage error.
All side effects stay inside the workspace.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, EngineConfig, default_config_document, load_config
from .engine import Engine
from .export_eval import EXPORT_MODES
from .outer_loop import ANGLE_BINS
from .store import ArtifactStore, StoreError, UnknownSampleError


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dataevolver",
        description="Closed-loop visual data construction engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="create a workspace skeleton")
    p_init.add_argument("--workspace", required=True)

    p_run = sub.add_parser("run-round", help="execute one construction round")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--round", type=int, default=None,
                       help="round id; defaults to the next open round")
    p_run.add_argument("--workspace", default=None)

    p_inspect = sub.add_parser("inspect", help="print the trace of a sample")
    p_inspect.add_argument("--sample", required=True)
    p_inspect.add_argument("--workspace", default=".")

    p_export = sub.add_parser("export", help="write dataset manifests")
    p_export.add_argument("--config", required=True)
    p_export.add_argument("--mode", default="image_pairs",
                          choices=("image_pairs",) + EXPORT_MODES)
    p_export.add_argument("--split", default=None,
                          choices=("train", "val", "test"))
    p_export.add_argument("--workspace", default=None)

    p_report = sub.add_parser("report", help="print round reports")
    group = p_report.add_mutually_exclusive_group(required=True)
    group.add_argument("--round", type=int, default=None)
    group.add_argument("--all", action="store_true")
    p_report.add_argument("--workspace", default=".")

    p_replay = sub.add_parser("replay", help="re-execute a logged inner loop")
    p_replay.add_argument("--sample", required=True)
    p_replay.add_argument("--config", required=True)
    p_replay.add_argument("--workspace", default=None)
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    return _build_parser().parse_args(argv)


def _load(args: argparse.Namespace) -> EngineConfig:
    workspace = args.workspace or Path(args.config).parent
    return load_config(args.config, workspace=workspace)


def _cmd_init(args: argparse.Namespace) -> int:
    workspace = Path(args.workspace)
    (workspace / "store").mkdir(parents=True, exist_ok=True)
    (workspace / "exports").mkdir(parents=True, exist_ok=True)
    config_path = workspace / "config.json"
    if not config_path.exists():
        config_path.write_text(
            json.dumps(default_config_document(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    ArtifactStore(workspace / "store")  # materialize index layout
    print(f"workspace ready at {workspace}")
    print(f"config: {config_path}")
    return 0


def _cmd_run_round(args: argparse.Namespace) -> int:
    cfg = _load(args)
    engine = Engine(cfg)
    round_id = args.round
    if round_id is None:
        existing = engine.store.round_ids()
        round_id = (max(existing) + 1) if existing else 0
    outcome = engine.run_round(round_id)
    print(f"round {outcome.round_id} [{outcome.stage}] verdict={outcome.verdict.value}")
    rep = outcome.report
    print(f"  requests={rep['requests']} accepted={rep['accepted']} "
          f"gated={rep['gated_accepted']}")
    for metric, value in sorted(rep["metric_means"].items()):
        print(f"  mean {metric}: {value:.4f}")
    if rep["weak_bins"]:
        print(f"  weak bins: {rep['weak_bins']}")
    print(f"  report artifact: {outcome.report_ref}")
    return 0


def _cmd_inspect(args: argparse.Namespace) -> int:
    store = ArtifactStore(Path(args.workspace) / "store")
    trace = store.get_trace(args.sample)
    state = "open" if trace.open else "closed"
    print(f"sample {trace.sample_id} ({state}), versions: {' -> '.join(trace.versions)}")
    for entry in trace.entries:
        slot = "-" if entry.review_round < 0 else str(entry.review_round)
        print(f"  round={slot:>2} {entry.role:<8} {entry.artifact_id}")
    return 0


def _cmd_export(args: argparse.Namespace) -> int:
    cfg = _load(args)
    engine = Engine(cfg)
    if args.mode == "image_pairs":
        manifests = engine.export_pairs()
        names = [args.split] if args.split else ["train", "val", "test"]
        for name in names:
            manifest = manifests[name]
            print(f"{name}: {len(manifest.rows)} rows, {len(manifest.skipped)} skipped "
                  f"-> exports/image_pairs_{name}.jsonl")
    else:
        manifest = engine.export_mode(args.mode)
        print(f"{args.mode}: {len(manifest.rows)} rows, {len(manifest.skipped)} skipped "
              f"-> exports/{args.mode}.jsonl")
    return 0


def _format_table(per_angle: dict) -> str:
    metrics = sorted({m for stats in per_angle.values() for m in stats})
    header = "metric".ljust(16) + "".join(f"{b:>9}" for b in ANGLE_BINS)
    lines = [header]
    for metric in metrics:
        cells = []
        counts = []
        for b in ANGLE_BINS:
            stats = per_angle.get(str(b), {}).get(metric)
            if stats and stats["count"] > 0:
                cells.append(f"{stats['mean']:>9.3f}")
                counts.append(f"{stats['count']:>9d}")
            else:
                cells.append(f"{'-':>9}")
                counts.append(f"{0:>9d}")
        lines.append(metric.ljust(16) + "".join(cells))
        lines.append("  n".ljust(16) + "".join(counts))
    return "\n".join(lines)


def _print_report(report: dict) -> None:
    print(f"round {report['round_id']} [{report['stage']}] "
          f"verdict={report['verdict']}")
    chain = report["chain"]
    print(f"  chain: feedback={chain['feedback']} inner_gate={chain['inner_gate']} "
          f"dual_gate={chain['dual_gate']}")
    print(f"  requests={report['requests']} accepted={report['accepted']} "
          f"gated={report['gated_accepted']} statuses={report['statuses']}")
    eng = report["engine_report"]
    for key in ("render_success_rate", "artifact_completeness_rate",
                "mean_correction_rounds", "acceptance_rate",
                "geometry_validity_rate", "review_reliability"):
        print(f"  {key}: {eng[key]:.4f}")
    print(_format_table(report["per_angle"]))


def _cmd_report(args: argparse.Namespace) -> int:
    store = ArtifactStore(Path(args.workspace) / "store")
    round_ids = store.round_ids()
    if not round_ids:
        raise StoreError("no rounds recorded in this workspace")
    targets = round_ids if args.all else [args.round]
    for rid in targets:
        record = store.get_round(rid)
        if record.eval_report_ref is None:
            print(f"round {rid}: open, no report yet")
            continue
        _print_report(store.get_json(record.eval_report_ref))
    return 0


def _cmd_replay(args: argparse.Namespace) -> int:
    cfg = _load(args)
    engine = Engine(cfg)
    outcome = engine.replay(args.sample)
    status = "MATCH" if outcome["match"] else "MISMATCH"
    print(f"replay {outcome['sample_id']}: {status}")
    print(f"  original: status={outcome['original']['status']} "
          f"routes={outcome['original']['routes']}")
    print(f"  replayed: status={outcome['replayed']['status']} "
          f"routes={outcome['replayed']['routes']}")
    return 0 if outcome["match"] else 1


_HANDLERS = {
    "init": _cmd_init,
    "run-round": _cmd_run_round,
    "inspect": _cmd_inspect,
    "export": _cmd_export,
    "report": _cmd_report,
    "replay": _cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, StoreError, UnknownSampleError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
