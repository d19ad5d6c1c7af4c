"""Command-line front door.

Exit codes are stable for scripting: 0 on success, 1 on usage/parse/
validation errors, 2 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import catalog_server
from .errors import MissingInput, OrchsimError, ParseError, RunFailed, ValidationError
from .faults import FaultSchedule, parse_fault_schedule
from .metrics import render_table
from .pipeline import (
    Runner,
    RunReport,
    parse_cluster_fixture,
    parse_spec,
    validate,
)
from .seeding import derive_seed
from .transfer import build_catalog

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUN_FAILED = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="orchsim",
        description="Deterministic mini-orchestrator and workflow cluster simulator.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("seed", help="write a deterministic source catalog to disk")
    p.add_argument("--spec", required=True, help="pipeline spec JSON (for the catalog config)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("validate", help="check a spec against a cluster fixture")
    p.add_argument("--spec", required=True)
    p.add_argument("--cluster", required=True)

    p = sub.add_parser("run", help="run a full pipeline")
    _add_run_args(p)

    p = sub.add_parser("run-step", help="run one step against exported state")
    _add_run_args(p)
    p.add_argument("--step", required=True, help="step name to run")
    p.add_argument("--state", default=None, help="pre-state directory (exported earlier)")

    p = sub.add_parser("report", help="re-render the summary table from a run report")
    p.add_argument("--report", required=True, help="run_report.json path")

    p = sub.add_parser("serve-catalog", help="serve a seeded catalog over loopback HTTP")
    p.add_argument("--dir", required=True, help="directory written by `orchsim seed`")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8808)

    return parser


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--spec", required=True)
    p.add_argument("--cluster", required=True)
    p.add_argument("--faults", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.add_argument("--mode", choices=["sim", "integration"], default="sim")
    p.add_argument("--catalog-url", default=None, help="catalog server URL (integration mode)")


def _load(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as err:
        raise ParseError(f"cannot read {path}: {err}") from None


def cmd_seed(args) -> int:
    spec = parse_spec(_load(args.spec))
    cat = spec.catalog
    seed = cat.seed if cat.seed is not None else derive_seed(args.seed, "catalog")
    catalog = build_catalog(
        files=cat.files,
        sections=cat.sections,
        total_bytes=cat.total_bytes,
        subset_section=cat.subset_section,
        seed=seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = json.dumps(catalog.manifest_dict(), sort_keys=True, indent=1) + "\n"
    (out / "manifest.json").write_text(manifest)
    for obj in catalog.objects:
        file_dir = out / "files" / obj.url
        file_dir.mkdir(parents=True, exist_ok=True)
        for section in sorted(obj.sections):
            (file_dir / section).write_bytes(catalog.section_content(obj.url, section))
    print(f"seeded {len(catalog.objects)} files ({catalog.total_bytes} bytes) into {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    spec = parse_spec(_load(args.spec))
    fixture = parse_cluster_fixture(_load(args.cluster))
    issues = validate(spec, fixture)
    for issue in issues:
        where = f" [{issue.step}]" if issue.step else ""
        print(f"{issue.severity}{where}: {issue.message}")
    if any(i.severity == "error" for i in issues):
        return EXIT_USAGE
    print(f"spec {spec.name!r} is valid for this cluster ({len(issues)} warnings)")
    return EXIT_OK


def _write_run_artifacts(result, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_report.json").write_text(result.report.to_json())
    result.metrics.export_jsonl(out_dir / "metrics.jsonl")
    (out_dir / "summary_table.txt").write_text(result.report.table)


def cmd_run(args) -> int:
    spec = parse_spec(_load(args.spec))
    fixture = parse_cluster_fixture(_load(args.cluster))
    faults = FaultSchedule()
    if args.faults:
        node_names = {n["name"] for n in fixture.nodes}
        faults = parse_fault_schedule(_load(args.faults), node_names)
    runner = Runner(
        spec,
        fixture,
        seed=args.seed,
        faults=faults,
        mode=args.mode,
        catalog_url=args.catalog_url,
    )
    result = runner.run()
    _write_run_artifacts(result, Path(args.out))
    print(result.report.table, end="")
    print(f"data digest: {result.report.data_digest}")
    return EXIT_OK


def cmd_run_step(args) -> int:
    spec = parse_spec(_load(args.spec))
    fixture = parse_cluster_fixture(_load(args.cluster))
    faults = FaultSchedule()
    if args.faults:
        node_names = {n["name"] for n in fixture.nodes}
        faults = parse_fault_schedule(_load(args.faults), node_names)
    runner = Runner(
        spec,
        fixture,
        seed=args.seed,
        faults=faults,
        mode=args.mode,
        catalog_url=args.catalog_url,
    )
    out_dir = Path(args.out)
    result = runner.run_step(args.step, pre_state=args.state, out_state=out_dir / "state")
    _write_run_artifacts(result, out_dir)
    print(result.report.table, end="")
    return EXIT_OK


def cmd_report(args) -> int:
    report = RunReport.from_json(Path(args.report).read_text())
    print(render_table(report.summaries, report.tick_seconds), end="")
    return EXIT_OK


def cmd_serve_catalog(args) -> int:
    catalog_server.serve_forever(args.dir, host=args.host, port=args.port)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "seed": cmd_seed,
        "validate": cmd_validate,
        "run": cmd_run,
        "run-step": cmd_run_step,
        "report": cmd_report,
        "serve-catalog": cmd_serve_catalog,
    }
    try:
        return handlers[args.cmd](args)
    except RunFailed as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except MissingInput as err:
        print(f"error: missing input: {err}", file=sys.stderr)
        return EXIT_RUN_FAILED
    except (ParseError, ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (OrchsimError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
