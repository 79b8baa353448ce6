"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (refinement ended in Failure, a
candidate did not validate, an oracle could not be formed), 2 usage or
configuration problem, 3 infrastructure failure (missing tool, dead
endpoint, unexpected crash).
"""

from __future__ import annotations

import argparse
import base64
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from .agents import MockModelClient, TranscriptFactory
from .backends import decompile, normalize
from .cache import STAGE_ORACLE, cache_get, cache_put
from .errors import (
    AllInputsFailed,
    AuthError,
    ConfigError,
    CorpusMalformed,
    EmptyOutput,
    EndpointUnavailable,
    RedecError,
    ToolFailure,
    ToolMissing,
    ToolTimeout,
)
from .model import BinaryTarget, Level, SourceUnit, DecompilerOrigin, TestSuite
from .orchestrator import Outcome, refine, run_corpus
from .reporting import compute_rates, load_records, render, write_reports
from .validators import HarnessSpec, trivial_inputs, generate_oracle, validate

log = logging.getLogger("redec.cli")

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_INFRA = 3


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (see docs/config.md)")
    p.add_argument("--backend", help="decompiler backend name")
    p.add_argument("--max-iters", type=int, help="refinement iteration budget (1..7)")
    p.add_argument("--workers", type=int, help="parallel workers for corpus runs")
    p.add_argument("--strict", action="store_true", help="treat compiler warnings as errors")
    p.add_argument("--timeout-s", type=float, help="per-execution wall clock limit")
    p.add_argument("--mem-mb", type=int, help="per-execution memory limit")
    p.add_argument("--cache-dir", help="cache directory (omit to disable caching)")
    p.add_argument("--log-dir", help="where raw tool output and agent logs go")
    p.add_argument("--results-dir", help="where corpus result files go")
    p.add_argument(
        "--agent", choices=["http", "mock"],
        help="model client: real endpoint or scripted transcript",
    )
    p.add_argument("--transcript", help="scripted replies for --agent mock (JSON)")
    p.add_argument("--dry-run", action="store_true",
                   help="decompile and validate only; never call the model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redec",
        description="Repair decompiler output until it compiles and re-executes "
                    "like the original binary.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decompile", help="run a backend and print recovered source")
    p.add_argument("binary")
    p.add_argument("--out", help="write source here instead of stdout")
    p.add_argument("--raw", action="store_true", help="skip normalization")
    _add_common(p)

    p = sub.add_parser("oracle", help="record the original binary's behavior as a test suite")
    p.add_argument("binary")
    p.add_argument("--inputs", help="JSON input list; default: trivial generated inputs")
    p.add_argument("--out", help="suite path (default tests/<stem>.json)")
    _add_common(p)

    p = sub.add_parser("validate", help="check a candidate source against a suite")
    p.add_argument("source")
    p.add_argument("--tests", required=True, help="test suite JSON")
    p.add_argument("--harness", help="driver C file for function-level candidates")
    _add_common(p)

    p = sub.add_parser("refine", help="decompile, then repair until re-executable")
    p.add_argument("binary")
    p.add_argument("--tests", help="test suite JSON (default tests/<stem>.json)")
    p.add_argument("--harness", help="driver C file for function-level candidates")
    p.add_argument("--out", help="write the final source here")
    _add_common(p)

    p = sub.add_parser("bench", help="refine every binary in a corpus directory")
    p.add_argument("corpus")
    p.add_argument("--run-id", help="results file stem (default timestamp)")
    _add_common(p)

    p = sub.add_parser("report", help="aggregate result files into reports")
    p.add_argument("results", nargs="+", help="one or more results .jsonl files")
    p.add_argument("--out-dir", default="reports")
    p.add_argument("--max-k", type=int, default=5, help="convergence curve length")
    _add_common(p)

    return parser


def _settings(args) -> config_mod.Settings:
    return config_mod.merge(args, config_mod.load_file(args.config))


def _echo_config(settings) -> None:
    print(config_mod.effective_text(settings), file=sys.stderr)


def _load_inputs(path: str | None):
    if path is None:
        return trivial_inputs()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"inputs file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"inputs file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, list):
        raise ConfigError(f"inputs file {path} must be a JSON list")
    inputs = []
    for item in doc:
        if not isinstance(item, dict):
            raise ConfigError("each input must be an object with args/stdin")
        args_list = tuple(str(a) for a in item.get("args", []))
        if "stdin_b64" in item:
            stdin = base64.b64decode(item["stdin_b64"])
        else:
            stdin = str(item.get("stdin", "")).encode()
        inputs.append((args_list, stdin))
    return inputs


def _default_suite_path(binary: Path) -> Path | None:
    # corpus layout first (bin/ and tests/ as siblings), then plain tests/
    for candidate in (
        binary.parent.parent / "tests" / f"{binary.stem}.json",
        Path("tests") / f"{binary.stem}.json",
    ):
        if candidate.is_file():
            return candidate
    return None


def _mock_client(settings, name: str) -> MockModelClient:
    return TranscriptFactory.from_file(settings.transcript_path)(name)


def _require_endpoint(settings) -> None:
    if settings.agent_mode == "http" and not settings.refinement.agent.endpoint_url:
        raise ConfigError(
            "no model endpoint configured; set A4D_ENDPOINT, agent.endpoint in the "
            "config file, or use --agent mock / --dry-run"
        )


# --- command bodies ---------------------------------------------------------


def cmd_decompile(args) -> int:
    settings = _settings(args)
    _echo_config(settings)
    cfg = settings.refinement
    target = _target(args.binary)
    unit = decompile(cfg.backend, target, log_dir=cfg.log_dir)
    if not args.raw:
        unit = normalize(unit)
    if args.out:
        Path(args.out).write_text(unit.text)
        print(f"wrote {len(unit.text)} chars to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(unit.text)
    return EXIT_OK


def _target(path_str: str) -> BinaryTarget:
    path = Path(path_str)
    if not path.is_file():
        raise ConfigError(f"binary not found: {path}")
    return BinaryTarget.from_path(path)


def cmd_oracle(args) -> int:
    settings = _settings(args)
    _echo_config(settings)
    cfg = settings.refinement
    target = _target(args.binary)
    inputs = _load_inputs(args.inputs)
    cache_key = None
    if cfg.cache_dir:
        import hashlib

        blob = json.dumps([[list(a), s.decode("latin-1")] for a, s in inputs])
        cache_key = f"{target.id}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"
        doc = cache_get(cfg.cache_dir, STAGE_ORACLE, cache_key)
        if doc is not None and "suite" in doc:
            suite = TestSuite.from_json(doc["suite"])
            print(f"oracle: {len(suite.cases)} cases (cached)", file=sys.stderr)
            return _write_suite(args, target, suite)
    suite = generate_oracle(target, inputs, cfg.limits)
    if cfg.cache_dir and cache_key:
        cache_put(cfg.cache_dir, STAGE_ORACLE, cache_key, {"suite": suite.to_json()})
    print(
        f"oracle: kept {len(suite.cases)}/{len(inputs)} inputs", file=sys.stderr
    )
    return _write_suite(args, target, suite)


def _write_suite(args, target: BinaryTarget, suite: TestSuite) -> int:
    out = Path(args.out) if args.out else Path("tests") / f"{Path(args.binary).stem}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    suite.save(out)
    print(f"wrote {out}", file=sys.stderr)
    return EXIT_OK


def cmd_validate(args) -> int:
    settings = _settings(args)
    _echo_config(settings)
    cfg = settings.refinement
    src_path = Path(args.source)
    if not src_path.is_file():
        raise ConfigError(f"source not found: {src_path}")
    suite_path = Path(args.tests)
    if not suite_path.is_file():
        raise ConfigError(f"test suite not found: {suite_path}")
    source = SourceUnit(src_path.read_text(), DecompilerOrigin("user"))
    harness = HarnessSpec(harness_path=Path(args.harness)) if args.harness else None
    report = validate(
        source, TestSuite.load(suite_path), cfg.toolchain, harness,
        cfg.limits, cfg.check_exit,
    )
    if report.level is Level.PASS:
        print("Pass: candidate re-executes correctly")
        return EXIT_OK
    print(f"{report.level}: candidate rejected")
    if report.diagnostics and report.diagnostics.raw_text:
        print(report.diagnostics.raw_text.strip()[:2000])
    for case, actual, exit_code in (report.diagnostics.failed_tests if report.diagnostics else ())[:5]:
        print(f"  args={list(case.args)} expected={case.expected_stdout!r} got={actual!r} exit={exit_code}")
    return EXIT_DOMAIN


def cmd_refine(args) -> int:
    settings = _settings(args)
    _echo_config(settings)
    cfg = settings.refinement
    target = _target(args.binary)
    suite_path = Path(args.tests) if args.tests else _default_suite_path(Path(args.binary))
    if suite_path is None or not suite_path.is_file():
        raise ConfigError(
            f"no test suite for {target.name}; pass --tests or create "
            f"tests/{target.name}.json (redec oracle can generate one)"
        )
    client = None
    if settings.agent_mode == "mock":
        client = _mock_client(settings, target.name)
    elif not settings.dry_run:
        _require_endpoint(settings)
    harness = HarnessSpec(harness_path=Path(args.harness)) if args.harness else None
    suite = TestSuite.load(suite_path)
    if settings.dry_run:
        report = validate(
            normalize(decompile(cfg.backend, target, log_dir=cfg.log_dir)),
            suite, cfg.toolchain, harness, cfg.limits, cfg.check_exit,
        )
        print(f"dry run: baseline level {report.level}")
        return EXIT_OK if report.level is Level.PASS else EXIT_DOMAIN
    outcome = refine(target, suite, cfg, client=client, harness=harness)
    for rec in outcome.trace:
        marker = " (no change extracted)" if rec.note else ""
        print(f"  iteration {rec.index}: {rec.level}"
              + (" -> repair" if rec.repaired else "") + marker, file=sys.stderr)
    if outcome.status is Outcome.SUCCESS:
        print(f"Success after {outcome.repairs} repair(s)")
        if args.out and outcome.final_source:
            Path(args.out).write_text(outcome.final_source.text)
            print(f"wrote {args.out}", file=sys.stderr)
        elif outcome.final_source:
            sys.stdout.write(outcome.final_source.text)
        return EXIT_OK
    if outcome.status is Outcome.FAILURE:
        print(f"Failure: stuck at {outcome.last_level} after {outcome.repairs} repair(s)")
        if args.out and outcome.final_source:
            Path(args.out).write_text(outcome.final_source.text)
        return EXIT_DOMAIN
    print(f"Error ({outcome.error_kind}): {outcome.error_detail}")
    return EXIT_INFRA


def cmd_bench(args) -> int:
    settings = _settings(args)
    _echo_config(settings)
    cfg = settings.refinement
    factory = None
    if settings.agent_mode == "mock":
        factory = TranscriptFactory.from_file(settings.transcript_path)
    elif not settings.dry_run:
        _require_endpoint(settings)
    records, counters = run_corpus(
        args.corpus, cfg,
        client_factory=factory,
        results_dir=settings.results_dir,
        run_id=args.run_id,
        dry_run=settings.dry_run,
    )
    from .reporting import CorpusRecord

    table = compute_rates([CorpusRecord.from_dict(r) for r in records])
    sys.stdout.write(render(table, "md"))
    print(
        f"counters: decompile={counters.decompile_calls} "
        f"validate={counters.validate_calls} model={counters.model_calls} "
        f"cache_hits={counters.cache_hits}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_report(args) -> int:
    for path in args.results:
        if not Path(path).is_file():
            raise ConfigError(f"results file not found: {path}")
    try:
        records = load_records(args.results)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed results file: {exc}") from None
    out = write_reports(records, args.out_dir, max_k=args.max_k)
    sys.stdout.write(render(out["table"], "md"))
    print(f"wrote report.md, report.csv, convergence.csv, failures.csv to {args.out_dir}",
          file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "decompile": cmd_decompile,
    "oracle": cmd_oracle,
    "validate": cmd_validate,
    "refine": cmd_refine,
    "bench": cmd_bench,
    "report": cmd_report,
}


def dispatch(argv: list[str]) -> int:
    """Parse and run; always returns an exit code, never raises."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors itself
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CorpusMalformed) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AllInputsFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ToolMissing, ToolTimeout, ToolFailure, EmptyOutput,
            EndpointUnavailable, AuthError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except RedecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRA
    except Exception as exc:  # no traceback spray from the CLI
        log.exception("unexpected failure")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INFRA


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
