"""The refinement loop and the corpus runner built on top of it.

One refinement: decompile, normalize, then up to N rounds of validate and
repair. Every round revalidates from the bottom, so a repair that breaks an
already-passing level is caught on the next round. The corpus runner
parallelizes across binaries, caches terminal outcomes, and appends results
incrementally so interrupted runs resume from cache.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .agents import (
    AgentConfig,
    HttpModelClient,
    JsonlLogger,
    _TokenBucket,
    prompt_fingerprint,
    repair,
)
from .backends import BackendDescriptor, decompile, default_registry, normalize
from .cache import STAGE_DECOMPILED, STAGE_REFINED, cache_get, cache_put
from .errors import (
    AuthError,
    ConfigError,
    CorpusMalformed,
    EmptyOutput,
    EmptyRepair,
    EndpointUnavailable,
    ToolFailure,
    ToolMissing,
    ToolTimeout,
)
from .model import BinaryTarget, Diagnostics, DecompilerOrigin, Level, SourceUnit, TestSuite
from .reporting import CorpusRecord, classify_failure
from .sandbox import ExecLimits
from .validators import HarnessSpec, Toolchain, validate

log = logging.getLogger("redec.orchestrator")

MAX_ITERATIONS_CAP = 7


class Outcome(Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    ERROR = "error"


@dataclass
class Counters:
    """Instrumentation: how many real calls a run actually made."""

    decompile_calls: int = 0
    validate_calls: int = 0
    model_calls: int = 0
    cache_hits: int = 0

    def add(self, other: "Counters") -> None:
        self.decompile_calls += other.decompile_calls
        self.validate_calls += other.validate_calls
        self.model_calls += other.model_calls
        self.cache_hits += other.cache_hits

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class RefinementConfig:
    backend: BackendDescriptor
    toolchain: Toolchain = Toolchain()
    limits: ExecLimits = ExecLimits()
    agent: AgentConfig = AgentConfig()
    max_iterations: int = 5
    check_exit: bool = True
    workers: int = 1
    cache_dir: str | None = None
    log_dir: str | None = None

    def __post_init__(self):
        if not 1 <= self.max_iterations <= MAX_ITERATIONS_CAP:
            raise ConfigError(
                f"max_iterations must be in 1..{MAX_ITERATIONS_CAP}, "
                f"got {self.max_iterations}"
            )


def config_digest(cfg: RefinementConfig) -> str:
    """Cache key component: everything that changes refinement results.

    Deliberately excludes worker count and log locations, which only affect
    scheduling and observability.
    """
    doc = {
        "backend": cfg.backend.name,
        "template": cfg.backend.command_template,
        "toolchain": cfg.toolchain.fingerprint(),
        "max_iterations": cfg.max_iterations,
        "check_exit": cfg.check_exit,
        "model": cfg.agent.model_name,
        "prompts": prompt_fingerprint(),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class IterationRecord:
    index: int  # 1-based validate round
    level: Level
    source_digest: str
    repaired: bool  # False only on the passing round
    repeat_of: int | None = None  # earlier round that validated identical code
    note: str = ""


@dataclass(frozen=True)
class RefinementOutcome:
    status: Outcome
    final_source: SourceUnit | None
    repairs: int
    last_level: Level | None
    trace: tuple[IterationRecord, ...]
    first_pass_iteration: int | None = None
    repairs_per_level: dict = field(default_factory=dict)
    error_kind: str | None = None
    error_detail: str = ""
    final_diagnostics: Diagnostics | None = None


def _error_outcome(kind: str, exc: Exception, trace, code, level, diag) -> RefinementOutcome:
    log.warning("refinement error (%s): %s", kind, exc)
    return RefinementOutcome(
        status=Outcome.ERROR,
        final_source=code,
        repairs=sum(1 for t in trace if t.repaired),
        last_level=level,
        trace=tuple(trace),
        error_kind=kind,
        error_detail=str(exc),
        final_diagnostics=diag,
    )


def refine(
    target: BinaryTarget,
    suite: TestSuite,
    cfg: RefinementConfig,
    client=None,
    harness: HarnessSpec | None = None,
    counters: Counters | None = None,
    initial_source: SourceUnit | None = None,
) -> RefinementOutcome:
    """Run the constrained repair loop on one binary.

    client defaults to an HTTP client built from cfg.agent; tests and
    offline runs pass a scripted mock instead. initial_source skips the
    decompile step when the caller already resolved it (cache). A reply
    with no extractable code consumes the iteration but leaves the
    candidate unchanged.
    """
    counters = counters if counters is not None else Counters()
    if initial_source is None:
        try:
            counters.decompile_calls += 1
            initial_source = decompile(cfg.backend, target, log_dir=cfg.log_dir)
        except ToolMissing as exc:
            return _error_outcome("ToolMissing", exc, [], None, None, None)
        except (ToolTimeout, ToolFailure, EmptyOutput) as exc:
            return _error_outcome("DecompileFailed", exc, [], None, None, None)
    code = normalize(initial_source)

    attempt_log = None
    if cfg.log_dir:
        attempt_log = JsonlLogger(Path(cfg.log_dir) / f"agent-{target.id}.jsonl")
    limiter = None
    if cfg.agent.requests_per_minute:
        limiter = _TokenBucket(cfg.agent.requests_per_minute)

    trace: list[IterationRecord] = []
    seen: dict[str, int] = {}
    repairs_per_level: dict[str, int] = {}
    diag = None
    for k in range(1, cfg.max_iterations + 1):
        try:
            counters.validate_calls += 1
            report = validate(
                code, suite, cfg.toolchain, harness, cfg.limits, cfg.check_exit
            )
        except ToolMissing as exc:
            return _error_outcome("ToolMissing", exc, trace, code, _last_level(trace), diag)
        diag = report.diagnostics
        digest = code.digest
        repeat_of = seen.get(digest)
        if repeat_of is None:
            seen[digest] = k
        if report.level is Level.PASS:
            trace.append(
                IterationRecord(k, Level.PASS, digest, repaired=False, repeat_of=repeat_of)
            )
            return RefinementOutcome(
                status=Outcome.SUCCESS,
                final_source=code,
                repairs=k - 1,
                last_level=Level.PASS,
                trace=tuple(trace),
                first_pass_iteration=k,
                repairs_per_level=dict(repairs_per_level),
            )
        note = ""
        try:
            if client is None:
                client = HttpModelClient(cfg.agent)
            counters.model_calls += 1
            repairs_per_level[report.level.name] = repairs_per_level.get(report.level.name, 0) + 1
            code = repair(
                report.level,
                code,
                report.diagnostics,
                client,
                cfg.agent,
                iteration=k,
                attempt_log=attempt_log,
            )
        except EmptyRepair as exc:
            note = f"empty repair: {exc}"
            log.warning("%s: iteration %d: %s", target.name, k, note)
        except EndpointUnavailable as exc:
            trace.append(IterationRecord(k, report.level, digest, repaired=False, repeat_of=repeat_of))
            return _error_outcome("EndpointUnavailable", exc, trace, code, report.level, diag)
        except AuthError as exc:
            trace.append(IterationRecord(k, report.level, digest, repaired=False, repeat_of=repeat_of))
            return _error_outcome("EndpointUnavailable", exc, trace, code, report.level, diag)
        trace.append(
            IterationRecord(k, report.level, digest, repaired=True, repeat_of=repeat_of, note=note)
        )
    return RefinementOutcome(
        status=Outcome.FAILURE,
        final_source=code,
        repairs=sum(1 for t in trace if t.repaired),
        last_level=trace[-1].level,
        trace=tuple(trace),
        repairs_per_level=dict(repairs_per_level),
        final_diagnostics=diag,
    )


def _last_level(trace) -> Level | None:
    return trace[-1].level if trace else None


# --- corpus runs ------------------------------------------------------------


@dataclass(frozen=True)
class CorpusJob:
    bin_path: str
    suite_path: str
    harness_path: str | None
    meta: dict
    cfg: RefinementConfig
    client_factory: object | None
    dry_run: bool


def _decompiled_key(target: BinaryTarget, backend: BackendDescriptor) -> str:
    t = hashlib.sha256(backend.command_template.encode()).hexdigest()[:12]
    return f"{target.id}-{backend.name}-{t}"


def _resolve_initial(job: CorpusJob, target: BinaryTarget, counters: Counters) -> SourceUnit:
    cfg = job.cfg
    if cfg.cache_dir:
        doc = cache_get(cfg.cache_dir, STAGE_DECOMPILED, _decompiled_key(target, cfg.backend))
        if doc is not None and isinstance(doc.get("source"), str):
            return SourceUnit(doc["source"], DecompilerOrigin(cfg.backend.name))
    counters.decompile_calls += 1
    raw = decompile(cfg.backend, target, log_dir=cfg.log_dir)
    if cfg.cache_dir:
        cache_put(
            cfg.cache_dir,
            STAGE_DECOMPILED,
            _decompiled_key(target, cfg.backend),
            {"source": raw.text},
        )
    return raw


def _process_one(job: CorpusJob) -> tuple[dict, dict]:
    """Worker body: one binary in, one (record, counters) pair out.

    Must be a module-level function so process pools can pickle it; must
    not raise, because one binary's crash may only cost that record.
    """
    counters = Counters()
    cfg = job.cfg
    target = BinaryTarget.from_path(job.bin_path, opt_level=job.meta.get("opt_level", ""))
    category = job.meta.get("category", "")
    target_symbol = job.meta.get("target_symbol")
    base_record = dict(
        name=target.name,
        binary=target.id,
        backend=cfg.backend.name,
        opt_level=target.opt_level,
        category=category,
    )
    digest = config_digest(cfg)
    refined_key = f"{target.id}-{digest}"
    if cfg.cache_dir and not job.dry_run:
        doc = cache_get(cfg.cache_dir, STAGE_REFINED, refined_key)
        if doc is not None and isinstance(doc.get("record"), dict):
            counters.cache_hits += 1
            return doc["record"], counters.as_dict()
    harness = None
    if job.harness_path:
        harness = HarnessSpec(harness_path=Path(job.harness_path), target_symbol=target_symbol)
    try:
        suite = TestSuite.load(job.suite_path)
        initial = _resolve_initial(job, target, counters)
        if job.dry_run:
            counters.validate_calls += 1
            report = validate(
                normalize(initial), suite, cfg.toolchain, harness, cfg.limits, cfg.check_exit
            )
            passed = report.level is Level.PASS
            record = CorpusRecord(
                **base_record,
                status="success" if passed else "failure",
                best_level_baseline=report.level,
                best_level_final=report.level,
                iterations_used=0,
                first_pass_iteration=1 if passed else None,
                repairs_per_level={},
                failure_class=classify_failure(
                    "success" if passed else "failure",
                    report.level,
                    normalize(initial).text,
                    report.diagnostics,
                    target_symbol,
                ),
                error_kind=None,
            ).to_dict()
            return record, counters.as_dict()
        client = job.client_factory(target.name) if job.client_factory else None
        outcome = refine(
            target, suite, cfg,
            client=client, harness=harness, counters=counters, initial_source=initial,
        )
    except Exception as exc:  # worker isolation: any surprise becomes an Error record
        log.exception("%s: unexpected worker failure", target.name)
        record = CorpusRecord(
            **base_record,
            status="error",
            best_level_baseline=None,
            best_level_final=None,
            iterations_used=0,
            first_pass_iteration=None,
            repairs_per_level={},
            failure_class=classify_failure("error", None, None),
            error_kind=f"{type(exc).__name__}: {exc}",
        ).to_dict()
        return record, counters.as_dict()

    baseline = outcome.trace[0].level if outcome.trace else None
    if outcome.status is Outcome.SUCCESS:
        final_level: Level | None = Level.PASS
    elif outcome.status is Outcome.FAILURE:
        final_level = outcome.last_level
    else:
        final_level = outcome.last_level
    record = CorpusRecord(
        **base_record,
        status=outcome.status.value,
        best_level_baseline=baseline,
        best_level_final=final_level,
        iterations_used=outcome.repairs,
        first_pass_iteration=outcome.first_pass_iteration,
        repairs_per_level=dict(outcome.repairs_per_level),
        failure_class=classify_failure(
            outcome.status.value,
            final_level,
            outcome.final_source.text if outcome.final_source else None,
            outcome.final_diagnostics,
            target_symbol,
        ),
        error_kind=outcome.error_kind,
    ).to_dict()
    if cfg.cache_dir and outcome.status is not Outcome.ERROR:
        cache_put(
            cfg.cache_dir,
            STAGE_REFINED,
            refined_key,
            {
                "record": record,
                "final_source": outcome.final_source.text if outcome.final_source else None,
            },
        )
    return record, counters.as_dict()


def discover_corpus(corpus_dir: str | Path) -> list[dict]:
    """List the corpus: bin/ is required, tests/harness/meta are per name."""
    corpus = Path(corpus_dir)
    bin_dir = corpus / "bin"
    if not bin_dir.is_dir():
        raise CorpusMalformed(f"{corpus}: missing bin/ directory")
    entries = []
    candidates = sorted(
        p for p in bin_dir.iterdir() if p.is_file() and os.access(p, os.X_OK)
    )
    for bin_path in candidates:
        name = bin_path.stem
        suite_path = corpus / "tests" / f"{name}.json"
        if not suite_path.is_file():
            log.warning("corpus: %s has no test suite at %s; skipping", name, suite_path)
            continue
        harness_path = corpus / "harness" / f"{name}.c"
        meta_path = corpus / "meta" / f"{name}.json"
        meta = {}
        if meta_path.is_file():
            try:
                meta = json.loads(meta_path.read_text())
            except ValueError as exc:
                log.warning("corpus: bad meta for %s (%s); ignoring", name, exc)
        entries.append(
            dict(
                bin_path=str(bin_path),
                suite_path=str(suite_path),
                harness_path=str(harness_path) if harness_path.is_file() else None,
                meta=meta,
            )
        )
    if not entries:
        raise CorpusMalformed(f"{corpus}: no usable binaries under bin/")
    return entries


def run_corpus(
    corpus_dir: str | Path,
    cfg: RefinementConfig,
    client_factory=None,
    results_dir: str | Path = "results",
    run_id: str | None = None,
    dry_run: bool = False,
) -> tuple[list[dict], Counters]:
    """Refine every binary in the corpus; returns (records, call counters).

    Records are appended to results/<run id>.jsonl as they complete, so an
    interrupted run plus the cache makes the next run incremental.
    """
    jobs = [
        CorpusJob(cfg=cfg, client_factory=client_factory, dry_run=dry_run, **entry)
        for entry in discover_corpus(corpus_dir)
    ]
    run_id = run_id or time.strftime("run-%Y%m%d-%H%M%S")
    results_path = Path(results_dir) / f"{run_id}.jsonl"
    results_path.parent.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    totals = Counters()

    def _consume(record: dict, stats: dict) -> None:
        records.append(record)
        totals.add(Counters(**stats))
        with open(results_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")

    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            futures = {pool.submit(_process_one, job): job for job in jobs}
            for fut in as_completed(futures):
                record, stats = fut.result()
                _consume(record, stats)
        records.sort(key=lambda r: r["name"])
    else:
        for job in jobs:
            record, stats = _process_one(job)
            _consume(record, stats)
    log.info(
        "corpus run %s: %d records (%d from cache, %d model calls)",
        run_id, len(records), totals.cache_hits, totals.model_calls,
    )
    return records, totals
