"""The three-level constraint checks: syntax, compile+link, execution.

Level semantics: a candidate is validated bottom-up and the report names the
first level that fails. An L3 report therefore implies the syntax and
compile checks succeeded. Warnings never gate by default; strict mode turns
them into errors.
"""

from __future__ import annotations

import logging
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .errors import AllInputsFailed, ConfigError, ToolMissing
from .model import (
    BinaryTarget,
    Diagnostics,
    Level,
    SourceUnit,
    TestCase,
    TestSuite,
    output_equal,
)
from .sandbox import ExecLimits, Verdict, execute

log = logging.getLogger("redec.validators")


@dataclass(frozen=True)
class Toolchain:
    compiler: str = "cc"
    syntax_flags: tuple[str, ...] = ("-fsyntax-only", "-w")
    compile_flags: tuple[str, ...] = ("-Wall", "-Wextra")
    link_flags: tuple[str, ...] = ("-lm",)
    strict: bool = False  # adds -Werror to the compile gate

    def syntax_argv(self, path: Path) -> list[str]:
        flags = list(self.syntax_flags)
        if "-fsyntax-only" not in flags:  # the syntax gate must never link
            flags.insert(0, "-fsyntax-only")
        return [self.compiler, *flags, str(path)]

    def compile_argv(self, sources: list[Path], out: Path) -> list[str]:
        flags = list(self.compile_flags)
        if self.strict and "-Werror" not in flags:
            flags.append("-Werror")
        return [self.compiler, *map(str, sources), "-o", str(out), *flags, *self.link_flags]

    def fingerprint(self) -> str:
        return " ".join(
            [self.compiler, *self.syntax_flags, *self.compile_flags,
             *self.link_flags, f"strict={self.strict}"]
        )


@dataclass(frozen=True)
class HarnessSpec:
    """How to build a runnable program from the candidate.

    Whole-program candidates compile alone; function-with-harness candidates
    link against a fixed driver that calls the recovered function, so the
    recovered signature must match what the driver expects.
    """

    harness_path: Path | None = None
    target_symbol: str | None = None

    @property
    def whole_program(self) -> bool:
        return self.harness_path is None


@dataclass(frozen=True)
class ValidationReport:
    level: Level
    diagnostics: Diagnostics | None = None  # None iff level is PASS
    warnings: str = ""


def _run_compiler(argv: list[str], compiler: str) -> subprocess.CompletedProcess:
    try:
        return subprocess.run(argv, capture_output=True, text=True, timeout=120)
    except FileNotFoundError:
        raise ToolMissing(f"compiler {compiler!r} not found on PATH") from None
    except subprocess.TimeoutExpired:
        raise ToolMissing(f"compiler {compiler!r} hung; toolchain unusable") from None


def check_syntax(source: SourceUnit | str, toolchain: Toolchain = Toolchain()) -> Diagnostics | None:
    """Parse-only check. None means the candidate clears L1."""
    text = source.text if isinstance(source, SourceUnit) else source
    with tempfile.TemporaryDirectory(prefix="redec-syn-") as d:
        path = Path(d) / "candidate.c"
        path.write_text(text)
        proc = _run_compiler(toolchain.syntax_argv(path), toolchain.compiler)
    if proc.returncode == 0:
        return None
    return Diagnostics(level=Level.L1, raw_text=proc.stderr)


_LINK_STAGE_RE = re.compile(
    r"undefined reference to|multiple definition of|ld returned \d+ exit status|"
    r"duplicate symbol|relocation truncated"
)


def check_compile(
    source: SourceUnit | str,
    toolchain: Toolchain = Toolchain(),
    harness: HarnessSpec | None = None,
    workdir: Path | None = None,
) -> tuple[Path | None, Diagnostics | None, str]:
    """Compile and link into an executable.

    Returns (exe_path, diagnostics, warnings). On failure exe_path is None;
    link failures against a harness are tagged signature_mismatch because
    they mean the recovered prototype does not provide what the driver
    calls.
    """
    text = source.text if isinstance(source, SourceUnit) else source
    own_dir = None
    if workdir is None:
        own_dir = tempfile.mkdtemp(prefix="redec-cc-")
        workdir = Path(own_dir)
    src = workdir / "candidate.c"
    src.write_text(text)
    sources = [src]
    harness_present = harness is not None and harness.harness_path is not None
    if harness_present:
        sources.append(Path(harness.harness_path))
    exe = workdir / "candidate"
    proc = _run_compiler(toolchain.compile_argv(sources, exe), toolchain.compiler)
    if proc.returncode == 0:
        if proc.stderr.strip():
            log.info("compile warnings:\n%s", proc.stderr.strip()[:2000])
        return exe, None, proc.stderr
    mismatch = harness_present and bool(_LINK_STAGE_RE.search(proc.stderr))
    diag = Diagnostics(level=Level.L2, raw_text=proc.stderr, signature_mismatch=mismatch)
    return None, diag, proc.stderr


OracleInput = tuple[tuple[str, ...], bytes]  # (argv tail, stdin)


def trivial_inputs() -> list[OracleInput]:
    """Convenience generator: small integers, boundary values, short strings.

    A starting point for binaries whose input format is unknown; real
    corpora should supply curated input lists.
    """
    return [
        ((), b""),
        (("0",), b""),
        (("1",), b""),
        (("2",), b""),
        (("5",), b""),
        (("10",), b""),
        (("-1",), b""),
        (("100",), b""),
        ((), b"0\n"),
        ((), b"1\n"),
        ((), b"7\n"),
        ((), b"hello\n"),
        ((), b"a b c\n"),
        (("abc",), b""),
        (("", "x"), b""),
    ]


def generate_oracle(
    target: BinaryTarget,
    inputs: list[OracleInput],
    limits: ExecLimits = ExecLimits(),
) -> TestSuite:
    """Run the original binary on each input and record its behavior.

    Inputs on which the original itself times out, crashes, or fails to
    launch are dropped with a warning; if nothing survives the oracle is
    meaningless and AllInputsFailed is raised.
    """
    if not inputs:
        raise AllInputsFailed(f"{target.name}: no inputs supplied")
    cases = []
    for args, stdin in inputs:
        rec = execute(target.path, args, stdin, limits)
        if rec.verdict is not Verdict.COMPLETED or not isinstance(rec.exit_code, int):
            log.warning(
                "oracle %s: dropping input args=%r (%s)",
                target.name, list(args), rec.verdict.value,
            )
            continue
        cases.append(
            TestCase(
                args=tuple(args),
                stdin=stdin,
                expected_stdout=rec.stdout,
                expected_exit=rec.exit_code,
            )
        )
    if not cases:
        raise AllInputsFailed(
            f"{target.name}: original binary failed on all {len(inputs)} inputs"
        )
    return TestSuite(source_binary=target.id, cases=tuple(cases))


def run_tests(
    exe: str | Path,
    suite: TestSuite,
    limits: ExecLimits = ExecLimits(),
    check_exit: bool = True,
) -> list[tuple[TestCase, bytes, "int | object"]]:
    """Run every case and return the failures, in suite order.

    Never short-circuits: the repair feedback wants the full failure
    picture. A truncated capture only counts as matching when the expected
    output itself is at least the capture limit.
    """
    failures = []
    for case in suite.cases:
        rec = execute(exe, case.args, case.stdin, limits)
        ok = rec.verdict is Verdict.COMPLETED
        if ok and rec.stdout_truncated and len(case.expected_stdout) < limits.max_stdout_bytes:
            ok = False
        if ok and not output_equal(case.expected_stdout, rec.stdout):
            ok = False
        if ok and check_exit and rec.exit_code != case.expected_exit:
            ok = False
        if not ok:
            failures.append((case, rec.stdout, rec.exit_code))
    return failures


def validate(
    source: SourceUnit | str,
    suite: TestSuite | None,
    toolchain: Toolchain = Toolchain(),
    harness: HarnessSpec | None = None,
    limits: ExecLimits = ExecLimits(),
    check_exit: bool = True,
) -> ValidationReport:
    """Check the candidate bottom-up and report the first failing level.

    suite may be None only when the caller wants a compile-only assessment;
    requesting L3 with an empty suite is a configuration error, not a pass.
    """
    diag = check_syntax(source, toolchain)
    if diag is not None:
        return ValidationReport(level=Level.L1, diagnostics=diag)
    with tempfile.TemporaryDirectory(prefix="redec-val-") as d:
        exe, diag, warnings = check_compile(source, toolchain, harness, Path(d))
        if diag is not None:
            return ValidationReport(level=Level.L2, diagnostics=diag, warnings=warnings)
        if suite is None or not suite.cases:
            raise ConfigError("L3 validation requested with no test cases")
        failures = run_tests(exe, suite, limits, check_exit)
    if failures:
        summary = f"{len(failures)}/{len(suite.cases)} test cases failed"
        return ValidationReport(
            level=Level.L3,
            diagnostics=Diagnostics(
                level=Level.L3, raw_text=summary, failed_tests=tuple(failures)
            ),
            warnings=warnings,
        )
    return ValidationReport(level=Level.PASS, warnings=warnings)
