"""Resource-limited execution of untrusted candidate binaries.

Candidates are decompiler output that we compiled ourselves, so the threat
model is accidental misbehavior (infinite loops, allocation bombs, output
floods), not deliberate escape. Mechanisms: wall-clock watchdog with
process-group kill, RLIMIT_AS set in the child before exec, and a capped
stdout buffer. Program misbehavior is data in the returned record, never an
exception.
"""

from __future__ import annotations

import logging
import os
import resource
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

log = logging.getLogger("redec.sandbox")

# fraction of the memory limit the child's peak RSS must reach for a signal
# death to be attributed to the limit rather than an ordinary crash
_MEM_ATTRIBUTION = 0.8
_GRACE_S = 0.5  # SIGTERM-to-SIGKILL escalation window
_POLL_S = 0.005


@dataclass(frozen=True)
class ExecLimits:
    wall_clock_s: float = 10.0
    memory_mb: int = 256
    max_stdout_bytes: int = 1024 * 1024


class Verdict(Enum):
    COMPLETED = "Completed"
    TIMEOUT = "Timeout"
    MEMORY_KILLED = "MemoryKilled"
    LAUNCH_ERROR = "LaunchError"


@dataclass(frozen=True)
class Signalled:
    """Terminated-by-signal exit status (exit_code is this or a plain int)."""

    number: int

    def __str__(self) -> str:
        return f"Signal({self.number})"


ExitStatus = "int | Signalled"


@dataclass(frozen=True)
class ExecutionRecord:
    stdout: bytes
    exit_code: "int | Signalled"
    wall_ms: int
    verdict: Verdict
    stdout_truncated: bool = False
    maxrss_kb: int = 0
    note: str = ""


def _make_preexec(limits: ExecLimits):
    mem_bytes = limits.memory_mb * 1024 * 1024 if limits.memory_mb else 0
    # CPU rlimit is a backstop only; the wall-clock watchdog must fire first
    cpu_s = int(limits.wall_clock_s) + 2

    def preexec():
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_s, cpu_s + 1))
        if mem_bytes:
            resource.setrlimit(resource.RLIMIT_AS, (mem_bytes, mem_bytes))

    return preexec


def _drain(stream, buf: bytearray, cap: int, flags: dict) -> None:
    # keep draining past the cap so the child never blocks on a full pipe
    try:
        while True:
            chunk = stream.read(65536)
            if not chunk:
                return
            room = cap - len(buf)
            if room > 0:
                buf += chunk[:room]
            if len(chunk) > room:
                flags["truncated"] = True
    except (OSError, ValueError):
        return


def _feed(stream, data: bytes) -> None:
    try:
        if data:
            stream.write(data)
        stream.close()
    except (BrokenPipeError, OSError):
        pass


def _read_rss_kb(pid: int) -> int:
    try:
        with open(f"/proc/{pid}/status", "rb") as fh:
            for line in fh:
                if line.startswith(b"VmRSS:"):
                    return int(line.split()[1])
    except (OSError, ValueError, IndexError):
        pass
    return 0


def _killpg(pid: int, sig: int) -> None:
    try:
        os.killpg(pid, sig)
    except (ProcessLookupError, PermissionError):
        pass


def execute(
    exe: str | Path,
    args: tuple[str, ...] | list[str] = (),
    stdin: bytes = b"",
    limits: ExecLimits = ExecLimits(),
) -> ExecutionRecord:
    """Run `exe args...` under the given limits and record what happened.

    Safe to call from arbitrarily many threads at once; every call owns a
    private working directory and touches no shared state. The child's
    stderr is discarded: only stdout and the exit status matter for oracle
    comparison.
    """
    env = dict(os.environ, LC_ALL="C")
    start = time.monotonic()
    with tempfile.TemporaryDirectory(prefix="redec-run-") as workdir:
        try:
            proc = subprocess.Popen(
                [str(Path(exe).absolute()), *map(str, args)],
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                cwd=workdir,
                env=env,
                start_new_session=True,
                preexec_fn=_make_preexec(limits),
            )
        except (OSError, ValueError, subprocess.SubprocessError) as exc:
            wall_ms = int((time.monotonic() - start) * 1000)
            return ExecutionRecord(
                stdout=b"",
                exit_code=-1,
                wall_ms=wall_ms,
                verdict=Verdict.LAUNCH_ERROR,
                note=f"{type(exc).__name__}: {exc}",
            )

        buf = bytearray()
        flags: dict = {}
        reader = threading.Thread(
            target=_drain, args=(proc.stdout, buf, limits.max_stdout_bytes, flags)
        )
        reader.daemon = True
        reader.start()
        writer = threading.Thread(target=_feed, args=(proc.stdin, stdin))
        writer.daemon = True
        writer.start()

        deadline = start + limits.wall_clock_s
        kill_at = None
        timed_out = False
        watchdog_mem = False
        status = 0
        rusage = None
        ticks = 0
        while True:
            pid_done, status, rusage = os.wait4(proc.pid, os.WNOHANG)
            if pid_done != 0:
                break
            now = time.monotonic()
            if kill_at is not None:
                if now >= kill_at:
                    _killpg(proc.pid, signal.SIGKILL)
                    kill_at = now + 3600  # sent; just keep waiting for the reap
            elif now >= deadline:
                timed_out = True
                _killpg(proc.pid, signal.SIGTERM)
                kill_at = now + _GRACE_S
            elif limits.memory_mb and ticks % 5 == 0:
                if _read_rss_kb(proc.pid) > limits.memory_mb * 1024:
                    watchdog_mem = True
                    _killpg(proc.pid, signal.SIGTERM)
                    kill_at = now + _GRACE_S
            ticks += 1
            time.sleep(_POLL_S)

        wall_ms = int((time.monotonic() - start) * 1000)
        proc.returncode = (
            -os.WTERMSIG(status) if os.WIFSIGNALED(status) else os.WEXITSTATUS(status)
        )
        _killpg(proc.pid, signal.SIGKILL)  # reap any stragglers in the group
        writer.join(timeout=1.0)
        reader.join(timeout=1.0)
        if reader.is_alive():
            # a leftover grandchild is holding the pipe; abandon it
            try:
                proc.stdout.close()
            except OSError:
                pass
            reader.join(timeout=0.5)

    maxrss_kb = rusage.ru_maxrss if rusage else 0
    if os.WIFSIGNALED(status):
        sig = os.WTERMSIG(status)
        if timed_out:
            verdict = Verdict.TIMEOUT
        elif watchdog_mem or (
            limits.memory_mb
            and maxrss_kb >= _MEM_ATTRIBUTION * limits.memory_mb * 1024
        ):
            verdict = Verdict.MEMORY_KILLED
        else:
            # an ordinary crash; the record carries the signal as data
            verdict = Verdict.COMPLETED
        exit_code: int | Signalled = Signalled(sig)
    else:
        verdict = Verdict.TIMEOUT if timed_out else Verdict.COMPLETED
        exit_code = os.WEXITSTATUS(status)

    return ExecutionRecord(
        stdout=bytes(buf),
        exit_code=exit_code,
        wall_ms=wall_ms,
        verdict=verdict,
        stdout_truncated=flags.get("truncated", False),
        maxrss_kb=maxrss_kb,
    )
