"""Decompiler backends: external tools invoked through configurable templates.

A backend is described by a shell-style command template with {binary} and
{out} placeholders. Templates belong in the config file, not in code; the
registry below only ships runnable defaults. The `file` backend replays
checked-in decompiler output so the whole pipeline can run without any
decompiler installed.
"""

from __future__ import annotations

import logging
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import ConfigError, EmptyOutput, ToolFailure, ToolMissing, ToolTimeout
from .model import BinaryTarget, DecompilerOrigin, SourceUnit

log = logging.getLogger("redec.backends")

DEFAULT_PRELUDE = ("stdio.h", "stdlib.h", "string.h")


class BackendKind(Enum):
    RULE_BASED = "rule_based"
    LIFTING = "lifting"
    ML_BASED = "ml_based"
    PASSTHROUGH = "passthrough"


@dataclass(frozen=True)
class BackendDescriptor:
    name: str
    command_template: str
    timeout_s: float = 600.0
    kind: BackendKind = BackendKind.RULE_BASED

    def __post_init__(self):
        if self.kind is not BackendKind.PASSTHROUGH and "{binary}" not in self.command_template:
            raise ConfigError(
                f"backend {self.name!r}: command template must reference {{binary}}"
            )


def _bundled_adapter() -> str:
    # tools run from a scratch cwd, so the checkout's adapter needs an
    # absolute path; installed elsewhere, the config file must supply one
    candidate = Path(__file__).resolve().parents[2] / "adapter" / "angr_adapter.py"
    return str(candidate) if candidate.is_file() else "adapter/angr_adapter.py"


def default_registry() -> dict[str, BackendDescriptor]:
    """Backends known out of the box; the config file can add or override."""
    return {
        "file": BackendDescriptor(
            name="file",
            # for passthrough backends the template is a path pattern, not a
            # command; default: the .c sidecar next to the binary
            command_template="{dir}/{stem}.c",
            timeout_s=10.0,
            kind=BackendKind.PASSTHROUGH,
        ),
        "ghidra": BackendDescriptor(
            name="ghidra",
            # runs with cwd set to a private scratch dir, so "." is safe as
            # the project location
            command_template=(
                "analyzeHeadless . redec -import {binary} "
                "-postScript ghidra_export.py {out} -deleteProject"
            ),
            timeout_s=600.0,
            kind=BackendKind.RULE_BASED,
        ),
        "retdec": BackendDescriptor(
            name="retdec",
            command_template="retdec-decompiler {binary} -o {out}",
            timeout_s=600.0,
            kind=BackendKind.LIFTING,
        ),
        "angr-bridge": BackendDescriptor(
            name="angr-bridge",
            command_template=f"python3 {_bundled_adapter()} {{binary}}",
            timeout_s=600.0,
            kind=BackendKind.LIFTING,
        ),
    }


def resolve_backend(name: str, registry: dict[str, BackendDescriptor] | None = None) -> BackendDescriptor:
    reg = registry if registry is not None else default_registry()
    try:
        return reg[name]
    except KeyError:
        raise ConfigError(
            f"unknown backend {name!r}; known: {', '.join(sorted(reg))}"
        ) from None


def _passthrough_read(desc: BackendDescriptor, binary: Path) -> str:
    pattern = desc.command_template or "{dir}/{stem}.c"
    sidecar = Path(
        pattern.format(binary=binary, dir=binary.parent, stem=binary.stem)
    )
    if not sidecar.is_file():
        raise ToolFailure(f"{desc.name}: no source at {sidecar}")
    text = sidecar.read_text(errors="replace")
    if not text.strip():
        raise EmptyOutput(f"{desc.name}: {sidecar} is empty")
    return text


def decompile(
    desc: BackendDescriptor,
    target: BinaryTarget,
    log_dir: str | Path | None = None,
) -> SourceUnit:
    """Run the backend on the target and return its raw output.

    Raw means pre-normalization; callers run normalize() themselves so the
    untouched tool output can be logged and cached. Raises ToolMissing,
    ToolTimeout, ToolFailure, or EmptyOutput.
    """
    if desc.kind is BackendKind.PASSTHROUGH:
        raw = _passthrough_read(desc, target.path)
    else:
        raw = _run_tool(desc, target)
    if log_dir is not None:
        d = Path(log_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"raw-{desc.name}-{target.id[:12]}.c").write_text(raw)
    return SourceUnit(text=raw, origin=DecompilerOrigin(backend=desc.name))


def _run_tool(desc: BackendDescriptor, target: BinaryTarget) -> str:
    with tempfile.TemporaryDirectory(prefix="redec-dec-") as scratch:
        out_path = Path(scratch) / "out.c"
        cmd = desc.command_template.format(
            binary=str(target.path.absolute()), out=str(out_path)
        )
        argv = shlex.split(cmd)
        uses_out = "{out}" in desc.command_template
        try:
            proc = subprocess.run(
                argv,
                cwd=scratch,
                capture_output=True,
                timeout=desc.timeout_s,
            )
        except FileNotFoundError:
            raise ToolMissing(f"{desc.name}: {argv[0]} not found on PATH") from None
        except subprocess.TimeoutExpired:
            raise ToolTimeout(f"{desc.name}: exceeded {desc.timeout_s}s") from None
        if proc.returncode != 0:
            tail = proc.stderr.decode(errors="replace")[-2000:]
            raise ToolFailure(f"{desc.name}: exit {proc.returncode}: {tail}")
        if uses_out:
            if not out_path.is_file():
                raise EmptyOutput(f"{desc.name}: produced no output file")
            raw = out_path.read_text(errors="replace")
        else:
            raw = proc.stdout.decode(errors="replace")
        if not raw.strip():
            raise EmptyOutput(f"{desc.name}: produced empty output")
        return raw


# --- normalization ----------------------------------------------------------

# matched only against leading comment/log lines, never against code
_BANNER_RE = re.compile(
    r"(?i)(generated (?:automatically |)(?:by|with|from)|decompil\w* (?:by|with|from)|"
    r"this file (?:was|is) .{0,20}generated|produced by|recovered (?:by|from)|"
    r"output of|retdec|ghidra|hex-?rays|ida (?:pro|free)|binary ninja|angr\b)"
)
# ERROR/WARN need trailing punctuation since they could open a real C line
_LOG_NOISE_RE = re.compile(
    r"^\s*(?:(?:INFO|DEBUG|TRACE)\b\s|(?:WARN(?:ING)?|ERROR)\s*[:\[\]])"
)


def _strip_banners(text: str) -> str:
    lines = text.splitlines(keepends=True)
    i = 0
    while i < len(lines):
        line = lines[i]
        stripped = line.strip()
        if not stripped:
            i += 1
            continue
        if stripped.startswith("//") and _BANNER_RE.search(stripped):
            i += 1
            continue
        if _LOG_NOISE_RE.match(stripped):
            i += 1
            continue
        if stripped.startswith("/*"):
            # find the end of the block comment, then drop the whole block
            # iff its text looks like a tool banner
            j = i
            block = []
            while j < len(lines):
                block.append(lines[j])
                if "*/" in lines[j]:
                    break
                j += 1
            else:
                break  # unterminated comment: leave it for the compiler
            if _BANNER_RE.search("".join(block)):
                i = j + 1
                continue
            break
        break
    return "".join(lines[i:])


def normalize_text(text: str, prelude: tuple[str, ...] = DEFAULT_PRELUDE) -> str:
    """Strip tool banners and ensure the standard-header prelude is present.

    Idempotent; beyond banner removal and header insertion the text is
    unchanged.
    """
    body = _strip_banners(text)
    missing = [h for h in prelude if f"#include <{h}>" not in body]
    if missing:
        header_block = "".join(f"#include <{h}>\n" for h in missing)
        body = header_block + body
    return body


def normalize(source: SourceUnit, prelude: tuple[str, ...] = DEFAULT_PRELUDE) -> SourceUnit:
    return SourceUnit(text=normalize_text(source.text, prelude), origin=source.origin)


# --- inlining detection -----------------------------------------------------

_C_KEYWORDS = {
    "if", "for", "while", "switch", "return", "sizeof", "do", "else",
}


def _strip_comments_and_strings(text: str) -> str:
    out = []
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c == "/" and i + 1 < n and text[i + 1] == "/":
            while i < n and text[i] != "\n":
                i += 1
        elif c == "/" and i + 1 < n and text[i + 1] == "*":
            i += 2
            while i + 1 < n and not (text[i] == "*" and text[i + 1] == "/"):
                i += 1
            i += 2
        elif c in "\"'":
            quote = c
            out.append(quote)
            i += 1
            while i < n and text[i] != quote:
                if text[i] == "\\":
                    i += 1
                i += 1
            out.append(quote)
            i += 1
        else:
            out.append(c)
            i += 1
    return "".join(out)


_FUNC_DEF_RE = re.compile(r"\b([A-Za-z_]\w*)\s*\(([^;{}()]*)\)\s*\{")


def _function_bodies(text: str):
    """Yield (name, body_text) for every function definition found.

    Lightweight brace matching over comment/string-stripped text; good
    enough for decompiler output, no full C parse.
    """
    clean = _strip_comments_and_strings(text)
    for m in _FUNC_DEF_RE.finditer(clean):
        name = m.group(1)
        if name in _C_KEYWORDS:
            continue
        depth = 1
        j = m.end()
        while j < len(clean) and depth:
            if clean[j] == "{":
                depth += 1
            elif clean[j] == "}":
                depth -= 1
            j += 1
        yield name, clean[m.end():j - 1]


def _nontrivial(body: str) -> bool:
    return bool(body.strip())


def detect_empty_body(text: str, target_symbol: str | None = None) -> bool:
    """True when the function we were meant to recover is not really there.

    With target_symbol: no definition of that symbol has a non-trivial body.
    Without: no non-main function definition has one. Used to classify
    compiler-inlined targets, where the decompiler had no body to recover.
    """
    if target_symbol is not None:
        return not any(
            name == target_symbol and _nontrivial(body)
            for name, body in _function_bodies(text)
        )
    return not any(
        name != "main" and _nontrivial(body) for name, body in _function_bodies(text)
    )
