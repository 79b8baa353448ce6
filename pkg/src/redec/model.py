"""Core value types shared by every pipeline stage.

Everything here is an immutable value object; stages communicate by passing
these around, never by mutating shared state.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

BinaryId = str  # sha256 hex digest of the binary's bytes


class Level(enum.IntEnum):
    """Validation outcome: the first failing constraint level, or PASS.

    Total order L1 < L2 < L3 < PASS. A report of L3 means syntax and
    compilation succeeded and execution did not.
    """

    L1 = 1  # syntax: does not parse
    L2 = 2  # compile/link: parses but no runnable artifact
    L3 = 3  # execution: runs but output diverges from the oracle
    PASS = 4

    def __str__(self) -> str:
        return "Pass" if self is Level.PASS else self.name

    @classmethod
    def parse(cls, text: str) -> "Level":
        if text == "Pass":
            return cls.PASS
        return cls[text]


def binary_id(data: bytes | str | Path) -> BinaryId:
    """sha256 hex of the given bytes, or of the file at the given path."""
    if isinstance(data, (str, Path)):
        data = Path(data).read_bytes()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class BinaryTarget:
    """A stripped executable to recover source for."""

    path: Path
    id: BinaryId
    name: str
    opt_level: str = ""  # e.g. "O0".."O3"; empty when unknown

    @classmethod
    def from_path(cls, path: str | Path, opt_level: str = "") -> "BinaryTarget":
        p = Path(path)
        return cls(path=p, id=binary_id(p), name=p.stem, opt_level=opt_level)


@dataclass(frozen=True)
class DecompilerOrigin:
    backend: str


@dataclass(frozen=True)
class RepairOrigin:
    level: Level
    iteration: int


Origin = DecompilerOrigin | RepairOrigin


@dataclass(frozen=True)
class SourceUnit:
    """A candidate C translation unit plus where it came from."""

    text: str
    origin: Origin

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class, despite the name

    args: tuple[str, ...]
    stdin: bytes
    expected_stdout: bytes
    expected_exit: int = 0


@dataclass(frozen=True)
class TestSuite:
    """Oracle test cases recorded from the original binary.

    Must be non-empty whenever L3 validation is requested; the validator
    enforces that, not this type.
    """

    __test__ = False  # not a pytest class, despite the name

    source_binary: BinaryId
    cases: tuple[TestCase, ...]

    def to_json(self) -> str:
        doc = {
            "source_binary": self.source_binary,
            "cases": [
                {
                    "args": list(c.args),
                    "stdin": base64.b64encode(c.stdin).decode(),
                    "expected_stdout": base64.b64encode(c.expected_stdout).decode(),
                    "expected_exit": c.expected_exit,
                }
                for c in self.cases
            ],
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TestSuite":
        doc = json.loads(text)
        cases = tuple(
            TestCase(
                args=tuple(c["args"]),
                stdin=base64.b64decode(c["stdin"]),
                expected_stdout=base64.b64decode(c["expected_stdout"]),
                expected_exit=int(c.get("expected_exit", 0)),
            )
            for c in doc["cases"]
        )
        return cls(source_binary=doc["source_binary"], cases=cases)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TestSuite":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True)
class Diagnostics:
    """What the validator saw at the failing level."""

    level: Level
    raw_text: str = ""
    # (case, actual_stdout, actual_exit) triples in suite order, L3 only
    failed_tests: tuple[tuple[TestCase, bytes, int], ...] = ()
    signature_mismatch: bool = False


def _strip_one_newline(data: bytes) -> bytes:
    # one trailing newline sequence at most; \r\n counts as one
    if data.endswith(b"\r\n"):
        return data[:-2]
    if data.endswith(b"\n") or data.endswith(b"\r"):
        return data[:-1]
    return data


def output_equal(expected: bytes, actual: bytes) -> bool:
    """Byte-exact comparison, forgiving at most one trailing newline per side.

    Deliberately the exists-reading: equal iff stripping zero or one trailing
    newline sequence from each side can make the bytes identical. Reflexive
    and symmetric but not transitive ("x\\n\\n" ~ "x\\n" ~ "x" yet
    "x\\n\\n" !~ "x"), so callers must not chain it.
    """
    if expected == actual:
        return True
    se, sa = _strip_one_newline(expected), _strip_one_newline(actual)
    return se == actual or expected == sa or se == sa
