"""Corpus-level aggregation: pass rates, convergence, failure taxonomy.

Rates are percentages of a group that cleared each level, rounded half-up
to one decimal. "Cleared L2" means the record's level is strictly beyond
L2, so the final level (first failing constraint, or Pass) is all a record
needs to carry.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

from .backends import detect_empty_body
from .model import Diagnostics, Level


class FailureClass(Enum):
    INLINED = "Inlined"
    LOGIC_ERROR = "LogicError"
    SIGNATURE_MISMATCH = "SignatureMismatch"
    RESIDUAL_SYNTAX = "ResidualSyntax"
    RESIDUAL_COMPILE = "ResidualCompile"
    INFRA_ERROR = "InfraError"


@dataclass(frozen=True)
class CorpusRecord:
    """One binary's journey through a corpus run."""

    name: str
    binary: str  # sha256 id
    backend: str
    opt_level: str
    category: str
    status: str  # success | failure | error
    best_level_baseline: Level | None
    best_level_final: Level | None
    iterations_used: int  # repair attempts spent
    first_pass_iteration: int | None  # 1-based validate round that passed
    repairs_per_level: dict
    failure_class: str | None
    error_kind: str | None

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["best_level_baseline"] = str(self.best_level_baseline) if self.best_level_baseline else None
        d["best_level_final"] = str(self.best_level_final) if self.best_level_final else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusRecord":
        d = dict(d)
        for key in ("best_level_baseline", "best_level_final"):
            d[key] = Level.parse(d[key]) if d.get(key) else None
        return cls(**d)


def classify_failure(
    status: str,
    final_level: Level | None,
    final_source_text: str | None,
    final_diag: Diagnostics | None = None,
    target_symbol: str | None = None,
) -> str | None:
    """Deterministic, total failure classification.

    Inlined wins over everything else: when the target function has no
    recoverable body, the terminal level is incidental. Signature mismatch
    applies when the terminal diagnostics are a flagged L2 link failure.
    Success classifies as None.
    """
    if status == "error":
        return FailureClass.INFRA_ERROR.value
    if status == "success" or final_level is Level.PASS:
        return None
    if final_source_text is not None and detect_empty_body(final_source_text, target_symbol):
        return FailureClass.INLINED.value
    if final_diag is not None and final_diag.level is Level.L2 and final_diag.signature_mismatch:
        return FailureClass.SIGNATURE_MISMATCH.value
    if final_level is Level.L1:
        return FailureClass.RESIDUAL_SYNTAX.value
    if final_level is Level.L2:
        return FailureClass.RESIDUAL_COMPILE.value
    if final_level is Level.L3:
        return FailureClass.LOGIC_ERROR.value
    return FailureClass.INFRA_ERROR.value


# --- rate arithmetic --------------------------------------------------------


def _pct(count: int, total: int) -> float:
    """100*count/total to one decimal, round half-up: 35/157 -> 22.3."""
    if total == 0:
        return 0.0
    value = Decimal(100 * count) / Decimal(total)
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _round1(value: float | Decimal) -> float:
    return float(Decimal(str(value)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def _cleared(level: Level | None, gate: Level) -> bool:
    return level is not None and level > gate


def _rates_for(levels: list[Level | None]) -> tuple[float, float, float]:
    n = len(levels)
    return tuple(
        _pct(sum(1 for lv in levels if _cleared(lv, gate)), n)
        for gate in (Level.L1, Level.L2, Level.L3)
    )


@dataclass(frozen=True)
class RateRow:
    group: str
    n: int
    base: tuple[float, float, float]
    final: tuple[float, float, float]
    delta: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "n": self.n,
            "base": list(self.base),
            "final": list(self.final),
            "delta": list(self.delta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RateRow":
        return cls(
            group=d["group"],
            n=int(d["n"]),
            base=tuple(d["base"]),
            final=tuple(d["final"]),
            delta=tuple(d["delta"]),
        )


@dataclass(frozen=True)
class RateTable:
    rows: tuple[RateRow, ...]
    average: RateRow | None  # unweighted mean over groups
    pooled: RateRow  # every record as one group

    def to_dict(self) -> dict:
        return {
            "rows": [r.to_dict() for r in self.rows],
            "average": self.average.to_dict() if self.average else None,
            "pooled": self.pooled.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RateTable":
        return cls(
            rows=tuple(RateRow.from_dict(r) for r in d["rows"]),
            average=RateRow.from_dict(d["average"]) if d.get("average") else None,
            pooled=RateRow.from_dict(d["pooled"]),
        )


def _row(group: str, records: list[CorpusRecord]) -> RateRow:
    base = _rates_for([r.best_level_baseline for r in records])
    final = _rates_for([r.best_level_final for r in records])
    delta = tuple(_round1(f - b) for f, b in zip(final, base))
    return RateRow(group=group, n=len(records), base=base, final=final, delta=delta)


def compute_rates(records: list[CorpusRecord], group_by: str = "backend") -> RateTable:
    """Per-group and aggregate pass rates.

    Guarantees L1 >= L2 >= L3 within every row: clearing a level implies
    clearing the ones below it. Error records stay in the denominator and
    clear nothing.
    """
    groups: dict[str, list[CorpusRecord]] = {}
    for rec in records:
        groups.setdefault(getattr(rec, group_by) or "(none)", []).append(rec)
    rows = tuple(_row(g, rs) for g, rs in sorted(groups.items()))
    average = None
    if len(rows) > 1:
        # unweighted mean of the per-group rates, like a per-decompiler table
        def mean(sel):
            vals = [sel(r) for r in rows]
            return tuple(
                _round1(sum(Decimal(str(v[i])) for v in vals) / len(vals))
                for i in range(3)
            )

        avg_base = mean(lambda r: r.base)
        avg_final = mean(lambda r: r.final)
        average = RateRow(
            group="Average (unweighted)",
            n=sum(r.n for r in rows),
            base=avg_base,
            final=avg_final,
            delta=tuple(_round1(f - b) for f, b in zip(avg_final, avg_base)),
        )
    pooled = _row("Pooled (all records)", list(records))
    return RateTable(rows=rows, average=average, pooled=pooled)


def convergence_curve(records: list[CorpusRecord], max_k: int) -> list[tuple[int, float]]:
    """Share of records that had passed by validate round k, for k=1..max_k.

    Nondecreasing in k; the point at max_k equals the final L3 rate because
    a pass can only happen at some round <= max_k.
    """
    n = len(records)
    curve = []
    for k in range(1, max_k + 1):
        cnt = sum(
            1
            for r in records
            if r.first_pass_iteration is not None and r.first_pass_iteration <= k
        )
        curve.append((k, _pct(cnt, n)))
    return curve


def failure_breakdown(records: list[CorpusRecord]) -> list[tuple[str, str, int, float]]:
    """(group, failure_class, count, share-of-group-failures%) rows."""
    out = []
    groups: dict[str, list[CorpusRecord]] = {}
    for rec in records:
        groups.setdefault(rec.backend or "(none)", []).append(rec)
    for group, rs in sorted(groups.items()):
        failed = [r for r in rs if r.failure_class]
        counts: dict[str, int] = {}
        for r in failed:
            counts[r.failure_class] = counts.get(r.failure_class, 0) + 1
        for cls in sorted(counts):
            out.append((group, cls, counts[cls], _pct(counts[cls], len(failed))))
    return out


# --- rendering --------------------------------------------------------------

_HEADERS = [
    "group", "n",
    "base L1", "base L2", "base L3",
    "final L1", "final L2", "final L3",
    "delta L1", "delta L2", "delta L3",
]


def _row_cells(row: RateRow) -> list[str]:
    return [
        row.group,
        str(row.n),
        *(f"{v:.1f}" for v in row.base),
        *(f"{v:.1f}" for v in row.final),
        *(f"{v:+.1f}" for v in row.delta),
    ]


def render(table: RateTable, fmt: str = "md") -> str:
    """Render as Markdown, CSV, or JSON. JSON round-trips via parse_table."""
    if fmt == "json":
        return json.dumps(table.to_dict(), indent=2)
    all_rows = list(table.rows)
    if table.average:
        all_rows.append(table.average)
    all_rows.append(table.pooled)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(_HEADERS)
        for row in all_rows:
            writer.writerow(_row_cells(row))
        return buf.getvalue()
    if fmt == "md":
        lines = [
            "| " + " | ".join(_HEADERS) + " |",
            "|" + "|".join("---" for _ in _HEADERS) + "|",
        ]
        for row in all_rows:
            lines.append("| " + " | ".join(_row_cells(row)) + " |")
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown render format {fmt!r}")


def parse_table(text: str) -> RateTable:
    return RateTable.from_dict(json.loads(text))


def load_records(paths) -> list[CorpusRecord]:
    records = []
    for path in paths:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(CorpusRecord.from_dict(json.loads(line)))
    return records


def write_reports(records: list[CorpusRecord], out_dir, max_k: int = 5) -> dict:
    """Write report.md, report.csv, convergence.csv, failures.csv."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = compute_rates(records)
    (out / "report.md").write_text(render(table, "md"))
    (out / "report.csv").write_text(render(table, "csv"))
    curve = convergence_curve(records, max_k)
    with open(out / "convergence.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "rate"])
        for k, rate in curve:
            writer.writerow([k, f"{rate:.1f}"])
    with open(out / "failures.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "failure_class", "count", "share"])
        for group, cls, count, share in failure_breakdown(records):
            writer.writerow([group, cls, count, f"{share:.1f}"])
    return {"table": table, "curve": curve}
