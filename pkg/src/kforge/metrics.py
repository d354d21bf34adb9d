"""Security metrics of specialized kernels and report emission.

Gadget counts use a byte-level definition: every byte string of length 1 to
``max_len`` that ends in a ``ret`` byte (0xC3) and contains no trap byte is a
candidate, and distinct candidates are counted. No disassembly takes place, so the
numbers are not comparable to those of disassembler-based gadget finders. A smaller
gadget count alone says little about exploitability.
"""

import io
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from statistics import fmean
from typing import Any

import pandas as pd
from rich.console import Console
from rich.table import Table

from kforge.errors import LengthMismatch, MalformedBundle, UnknownFunction, UnsupportedFormat
from kforge.image import KernelImage
from kforge.specialize import TRAP_BYTE, SpecializedKernel, reduction_stats
from kforge.syscalls import syscall_text_fraction
from kforge.utils.ranges import covered_within

logger = logging.getLogger(__name__)

RET_BYTE = 0xC3
DEFAULT_GADGET_LEN = 20
CVE_DB = Path(__file__).parent / "data" / "cves.json"

CSV_COLUMNS = [
    "app",
    "text_reduced_pct",
    "symbols_fully_removed_pct",
    "symbols_touched_pct",
    "cves_mitigated",
    "cves_total",
    "gadgets_vanilla",
    "gadgets_specialized",
    "gadget_reduction_pct",
]
FORMATS = ("json", "csv", "text")


class Effect(Enum):
    """What exploiting a vulnerability achieves."""

    DOS = "DoS"
    LEAK = "Leak"
    PRIV = "Priv"


class Verdict(Enum):
    """Whether a specialization removes a vulnerability's functions."""

    REMOVED = "V"
    PARTIAL = "P"
    EXISTS = "E"

    @property
    def mitigated(self) -> bool:
        """Partial removal breaks the exploit chain too."""
        return self is not Verdict.EXISTS


class FunctionStatus(Enum):
    """How much of one function a specialization keeps."""

    REMOVED = "removed"
    PARTIAL = "partial"
    PRESENT = "present"


@dataclass(frozen=True)
class CveRecord:
    """A known vulnerability and the functions of its exploit chain."""

    cve_id: str
    description: str
    effect: Effect
    functions: frozenset[str]

    def __post_init__(self) -> None:
        if not self.functions:
            raise ValueError(f"{self.cve_id}: functions must not be empty")

    @classmethod
    def from_dict(cls, data: dict) -> "CveRecord":  # type: ignore[type-arg]
        """Creates a record from its JSON form."""
        return cls(
            cve_id=data["id"],
            description=data.get("description", ""),
            effect=Effect(data["effect"]),
            functions=frozenset(data["functions"]),
        )


@dataclass(frozen=True)
class CveVerdict:
    """The verdict for one vulnerability."""

    cve_id: str
    category: Verdict


@dataclass(frozen=True)
class CveReport:
    """Verdicts for a vulnerability set, in input order."""

    verdicts: tuple[CveVerdict, ...]

    @property
    def mitigated_count(self) -> int:
        """Number of removed or partially removed vulnerabilities."""
        return sum(v.category.mitigated for v in self.verdicts)

    def count(self, category: Verdict) -> int:
        """Number of verdicts of one category."""
        return sum(v.category is category for v in self.verdicts)


def load_cve_db(file_path: Path = CVE_DB) -> list[CveRecord]:
    """Reads a vulnerability database (a JSON array of records)."""
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
        return [CveRecord.from_dict(entry) for entry in data]
    except (KeyError, TypeError, ValueError) as e:
        raise MalformedBundle(f"{file_path}: {e}") from e


def function_status(name: str, spec: SpecializedKernel) -> FunctionStatus:
    """Classifies a function as fully removed, partially removed or present.

    Raises:
        UnknownFunction: if the source image has no such function.
    """
    symbol = spec.source.symbol(name)
    if symbol is None:
        raise UnknownFunction(f"{name} is not a symbol of the image")
    kept = covered_within(spec.kept, symbol.extent)
    if kept == 0:
        return FunctionStatus.REMOVED
    if kept < symbol.size:
        return FunctionStatus.PARTIAL
    return FunctionStatus.PRESENT


def classify_statuses(statuses: Iterable[FunctionStatus]) -> Verdict:
    """A fully removed function breaks the chain; a partial one weakens it."""
    seen = set(statuses)
    if FunctionStatus.REMOVED in seen:
        return Verdict.REMOVED
    if FunctionStatus.PARTIAL in seen:
        return Verdict.PARTIAL
    return Verdict.EXISTS


def classify_cve(record: CveRecord, spec: SpecializedKernel) -> CveVerdict:
    """Decides the verdict of one vulnerability for one specialized kernel."""
    statuses = [function_status(name, spec) for name in sorted(record.functions)]
    return CveVerdict(record.cve_id, classify_statuses(statuses))


def cve_report(records: Sequence[CveRecord], spec: SpecializedKernel) -> CveReport:
    """Classifies every vulnerability of a database."""
    return CveReport(tuple(classify_cve(record, spec) for record in records))


def count_rop_gadgets(text: bytes, max_len: int = DEFAULT_GADGET_LEN) -> int:
    """Counts the distinct byte strings ending in ``ret`` that contain no trap byte."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    gadgets: set[bytes] = set()
    position = text.find(RET_BYTE)
    while position != -1:
        for length in range(1, min(max_len, position + 1) + 1):
            start = position - length + 1
            if text[start] == TRAP_BYTE:
                break
            gadgets.add(text[start : position + 1])
        position = text.find(RET_BYTE, position + 1)
    return len(gadgets)


def gadget_reduction(
    vanilla_text: bytes, spec_text: bytes, max_len: int = DEFAULT_GADGET_LEN
) -> float:
    """Percentage of the vanilla gadgets a specialization removes.

    Raises:
        LengthMismatch: if the texts differ in length.
    """
    if len(vanilla_text) != len(spec_text):
        raise LengthMismatch(f"texts differ in length: {len(vanilla_text)} != {len(spec_text)}")
    vanilla = count_rop_gadgets(vanilla_text, max_len)
    if vanilla == 0:
        return 0.0
    return (1 - count_rop_gadgets(spec_text, max_len) / vanilla) * 100


@dataclass(frozen=True)
class ReportRow:  # pylint: disable=too-many-instance-attributes
    """Attack surface numbers of one application."""

    app: str
    text_reduced_pct: float
    symbols_fully_removed_pct: float
    symbols_touched_pct: float
    cves_mitigated: int
    cves_total: int
    gadgets_vanilla: int
    gadgets_specialized: int
    gadget_reduction_pct: float
    verdicts: tuple[CveVerdict, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        """Serializes the row; floats are rounded for stable output."""
        data: dict[str, Any] = {}
        for column in CSV_COLUMNS:
            value = getattr(self, column)
            data[column] = round(value, 4) if isinstance(value, float) else value
        data["verdicts"] = {v.cve_id: v.category.value for v in self.verdicts}
        return data


@dataclass(frozen=True)
class AttackSurfaceReport:
    """Per-application rows plus image-wide numbers."""

    rows: tuple[ReportRow, ...]
    syscall_text_pct: float
    mean_mitigated: float

    def to_dict(self) -> dict[str, Any]:
        """Serializes the report."""
        return {
            "applications": [row.to_dict() for row in self.rows],
            "syscall_text_pct": round(self.syscall_text_pct, 4),
            "mean_mitigated": round(self.mean_mitigated, 4),
        }


def attack_surface_report(
    image: KernelImage,
    specs: Sequence[SpecializedKernel],
    cves: Sequence[CveRecord],
    gadget_max_len: int = DEFAULT_GADGET_LEN,
) -> AttackSurfaceReport:
    """Combines reduction, vulnerability and gadget numbers for several applications.

    An empty ``cves`` sequence skips the vulnerability columns (both counts are 0).
    """
    vanilla = count_rop_gadgets(image.text, gadget_max_len)
    rows = []
    for spec in specs:
        stats = reduction_stats(spec)
        report = cve_report(cves, spec)
        gadgets = count_rop_gadgets(spec.text, gadget_max_len)
        rows.append(
            ReportRow(
                app=spec.app_name,
                text_reduced_pct=stats.text_reduced_pct,
                symbols_fully_removed_pct=stats.symbols_fully_removed_pct,
                symbols_touched_pct=stats.symbols_touched_pct,
                cves_mitigated=report.mitigated_count,
                cves_total=len(report.verdicts),
                gadgets_vanilla=vanilla,
                gadgets_specialized=gadgets,
                gadget_reduction_pct=(1 - gadgets / vanilla) * 100 if vanilla else 0.0,
                verdicts=report.verdicts,
            )
        )
        logger.info(
            "%s: %.2f%% text masked, %d of %d CVEs mitigated",
            spec.app_name,
            stats.text_reduced_pct,
            report.mitigated_count,
            len(report.verdicts),
        )
    return AttackSurfaceReport(
        rows=tuple(rows),
        syscall_text_pct=syscall_text_fraction(image) * 100,
        mean_mitigated=fmean(row.cves_mitigated for row in rows) if rows else 0.0,
    )


def report_table(report: AttackSurfaceReport) -> Table:
    """Create a rich table with one row per application."""
    table = Table(title="Attack Surface Reduction")
    table.add_column("Application", style="cyan")
    table.add_column("Text masked", justify="right", style="green")
    table.add_column("Symbols removed", justify="right", style="green")
    table.add_column("Symbols touched", justify="right", style="green")
    table.add_column("CVEs mitigated", justify="right", style="magenta")
    table.add_column("Gadgets", justify="right", style="blue")
    table.add_column("Gadget reduction", justify="right", style="blue")
    for row in report.rows:
        table.add_row(
            row.app,
            f"{row.text_reduced_pct:.2f}%",
            f"{row.symbols_fully_removed_pct:.2f}%",
            f"{row.symbols_touched_pct:.2f}%",
            f"{row.cves_mitigated}/{row.cves_total}",
            f"{row.gadgets_specialized}/{row.gadgets_vanilla}",
            f"{row.gadget_reduction_pct:.2f}%",
        )
    return table


def _emit_text(report: AttackSurfaceReport) -> str:
    buffer = io.StringIO()
    console = Console(file=buffer, width=120, color_system=None, force_terminal=False)
    console.print(report_table(report))
    console.print(f"Syscall-reachable text: {report.syscall_text_pct:.2f}%")
    console.print(f"Mean CVEs mitigated: {report.mean_mitigated:.2f}")
    console.print("Gadget counts are byte-level and not comparable to disassembler tools.")
    return buffer.getvalue()


def emit_report(report: AttackSurfaceReport, fmt: str) -> str:
    """Renders a report as ``json``, ``csv`` or ``text``.

    Raises:
        UnsupportedFormat: for any other format name.
    """
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        frame = pd.DataFrame([row.to_dict() for row in report.rows], columns=CSV_COLUMNS)
        return frame.to_csv(index=False, lineterminator="\n")
    if fmt == "text":
        return _emit_text(report)
    raise UnsupportedFormat(f"unsupported report format {fmt!r}; use one of {', '.join(FORMATS)}")
