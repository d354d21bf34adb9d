"""Trace-driven kernel profiling.

Execution traces (one run per file) are segmented to the application window,
filtered to the processes of interest and unioned, run after run, into a basic block
profile until no new blocks show up. Block profiles can then be coarsened to whole
symbols or pages.
"""

import json
import logging
from collections.abc import Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from tqdm import tqdm

from kforge.errors import GranularityMismatch, InvalidProfile, MalformedTraceLine
from kforge.image import KernelImage, block_at, page_index, symbol_at
from kforge.utils.ranges import ByteRange

logger = logging.getLogger(__name__)

UNTAGGED = "*untagged*"
START_MARKER = "start"
END_MARKER = "end"
DEFAULT_WINDOW = 3
DEFAULT_MAX_RUNS = 15
UNRESOLVED_WARN_FRACTION = 0.01
PARALLEL_PARSERS = 4


class EventKind(Enum):
    """Kinds of trace lines."""

    EXEC = "E"
    MARKER = "M"


class Granularity(Enum):
    """The unit a profile includes or eliminates kernel text in."""

    BLOCK = "block"
    SYMBOL = "symbol"
    SYSCALL = "syscall"
    PAGE = "page"


@dataclass(frozen=True)
class TraceEvent:
    """One executed block entry, or a segmentation marker (``pc`` is 0)."""

    pc: int
    kind: EventKind
    tag: str | None
    seq: int


@dataclass(frozen=True)
class TraceRun:
    """The events of one traced execution."""

    run_id: str
    events: tuple[TraceEvent, ...] = ()
    segmented: bool = False
    segment_warning: bool = False

    @property
    def exec_events(self) -> tuple[TraceEvent, ...]:
        """Only the executed block entries."""
        return tuple(e for e in self.events if e.kind is EventKind.EXEC)


@dataclass(frozen=True)
class KernelProfile:
    """The kernel text an application needs, at a declared granularity."""

    app_name: str
    granularity: Granularity
    ranges: tuple[ByteRange, ...] = ()
    runs_consumed: int = 0
    stable: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranges", tuple(sorted(set(self.ranges))))
        for previous, current in zip(self.ranges, self.ranges[1:], strict=False):
            if current.start < previous.end:
                raise InvalidProfile(
                    f"profile {self.app_name!r}: range {current.start:#x} overlaps "
                    f"{previous.start:#x}"
                )

    @property
    def covered_bytes(self) -> int:
        """How many text bytes the profile keeps."""
        return sum(r.size for r in self.ranges)

    def to_dict(self) -> dict:  # type: ignore[type-arg]
        """Serializes the profile in the profile file format."""
        return {
            "app": self.app_name,
            "granularity": self.granularity.value,
            "ranges": [r.to_dict() for r in self.ranges],
            "runs": self.runs_consumed,
            "stable": self.stable,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelProfile":  # type: ignore[type-arg]
        """Create a KernelProfile from its profile file form."""
        try:
            return cls(
                app_name=str(data["app"]),
                granularity=Granularity(data["granularity"]),
                ranges=tuple(ByteRange.from_dict(r) for r in data.get("ranges", [])),
                runs_consumed=int(data.get("runs", 0)),
                stable=bool(data.get("stable", False)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InvalidProfile(f"malformed profile: {e}") from e


def check_within(profile: KernelProfile, image: KernelImage) -> None:
    """Verifies that every range of a profile lies inside the image text."""
    for current in profile.ranges:
        if current.start < image.base_vaddr or current.end > image.text_end:
            raise InvalidProfile(
                f"profile {profile.app_name!r}: range {current.start:#x}+{current.size} "
                "lies outside the image text"
            )


def check_granularity(profile: KernelProfile, image: KernelImage) -> None:
    """Verifies that every range is a whole block, symbol or page of the image.

    Syscall profiles are made of symbol extents.
    """
    if profile.granularity is Granularity.BLOCK:
        extents = {b.extent for b in image.blocks}
    elif profile.granularity is Granularity.PAGE:
        extents = {image.page_extent(i) for i in range(image.page_count)}
    else:
        extents = {s.extent for s in image.symbols}
    for current in profile.ranges:
        if current not in extents:
            raise InvalidProfile(
                f"profile {profile.app_name!r}: range {current.start:#x}+{current.size} "
                f"is not a {profile.granularity.value} of the image"
            )


def parse_trace(stream: Iterable[str], run_id: str = "") -> TraceRun:
    """Parses one trace file.

    Lines are ``E <hex pc> [tag]`` for executed block entries and ``M <tag>`` for
    markers; blank lines and ``#`` comments are skipped.

    Raises:
        MalformedTraceLine: with the 1-based number of the offending line.
    """
    events = []
    for number, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        kind = fields[0]
        if kind == EventKind.EXEC.value:
            if len(fields) not in {2, 3}:
                raise MalformedTraceLine(number, line, "expected 'E <pc> [tag]'")
            try:
                pc = int(fields[1], 16)
            except ValueError as e:
                raise MalformedTraceLine(number, line, "pc is not hexadecimal") from e
            if pc < 0:
                raise MalformedTraceLine(number, line, "pc is negative")
            tag = fields[2] if len(fields) == 3 else None
            events.append(TraceEvent(pc, EventKind.EXEC, tag, len(events)))
        elif kind == EventKind.MARKER.value:
            if len(fields) != 2:
                raise MalformedTraceLine(number, line, "expected 'M <tag>'")
            events.append(TraceEvent(0, EventKind.MARKER, fields[1], len(events)))
        else:
            raise MalformedTraceLine(number, line, f"unknown event kind {kind!r}")
    return TraceRun(run_id=run_id, events=tuple(events))


def _utf8_lines(handle: Iterable[bytes]) -> Iterator[str]:
    for number, raw in enumerate(handle, start=1):
        try:
            yield raw.decode("utf-8")
        except UnicodeDecodeError as e:
            line = raw.decode("utf-8", errors="replace").strip()
            raise MalformedTraceLine(number, line, "not valid UTF-8") from e


def read_trace(file_path: Path) -> TraceRun:
    """Parses a trace file; the run id is the file name."""
    with Path.open(file_path, "rb") as handle:
        return parse_trace(_utf8_lines(handle), run_id=file_path.name)


def read_traces(file_paths: list[Path], workers: int = PARALLEL_PARSERS) -> list[TraceRun]:
    """Parses trace files in parallel, returning the runs in argument order."""
    progress = tqdm(total=len(file_paths), desc="Parsing traces", disable=None)
    with progress, ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        runs = []
        for run in executor.map(read_trace, file_paths):
            runs.append(run)
            progress.update()
    return runs


def segment(run: TraceRun) -> TraceRun:
    """Cuts a run down to the executions between its start and end markers.

    Only Exec events strictly between the first ``start`` marker and the first
    following ``end`` marker are kept. If either marker is missing, every Exec event
    is kept and ``segment_warning`` is set. Segmenting twice changes nothing.
    """
    if run.segmented:
        return run
    start = end = None
    for index, event in enumerate(run.events):
        if event.kind is not EventKind.MARKER:
            continue
        if start is None and event.tag == START_MARKER:
            start = index
        elif start is not None and event.tag == END_MARKER:
            end = index
            break
    if start is None or end is None:
        logger.warning("Run %s lacks start/end markers; keeping the whole trace", run.run_id)
        return replace(run, events=run.exec_events, segmented=True, segment_warning=True)
    window = tuple(e for e in run.events[start + 1 : end] if e.kind is EventKind.EXEC)
    return replace(run, events=window, segmented=True)


def filter_noise(run: TraceRun, allow_tags: Iterable[str]) -> TraceRun:
    """Drops Exec events of background processes.

    Exec events are kept if their tag is allowed; untagged events are kept only if
    ``allow_tags`` contains ``*untagged*``. Markers are left alone so filtering may
    happen before or after segmentation.
    """
    allowed = set(allow_tags)
    keep_untagged = UNTAGGED in allowed

    def wanted(event: TraceEvent) -> bool:
        if event.kind is EventKind.MARKER:
            return True
        if event.tag is None:
            return keep_untagged
        return event.tag in allowed

    return replace(run, events=tuple(e for e in run.events if wanted(e)))


def resolve_blocks(run: TraceRun, image: KernelImage) -> tuple[set[ByteRange], int]:
    """Maps every Exec pc of a run to its block extent.

    Returns:
        The set of block extents hit and the number of pcs that hit no block.
    """
    hit: set[ByteRange] = set()
    unresolved = 0
    for event in run.exec_events:
        block = block_at(image, event.pc)
        if block is None:
            unresolved += 1
        else:
            hit.add(block.extent)
    return hit, unresolved


def accumulate(
    profile: KernelProfile | None,
    run: TraceRun,
    image: KernelImage,
    *,
    app_name: str = "",
    warn_fraction: float = UNRESOLVED_WARN_FRACTION,
) -> KernelProfile:
    """Unions the blocks executed in ``run`` into a block profile.

    Args:
        profile: The profile so far, or None before the first run.
        run: The (segmented, filtered) run.
        image: The traced kernel image.
        app_name: Name of the application, used when starting a new profile.
        warn_fraction: Fraction of unresolved pcs from which a warning is logged.

    Returns:
        The grown profile; ``runs_consumed`` is incremented.
    """
    if profile is None:
        profile = KernelProfile(app_name=app_name, granularity=Granularity.BLOCK)
    elif profile.granularity is not Granularity.BLOCK:
        raise GranularityMismatch(
            f"can only accumulate into block profiles, not {profile.granularity.value}"
        )
    hit, unresolved = resolve_blocks(run, image)
    total = len(run.exec_events)
    if unresolved:
        log = logger.warning if unresolved >= warn_fraction * total else logger.info
        log("Run %s: %d of %d pcs resolve to no basic block", run.run_id, unresolved, total)
    grown = set(profile.ranges) | hit
    return replace(
        profile,
        ranges=tuple(grown),
        runs_consumed=profile.runs_consumed + 1,
        stable=profile.stable and len(grown) == len(profile.ranges),
    )


def is_stable(history: list[int], window: int) -> bool:
    """Whether the last ``window`` accumulations added no new ranges.

    Args:
        history: Range counts after each accumulation, oldest first; the first
            accumulation grows from an empty profile.
        window: How many zero-growth accumulations are required.
    """
    if window < 1:
        raise ValueError("window must be at least 1")
    if len(history) < window:
        return False
    growth = [history[0], *(b - a for a, b in zip(history, history[1:], strict=False))]
    return all(step == 0 for step in growth[-window:])


def coarsen(profile: KernelProfile, target: Granularity, image: KernelImage) -> KernelProfile:
    """Widens a block profile to whole symbols or whole pages.

    The result covers every byte of the input. A block lies inside exactly one
    symbol; a range that spans a page boundary pulls in every page it touches.
    """
    if profile.granularity is not Granularity.BLOCK:
        raise GranularityMismatch(
            f"can only coarsen block profiles, not {profile.granularity.value}"
        )
    ranges: set[ByteRange] = set()
    if target is Granularity.SYMBOL:
        for current in profile.ranges:
            symbol = symbol_at(image, current.start)
            if symbol is None:
                raise InvalidProfile(f"block {current.start:#x} lies in no symbol")
            ranges.add(symbol.extent)
    elif target is Granularity.PAGE:
        for current in profile.ranges:
            first = page_index(image, current.start)
            last = page_index(image, current.end - 1)
            ranges.update(image.page_extent(i) for i in range(first, last + 1))
    else:
        raise GranularityMismatch(f"cannot coarsen to {target.value}")
    return replace(profile, granularity=target, ranges=tuple(ranges))


@dataclass
class RunDiagnostics:
    """What happened to a single run inside a session."""

    run_id: str
    events: int
    unresolved: int
    new_ranges: int
    segment_warning: bool


@dataclass
class ProfileSession:  # pylint: disable=too-many-instance-attributes
    """Feeds runs into a block profile until it reaches a fixpoint.

    The session stops accepting runs once the last ``window`` runs added nothing,
    or once ``max_runs`` runs have been consumed.
    """

    image: KernelImage
    app_name: str
    allow_tags: frozenset[str] | None = None
    window: int = DEFAULT_WINDOW
    max_runs: int = DEFAULT_MAX_RUNS
    warn_fraction: float = UNRESOLVED_WARN_FRACTION
    profile: KernelProfile | None = None
    history: list[int] = field(default_factory=list)
    symbol_history: list[int] = field(default_factory=list)
    diagnostics: list[RunDiagnostics] = field(default_factory=list)

    @property
    def stable(self) -> bool:
        """Whether the profile has reached its fixpoint."""
        return is_stable(self.history, self.window)

    @property
    def done(self) -> bool:
        """Whether the session accepts no more runs."""
        return self.stable or len(self.history) >= self.max_runs

    def feed(self, run: TraceRun) -> bool:
        """Segments, filters and accumulates one run.

        Returns:
            False if the session was already done and the run was ignored.
        """
        if self.done:
            logger.info("Ignoring run %s: profile already settled", run.run_id)
            return False
        prepared = segment(run)
        if self.allow_tags is not None:
            prepared = filter_noise(prepared, self.allow_tags)
        before = len(self.profile.ranges) if self.profile else 0
        self.profile = accumulate(
            self.profile,
            prepared,
            self.image,
            app_name=self.app_name,
            warn_fraction=self.warn_fraction,
        )
        self.history.append(len(self.profile.ranges))
        self.symbol_history.append(
            len(coarsen(self.profile, Granularity.SYMBOL, self.image).ranges)
        )
        _, unresolved = resolve_blocks(prepared, self.image)
        self.diagnostics.append(
            RunDiagnostics(
                run_id=run.run_id,
                events=len(prepared.exec_events),
                unresolved=unresolved,
                new_ranges=len(self.profile.ranges) - before,
                segment_warning=prepared.segment_warning,
            )
        )
        self.profile = replace(self.profile, stable=self.stable)
        return True

    def result(self) -> KernelProfile:
        """The accumulated block profile (empty if no run was fed)."""
        if self.profile is None:
            return KernelProfile(app_name=self.app_name, granularity=Granularity.BLOCK)
        return self.profile


def save_profile(profile: KernelProfile, file_path: Path) -> None:
    """Writes a profile as JSON."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(profile.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_profile(file_path: Path) -> KernelProfile:
    """Reads a profile JSON file."""
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidProfile(f"{file_path}: {e}") from e
    if not isinstance(data, dict):
        raise InvalidProfile(f"{file_path}: expected a JSON object")
    return KernelProfile.from_dict(data)
