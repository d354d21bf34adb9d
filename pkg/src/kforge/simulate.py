"""Deterministic simulation of a system running one specialized kernel per process.

The base kernel boots the system and owns an unmasked text region. Launching an
application clones that text, masks it with the application's profile (plus the
whitelisted interrupt top halves) and gives the new process a page table that maps
the kernel's virtual text range onto the clone. Switching processes only swaps the
current page table pointer. Executing a masked byte traps. Interrupt bottom halves are
deferred to ``ksoftirqd``, which always runs on the base kernel. Kernel data is one
store shared by every process.

One ``SimState`` is single threaded: operations run to completion one at a time.
"""

import hashlib
import json
import logging
from collections import deque
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any

from kforge.errors import (
    AddressOutOfRange,
    InvalidProfile,
    KeyMissing,
    KforgeError,
    MalformedScenario,
    MemoryExhausted,
    ModuleInsertForbidden,
    NoRunningProcess,
    ProcessKilled,
    ProtectedProcess,
    UnknownIrq,
    UnknownPid,
)
from kforge.image import KernelImage, symbol_at
from kforge.profiler import KernelProfile, check_within
from kforge.specialize import reduction_stats, specialize
from kforge.utils.config import Config
from kforge.utils.ranges import ByteRange, covered_within

logger = logging.getLogger(__name__)

BASE_REGION = "base"
KSOFTIRQD = "ksoftirqd"
KSOFTIRQD_PID = 1

Event = dict[str, Any]


class ProcessState(Enum):
    """Scheduling state of a simulated process."""

    RUNNABLE = "runnable"
    RUNNING = "running"
    KILLED = "killed"


class Outcome(Enum):
    """Result of executing a kernel address."""

    EXECUTED = "executed"
    TRAPPED = "trapped"


@dataclass(frozen=True)
class PhysRegion:
    """A physical copy of the kernel text and the virtual ranges it keeps executable."""

    region_id: str
    text: bytes
    owner: int | str
    kept: tuple[ByteRange, ...]

    def is_kept(self, vaddr: int) -> bool:
        """Whether the byte mapped at ``vaddr`` survived masking in this copy."""
        return covered_within(self.kept, ByteRange(vaddr, 1)) == 1


@dataclass(frozen=True)
class PageTable:
    """Kernel text part of a page table: text page -> (region, page in region)."""

    kernel_text_map: tuple[tuple[str, int], ...]

    @classmethod
    def identity(cls, region_id: str, page_count: int) -> "PageTable":
        """Maps every text page onto the same page of one region."""
        return cls(tuple((region_id, page) for page in range(page_count)))

    @property
    def region_id(self) -> str:
        """The single region this table maps the kernel text into."""
        return self.kernel_text_map[0][0]


@dataclass
class Process:
    """A simulated process and its kernel view."""

    pid: int
    name: str
    page_table: PageTable
    state: ProcessState = ProcessState.RUNNABLE


@dataclass(frozen=True)
class MemoryPressure:
    """Committed kernel text memory against the modeled capacity."""

    committed_mb: int
    pressured: bool
    max_kernels: int


@dataclass(frozen=True)
class ExecResult:
    """What happened when the running process executed a kernel address."""

    outcome: Outcome
    vaddr: int
    symbol: str | None


@dataclass
class SimState:  # pylint: disable=too-many-instance-attributes
    """The whole simulated system."""

    image: KernelImage
    config: Config
    regions: dict[str, PhysRegion] = field(default_factory=dict)
    processes: dict[int, Process] = field(default_factory=dict)
    current: int | None = None
    ksoftirqd_pid: int = KSOFTIRQD_PID
    softirq_queue: deque[tuple[str, int]] = field(default_factory=deque)
    shared_data: dict[str, Any] = field(default_factory=dict)
    clock: int = 0
    event_log: list[Event] = field(default_factory=list)
    next_pid: int = KSOFTIRQD_PID + 1
    next_region: int = 1
    line: int | None = None


def _emit(state: SimState, kind: str, **fields: Any) -> Event:
    event: Event = {"step": state.clock, "kind": kind, **fields}
    if state.line is not None:
        event["line"] = state.line
    state.event_log.append(event)
    logger.debug("%s", event)
    return event


def _process(state: SimState, pid: int) -> Process:
    process = state.processes.get(pid)
    if process is None:
        raise UnknownPid(f"no process with pid {pid}")
    return process


def _running(state: SimState) -> Process:
    if state.current is None:
        raise NoRunningProcess("no process is running")
    return state.processes[state.current]


def boot(image: KernelImage, config: Config | None = None) -> SimState:
    """Boots the base kernel and starts ``ksoftirqd`` on it."""
    state = SimState(image=image, config=config or Config())
    state.regions[BASE_REGION] = PhysRegion(
        BASE_REGION, image.text, BASE_REGION, (image.text_range,)
    )
    state.processes[KSOFTIRQD_PID] = Process(
        KSOFTIRQD_PID, KSOFTIRQD, PageTable.identity(BASE_REGION, image.page_count)
    )
    _emit(state, "Boot", region=BASE_REGION, pid=KSOFTIRQD_PID, app=KSOFTIRQD)
    return state


def whitelist(image: KernelImage) -> list[ByteRange]:
    """The extents of the interrupt top halves every kernel keeps."""
    extents = []
    for name in sorted(image.top_half_handlers):
        symbol = image.symbol(name)
        if symbol is not None:
            extents.append(symbol.extent)
    return extents


def memory_pressure(state: SimState) -> MemoryPressure:
    """Compares the committed kernel copies with the modeled capacity."""
    return _pressure(state.config, len(state.regions))


def _pressure(config: Config, kernels: int) -> MemoryPressure:
    max_kernels = (config.ram_mb - config.baseline_reserved_mb) // config.per_kernel_mb
    return MemoryPressure(
        committed_mb=kernels * config.per_kernel_mb,
        pressured=kernels > max_kernels,
        max_kernels=max_kernels,
    )


def memory_sweep(config: Config, counts: Iterable[int]) -> list[MemoryPressure]:
    """The pressure model evaluated for several numbers of coexisting kernels."""
    return [_pressure(config, count) for count in counts]


def sim_execve(state: SimState, app_name: str, profile: KernelProfile) -> int:
    """Launches an application on a freshly specialized kernel copy.

    Returns:
        The pid of the new (runnable) process.

    Raises:
        InvalidProfile: if the profile does not fit the image.
        MemoryExhausted: if another kernel copy would not fit into RAM.
    """
    check_within(profile, state.image)
    config = state.config
    if (len(state.regions) + 1) * config.per_kernel_mb > config.ram_mb:
        raise MemoryExhausted(
            f"{len(state.regions) + 1} kernels of {config.per_kernel_mb}MB exceed "
            f"{config.ram_mb}MB"
        )
    spec = specialize(state.image, profile, include=whitelist(state.image))
    pid = state.next_pid
    region_id = f"k{state.next_region}"
    state.next_pid += 1
    state.next_region += 1
    state.regions[region_id] = PhysRegion(region_id, spec.text, pid, spec.kept)
    state.processes[pid] = Process(
        pid, app_name, PageTable.identity(region_id, state.image.page_count)
    )
    state.clock += config.launch_cost_steps
    stats = reduction_stats(spec)
    _emit(
        state,
        "Launch",
        pid=pid,
        app=app_name,
        region=region_id,
        text_reduced_pct=round(stats.text_reduced_pct, 4),
        symbols_fully_removed_pct=round(stats.symbols_fully_removed_pct, 4),
        symbols_touched_pct=round(stats.symbols_touched_pct, 4),
    )
    pressure = memory_pressure(state)
    if pressure.pressured and len(state.regions) == pressure.max_kernels + 1:
        logger.warning(
            "Memory pressure: %d kernel copies exceed the capacity of %d",
            len(state.regions),
            pressure.max_kernels,
        )
        _emit(
            state,
            "Pressure",
            committed_mb=pressure.committed_mb,
            max_kernels=pressure.max_kernels,
        )
    return pid


def _switch(state: SimState, pid: int) -> None:
    target = _process(state, pid)
    if target.state is ProcessState.KILLED:
        raise ProcessKilled(f"process {pid} ({target.name}) was killed")
    previous = state.current
    if previous is not None and previous != pid:
        state.processes[previous].state = ProcessState.RUNNABLE
    target.state = ProcessState.RUNNING
    state.current = pid
    _emit(state, "Switch", pid=pid, previous=previous)


def context_switch(state: SimState, pid: int) -> None:
    """Makes ``pid`` the running process by swapping the page table pointer."""
    target = _process(state, pid)
    if target.state is ProcessState.KILLED:
        raise ProcessKilled(f"process {pid} ({target.name}) was killed")
    state.clock += 1
    _switch(state, pid)


def translate(state: SimState, pid: int, vaddr: int) -> tuple[str, int]:
    """Resolves a kernel virtual address through a process's page table.

    Returns:
        The region id and the byte offset inside that region.
    """
    image = state.image
    if not image.base_vaddr <= vaddr < image.text_end:
        raise AddressOutOfRange(
            f"{vaddr:#x} is outside the kernel text "
            f"[{image.base_vaddr:#x}, {image.text_end:#x})"
        )
    page, within = divmod(vaddr - image.base_vaddr, image.page_size)
    region_id, region_page = _process(state, pid).page_table.kernel_text_map[page]
    return region_id, region_page * image.page_size + within


def observed_view(state: SimState, pid: int) -> bytes:
    """The kernel text exactly as ``pid`` sees it through its page table."""
    image = state.image
    view = bytearray()
    for page in range(image.page_count):
        extent = image.page_extent(page)
        region_id, offset = translate(state, pid, extent.start)
        view += state.regions[region_id].text[offset : offset + extent.size]
    return bytes(view)


def view_digest(state: SimState, pid: int) -> str:
    """SHA-256 of the kernel text a process observes."""
    return hashlib.sha256(observed_view(state, pid)).hexdigest()


def _execute(state: SimState, vaddr: int) -> ExecResult:
    process = _running(state)
    region_id, offset = translate(state, process.pid, vaddr)
    symbol = symbol_at(state.image, vaddr)
    name = symbol.name if symbol else None
    # vanilla text may contain 0xCC too
    if state.regions[region_id].is_kept(state.image.base_vaddr + offset):
        _emit(state, "Exec", pid=process.pid, vaddr=f"{vaddr:#x}", symbol=name)
        return ExecResult(Outcome.EXECUTED, vaddr, name)
    policy = state.config.fault_policy
    logger.info("Process %d (%s) trapped at %#x (%s)", process.pid, process.name, vaddr, name)
    _emit(
        state,
        "Fault",
        pid=process.pid,
        vaddr=f"{vaddr:#x}",
        symbol=name,
        policy=policy,
    )
    if policy == "kill":
        process.state = ProcessState.KILLED
        state.current = None
    return ExecResult(Outcome.TRAPPED, vaddr, name)


def exec_kernel_addr(state: SimState, vaddr: int) -> ExecResult:
    """Lets the running process execute the kernel byte at ``vaddr``.

    A byte outside the ranges the kernel kept was masked away: the fault policy
    applies (kill the process by default, or only report it).
    """
    process = _running(state)
    translate(state, process.pid, vaddr)
    state.clock += 1
    return _execute(state, vaddr)


def raise_interrupt(state: SimState, irq: str) -> None:
    """Runs the top half of ``irq`` on the current kernel and defers the bottom half."""
    _running(state)
    route = state.image.irq_route(irq)
    if route is None:
        raise UnknownIrq(f"no route for interrupt {irq!r}")
    handler = state.image.symbol(route.top_half)
    if handler is None:  # pragma: no cover - routes are validated with the image
        raise UnknownIrq(f"top half {route.top_half!r} of {irq!r} is not a symbol")
    pid = state.current
    state.clock += 1
    result = _execute(state, handler.start)
    if result.outcome is Outcome.EXECUTED:
        state.softirq_queue.append((irq, state.clock))
    _emit(
        state,
        "TopHalf",
        irq=irq,
        pid=pid,
        handler=route.top_half,
        outcome=result.outcome.value,
        queued=len(state.softirq_queue),
    )


def run_ksoftirqd(state: SimState) -> int:
    """Drains the deferred interrupts queued so far on the base kernel.

    Work queued while draining waits for the next call.

    Returns:
        The number of bottom halves executed.
    """
    state.clock += 1
    pending = len(state.softirq_queue)
    _emit(state, "Ksoftirqd", pending=pending)
    if not pending:
        return 0
    previous = state.current
    _switch(state, state.ksoftirqd_pid)
    for _ in range(pending):
        irq, raised = state.softirq_queue.popleft()
        route = state.image.irq_route(irq)
        handler = state.image.symbol(route.bottom_half) if route else None
        if handler is None:  # pragma: no cover - routes are validated with the image
            raise UnknownIrq(f"no bottom half for {irq!r}")
        result = _execute(state, handler.start)
        region_id, _ = translate(state, state.ksoftirqd_pid, handler.start)
        _emit(
            state,
            "BottomHalf",
            irq=irq,
            raised=raised,
            pid=state.ksoftirqd_pid,
            region=region_id,
            handler=route.bottom_half,
            outcome=result.outcome.value,
        )
    if previous is not None and previous != state.ksoftirqd_pid:
        _switch(state, previous)
    elif previous is None:
        state.processes[state.ksoftirqd_pid].state = ProcessState.RUNNABLE
        state.current = None
    return pending


def shared_write(state: SimState, key: str, value: Any) -> None:
    """Stores a value in the kernel data every process shares."""
    process = _running(state)
    state.clock += 1
    state.shared_data[key] = value
    _emit(state, "SharedWrite", pid=process.pid, key=key, value=value)


def shared_read(state: SimState, key: str) -> Any:
    """Reads a value from the shared kernel data."""
    process = _running(state)
    if key not in state.shared_data:
        raise KeyMissing(f"no shared value for {key!r}")
    state.clock += 1
    value = state.shared_data[key]
    _emit(state, "SharedRead", pid=process.pid, key=key, value=value)
    return value


def insert_module(state: SimState, module: str) -> None:
    """Loads a kernel module; only the base kernel accepts modules."""
    process = _running(state)
    if process.page_table.region_id != BASE_REGION:
        raise ModuleInsertForbidden(
            f"process {process.pid} ({process.name}) runs a specialized kernel"
        )
    state.clock += 1
    _emit(state, "ModuleInsert", pid=process.pid, module=module)


def teardown(state: SimState, pid: int) -> None:
    """Removes an exited process and frees its kernel copy if nobody else maps it."""
    process = _process(state, pid)
    if pid == state.ksoftirqd_pid:
        raise ProtectedProcess("ksoftirqd cannot be torn down")
    state.clock += 1
    del state.processes[pid]
    if state.current == pid:
        state.current = None
    region_id = process.page_table.region_id
    still_mapped = any(p.page_table.region_id == region_id for p in state.processes.values())
    freed = region_id != BASE_REGION and not still_mapped
    if freed:
        del state.regions[region_id]
    _emit(state, "Teardown", pid=pid, region=region_id, freed=freed)


def _target_pid(state: SimState, args: Mapping[str, Any]) -> int:
    if "pid" in args:
        return int(args["pid"])
    if "app" in args:
        matches = [p.pid for p in state.processes.values() if p.name == args["app"]]
        if not matches:
            raise UnknownPid(f"no process named {args['app']!r}")
        return max(matches)
    raise MalformedScenario("expected 'pid' or 'app'")


def _target_vaddr(state: SimState, args: Mapping[str, Any]) -> int:
    if "vaddr" in args:
        value = args["vaddr"]
        return int(value, 16) if isinstance(value, str) else int(value)
    if "symbol" in args:
        symbol = state.image.symbol(args["symbol"])
        if symbol is None:
            raise MalformedScenario(f"unknown symbol {args['symbol']!r}")
        return symbol.start + int(args.get("offset", 0))
    raise MalformedScenario("expected 'vaddr' or 'symbol'")


def _apply(state: SimState, args: Mapping[str, Any], profiles: Mapping[str, KernelProfile]) -> None:
    op = args.get("op")
    if op == "execve":
        app = args.get("app")
        if app not in profiles:
            raise InvalidProfile(f"no profile for application {app!r}")
        sim_execve(state, str(app), profiles[app])
    elif op == "switch":
        context_switch(state, _target_pid(state, args))
    elif op == "exec":
        exec_kernel_addr(state, _target_vaddr(state, args))
    elif op == "irq":
        raise_interrupt(state, str(args.get("irq")))
    elif op == "ksoftirqd":
        run_ksoftirqd(state)
    elif op == "write":
        shared_write(state, str(args["key"]), args.get("value"))
    elif op == "read":
        shared_read(state, str(args["key"]))
    elif op == "teardown":
        teardown(state, _target_pid(state, args))
    elif op == "insmod":
        insert_module(state, str(args.get("module", "")))
    else:
        raise MalformedScenario(f"unknown op {op!r}")


def run_scenario(
    state: SimState, lines: Iterable[str], profiles: Mapping[str, KernelProfile]
) -> list[Event]:
    """Plays a JSON-lines scenario against a booted system.

    Every event emitted while handling a line carries that line's number. Domain
    errors become ``Error`` events; malformed lines abort the scenario.

    Returns:
        The full event log.
    """
    for number, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            args = json.loads(line)
        except json.JSONDecodeError as e:
            raise MalformedScenario(f"line {number}: {e}") from e
        if not isinstance(args, dict) or "op" not in args:
            raise MalformedScenario(f"line {number}: expected an object with an 'op'")
        state.line = number
        try:
            _apply(state, args, profiles)
        except MalformedScenario as e:
            raise MalformedScenario(f"line {number}: {e}") from e
        except KforgeError as e:
            _emit(state, "Error", op=args["op"], error=type(e).__name__, message=str(e))
        except (KeyError, TypeError, ValueError) as e:
            raise MalformedScenario(f"line {number}: bad arguments: {e}") from e
        finally:
            state.line = None
    return state.event_log


def read_scenario(file_path: Path) -> list[str]:
    """Reads the lines of a scenario file.

    Raises:
        MalformedScenario: if a line is not valid UTF-8.
    """
    lines = []
    with Path.open(file_path, "rb") as handle:
        for number, raw in enumerate(handle, start=1):
            try:
                lines.append(raw.decode("utf-8"))
            except UnicodeDecodeError as e:
                raise MalformedScenario(f"{file_path.name}: line {number}: {e.reason}") from e
    return lines


def dump_events(events: Iterable[Event]) -> str:
    """Serializes events as JSON lines with sorted keys."""
    return "".join(json.dumps(event, sort_keys=True) + "\n" for event in events)


def save_events(events: Iterable[Event], file_path: Path) -> None:
    """Writes an event log as JSON lines."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(dump_events(events), encoding="utf-8")
