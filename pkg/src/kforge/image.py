"""The kernel image bundle: text bytes plus symbol, block, syscall and IRQ metadata.

A ``KernelImage`` stands in for a compiled vanilla kernel. It is validated on
construction and immutable afterwards, so it may be shared freely between readers.
"""

import bisect
import json
import logging
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from types import MappingProxyType
from typing import NoReturn

from kforge.errors import InvariantViolation, MalformedBundle, OutOfRange
from kforge.utils.lines import parse_hex_field, parse_int_field, read_names, read_rows
from kforge.utils.ranges import ByteRange

logger = logging.getLogger(__name__)

ADDRESS_LIMIT = 1 << 64
MIN_PAGE_SIZE = 256
DEFAULT_PAGE_SIZE = 4096

MANIFEST = "manifest.json"
SYMBOLS = "symbols.tsv"
BLOCKS = "blocks.tsv"
SYSCALLS = "syscalls.tsv"
CALLGRAPH = "callgraph.tsv"
IRQ_TOPHALF = "irq_tophalf.txt"
IRQMAP = "irqmap.tsv"


@dataclass(frozen=True)
class Symbol:
    """A kernel function occupying ``[start, start + size)``."""

    name: str
    start: int
    size: int

    @property
    def end(self) -> int:
        """The first address after the symbol."""
        return self.start + self.size

    @property
    def extent(self) -> ByteRange:
        """The byte range of the whole symbol."""
        return ByteRange(self.start, self.size)


@dataclass(frozen=True)
class BasicBlock:
    """A run of instructions that always executes as a unit."""

    start: int
    size: int
    parent: str

    @property
    def end(self) -> int:
        """The first address after the block."""
        return self.start + self.size

    @property
    def extent(self) -> ByteRange:
        """The byte range of the block."""
        return ByteRange(self.start, self.size)


@dataclass(frozen=True)
class IrqRoute:
    """Where an interrupt's top half and deferred bottom half live."""

    irq: str
    top_half: str
    bottom_half: str


@dataclass(frozen=True, eq=True)
class KernelImage:  # pylint: disable=too-many-instance-attributes
    """The vanilla kernel every specialized kernel is cloned from."""

    base_vaddr: int
    text: bytes
    symbols: tuple[Symbol, ...]
    blocks: tuple[BasicBlock, ...]
    syscall_entries: Mapping[str, str] = field(default_factory=dict)
    call_graph: tuple[tuple[str, str], ...] = ()
    top_half_handlers: frozenset[str] = frozenset()
    page_size: int = DEFAULT_PAGE_SIZE
    irq_routes: tuple[IrqRoute, ...] = ()

    __hash__ = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        object.__setattr__(self, "text", bytes(self.text))
        object.__setattr__(
            self, "syscall_entries", MappingProxyType(dict(self.syscall_entries))
        )
        object.__setattr__(self, "top_half_handlers", frozenset(self.top_half_handlers))
        validate(self)

    @property
    def text_end(self) -> int:
        """The first address after the text."""
        return self.base_vaddr + len(self.text)

    @property
    def text_range(self) -> ByteRange:
        """The virtual range the text is mapped at."""
        return ByteRange(self.base_vaddr, len(self.text))

    @property
    def page_count(self) -> int:
        """The number of (possibly partial) pages the text spans."""
        return -(-len(self.text) // self.page_size)

    def page_extent(self, index: int) -> ByteRange:
        """The byte range of page ``index``; the last page may be short."""
        if not 0 <= index < self.page_count:
            raise OutOfRange(f"page {index} outside 0..{self.page_count - 1}")
        start = index * self.page_size
        return ByteRange(
            self.base_vaddr + start, min(self.page_size, len(self.text) - start)
        )

    def offset(self, addr: int) -> int:
        """Translates a virtual address into an offset into ``text``."""
        if not self.base_vaddr <= addr < self.text_end:
            raise OutOfRange(
                f"address {addr:#x} outside text "
                f"[{self.base_vaddr:#x}, {self.text_end:#x})"
            )
        return addr - self.base_vaddr

    def symbol(self, name: str) -> Symbol | None:
        """Looks a symbol up by name."""
        return self._symbols_by_name.get(name)

    def blocks_of(self, name: str) -> tuple[BasicBlock, ...]:
        """All blocks whose parent is the named symbol, sorted by address."""
        return tuple(b for b in self.blocks if b.parent == name)

    def irq_route(self, irq: str) -> IrqRoute | None:
        """The route of an interrupt, if the image maps it."""
        return next((r for r in self.irq_routes if r.irq == irq), None)

    @cached_property
    def _symbols_by_name(self) -> dict[str, Symbol]:
        return {s.name: s for s in self.symbols}

    @cached_property
    def _symbol_starts(self) -> list[int]:
        return [s.start for s in self.symbols]

    @cached_property
    def _block_starts(self) -> list[int]:
        return [b.start for b in self.blocks]


def _fail(rule: str, detail: str) -> NoReturn:
    raise InvariantViolation(rule, detail)


def _validate_symbols(image: KernelImage) -> None:
    names: set[str] = set()
    previous: Symbol | None = None
    for symbol in image.symbols:
        if not symbol.name:
            _fail("symbol-name", f"empty symbol name at {symbol.start:#x}")
        if symbol.name in names:
            _fail("symbol-name", f"duplicate symbol {symbol.name!r}")
        names.add(symbol.name)
        if symbol.size <= 0:
            _fail("symbol-size", f"{symbol.name!r} has size {symbol.size}")
        if symbol.start < image.base_vaddr or symbol.end > image.text_end:
            _fail("symbol-bounds", f"{symbol.name!r} lies outside the text")
        if previous is not None:
            if symbol.start < previous.start:
                _fail("symbol-order", f"{symbol.name!r} is not sorted by start")
            if symbol.start < previous.end:
                _fail(
                    "symbol-overlap",
                    f"{symbol.name!r} overlaps {previous.name!r}",
                )
        previous = symbol


def _validate_blocks(image: KernelImage) -> None:
    by_name = {s.name: s for s in image.symbols}
    previous: BasicBlock | None = None
    for block in image.blocks:
        if block.size <= 0:
            _fail("block-size", f"block at {block.start:#x} has size {block.size}")
        parent = by_name.get(block.parent)
        if parent is None:
            _fail("block-parent", f"block at {block.start:#x} names {block.parent!r}")
        elif block.start < parent.start or block.end > parent.end:
            _fail(
                "block-parent",
                f"block at {block.start:#x} is not inside {block.parent!r}",
            )
        if previous is not None:
            if block.start < previous.start:
                _fail("block-order", f"block at {block.start:#x} is not sorted")
            if block.start < previous.end:
                _fail("block-overlap", f"block at {block.start:#x} overlaps its neighbour")
        previous = block


def _validate_references(image: KernelImage) -> None:
    names = {s.name for s in image.symbols}
    for syscall, entry in image.syscall_entries.items():
        if not syscall:
            _fail("syscall-entry", "empty syscall name")
        if entry not in names:
            _fail("syscall-entry", f"{syscall!r} enters unknown symbol {entry!r}")
    for caller, callee in image.call_graph:
        for endpoint in (caller, callee):
            if endpoint not in names:
                _fail("call-graph", f"edge {caller}->{callee} names {endpoint!r}")
    for handler in image.top_half_handlers:
        if handler not in names:
            _fail("top-half", f"unknown top-half handler {handler!r}")
    seen: set[str] = set()
    for route in image.irq_routes:
        if route.irq in seen:
            _fail("irq-route", f"duplicate route for {route.irq!r}")
        seen.add(route.irq)
        if route.top_half not in image.top_half_handlers:
            _fail("irq-route", f"{route.irq!r} top half {route.top_half!r} not whitelisted")
        if route.bottom_half not in names:
            _fail("irq-route", f"{route.irq!r} bottom half {route.bottom_half!r} unknown")


def validate(image: KernelImage) -> None:
    """Checks every structural invariant of an image.

    Raises:
        InvariantViolation: naming the first violated rule.
    """
    page_size = image.page_size
    if page_size < MIN_PAGE_SIZE or page_size & (page_size - 1):
        _fail("page-size", f"page size {page_size} is not a power of two >= 256")
    if image.base_vaddr < 0 or image.text_end > ADDRESS_LIMIT:
        _fail("address-overflow", "text does not fit in the 64-bit address space")
    _validate_symbols(image)
    _validate_blocks(image)
    _validate_references(image)


def symbol_at(image: KernelImage, addr: int) -> Symbol | None:
    """The symbol whose extent contains ``addr``, if any."""
    index = bisect.bisect_right(image._symbol_starts, addr) - 1  # noqa: SLF001
    if index < 0:
        return None
    candidate = image.symbols[index]
    return candidate if addr < candidate.end else None


def block_at(image: KernelImage, addr: int) -> BasicBlock | None:
    """The basic block whose extent contains ``addr``, if any."""
    index = bisect.bisect_right(image._block_starts, addr) - 1  # noqa: SLF001
    if index < 0:
        return None
    candidate = image.blocks[index]
    return candidate if addr < candidate.end else None


def page_index(image: KernelImage, addr: int) -> int:
    """The index of the text page holding ``addr``.

    Raises:
        OutOfRange: if ``addr`` is not inside the text.
    """
    return image.offset(addr) // image.page_size


def load_image(bundle_dir: Path) -> KernelImage:
    """Loads and validates a kernel image bundle directory.

    Args:
        bundle_dir: Directory holding ``manifest.json``, the text file and the TSVs.

    Returns:
        The validated image.
    """
    if not bundle_dir.is_dir():
        raise MalformedBundle(f"not a bundle directory: {bundle_dir}")
    manifest = _read_manifest(bundle_dir / MANIFEST)
    text_path = bundle_dir / manifest["text_file"]
    try:
        text = text_path.read_bytes()
    except OSError as e:
        raise MalformedBundle(f"cannot read text file {text_path}: {e}") from e

    symbols = []
    for number, (name, start, size) in read_rows(bundle_dir / SYMBOLS, 3):
        where = f"{SYMBOLS}:{number}"
        symbols.append(
            Symbol(name, parse_hex_field(start, where), parse_int_field(size, where))
        )
    blocks = []
    for number, (start, size, parent) in read_rows(bundle_dir / BLOCKS, 3):
        where = f"{BLOCKS}:{number}"
        blocks.append(
            BasicBlock(parse_hex_field(start, where), parse_int_field(size, where), parent)
        )
    syscall_entries: dict[str, str] = {}
    for number, (syscall, entry) in read_rows(bundle_dir / SYSCALLS, 2):
        if syscall in syscall_entries:
            raise MalformedBundle(f"{SYSCALLS}:{number}: duplicate syscall {syscall!r}")
        syscall_entries[syscall] = entry
    call_graph = [(caller, callee) for _, (caller, callee) in read_rows(bundle_dir / CALLGRAPH, 2)]
    top_half = read_names(bundle_dir / IRQ_TOPHALF)
    routes = []
    if (bundle_dir / IRQMAP).exists():
        routes = [
            IrqRoute(irq, top, bottom)
            for _, (irq, top, bottom) in read_rows(bundle_dir / IRQMAP, 3)
        ]

    image = KernelImage(
        base_vaddr=manifest["base_vaddr"],
        text=text,
        symbols=tuple(sorted(symbols, key=lambda s: s.start)),
        blocks=tuple(sorted(blocks, key=lambda b: b.start)),
        syscall_entries=syscall_entries,
        call_graph=tuple(call_graph),
        top_half_handlers=frozenset(top_half),
        page_size=manifest["page_size"],
        irq_routes=tuple(routes),
    )
    logger.info(
        "Loaded %s: %d bytes, %d symbols, %d blocks, %d syscalls",
        bundle_dir,
        len(image.text),
        len(image.symbols),
        len(image.blocks),
        len(image.syscall_entries),
    )
    return image


def _read_manifest(file_path: Path) -> dict:  # type: ignore[type-arg]
    try:
        data = json.loads(file_path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise MalformedBundle(f"missing file: {file_path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise MalformedBundle(f"{file_path}: {e}") from e
    if not isinstance(data, dict):
        raise MalformedBundle(f"{file_path}: expected a JSON object")
    base = data.get("base_vaddr")
    if not isinstance(base, str):
        raise MalformedBundle(f"{file_path}: base_vaddr must be a hex string")
    page_size = data.get("page_size", DEFAULT_PAGE_SIZE)
    if isinstance(page_size, bool) or not isinstance(page_size, int):
        raise MalformedBundle(f"{file_path}: page_size must be an integer")
    text_file = data.get("text_file", "text.bin")
    if not isinstance(text_file, str) or not text_file:
        raise MalformedBundle(f"{file_path}: text_file must be a file name")
    return {
        "base_vaddr": parse_hex_field(base, MANIFEST),
        "page_size": page_size,
        "text_file": text_file,
    }


def save_image(image: KernelImage, bundle_dir: Path) -> None:
    """Writes an image in the bundle directory format read by ``load_image``."""
    bundle_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "base_vaddr": f"{image.base_vaddr:#x}",
        "page_size": image.page_size,
        "text_file": "text.bin",
    }
    (bundle_dir / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    (bundle_dir / "text.bin").write_bytes(image.text)
    _write_lines(
        bundle_dir / SYMBOLS,
        "name\tstart\tsize",
        (f"{s.name}\t{s.start:#x}\t{s.size}" for s in image.symbols),
    )
    _write_lines(
        bundle_dir / BLOCKS,
        "start\tsize\tparent",
        (f"{b.start:#x}\t{b.size}\t{b.parent}" for b in image.blocks),
    )
    _write_lines(
        bundle_dir / SYSCALLS,
        "syscall\tentry",
        (f"{name}\t{entry}" for name, entry in sorted(image.syscall_entries.items())),
    )
    _write_lines(
        bundle_dir / CALLGRAPH,
        "caller\tcallee",
        (f"{caller}\t{callee}" for caller, callee in image.call_graph),
    )
    _write_lines(bundle_dir / IRQ_TOPHALF, "top-half handlers", sorted(image.top_half_handlers))
    _write_lines(
        bundle_dir / IRQMAP,
        "irq\ttop_half\tbottom_half",
        (f"{r.irq}\t{r.top_half}\t{r.bottom_half}" for r in image.irq_routes),
    )


def _write_lines(file_path: Path, header: str, lines: Iterable[str]) -> None:
    body = "".join(f"{line}\n" for line in lines)
    file_path.write_text(f"# {header}\n{body}", encoding="utf-8")
