"""Syscall-based profile expansion.

The call graph shipped with an image is the sole authority on which functions a
syscall may reach; indirect calls appear in it as explicit edges. The closure of an
application's syscall list is added, symbol by symbol, to its profile.
"""

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import networkx as nx

from kforge.errors import GranularityMismatch, UnknownSyscall
from kforge.image import KernelImage
from kforge.profiler import Granularity, KernelProfile, check_granularity
from kforge.utils.lines import read_names

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyscallList:
    """The syscalls an application was observed to issue."""

    app_name: str
    syscalls: frozenset[str]

    def __post_init__(self) -> None:
        if any(not name for name in self.syscalls):
            raise ValueError("syscall names must be non-empty")


@dataclass(frozen=True)
class ReachabilitySet:
    """The symbols reachable from a set of root symbols."""

    roots: frozenset[str]
    reached: frozenset[str]

    def to_dict(self) -> dict[str, list[str]]:
        """Serializes with sorted arrays for reproducible diffs."""
        return {"roots": sorted(self.roots), "reached": sorted(self.reached)}


def call_graph(image: KernelImage) -> "nx.DiGraph[str]":
    """Builds the directed call graph; every symbol is a node."""
    graph: nx.DiGraph[str] = nx.DiGraph()
    graph.add_nodes_from(s.name for s in image.symbols)
    graph.add_edges_from(image.call_graph)
    return graph


def reachable_from(graph: "nx.DiGraph[str]", roots: frozenset[str]) -> frozenset[str]:
    """The reflexive-transitive closure of ``roots`` over ``graph``."""
    reached = set(roots)
    for root in roots:
        reached |= nx.descendants(graph, root)
    return frozenset(reached)


def closure(image: KernelImage, syscalls: SyscallList) -> ReachabilitySet:
    """Computes every symbol the listed syscalls can reach.

    Raises:
        UnknownSyscall: listing every name the image does not offer.
    """
    unknown = syscalls.syscalls - set(image.syscall_entries)
    if unknown:
        raise UnknownSyscall(unknown)
    roots = frozenset(image.syscall_entries[name] for name in syscalls.syscalls)
    reached = reachable_from(call_graph(image), roots)
    logger.info(
        "%s: %d syscalls reach %d of %d symbols",
        syscalls.app_name,
        len(syscalls.syscalls),
        len(reached),
        len(image.symbols),
    )
    return ReachabilitySet(roots=roots, reached=reached)


def expand_profile(
    profile: KernelProfile, reach: ReachabilitySet, image: KernelImage
) -> KernelProfile:
    """Adds the full extent of every reached symbol to a symbol profile.

    Syscall profiles are accepted too, which makes repeated expansion idempotent.
    Block and page profiles must be coarsened to symbols first.
    """
    if profile.granularity not in {Granularity.SYMBOL, Granularity.SYSCALL}:
        raise GranularityMismatch(
            f"expand needs a symbol profile, got {profile.granularity.value}"
        )
    check_granularity(profile, image)
    extents = set(profile.ranges)
    for name in reach.reached:
        symbol = image.symbol(name)
        if symbol is None:
            raise GranularityMismatch(f"reached symbol {name!r} is not in the image")
        extents.add(symbol.extent)
    return replace(profile, granularity=Granularity.SYSCALL, ranges=tuple(extents))


def syscall_text_fraction(image: KernelImage) -> float:
    """The share of the text taken by everything reachable from any syscall."""
    if not image.text:
        return 0.0
    roots = frozenset(image.syscall_entries.values())
    reached = reachable_from(call_graph(image), roots)
    size = sum(s.size for s in image.symbols if s.name in reached)
    return size / len(image.text)


def unused_syscalls(image: KernelImage, syscalls: SyscallList) -> list[str]:
    """The syscalls the image offers that the list does not mention."""
    return sorted(set(image.syscall_entries) - syscalls.syscalls)


def load_syscall_list(file_path: Path, app_name: str) -> SyscallList:
    """Reads a syscall list file, one name per line."""
    return SyscallList(app_name=app_name, syscalls=frozenset(read_names(file_path)))


def save_closure(reach: ReachabilitySet, file_path: Path) -> None:
    """Writes a closure as JSON."""
    file_path.parent.mkdir(parents=True, exist_ok=True)
    file_path.write_text(json.dumps(reach.to_dict(), indent=2) + "\n", encoding="utf-8")
