"""Arithmetic over half-open byte ranges of kernel text."""

import bisect
from collections.abc import Iterable, Sequence
from typing import NamedTuple


class ByteRange(NamedTuple):
    """A half-open range ``[start, start + size)`` of virtual addresses."""

    start: int
    size: int

    @property
    def end(self) -> int:
        """The first address after the range."""
        return self.start + self.size

    def contains(self, addr: int) -> bool:
        """Whether ``addr`` lies inside the range."""
        return self.start <= addr < self.end

    def to_dict(self) -> dict[str, int | str]:
        """Serializes the range as in the profile file format."""
        return {"start": f"{self.start:#x}", "size": self.size}

    @classmethod
    def from_dict(cls, data: dict) -> "ByteRange":  # type: ignore[type-arg]
        """Create a ByteRange from its profile file form."""
        start = data["start"]
        return cls(
            start=int(start, 16) if isinstance(start, str) else int(start),
            size=int(data["size"]),
        )


def merge(ranges: Iterable[ByteRange]) -> list[ByteRange]:
    """Merges overlapping or adjacent ranges into a sorted, disjoint list.

    Args:
        ranges: Ranges in any order; empty ranges are dropped.

    Returns:
        The sorted list of maximal disjoint ranges covering the same bytes.
    """
    merged: list[ByteRange] = []
    for current in sorted(r for r in ranges if r.size > 0):
        if merged and current.start <= merged[-1].end:
            last = merged[-1]
            merged[-1] = ByteRange(last.start, max(last.end, current.end) - last.start)
        else:
            merged.append(current)
    return merged


def total(ranges: Iterable[ByteRange]) -> int:
    """Counts the bytes covered by the ranges (overlaps counted once)."""
    return sum(r.size for r in merge(ranges))


def intersection_size(left: Sequence[ByteRange], right: Sequence[ByteRange]) -> int:
    """Counts the bytes covered by both range lists.

    Both inputs must already be merged (sorted and disjoint).
    """
    i = j = 0
    shared = 0
    while i < len(left) and j < len(right):
        low = max(left[i].start, right[j].start)
        high = min(left[i].end, right[j].end)
        shared += max(0, high - low)
        if left[i].end < right[j].end:
            i += 1
        else:
            j += 1
    return shared


def covered_within(merged: Sequence[ByteRange], window: ByteRange) -> int:
    """Counts the bytes of ``window`` covered by a merged range list."""
    starts = [r.start for r in merged]
    # the range just before window.start may still reach into it
    index = max(bisect.bisect_right(starts, window.start) - 1, 0)
    covered = 0
    for current in merged[index:]:
        if current.start >= window.end:
            break
        covered += max(0, min(current.end, window.end) - max(current.start, window.start))
    return covered
