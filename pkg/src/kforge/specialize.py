"""Specialized kernels: layout-preserving clones with unneeded text masked.

Every byte outside the kept ranges is overwritten with ``0xCC`` (``int3``), a
one-byte opcode that traps no matter at which offset execution lands in it.
"""

import hashlib
import json
import logging
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass
from datetime import UTC, datetime
from itertools import combinations
from pathlib import Path

from kforge.errors import GranularityMismatch, InvalidProfile, RangeOutOfImage
from kforge.image import KernelImage
from kforge.profiler import KernelProfile
from kforge.utils.ranges import ByteRange, covered_within, intersection_size, merge, total

logger = logging.getLogger(__name__)

TRAP_BYTE = 0xCC


@dataclass(frozen=True)
class ReductionStats:
    """How much of the kernel a specialization eliminates."""

    text_reduced_pct: float
    symbols_fully_removed_pct: float
    symbols_touched_pct: float


@dataclass(frozen=True, eq=False)
class SpecializedKernel:
    """A masked copy of an image's text.

    ``kept`` lists the merged ranges that survived masking: the profile ranges plus
    any extra ranges forced in (such as the interrupt top halves).
    """

    app_name: str
    source: KernelImage
    text: bytes
    profile: KernelProfile
    kept: tuple[ByteRange, ...]

    def is_kept(self, addr: int) -> bool:
        """Whether the byte at ``addr`` survived masking."""
        return covered_within(self.kept, ByteRange(addr, 1)) == 1


def source_hash(image: KernelImage) -> str:
    """SHA-256 hex digest of an image's text, for provenance."""
    return hashlib.sha256(image.text).hexdigest()


def mask_text(image: KernelImage, ranges: Iterable[ByteRange]) -> tuple[bytes, list[ByteRange]]:
    """Builds the masked text keeping only ``ranges``.

    Returns:
        The masked text and the merged ranges that were kept.

    Raises:
        RangeOutOfImage: if a range leaves the image text.
    """
    kept = merge(ranges)
    for current in kept:
        if current.start < image.base_vaddr or current.end > image.text_end:
            raise RangeOutOfImage(
                f"range {current.start:#x}+{current.size} lies outside the text "
                f"[{image.base_vaddr:#x}, {image.text_end:#x})"
            )
    text = bytearray([TRAP_BYTE]) * len(image.text)
    for current in kept:
        low = current.start - image.base_vaddr
        text[low : low + current.size] = image.text[low : low + current.size]
    return bytes(text), kept


def specialize(
    image: KernelImage,
    profile: KernelProfile,
    *,
    include: Iterable[ByteRange] = (),
) -> SpecializedKernel:
    """Clones the image text and masks everything outside the profile.

    Args:
        image: The vanilla image.
        profile: The application's profile.
        include: Extra ranges to keep regardless of the profile.

    Returns:
        The specialized kernel; equal inputs give identical bytes.
    """
    text, kept = mask_text(image, [*profile.ranges, *include])
    logger.debug(
        "Specialized %s: kept %d of %d bytes", profile.app_name, total(kept), len(text)
    )
    return SpecializedKernel(
        app_name=profile.app_name,
        source=image,
        text=text,
        profile=profile,
        kept=tuple(kept),
    )


def reduction_stats(spec: SpecializedKernel) -> ReductionStats:
    """Computes text and symbol elimination percentages.

    Padding between symbols counts toward the text reduction only.
    """
    size = len(spec.text)
    masked = size - total(spec.kept)
    symbols = spec.source.symbols
    fully_removed = touched = 0
    for symbol in symbols:
        surviving = covered_within(spec.kept, symbol.extent)
        if surviving == 0:
            fully_removed += 1
        if surviving < symbol.size:
            touched += 1
    return ReductionStats(
        text_reduced_pct=masked * 100 / size if size else 0.0,
        symbols_fully_removed_pct=fully_removed * 100 / len(symbols) if symbols else 0.0,
        symbols_touched_pct=touched * 100 / len(symbols) if symbols else 0.0,
    )


def kernel_sharing(left: KernelProfile, right: KernelProfile) -> float:
    """The Jaccard index of the bytes two profiles keep.

    Two empty profiles share everything (1.0).
    """
    if left.granularity is not right.granularity:
        raise GranularityMismatch(
            f"cannot compare {left.granularity.value} with {right.granularity.value}"
        )
    a, b = merge(left.ranges), merge(right.ranges)
    shared = intersection_size(a, b)
    union = total(a) + total(b) - shared
    return shared / union if union else 1.0


def sharing_matrix(profiles: Sequence[KernelProfile]) -> list[tuple[str, str, float]]:
    """Pairwise kernel sharing of several applications, in input order."""
    return [
        (left.app_name, right.app_name, kernel_sharing(left, right))
        for left, right in combinations(profiles, 2)
    ]


def sidecar_path(bin_path: Path) -> Path:
    """The JSON sidecar written next to a specialized ``.bin`` file."""
    return bin_path.with_suffix(".json")


def save_specialized(spec: SpecializedKernel, bin_path: Path) -> Path:
    """Writes the masked text and its JSON sidecar.

    Only the ``metadata`` field of the sidecar varies between runs.

    Returns:
        The sidecar path.
    """
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(spec.text)
    sidecar = {
        "app": spec.app_name,
        "source_hash": source_hash(spec.source),
        "stats": asdict(reduction_stats(spec)),
        "profile": spec.profile.to_dict(),
        "metadata": {"created": datetime.now(tz=UTC).isoformat(timespec="seconds")},
    }
    side = sidecar_path(bin_path)
    side.write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return side


def load_specialized(image: KernelImage, bin_path: Path) -> SpecializedKernel:
    """Reads a specialized kernel back from its ``.bin`` file and sidecar.

    Raises:
        InvalidProfile: if the pair does not belong to ``image``.
    """
    side = sidecar_path(bin_path)
    try:
        sidecar = json.loads(side.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise InvalidProfile(f"missing sidecar {side}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise InvalidProfile(f"{side}: {e}") from e
    if not isinstance(sidecar, dict) or not isinstance(sidecar.get("profile"), dict):
        raise InvalidProfile(f"{side}: expected an object with a profile")
    if sidecar.get("source_hash") != source_hash(image):
        raise InvalidProfile(f"{bin_path} was not specialized from this image")
    profile = KernelProfile.from_dict(sidecar["profile"])
    text = bin_path.read_bytes()
    rebuilt = specialize(image, profile)
    if rebuilt.text != text:
        raise InvalidProfile(f"{bin_path} does not match the profile in {side}")
    return rebuilt
