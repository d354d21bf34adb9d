import json
import random
from pathlib import Path

import pytest

from kforge.image import BasicBlock, IrqRoute, KernelImage, Symbol, load_image
from kforge.metrics import CVE_DB
from kforge.profiler import Granularity, KernelProfile, load_profile

BASE = 0xFFFF_FFFF_8100_0000


@pytest.fixture
def res_dir() -> Path:
    """The shared fixture files under ``src/res``."""
    project_path = Path(__file__).absolute().parent.parent
    return project_path / "src" / "res"


@pytest.fixture
def toy_image(res_dir: Path) -> KernelImage:
    """The 40-function toy kernel bundle."""
    return load_image(res_dir / "toy-kernel")


@pytest.fixture
def apache_profile(res_dir: Path) -> KernelProfile:
    """The block profile built from the three apache traces."""
    return load_profile(res_dir / "apache.json")


@pytest.fixture
def rng() -> random.Random:
    """A seeded random source."""
    return random.Random(20181128)  # noqa: S311


@pytest.fixture
def small_image() -> KernelImage:
    """Four 64-byte functions with two blocks each and one interrupt."""
    names = ["entry_a", "helper", "irq_top", "irq_bottom"]
    symbols = tuple(Symbol(name, BASE + i * 64, 64) for i, name in enumerate(names))
    blocks = tuple(
        BasicBlock(symbol.start + j * 32, 16, symbol.name)
        for symbol in symbols
        for j in range(2)
    )
    text = bytes((i * 7 + 1) % 0xC0 for i in range(512))
    return KernelImage(
        base_vaddr=BASE,
        text=text,
        symbols=symbols,
        blocks=blocks,
        syscall_entries={"a": "entry_a"},
        call_graph=(("entry_a", "helper"),),
        top_half_handlers=frozenset({"irq_top"}),
        page_size=256,
        irq_routes=(IrqRoute("tick", "irq_top", "irq_bottom"),),
    )


@pytest.fixture
def cve_image() -> KernelImage:
    """An image with one 128-byte function per name in the shipped CVE database."""
    records = json.loads(CVE_DB.read_text(encoding="utf-8"))
    names = sorted({name for record in records for name in record["functions"]})
    symbols = tuple(Symbol(name, BASE + i * 128, 128) for i, name in enumerate(names))
    blocks = tuple(
        BasicBlock(symbol.start + j * 64, 64, symbol.name) for symbol in symbols for j in range(2)
    )
    return KernelImage(
        base_vaddr=BASE,
        text=bytes(len(symbols) * 128),
        symbols=symbols,
        blocks=blocks,
        page_size=256,
    )


@pytest.fixture
def apache_b_profile(cve_image: KernelImage) -> KernelProfile:
    """Keeps what the apache block column of the vulnerability table keeps."""
    ranges = [
        cve_image.symbol(name).extent
        for name in (
            "futex_requeue",
            "init_new_context",
            "mm_init",
            "tty_ioctl",
            "__ptrace_may_access",
        )
    ]
    ranges.append(cve_image.blocks_of("ptrace_has_cap")[0].extent)
    return KernelProfile("apache", Granularity.BLOCK, tuple(ranges))
