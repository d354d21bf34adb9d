"""Deterministic generation of random, valid kernel images.

The property suites and the ``synth`` command use these images: symbols separated by
padding, blocks separated by gaps, a random call graph with cycles, a syscall table and
interrupt routes. The generated text never contains the trap byte and is sprinkled with
``ret`` bytes so gadget counts are non-trivial.
"""

import random

from kforge.image import BasicBlock, IrqRoute, KernelImage, Symbol
from kforge.specialize import TRAP_BYTE

RET_BYTE = 0xC3
NOP_BYTE = 0x90


def _synthesize_text(rng: random.Random, length: int, ret_every: int) -> bytes:
    text = bytearray(rng.randbytes(length))
    for i, value in enumerate(text):
        if value == TRAP_BYTE:
            text[i] = NOP_BYTE
    for _ in range(length // ret_every):
        text[rng.randrange(length)] = RET_BYTE
    return bytes(text)


def _layout(
    rng: random.Random, base_vaddr: int, n_symbols: int
) -> tuple[list[Symbol], list[BasicBlock], int]:
    symbols: list[Symbol] = []
    blocks: list[BasicBlock] = []
    cursor = 0
    for i in range(n_symbols):
        cursor += rng.randrange(0, 33)
        name = f"fn_{i:03d}"
        start = cursor
        inner = 0
        size = rng.randrange(48, 600)
        while inner < size:
            inner += rng.randrange(0, 17)
            block_size = min(rng.randrange(8, 65), size - inner)
            if block_size <= 0:
                break
            blocks.append(BasicBlock(base_vaddr + start + inner, block_size, name))
            inner += block_size
        symbols.append(Symbol(name, base_vaddr + start, size))
        cursor += size
    cursor += rng.randrange(0, 65)
    return symbols, blocks, cursor


def synthesize_image(  # noqa: PLR0914
    rng: random.Random,
    *,
    n_symbols: int = 40,
    n_syscalls: int = 10,
    n_irqs: int = 3,
    page_size: int = 256,
    base_vaddr: int = 0xFFFF_FFFF_8100_0000,
    max_callees: int = 3,
    ret_every: int = 40,
) -> KernelImage:
    """Generates a random kernel image that satisfies every invariant.

    Args:
        rng: The random source; equal seeds give equal images.
        n_symbols: Number of functions.
        n_syscalls: Number of syscall entries (each enters a distinct function).
        n_irqs: Number of interrupt routes (top half and bottom half functions).
        page_size: Page size of the image.
        base_vaddr: Where the text is mapped.
        max_callees: Upper bound of outgoing call edges per function.
        ret_every: Average distance between ``ret`` bytes in the text.

    Returns:
        The validated image.
    """
    if n_symbols < n_syscalls + 2 * n_irqs:
        raise ValueError("not enough symbols for the requested syscalls and irqs")
    symbols, blocks, length = _layout(rng, base_vaddr, n_symbols)
    names = [s.name for s in symbols]
    picked = rng.sample(names, n_syscalls + 2 * n_irqs)
    syscall_entries = {f"call_{k}": picked[k] for k in range(n_syscalls)}
    top_halves = picked[n_syscalls : n_syscalls + n_irqs]
    bottom_halves = picked[n_syscalls + n_irqs :]
    routes = tuple(
        IrqRoute(f"irq_{k}", top_halves[k], bottom_halves[k]) for k in range(n_irqs)
    )
    edges = sorted(
        {
            (caller, callee)
            for caller in names
            for callee in rng.sample(names, rng.randrange(0, max_callees + 1))
        }
    )
    return KernelImage(
        base_vaddr=base_vaddr,
        text=_synthesize_text(rng, length, ret_every),
        symbols=tuple(symbols),
        blocks=tuple(blocks),
        syscall_entries=syscall_entries,
        call_graph=tuple(edges),
        top_half_handlers=frozenset(top_halves),
        page_size=page_size,
        irq_routes=routes,
    )
