import json
import random
from dataclasses import replace
from pathlib import Path

import networkx as nx
import pytest

from kforge.errors import GranularityMismatch, InvalidProfile, UnknownSyscall
from kforge.image import KernelImage
from kforge.profiler import Granularity, KernelProfile, coarsen
from kforge.synth import synthesize_image
from kforge.syscalls import (
    SyscallList,
    call_graph,
    closure,
    expand_profile,
    load_syscall_list,
    save_closure,
    syscall_text_fraction,
    unused_syscalls,
)


@pytest.fixture
def web_syscalls() -> SyscallList:
    return SyscallList("apache", frozenset({"read", "write", "open", "socket"}))


def test_closure_follows_the_call_graph(toy_image: KernelImage, web_syscalls: SyscallList):
    reach = closure(toy_image, web_syscalls)
    assert reach.roots == {"sys_read", "sys_write", "sys_open", "sys_socket"}
    assert reach.reached == {
        "sys_read",
        "vfs_read",
        "copy_to_user",
        "fput",
        "kfree",
        "sys_write",
        "vfs_write",
        "copy_from_user",
        "sys_open",
        "do_sys_open",
        "path_lookup",
        "kmalloc",
        "sys_socket",
        "sock_create",
    }


def test_closure_of_nothing_is_empty(toy_image: KernelImage):
    reach = closure(toy_image, SyscallList("idle", frozenset()))
    assert reach.reached == frozenset()


def test_unknown_syscalls_are_all_listed(toy_image: KernelImage):
    with pytest.raises(UnknownSyscall) as error:
        closure(toy_image, SyscallList("app", frozenset({"read", "splice", "bpf"})))
    assert error.value.names == ["bpf", "splice"]


def test_closure_handles_cycles(small_image: KernelImage):
    cyclic = replace(small_image, call_graph=(("entry_a", "helper"), ("helper", "entry_a")))
    reach = closure(cyclic, SyscallList("app", frozenset({"a"})))
    assert reach.reached == {"entry_a", "helper"}


def test_closure_matches_networkx_reachability(rng: random.Random):
    for _ in range(20):
        image = synthesize_image(rng)
        names = rng.sample(sorted(image.syscall_entries), 3)
        reach = closure(image, SyscallList("app", frozenset(names)))
        graph = call_graph(image)
        for name in names:
            entry = image.syscall_entries[name]
            assert nx.descendants(graph, entry) | {entry} <= reach.reached
        assert all(
            any(nx.has_path(graph, root, node) for root in reach.roots) for node in reach.reached
        )


def test_expansion_adds_sharing_symbols_once(toy_image: KernelImage, web_syscalls: SyscallList):
    names = [
        "sys_read",
        "vfs_read",
        "copy_to_user",
        "sys_write",
        "vfs_write",
        "schedule",
        "timer_interrupt",
        "raise_softirq",
    ]
    profile = KernelProfile(
        "apache", Granularity.SYMBOL, tuple(toy_image.symbol(n).extent for n in names)
    )
    expanded = expand_profile(profile, closure(toy_image, web_syscalls), toy_image)
    assert expanded.granularity is Granularity.SYSCALL
    assert len(expanded.ranges) == 17
    assert set(profile.ranges) <= set(expanded.ranges)


def test_expansion_is_idempotent(
    toy_image: KernelImage, apache_profile: KernelProfile, web_syscalls: SyscallList
):
    reach = closure(toy_image, web_syscalls)
    once = expand_profile(coarsen(apache_profile, Granularity.SYMBOL, toy_image), reach, toy_image)
    assert expand_profile(once, reach, toy_image) == once


def test_expansion_needs_symbols(
    toy_image: KernelImage, apache_profile: KernelProfile, web_syscalls: SyscallList
):
    with pytest.raises(GranularityMismatch):
        expand_profile(apache_profile, closure(toy_image, web_syscalls), toy_image)


def test_expansion_rejects_partial_symbols(toy_image: KernelImage, web_syscalls: SyscallList):
    sys_read = toy_image.symbol("sys_read")
    partial = sys_read.extent._replace(size=sys_read.size // 2)
    profile = KernelProfile("apache", Granularity.SYMBOL, (partial,))
    with pytest.raises(InvalidProfile, match="not a symbol"):
        expand_profile(profile, closure(toy_image, web_syscalls), toy_image)


def test_expanded_profile_matches_golden(
    res_dir: Path, toy_image: KernelImage, apache_profile: KernelProfile
):
    syscalls = load_syscall_list(res_dir / "apache.syscalls", "apache")
    symbols = coarsen(apache_profile, Granularity.SYMBOL, toy_image)
    expanded = expand_profile(symbols, closure(toy_image, syscalls), toy_image)
    golden = json.loads((res_dir / "apache-syscall.json").read_text(encoding="utf-8"))
    assert expanded.to_dict() == golden


def test_syscall_text_fraction(toy_image: KernelImage):
    assert syscall_text_fraction(toy_image) == pytest.approx(0.75)


def test_unused_syscalls(toy_image: KernelImage, web_syscalls: SyscallList):
    assert unused_syscalls(toy_image, web_syscalls) == [
        "accept",
        "close",
        "execve",
        "exit",
        "futex",
        "mmap",
        "ptrace",
        "sendfile",
    ]


def test_save_closure(tmp_path: Path, toy_image: KernelImage, web_syscalls: SyscallList):
    file_path = tmp_path / "closure.json"
    save_closure(closure(toy_image, web_syscalls), file_path)
    data = json.loads(file_path.read_text(encoding="utf-8"))
    assert data["roots"] == ["sys_open", "sys_read", "sys_socket", "sys_write"]
    assert data["reached"] == sorted(data["reached"])
    assert len(data["reached"]) == 14
