import io
import json
import random
from dataclasses import replace
from pathlib import Path

import pytest

from kforge.errors import (
    AddressOutOfRange,
    InvalidProfile,
    KeyMissing,
    MalformedScenario,
    MemoryExhausted,
    ModuleInsertForbidden,
    NoRunningProcess,
    ProcessKilled,
    ProtectedProcess,
    UnknownIrq,
    UnknownPid,
)
from kforge.image import KernelImage
from kforge.profiler import Granularity, KernelProfile
from kforge.simulate import (
    BASE_REGION,
    Outcome,
    ProcessState,
    boot,
    context_switch,
    dump_events,
    exec_kernel_addr,
    insert_module,
    memory_pressure,
    memory_sweep,
    observed_view,
    raise_interrupt,
    read_scenario,
    run_ksoftirqd,
    run_scenario,
    shared_read,
    shared_write,
    sim_execve,
    teardown,
    view_digest,
    whitelist,
)
from kforge.specialize import TRAP_BYTE
from kforge.utils.config import Config
from kforge.utils.ranges import ByteRange, covered_within, merge

BASE = 0xFFFF_FFFF_8100_0000


def _symbols_profile(image: KernelImage, app: str, names: list[str]) -> KernelProfile:
    return KernelProfile(app, Granularity.SYMBOL, tuple(image.symbol(n).extent for n in names))


@pytest.fixture
def apps(toy_image: KernelImage) -> dict[str, KernelProfile]:
    """Three applications using disjoint parts of the toy kernel."""
    return {
        "web": _symbols_profile(toy_image, "web", ["sys_read", "vfs_read", "copy_to_user"]),
        "db": _symbols_profile(toy_image, "db", ["sys_write", "vfs_write", "fput", "kfree"]),
        "shell": _symbols_profile(toy_image, "shell", ["sys_execve", "do_execve", "mm_init"]),
    }


def test_boot(toy_image: KernelImage):
    state = boot(toy_image)
    assert set(state.regions) == {BASE_REGION}
    assert state.processes[1].name == "ksoftirqd"
    assert state.processes[1].state is ProcessState.RUNNABLE
    assert state.current is None
    assert state.clock == 0
    assert [e["kind"] for e in state.event_log] == ["Boot"]
    assert observed_view(state, 1) == toy_image.text


def test_execve_clones_and_masks(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    pid = sim_execve(state, "web", apps["web"])
    assert pid == 2
    assert state.processes[pid].state is ProcessState.RUNNABLE
    assert state.clock == Config().launch_cost_steps
    view = observed_view(state, pid)
    assert len(view) == len(toy_image.text)
    # the interrupt top halves survive masking
    timer = toy_image.symbol("timer_interrupt")
    assert view[timer.start - BASE] == toy_image.text[timer.start - BASE]
    assert view[toy_image.symbol("sys_write").start - BASE] == TRAP_BYTE
    launch = state.event_log[-1]
    assert launch["kind"] == "Launch"
    assert launch["region"] == "k1"


def test_execve_rejects_foreign_profiles(toy_image: KernelImage):
    state = boot(toy_image)
    profile = KernelProfile("x", Granularity.BLOCK, (ByteRange(BASE + 65536, 16),))
    with pytest.raises(InvalidProfile):
        sim_execve(state, "x", profile)


def test_context_switch(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    web = sim_execve(state, "web", apps["web"])
    db = sim_execve(state, "db", apps["db"])
    context_switch(state, web)
    context_switch(state, db)
    assert state.current == db
    assert state.processes[web].state is ProcessState.RUNNABLE
    assert state.processes[db].state is ProcessState.RUNNING
    with pytest.raises(UnknownPid):
        context_switch(state, 99)


def test_views_are_isolated(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    pids = {name: sim_execve(state, name, profile) for name, profile in apps.items()}
    digests = {view_digest(state, pid) for pid in pids.values()}
    assert len(digests) == 3
    for name, pid in pids.items():
        assert state.processes[pid].page_table.region_id != BASE_REGION
        kept = merge([*apps[name].ranges, *whitelist(toy_image)])
        view = observed_view(state, pid)
        for other in apps.values():
            for extent in other.ranges:
                byte = view[extent.start - BASE]
                expected_kept = covered_within(kept, ByteRange(extent.start, 1)) == 1
                assert (byte != TRAP_BYTE) is expected_kept


def test_exec_requires_a_running_process(toy_image: KernelImage):
    state = boot(toy_image)
    with pytest.raises(NoRunningProcess):
        exec_kernel_addr(state, BASE)


def test_exec_outside_the_text(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    context_switch(state, sim_execve(state, "web", apps["web"]))
    with pytest.raises(AddressOutOfRange):
        exec_kernel_addr(state, BASE + 65536)


def test_random_execution_matches_profile_membership(
    toy_image: KernelImage, apps: dict[str, KernelProfile], rng: random.Random
):
    state = boot(toy_image)
    pids = {sim_execve(state, name, profile): name for name, profile in apps.items()}
    kept = {pid: merge([*apps[name].ranges, *whitelist(toy_image)]) for pid, name in pids.items()}
    killed: set[int] = set()
    for _ in range(1000):
        pid = rng.choice(list(pids))
        if pid in killed:
            with pytest.raises(ProcessKilled):
                context_switch(state, pid)
            continue
        context_switch(state, pid)
        symbol = rng.choice(toy_image.symbols)
        vaddr = symbol.start + rng.randrange(symbol.size)
        before = {p: state.processes[p].state for p in pids}
        result = exec_kernel_addr(state, vaddr)
        expected = covered_within(kept[pid], ByteRange(vaddr, 1)) == 1
        assert (result.outcome is Outcome.EXECUTED) is expected
        if result.outcome is Outcome.TRAPPED:
            killed.add(pid)
            assert state.current is None
            for other in pids:
                if other != pid:
                    assert state.processes[other].state is before[other]
            assert state.processes[pid].state is ProcessState.KILLED
    assert killed


def test_report_policy_keeps_the_process(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image, Config(fault_policy="report"))
    pid = sim_execve(state, "web", apps["web"])
    context_switch(state, pid)
    result = exec_kernel_addr(state, toy_image.symbol("sys_ptrace").start)
    assert result.outcome is Outcome.TRAPPED
    assert result.symbol == "sys_ptrace"
    assert state.current == pid
    assert state.processes[pid].state is ProcessState.RUNNING
    assert state.event_log[-1]["kind"] == "Fault"


def test_interrupts_are_deferred_to_the_base_kernel(
    toy_image: KernelImage, apps: dict[str, KernelProfile], rng: random.Random
):
    state = boot(toy_image)
    pids = [sim_execve(state, name, profile) for name, profile in apps.items()]
    raised = []
    for index in range(50):
        context_switch(state, rng.choice(pids))
        irq = rng.choice(["timer", "net_rx", "block"])
        raise_interrupt(state, irq)
        raised.append(irq)
        if index % 7 == 6:
            run_ksoftirqd(state)
    run_ksoftirqd(state)
    assert not state.softirq_queue
    assert not [e for e in state.event_log if e["kind"] == "Fault"]
    bottom = [e for e in state.event_log if e["kind"] == "BottomHalf"]
    assert [e["irq"] for e in bottom] == raised
    assert all(e["region"] == BASE_REGION and e["pid"] == 1 for e in bottom)
    assert all(e["outcome"] == "executed" for e in bottom)
    top = [e for e in state.event_log if e["kind"] == "TopHalf"]
    assert [e["raised"] for e in bottom] == [e["step"] for e in top]


def test_ksoftirqd_restores_the_interrupted_process(
    toy_image: KernelImage, apps: dict[str, KernelProfile]
):
    state = boot(toy_image)
    pid = sim_execve(state, "web", apps["web"])
    context_switch(state, pid)
    raise_interrupt(state, "timer")
    assert run_ksoftirqd(state) == 1
    assert state.current == pid
    assert state.processes[1].state is ProcessState.RUNNABLE
    assert run_ksoftirqd(state) == 0


def test_trap_bytes_in_the_vanilla_text_execute(small_image: KernelImage):
    bottom = small_image.symbol("irq_bottom")
    text = bytearray(small_image.text)
    text[bottom.start - BASE] = TRAP_BYTE
    image = replace(small_image, text=bytes(text))
    state = boot(image)
    kept = _symbols_profile(image, "app", ["entry_a", "irq_top", "irq_bottom"])
    pid = sim_execve(state, "app", kept)
    context_switch(state, pid)
    assert exec_kernel_addr(state, bottom.start).outcome is Outcome.EXECUTED
    raise_interrupt(state, "tick")
    raise_interrupt(state, "tick")
    assert run_ksoftirqd(state) == 2
    bottom_halves = [e for e in state.event_log if e["kind"] == "BottomHalf"]
    assert [e["outcome"] for e in bottom_halves] == ["executed", "executed"]
    assert not state.softirq_queue
    assert state.current == pid
    assert state.processes[1].state is ProcessState.RUNNABLE
    context_switch(state, 1)
    assert exec_kernel_addr(state, bottom.start).outcome is Outcome.EXECUTED


def test_unknown_irq(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    context_switch(state, sim_execve(state, "web", apps["web"]))
    with pytest.raises(UnknownIrq):
        raise_interrupt(state, "gpio")


def test_shared_data_is_visible_to_every_process(
    toy_image: KernelImage, apps: dict[str, KernelProfile]
):
    state = boot(toy_image)
    web = sim_execve(state, "web", apps["web"])
    db = sim_execve(state, "db", apps["db"])
    context_switch(state, web)
    shared_write(state, "counter", 41)
    context_switch(state, db)
    assert shared_read(state, "counter") == 41
    with pytest.raises(KeyMissing):
        shared_read(state, "missing")


def test_modules_only_load_under_the_base_kernel(
    toy_image: KernelImage, apps: dict[str, KernelProfile]
):
    state = boot(toy_image)
    context_switch(state, sim_execve(state, "web", apps["web"]))
    with pytest.raises(ModuleInsertForbidden):
        insert_module(state, "e1000")
    context_switch(state, 1)
    insert_module(state, "e1000")
    assert state.event_log[-1]["kind"] == "ModuleInsert"


def test_teardown_frees_the_kernel_copy(toy_image: KernelImage, apps: dict[str, KernelProfile]):
    state = boot(toy_image)
    pid = sim_execve(state, "web", apps["web"])
    context_switch(state, pid)
    teardown(state, pid)
    assert state.current is None
    assert set(state.regions) == {BASE_REGION}
    with pytest.raises(UnknownPid):
        teardown(state, pid)
    with pytest.raises(ProtectedProcess):
        teardown(state, 1)


@pytest.mark.parametrize(
    ("ram", "baseline", "first_pressured"),
    [(8192, 2192, 751), (4096, 1336, 346)],
)
def test_memory_pressure_threshold(ram, baseline, first_pressured):
    config = Config(ram_mb=ram, baseline_reserved_mb=baseline)
    before, at = memory_sweep(config, [first_pressured - 1, first_pressured])
    assert not before.pressured
    assert at.pressured
    assert at.max_kernels == first_pressured - 1
    assert at.committed_mb == first_pressured * 8


def test_memory_pressure_of_a_running_system(
    toy_image: KernelImage, apps: dict[str, KernelProfile]
):
    config = Config(ram_mb=64, baseline_reserved_mb=40)
    state = boot(toy_image, config)
    for _ in range(3):
        sim_execve(state, "web", apps["web"])
    assert memory_pressure(state).pressured
    assert [e for e in state.event_log if e["kind"] == "Pressure"]
    for _ in range(4):
        sim_execve(state, "web", apps["web"])
    with pytest.raises(MemoryExhausted):
        sim_execve(state, "web", apps["web"])


def test_scenario_matches_the_golden_event_log(
    res_dir: Path, toy_image: KernelImage, apache_profile: KernelProfile
):
    state = boot(toy_image)
    lines = read_scenario(res_dir / "scenario.jsonl")
    events = run_scenario(state, lines, {"apache": apache_profile})
    actual = [json.loads(line) for line in dump_events(events).splitlines()]
    golden = [
        json.loads(line)
        for line in (res_dir / "events.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    assert actual == golden


def test_scenario_logs_domain_errors(toy_image: KernelImage):
    state = boot(toy_image)
    lines = ['{"op": "switch", "pid": 7}', '{"op": "execve", "app": "ghost"}']
    events = run_scenario(state, lines, {})
    errors = [e for e in events if e["kind"] == "Error"]
    assert [e["error"] for e in errors] == ["UnknownPid", "InvalidProfile"]
    assert [e["line"] for e in errors] == [1, 2]


@pytest.mark.parametrize(
    "line",
    [
        "not json",
        '{"op": "fly"}',
        '["exec"]',
        '{"op": "write"}',
        '{"op": "exec", "symbol": "nope"}',
    ],
)
def test_malformed_scenarios_stop(toy_image: KernelImage, line):
    state = boot(toy_image)
    with pytest.raises(MalformedScenario, match="line 2"):
        run_scenario(state, io.StringIO(f"# header\n{line}\n"), {})


def test_undecodable_scenario_line(tmp_path: Path):
    file_path = tmp_path / "scenario.jsonl"
    file_path.write_bytes(b'{"op": "ksoftirqd"}\n{"op": "\xff"}\n')
    with pytest.raises(MalformedScenario, match="scenario.jsonl: line 2"):
        read_scenario(file_path)
