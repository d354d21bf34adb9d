import csv
import io
import json
import random
from pathlib import Path

import pytest

from kforge.errors import LengthMismatch, UnknownFunction, UnsupportedFormat
from kforge.image import KernelImage
from kforge.metrics import (
    CSV_COLUMNS,
    CVE_DB,
    CveRecord,
    Effect,
    FunctionStatus,
    Verdict,
    attack_surface_report,
    classify_cve,
    classify_statuses,
    count_rop_gadgets,
    cve_report,
    emit_report,
    function_status,
    gadget_reduction,
    load_cve_db,
)
from kforge.profiler import Granularity, KernelProfile
from kforge.specialize import TRAP_BYTE, specialize
from kforge.utils.ranges import ByteRange

RET = 0xC3


def _brute_force_gadgets(text: bytes, max_len: int) -> int:
    candidates = set()
    for i, value in enumerate(text):
        if value != RET:
            continue
        for length in range(1, max_len + 1):
            if i - length + 1 < 0:
                break
            candidate = text[i - length + 1 : i + 1]
            if TRAP_BYTE not in candidate:
                candidates.add(candidate)
    return len(candidates)


def test_load_cve_db():
    records = load_cve_db(CVE_DB)
    assert len(records) == 23
    by_id = {r.cve_id: r for r in records}
    assert by_id["CVE-2015-8709"].functions == {"ptrace_has_cap", "__ptrace_may_access"}
    assert by_id["CVE-2017-17807"].effect is Effect.PRIV
    assert all(r.functions for r in records)


def test_record_needs_functions():
    with pytest.raises(ValueError, match="functions"):
        CveRecord("CVE-0", "", Effect.DOS, frozenset())


def test_apache_column_verdicts(cve_image: KernelImage, apache_b_profile: KernelProfile):
    spec = specialize(cve_image, apache_b_profile)
    report = cve_report(load_cve_db(CVE_DB), spec)
    assert report.count(Verdict.REMOVED) == 18
    assert report.count(Verdict.PARTIAL) == 1
    assert report.count(Verdict.EXISTS) == 4
    assert report.mitigated_count == 19
    verdicts = {v.cve_id: v.category for v in report.verdicts}
    assert verdicts["CVE-2015-8709"] is Verdict.PARTIAL
    assert {k for k, v in verdicts.items() if v is Verdict.EXISTS} == {
        "CVE-2018-6927",
        "CVE-2017-17053",
        "CVE-2017-17052",
        "CVE-2016-0723",
    }
    assert verdicts["CVE-2017-17807"] is Verdict.REMOVED


def test_function_status(cve_image: KernelImage, apache_b_profile: KernelProfile):
    spec = specialize(cve_image, apache_b_profile)
    assert function_status("mm_init", spec) is FunctionStatus.PRESENT
    assert function_status("ptrace_has_cap", spec) is FunctionStatus.PARTIAL
    assert function_status("key_alloc", spec) is FunctionStatus.REMOVED
    with pytest.raises(UnknownFunction):
        function_status("no_such_function", spec)


def test_all_or_nothing(cve_image: KernelImage):
    records = load_cve_db(CVE_DB)
    nothing = specialize(cve_image, KernelProfile("none", Granularity.BLOCK))
    assert cve_report(records, nothing).mitigated_count == 23
    everything = specialize(
        cve_image, KernelProfile("all", Granularity.BLOCK, (cve_image.text_range,))
    )
    report = cve_report(records, everything)
    assert report.mitigated_count == 0
    assert report.count(Verdict.EXISTS) == 23


def test_classification_matches_truth_table(rng: random.Random):
    statuses = list(FunctionStatus)
    for _ in range(500):
        chain = [rng.choice(statuses) for _ in range(rng.randrange(1, 5))]
        if FunctionStatus.REMOVED in chain:
            expected = Verdict.REMOVED
        elif FunctionStatus.PARTIAL in chain:
            expected = Verdict.PARTIAL
        else:
            expected = Verdict.EXISTS
        assert classify_statuses(chain) is expected


def test_masking_more_never_worsens_a_verdict(cve_image: KernelImage, rng: random.Random):
    order = {Verdict.REMOVED: 0, Verdict.PARTIAL: 1, Verdict.EXISTS: 2}
    records = load_cve_db(CVE_DB)
    for _ in range(50):
        wide = rng.sample(cve_image.blocks, rng.randrange(len(cve_image.blocks)))
        narrow = rng.sample(wide, rng.randrange(len(wide) + 1))
        wide_spec = specialize(
            cve_image, KernelProfile("w", Granularity.BLOCK, tuple(b.extent for b in wide))
        )
        narrow_spec = specialize(
            cve_image, KernelProfile("n", Granularity.BLOCK, tuple(b.extent for b in narrow))
        )
        for record in records:
            before = classify_cve(record, wide_spec).category
            after = classify_cve(record, narrow_spec).category
            assert order[after] <= order[before]


@pytest.mark.parametrize(
    ("text", "expected"),
    [
        (bytes([RET]), 1),
        (bytes([TRAP_BYTE] * 64), 0),
        (bytes([0x90, RET, 0x90, RET]), 4),
        (bytes([0x90, TRAP_BYTE, RET]), 1),
        (b"", 0),
    ],
)
def test_count_rop_gadgets(text, expected):
    assert count_rop_gadgets(text) == expected


def test_gadget_count_matches_brute_force(rng: random.Random):
    for _ in range(200):
        text = rng.randbytes(4096)
        assert count_rop_gadgets(text, 20) == _brute_force_gadgets(text, 20)


def test_gadget_count_is_monotone_under_masking(rng: random.Random):
    text = bytearray(rng.randbytes(4096))
    previous = count_rop_gadgets(bytes(text))
    for _ in range(100):
        for _ in range(rng.randrange(1, 40)):
            text[rng.randrange(len(text))] = TRAP_BYTE
        current = count_rop_gadgets(bytes(text))
        assert current <= previous
        previous = current


def test_gadget_reduction(rng: random.Random):
    text = rng.randbytes(1024)
    assert gadget_reduction(text, text) == 0.0
    assert gadget_reduction(text, bytes([TRAP_BYTE]) * len(text)) == 100.0
    assert gadget_reduction(bytes(16), bytes(16)) == 0.0
    with pytest.raises(LengthMismatch):
        gadget_reduction(text, text[:-1])


def test_block_specialization_removes_more_gadgets(
    toy_image: KernelImage, apache_profile: KernelProfile, res_dir: Path
):
    syscall = KernelProfile.from_dict(
        json.loads((res_dir / "apache-syscall.json").read_text(encoding="utf-8"))
    )
    block = gadget_reduction(toy_image.text, specialize(toy_image, apache_profile).text)
    wide = gadget_reduction(toy_image.text, specialize(toy_image, syscall).text)
    assert 0.0 <= wide <= block <= 100.0


@pytest.fixture
def apache_report(toy_image: KernelImage, apache_profile: KernelProfile):
    return attack_surface_report(toy_image, [specialize(toy_image, apache_profile)], [])


def test_attack_surface_report(apache_report):
    row = apache_report.rows[0]
    assert row.app == "apache"
    assert row.gadgets_vanilla == 22979
    assert row.gadgets_specialized == 636
    assert row.cves_total == 0
    assert apache_report.syscall_text_pct == pytest.approx(75.0)


def test_json_report_matches_golden(apache_report, res_dir: Path):
    golden = json.loads((res_dir / "apache-report.json").read_text(encoding="utf-8"))
    assert json.loads(emit_report(apache_report, "json")) == golden


def test_csv_report(apache_report):
    rows = list(csv.reader(io.StringIO(emit_report(apache_report, "csv"))))
    assert rows[0] == CSV_COLUMNS
    assert rows[1][0] == "apache"
    assert len(rows) == 2


def test_text_report(apache_report):
    text = emit_report(apache_report, "text")
    assert "apache" in text
    assert "97.27%" in text
    assert "not comparable" in text


def test_unsupported_format(apache_report):
    with pytest.raises(UnsupportedFormat):
        emit_report(apache_report, "latex")


def test_report_with_vulnerabilities(cve_image: KernelImage, apache_b_profile: KernelProfile):
    specs = [
        specialize(cve_image, apache_b_profile),
        specialize(
            cve_image,
            KernelProfile("idle", Granularity.BLOCK, (ByteRange(cve_image.base_vaddr, 1),)),
        ),
    ]
    report = attack_surface_report(cve_image, specs, load_cve_db(CVE_DB))
    assert [row.cves_mitigated for row in report.rows] == [19, 23]
    assert report.mean_mitigated == pytest.approx(21.0)
    data = json.loads(emit_report(report, "json"))
    assert data["applications"][0]["verdicts"]["CVE-2015-8709"] == "P"
