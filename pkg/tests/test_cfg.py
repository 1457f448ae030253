import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speccfi import _kernels, interp
from speccfi.cfg import (
    MissingSignature, ScanConfig, assign_labels, build_cfg, generate_corpus, instrument,
    scan_smother_gadgets, transform_retpoline,
)
from speccfi.isa import FENCE_KINDS, INDIRECT_KINDS, Kind, assemble, count_kinds, format_canonical, load_image, \
    validate_cfi
from speccfi.programs import random_program, return_stack_walkthrough_source

from gadget_oracle import count as oracle_count


def test_straight_line_single_block():
    cfg = build_cfg(assemble("nop\nnop\nhalt\n"))
    assert cfg.blocks == [(0, 3)] and cfg.edges == []


def test_walkthrough_blocks_and_edges():
    p = assemble(return_stack_walkthrough_source())
    cfg = build_cfg(p)
    starts = {s for s, _ in cfg.blocks}
    assert {0x10, 0x24, 0x25, 0x26, 0x27, 0x36, 0x74, 0x75, 0x86, 0x90} <= starts
    b = cfg.block_of
    assert (b(0x0F), b(0x24), "call") in cfg.edges
    ret2 = p.symbols["function2"] + 40  # ret after the straight-line body
    assert (b(ret2), b(0x25), "return") in cfg.edges
    assert (b(0x86), b(0x26), "return") in cfg.edges


def test_jz_has_two_successors():
    cfg = build_cfg(assemble("cmpi r1, 0\njz out\nnop\nout:\nhalt\n"))
    kinds = sorted(k for _, k in cfg.successors(0))
    assert kinds == ["direct", "fallthrough"]


def test_every_instruction_in_one_block():
    p = random_program(3)
    cfg = build_cfg(p)
    covered = [i for s, e in cfg.blocks for i in range(s, e)]
    assert covered == list(range(len(p)))
    for s, _, k in cfg.edges:
        if k == "indirect-possible":
            assert p.instructions[cfg.blocks[s][1] - 1].kind in INDIRECT_KINDS


THREE = """
main:
    li r1, f
    call *r1
    li r1, g
    call *r1
    li r1, h
    call *r1
    halt
.func f {f}
f:
    ret
.func g {g}
g:
    ret
.func h {h}
h:
    ret
"""


def test_coarse_collapses_call_targets():
    p = assemble(THREE.format(f="", g="", h=""))
    lm = assign_labels(build_cfg(p), "coarse")
    assert set(lm.target_labels.values()) == {1} and len(lm.target_labels) == 3


def test_fine_classes_by_signature():
    p = assemble(THREE.format(f="int(int)", g="int(int)", h="void()"))
    lm = assign_labels(build_cfg(p), "fine")
    f, g, h = (lm.target_labels[p.symbols[n]] for n in "fgh")
    assert f == g != h
    assert lm == assign_labels(build_cfg(p), "fine")  # stable


def test_fine_needs_signatures():
    p = assemble(THREE.format(f="", g="a", h="b"))
    with pytest.raises(MissingSignature):
        assign_labels(build_cfg(p), "fine")


@pytest.mark.parametrize("k", [1, 3, 5])
def test_corpus_label_count(k):
    p = assemble(generate_corpus(40, k, seed=k))
    lm = assign_labels(build_cfg(p), "fine")
    assert len(set(lm.target_labels.values())) == len(set(p.functions.values())) == k


def test_instrument_single_site():
    p = assemble("main:\n    li r1, f\n    call *r1\n    halt\n.func f\nf:\n    add r2, r2, 1\n    ret\n")
    q = instrument(p, assign_labels(build_cfg(p), "coarse"))
    f = q.symbols["f"]
    assert q.instructions[f].kind == Kind.CFI_LBL
    call = next(x for x in q.instructions if x.kind == Kind.CALL_INDIRECT)
    assert call.label == q.instructions[f].label
    assert validate_cfi(q) == []


def test_btb_victim_shape():
    src = "main:\n    li r1, legit\n.org 0x10\n    call *r1\n    halt\n.org 0x20\n.func legit s\nlegit:\n    ret\n"
    p = assemble(src)
    q = instrument(p, assign_labels(build_cfg(p), "fine"))
    assert q.instructions[0x10].kind == Kind.CALL_INDIRECT and q.instructions[0x10].label == 1
    assert q.instructions[q.symbols["legit"]].kind == Kind.CFI_LBL
    assert q.instructions[q.symbols["legit"]].label == 1


def test_retpoline_counts():
    p = assemble("main:\n    li r1, f\n    call *r1\n    halt\nf:\n    ret\n")
    q = transform_retpoline(p)
    assert len(q) == len(p) + 4
    assert count_kinds(q.instructions, [Kind.RET]) == 0
    no_indirect = assemble("li r1, 3\nadd r1, r1, 1\nhalt\n")
    assert transform_retpoline(no_indirect).instructions == no_indirect.instructions


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 5000), st.sampled_from(["strict", "relaxed"]))
def test_retpoline_fence_count(seed, kind):
    p = random_program(seed)
    q = transform_retpoline(p, kind)
    want = count_kinds(p.instructions, [Kind.CALL_INDIRECT, Kind.JMP_INDIRECT, Kind.RET])
    assert count_kinds(q.instructions, FENCE_KINDS) == want
    assert count_kinds(q.instructions, [Kind.RET]) == 0


def _arch(program):
    img = load_image(program, data_size=8192)
    st_, _ = interp.run(img)
    return st_


def _scratch(state):
    return bytes(state.image.data[1024:1024 + 256])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_transforms_preserve_semantics(seed):
    p = random_program(seed)
    ref = _arch(p)
    variants = [instrument(p, assign_labels(build_cfg(p), pol)) for pol in ("coarse", "fine")]
    variants.append(transform_retpoline(p))
    for q in variants:
        got = _arch(q)
        # the scratch area is all the program writes; the stack holds return
        # addresses and r10 a function pointer, both of which move with the code
        assert _scratch(got) == _scratch(ref)
        for r in list(range(1, 10)) + [11]:
            assert got.regs[r] == ref.regs[r]


def test_scan_minimal_pattern():
    p = assemble("main:\n    li r1, f\n    call *r1\n    halt\n.func f\nf:\n    cfi_lbl L1\n"
                 "    cmp r1, r2\n    jz out\nout:\n    ret\n")
    lm = assign_labels(build_cfg(p), "coarse")
    rep = scan_smother_gadgets(p, lm)
    assert [e.offsets for e in rep.entries] == [(0,)]
    assert rep.to_csv().splitlines() == ["marker_addr,label,gadget_offset", f"{p.symbols['f']:#x},1,0"]


def test_scan_window_edge():
    body = "    nop\n" * 70 + "    cmp r1, r2\n    jz out\nout:\n    ret\n"
    p = assemble("main:\n    li r1, f\n    call *r1\n    halt\n.func f\nf:\n    cfi_lbl L1\n" + body)
    lm = assign_labels(build_cfg(p), "coarse")
    assert scan_smother_gadgets(p, lm).raw_total == 0
    assert scan_smother_gadgets(p, lm, ScanConfig(window=71)).raw_total == 1


def _reports(seed, n=60, k=4):
    p = assemble(generate_corpus(n, k, seed))
    out = {}
    for pol in ("coarse", "fine"):
        lm = assign_labels(build_cfg(p), pol)
        q = instrument(p, lm)
        out[pol] = (q, scan_smother_gadgets(q, lm))
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 5))
def test_fine_never_exceeds_coarse(seed, k):
    r = _reports(seed, 40, k)
    assert r["fine"][1].total <= r["coarse"][1].total


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_scanner_matches_oracle(seed):
    for q, rep in _reports(seed).values():
        assert (rep.raw_total, rep.total) == oracle_count(format_canonical(q))
        for e in rep.entries:
            assert all(0 <= o < rep.config.window for o in e.offsets)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 2), min_size=0, max_size=400), st.integers(1, 80), st.integers(0, 6))
def test_kernel_backends_agree(codes, window, gap):
    codes = np.array(codes, dtype=np.int8)
    starts = np.arange(0, len(codes), 7, dtype=np.int64)
    ref = _kernels.scan_windows(codes, starts, window, gap, backend="numpy")
    if _kernels.BACKEND == "numba":
        got = _kernels.scan_windows(codes, starts, window, gap, backend="numba")
        assert all(np.array_equal(a, b) for a, b in zip(ref, got))
