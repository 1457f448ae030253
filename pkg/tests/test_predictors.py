import pytest
from hypothesis import given, settings, strategies as st

from speccfi.predictors import STALL, Btb, LegacyRsb, Pht, RsbScs, SaveWhileSpeculative, SpillBlocked


# -- direction predictor ------------------------------------------------------

def test_fresh_pht_predicts_not_taken():
    p = Pht()
    assert not any(p.predict(pc) for pc in (0, 7, 0x123, 4095))


def test_pht_saturates_to_taken():
    p = Pht()
    for _ in range(4):
        p.update(0x40, True)
    assert p.predict(0x40)
    assert all(0 <= c <= 3 for c in p.bimodal + p.gshare + p.choice)


def _reference_gshare(pattern, bits=12):
    """Plain dict-based gshare used as an oracle for the accuracy check."""
    table, hist, hits = {}, 0, []
    for pc, taken in pattern:
        idx = (pc ^ hist) & ((1 << bits) - 1)
        hits.append((table.get(idx, 1) >= 2) == taken)
        table[idx] = min(table.get(idx, 1) + 1, 3) if taken else max(table.get(idx, 1) - 1, 0)
        hist = ((hist << 1) | taken) & ((1 << bits) - 1)
    return hits


def test_gshare_learns_alternation():
    p = Pht()
    pattern = [(0x80, i % 2 == 0) for i in range(100)]
    hits = []
    for pc, taken in pattern:
        hits.append(p.predict_gshare(pc) == taken)
        p.update(pc, taken)
    assert sum(hits[-50:]) / 50 >= 0.9
    assert hits == _reference_gshare(pattern)


def test_pht_history_is_fixed_width():
    p = Pht(history_bits=4)
    for _ in range(10):
        p.update(1, True)
    assert p.history == 0b1111


# -- BTB ------------------------------------------------------------------------

def test_btb_is_pid_oblivious():
    b = Btb()
    assert b.lookup(0x10) is None
    b.update(0x10, 0x25)  # attacker process trains
    assert b.lookup(0x10) == (0x25, None)  # victim process hits


def test_btb_label_variant_returns_label():
    b = Btb(with_labels=True)
    b.update(0x10, 0x25, label=1)
    assert b.lookup(0x10) == (0x25, 1)


def test_btb_alias_collides():
    b = Btb(index_bits=9)
    a = b.alias_of(0x10)
    assert a != 0x10 and b.index(a) == b.index(0x10) and b.tag(a) == b.tag(0x10)
    b.update(a, 0x99)
    assert b.lookup(0x10) == (0x99, None)
    assert len(b.entries) == 512


# -- legacy RSB -----------------------------------------------------------------

def test_legacy_rsb_overwrites_oldest():
    r = LegacyRsb()
    for i in range(17):
        r.push(0x100 + i)
    popped = [r.pop() for _ in range(16)]
    assert popped == [0x100 + i for i in range(16, 0, -1)]
    r.pop()
    assert r.underflow


# -- RSB/SCS --------------------------------------------------------------------

def test_rsbscs_lifo():
    r = RsbScs()
    r.push(0x10)
    r.push(0x25)
    assert r.pop() == 0x25 and r.pop() == 0x10


def test_rsbscs_walkthrough_sequence():
    r = RsbScs()
    r.push(0x10)
    r.push(0x25)
    r.commit("call")
    r.commit("call")
    assert r.cache == [0x10, 0x25] and r.lcp == 2
    old = r.pop()  # ret from function2
    r.commit("ret")
    r.push(0x26)  # call function3
    old_ret = r.pop()  # wrong-path ret in function3
    r.push(0x27)  # call function4
    r.annul("call")
    r.annul("ret", old_ret)
    assert old == 0x25 and old_ret == 0x26
    assert r.cache == [0x10, 0x26]


def test_rsbscs_empty_pop_stalls():
    assert RsbScs().pop() is STALL


def test_rsbscs_commit_drains():
    r = RsbScs()
    r.push(1)
    r.commit("call")
    assert r.tos == r.lcp
    r.pop()
    r.commit("ret")
    assert r.tos == r.lcp == 0


def test_push_then_annul_is_identity():
    r = RsbScs()
    r.push(5)
    r.commit("call")
    before = r.state()
    r.push(9)
    r.annul("call")
    assert r.state() == before


def _committed(n):
    r = RsbScs()
    for i in range(n):
        r.push(0x1000 + i)
        r.commit("call")
    return r


def test_spill_on_full():
    r = _committed(16)
    r.push(0x2000)
    assert r.spills == 1 and r.scs == [0x1000, 0x1001, 0x1002, 0x1003]
    assert r.tos == 13


def test_spill_blocked_by_speculative_entries():
    r = RsbScs()
    for i in range(16):
        r.push(i)
    assert not r.can_push()
    with pytest.raises(SpillBlocked):
        r.push(99)


def test_fill_restores_youngest_backed():
    r = RsbScs()
    r.backing[0] = [1, 2, 3, 4, 5, 6]
    assert r.pop() == 6
    assert r.fills == 1 and r.scs == [1, 2] and r.cache == [3, 4, 5]


def test_spill_then_fill_round_trip():
    r = _committed(16)
    before = list(r.cache)
    r.spill()
    assert len(r.cache) == 12
    for _ in range(12):
        r.pop()
        r.commit("ret")
    r.fill()
    assert r.cache == before[:4]


def test_context_round_trip_and_isolation():
    r = _committed(5)
    r.pid = 1
    before = list(r.cache)
    r.switch_to(2)
    assert r.cache == [] and r.pop() is STALL
    for i in range(16):  # attacker fills its own stack
        r.push(0xBAD)
        r.commit("call")
    r.switch_to(1)
    assert r.cache == before


def test_save_while_speculative():
    r = RsbScs()
    r.push(1)
    with pytest.raises(SaveWhileSpeculative):
        r.context_save()


ops = st.lists(st.sampled_from(["push", "pop"]), max_size=8)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 30), ops)
def test_annulment_restores_prior_state(depth, seq):
    r = _committed(depth)
    before, stack_before = r.state(), r.full_stack()
    moves = r.spills + r.fills
    done = []
    for i, op in enumerate(seq):
        if op == "push":
            if not r.can_push():
                continue
            r.push(0x9000 + i)
            done.append(("call", None))
        else:
            v = r.pop()
            if v is STALL:
                continue
            done.append(("ret", v))
    for kind, old in reversed(done):
        r.annul(kind, old)
    # a spill or fill is not undone, but the logical stack always is
    assert r.full_stack() == stack_before
    if r.spills + r.fills == moves:
        assert r.state() == before


@settings(max_examples=200, deadline=None)
@given(st.lists(st.booleans(), max_size=120))
def test_committed_pops_mirror_architectural_stack(calls):
    r, ref, n = RsbScs(), [], 0
    for is_call in calls:
        if is_call:
            n += 1
            r.push(n)
            r.commit("call")
            ref.append(n)
        elif ref:
            assert r.pop() == ref.pop()
            r.commit("ret")
        assert r.tos == r.lcp
        assert r.full_stack() == ref


def test_legacy_loses_what_scs_keeps():
    legacy, scs = LegacyRsb(), RsbScs()
    for i in range(20):
        legacy.push(i)
        scs.push(i)
        scs.commit("call")
    got_legacy, got_scs = [], []
    for _ in range(20):
        got_legacy.append(legacy.pop())
        got_scs.append(scs.pop())
        scs.commit("ret")
    want = list(range(19, -1, -1))
    assert got_scs == want
    assert got_legacy != want


def test_snapshot_rows():
    r = RsbScs()
    r.push(0x10)
    r.commit("call")
    assert r.snapshot() == ["rsbscs,0,0x10", "rsbscs,tos,0", "rsbscs,lcp,0"]
