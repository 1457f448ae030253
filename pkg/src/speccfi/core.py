"""Speculative out-of-order core with the decode-stage CFI check and RSB/SCS.

The model is cycle driven: each cycle resolves completed branches, commits
from the reorder buffer head, issues ready micro-ops to ports and fetches
along the predicted path. Values are computed when a micro-op issues and
become visible to consumers once its latency has elapsed; memory is written
only at commit, so squashed work leaves nothing behind except cache state.
"""
from __future__ import annotations

import csv
import enum
import io
from collections import deque
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Union

import numpy as np

from .interp import MemoryFault
from .isa import (COND_KINDS, FLAGS, INDIRECT_KINDS, MASK64, NUM_REGS, SP, WORD,
                  AddressSpaceImage, Instruction, Kind)
from .memory import Cache, CacheConfig, PortModel
from .predictors import Btb, LegacyRsb, Pht, RsbScs


class FenceKind(enum.Enum):
    STRICT = "strict"
    RELAXED = "relaxed"


class Defense(enum.Enum):
    BASELINE = "baseline"
    RETPOLINE_SW = "retpoline"
    ALL_TARGET_FENCE = "all-target"
    SPECCFI_BASE = "speccfi-base"
    SPECCFI_FULL = "speccfi-full"
    BTB_LABEL = "btb-label"

    @property
    def decode_check(self) -> bool:
        return self in (Defense.SPECCFI_BASE, Defense.SPECCFI_FULL)

    @property
    def rsbscs(self) -> bool:
        return self in (Defense.SPECCFI_BASE, Defense.SPECCFI_FULL, Defense.BTB_LABEL)

    @property
    def fencing(self) -> bool:
        return self in (Defense.RETPOLINE_SW, Defense.ALL_TARGET_FENCE,
                        Defense.SPECCFI_BASE, Defense.SPECCFI_FULL)


@dataclass(frozen=True)
class PipelineConfig:
    fetch_width: int = 6
    issue_width: int = 6
    commit_width: int = 6
    rob_size: int = 224
    iq_size: int = 96
    ldq: int = 72
    stq: int = 56
    rsb_entries: int = 16
    cache: CacheConfig = CacheConfig()
    defense: Defense = Defense.BASELINE
    fence_kind: FenceKind = FenceKind.STRICT
    mispredict_redirect_penalty: int = 5
    frontend_depth: int = 3
    scs_latency: int = 4  # fetch bubble for a spill or fill
    btb_index_bits: int = 9
    deadlock_cycles: int = 5000
    mispredict_rate: float = 0.0
    force_mispredict_pcs: frozenset = frozenset()
    cache_jitter: int = 0
    seed: int = 0
    trace: bool = False

    def __post_init__(self):
        for f in ("fetch_width", "issue_width", "commit_width", "rob_size", "iq_size",
                  "ldq", "stq", "rsb_entries", "frontend_depth"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if not 0.0 <= self.mispredict_rate <= 1.0:
            raise ValueError("mispredict_rate must be in [0, 1]")


# --------------------------------------------------------------------------
# decode-stage CFI state machine

class CfiMode(enum.Enum):
    IDLE = "idle"
    EXPECT_LABEL = "expect-label"


class CfiAction(enum.Enum):
    PROCEED = "proceed"
    INSERT_FENCE = "insert-fence"


@dataclass(frozen=True)
class CfiDecodeState:
    mode: CfiMode = CfiMode.IDLE
    cfi_reg: int = 0


IDLE = CfiDecodeState()


def decode_cfi_check(state: CfiDecodeState, ins: Instruction) -> tuple[CfiDecodeState, CfiAction]:
    if state.mode is CfiMode.EXPECT_LABEL:
        if ins.kind == Kind.CFI_LBL and ins.label == state.cfi_reg:
            return IDLE, CfiAction.PROCEED
        return IDLE, CfiAction.INSERT_FENCE
    if ins.kind in INDIRECT_KINDS:
        return CfiDecodeState(CfiMode.EXPECT_LABEL, ins.label or 0), CfiAction.PROCEED
    return state, CfiAction.PROCEED


# --------------------------------------------------------------------------
# errors and statistics

class CfiViolation(RuntimeError):
    def __init__(self, pc: int, expected, found, stats: Optional["RunStats"] = None):
        fmt = lambda v: hex(v) if isinstance(v, int) else str(v)
        super().__init__(f"CFI violation at {pc:#x}: expected {fmt(expected)}, found {fmt(found)}")
        self.pc = pc
        self.expected = expected
        self.found = found
        self.stats = stats


class DeadlockDetected(RuntimeError):
    pass


@dataclass
class RunStats:
    cycles: int = 0
    committed_instructions: int = 0
    fences_inserted: int = 0  # hardware micro-ops injected at decode, any path
    fences_executed: int = 0  # fence instructions from the program text, committed
    fences_committed: int = 0  # every fence (injected or program) that retired
    mispredict_pht: int = 0
    mispredict_btb: int = 0
    mispredict_rsb: int = 0
    cfi_label_mismatches: int = 0
    cache_misses: int = 0
    indirect_decoded: int = 0  # indirect calls/jmps and rets seen by decode
    annulled: int = 0
    rsb_spills: int = 0
    rsb_fills: int = 0

    @property
    def ipc(self) -> float:
        return self.committed_instructions / self.cycles if self.cycles else 0.0

    @property
    def mispredictions(self) -> dict[str, int]:
        return {"pht": self.mispredict_pht, "btb": self.mispredict_btb, "rsb": self.mispredict_rsb}

    def as_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["ipc"] = round(self.ipc, 6)
        return d

    def to_csv(self) -> str:
        d = self.as_dict()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(d.keys())
        w.writerow(d.values())
        return buf.getvalue()


# --------------------------------------------------------------------------
# in-flight state

@dataclass(eq=False)
class RobEntry:
    seq: int
    ins: Instruction
    pc: int
    thread: int
    dispatch_cycle: int
    is_fence: bool = False
    injected: bool = False  # hardware fence micro-op, not part of the program
    fence_kind: Optional[FenceKind] = None
    predicted_target: Optional[int] = None
    pred_source: Optional[str] = None
    old_rs: Optional[int] = None
    rsb_op: Optional[str] = None
    popped_from_committed: bool = False
    legacy_after: Optional[tuple[int, int]] = None
    ghist: int = 0  # speculative global history seen by this branch
    producers: dict = field(default_factory=dict)
    issued: bool = False
    complete_cycle: int = 0
    resolved: bool = True
    results: dict = field(default_factory=dict)
    mem_addr: Optional[int] = None
    store_val: Optional[int] = None
    actual_next: Optional[int] = None
    fault: bool = False
    state: str = "dispatched"
    mispredicted: Optional[str] = None

    @property
    def kind_name(self) -> str:
        return "fence-uop" if self.injected else self.ins.kind.value


PORT_CLASS = {
    Kind.CMP: "branch", Kind.CMP_IMM: "branch", Kind.JZ: "branch", Kind.JNZ: "branch",
    Kind.JMP_DIRECT: "branch", Kind.JMP_INDIRECT: "branch", Kind.CALL_DIRECT: "branch",
    Kind.CALL_INDIRECT: "branch", Kind.RET: "branch",
    Kind.LOAD_IMM: "alu", Kind.ADD: "alu", Kind.SHL: "alu",
    Kind.LOAD: "mem", Kind.STORE: "mem", Kind.CLFLUSH: "mem",
}

MEM_ORDER_KINDS = frozenset({Kind.STORE, Kind.CALL_DIRECT, Kind.CALL_INDIRECT, Kind.CLFLUSH})
CALL_KINDS = frozenset({Kind.CALL_DIRECT, Kind.CALL_INDIRECT})
BRANCH_KINDS = COND_KINDS | INDIRECT_KINDS | CALL_KINDS | {Kind.JMP_DIRECT, Kind.RET}


@dataclass
class Task:
    """What a hardware thread runs during a phase.

    ``entry`` (symbol or address) starts the image fresh; ``None`` resumes the
    saved context of the image's process, or starts at the program entry.
    """

    image: AddressSpaceImage
    entry: Union[str, int, None] = None
    regs: dict[int, int] = field(default_factory=dict)


@dataclass
class Phase:
    tasks: dict[int, Task]
    primary: Optional[int] = 0  # the phase ends when this thread halts; None: all halt
    before: Optional[Callable[["Core"], None]] = None
    max_cycles: Optional[int] = None


class HwThread:
    def __init__(self, tid: int, config: PipelineConfig):
        self.tid = tid
        self.image: Optional[AddressSpaceImage] = None
        self.rob: deque[RobEntry] = deque()
        self.rename: dict[int, RobEntry] = {}
        self.regs = [0] * (NUM_REGS + 1)
        self.arch_pc = 0
        self.fetch_pc = 0
        self.fetch_resume = 0
        self.fetch_wait: Optional[RobEntry] = None
        self.fetch_stop = False
        self.cfi = IDLE
        self.ghist = 0  # speculative global branch history
        self.commit_ghist = 0
        self.legacy = LegacyRsb(config.rsb_entries)
        self.rsbscs = RsbScs(config.rsb_entries)
        self.store_buffer: list[int] = []
        self.active = False
        self.done = False
        self.expect_label: Optional[tuple[int, int]] = None
        self.call_stack: list[int] = []
        self.seq = 0
        self.committed = 0
        self.loads = 0
        self.stores = 0
        self.unissued = 0

    @property
    def pid(self) -> Optional[int]:
        return None if self.image is None else self.image.pid


Hook = Callable[[str, "Core", HwThread, RobEntry], None]


def _phys(pid: int, addr: int) -> int:
    """Cache key: address spaces are disjoint physical ranges."""
    return (pid << 40) | addr


class Core:
    """One simulated processor with two SMT hardware threads.

    Predictors, cache and ports are shared; reorder buffers and return
    stacks are per thread. ``hooks`` receive ``(event, core, thread, entry)``
    for ``issue``, ``commit`` and ``recover`` events.
    """

    def __init__(self, config: PipelineConfig = PipelineConfig(), n_threads: int = 2):
        self.config = config
        self.defense = config.defense
        self.pht = Pht()
        self.btb = Btb(config.btb_index_bits, with_labels=config.defense is Defense.BTB_LABEL)
        self.cache = Cache(config.cache, jitter=config.cache_jitter, seed=config.seed)
        self.ports = PortModel()
        self.rng = np.random.default_rng(config.seed)
        self.threads = [HwThread(i, config) for i in range(n_threads)]
        self.contexts: dict[int, tuple[list[int], int]] = {}
        self.cycle = 0
        self.stats = RunStats()
        self.trace: list[str] = []
        self.hooks: list[Hook] = []
        self._last_commit = [0] * n_threads

    # ------------------------------------------------------------ scheduling

    def phys(self, image: AddressSpaceImage, addr: int) -> int:
        return _phys(image.pid, addr)

    def _resolve_entry(self, image: AddressSpaceImage, entry: Union[str, int, None]) -> int:
        if entry is None:
            return image.addr_of(image.program.entry)
        if isinstance(entry, str):
            return image.symbol_addr(entry)
        return entry

    def load_task(self, tid: int, task: Task) -> None:
        t = self.threads[tid]
        if t.rob:
            self.flush_thread(t)
        if t.image is not None:
            self.contexts[t.pid] = (list(t.regs), t.arch_pc)
        if t.image is None or t.pid != task.image.pid:
            # the pipeline of this thread is drained, so only committed entries move
            t.rsbscs.switch_to(task.image.pid)
        t.image = task.image
        saved = self.contexts.get(task.image.pid)
        if task.entry is not None or saved is None:
            t.regs = [0] * (NUM_REGS + 1)
            t.regs[SP] = task.image.stack_top()
            t.arch_pc = self._resolve_entry(task.image, task.entry)
            t.call_stack = []
        else:
            t.regs, t.arch_pc = list(saved[0]), saved[1]
        for r, v in task.regs.items():
            t.regs[r] = v & MASK64
        t.fetch_pc = t.arch_pc
        t.fetch_resume = self.cycle
        t.fetch_wait = None
        t.fetch_stop = False
        t.cfi = IDLE
        t.expect_label = None
        t.active = True
        t.done = False
        self._last_commit[tid] = self.cycle

    def flush_thread(self, t: HwThread) -> None:
        """Annul everything in flight (youngest first) and park fetch at the committed pc."""
        while t.rob:
            self._annul(t, t.rob.pop())
        t.rename = {}
        t.fetch_pc = t.arch_pc
        t.fetch_wait = None
        t.fetch_stop = False
        t.cfi = IDLE
        t.ghist = t.commit_ghist

    def run(self, phases: list[Phase]) -> RunStats:
        for ph in phases:
            for tid, task in ph.tasks.items():
                self.load_task(tid, task)
            for t in self.threads:
                if t.tid not in ph.tasks:
                    t.active = False
            if ph.before is not None:
                ph.before(self)
            start = self.cycle
            while True:
                if ph.primary is not None:
                    if self.threads[ph.primary].done:
                        break
                elif all(self.threads[i].done for i in ph.tasks):
                    break
                if ph.max_cycles is not None and self.cycle - start >= ph.max_cycles:
                    break
                self.step_cycle()
            for t in self.threads:
                if t.active:
                    self.flush_thread(t)
                    if t.image is not None:
                        self.contexts[t.pid] = (list(t.regs), t.arch_pc)
                    t.active = False
        self.stats.rsb_spills = sum(t.rsbscs.spills for t in self.threads)
        self.stats.rsb_fills = sum(t.rsbscs.fills for t in self.threads)
        return self.stats

    # ------------------------------------------------------------ the cycle

    def step_cycle(self) -> None:
        self.cycle += 1
        live = [t for t in self.threads if t.active and not t.done]
        self.ports.begin_cycle()
        for t in live:
            t.store_buffer = [c for c in t.store_buffer if c > self.cycle]
            self._resolve(t)
        for t in live:
            self._commit(t)
        self._issue(live)
        fetching = [t for t in live if not t.done]
        if fetching:
            # SMT fetch alternates between threads
            self._fetch(fetching[self.cycle % len(fetching)])
        self.ports.end_cycle([t.tid for t in self.threads if t.active])
        self.stats.cycles += 1
        for t in live:
            if not t.done and self.cycle - self._last_commit[t.tid] > self.config.deadlock_cycles:
                raise DeadlockDetected(
                    f"thread {t.tid}: nothing committed for {self.config.deadlock_cycles} cycles "
                    f"(pc {t.arch_pc:#x})")

    # ------------------------------------------------------------ front end

    def _new_entry(self, t: HwThread, ins: Instruction, pc: int) -> RobEntry:
        e = RobEntry(t.seq, ins, pc, t.tid, self.cycle + self.config.frontend_depth)
        t.seq += 1
        return e

    def _push(self, t: HwThread, e: RobEntry) -> None:
        if not e.is_fence:
            e.producers = {r: t.rename.get(r) for r in e.ins.sources()}
            for d in e.ins.dests():
                t.rename[d] = e
            t.unissued += 1
            if e.ins.reads_memory:
                t.loads += 1
            if e.ins.writes_memory:
                t.stores += 1
        t.rob.append(e)

    def _inject_fence(self, t: HwThread, pc: int) -> None:
        kind = Kind.FENCE_STRICT if self.config.fence_kind is FenceKind.STRICT else Kind.FENCE_RELAXED
        e = self._new_entry(t, Instruction(kind), pc)
        e.is_fence = e.injected = True
        e.fence_kind = self.config.fence_kind
        e.issued = True
        e.complete_cycle = e.dispatch_cycle
        self._push(t, e)
        self.stats.fences_inserted += 1

    def _room(self, t: HwThread) -> bool:
        c = self.config
        return (len(t.rob) + 2 <= c.rob_size
                and t.unissued < c.iq_size + c.fetch_width * c.frontend_depth
                and t.loads < c.ldq
                and t.stores + len(t.store_buffer) < c.stq)

    def _random_code_addr(self, t: HwThread) -> int:
        return t.image.base + int(self.rng.integers(len(t.image.code)))

    def _fetch(self, t: HwThread) -> None:
        if t.fetch_stop or t.fetch_wait is not None or self.cycle < t.fetch_resume:
            return
        c = self.config
        d = self.defense
        n = 0
        while n < c.fetch_width and self._room(t):
            pc = t.fetch_pc
            ins = t.image.fetch(pc)
            if ins is None:
                # wrong-path fetch left the code region; wait for the redirect
                t.fetch_stop = True
                return
            k = ins.kind
            if k in CALL_KINDS and d.rsbscs and not t.rsbscs.can_push():
                return  # spill must wait until the oldest entries commit
            if d.decode_check:
                st, act = decode_cfi_check(t.cfi, ins)
                if act is CfiAction.INSERT_FENCE:
                    self.stats.cfi_label_mismatches += 1
                    self._inject_fence(t, pc)
                    n += 1
                    st, _ = decode_cfi_check(st, ins)
                t.cfi = st
            e = self._new_entry(t, ins, pc)
            if k in (Kind.FENCE_STRICT, Kind.FENCE_RELAXED):
                e.is_fence = True
                e.fence_kind = FenceKind.STRICT if k == Kind.FENCE_STRICT else FenceKind.RELAXED
                e.issued = True
                e.complete_cycle = e.dispatch_cycle
            spills, fills = t.rsbscs.spills, t.rsbscs.fills
            nxt = self._predict(t, e)
            self._push(t, e)
            n += 1
            if k in INDIRECT_KINDS or k == Kind.RET:
                self.stats.indirect_decoded += 1
                if d is Defense.ALL_TARGET_FENCE:
                    # the fence sits at the (predicted) target, ahead of anything fetched there
                    self._inject_fence(t, pc)
                    n += 1
            if t.rsbscs.spills != spills or t.rsbscs.fills != fills:
                t.fetch_resume = self.cycle + c.scs_latency
            if k == Kind.HALT:
                t.fetch_stop = True
                return
            if nxt is None:
                t.fetch_wait = e
                return
            t.fetch_pc = nxt
            if nxt != pc + 1 or self.cycle < t.fetch_resume:
                return  # one taken transfer per fetch cycle

    def _predict(self, t: HwThread, e: RobEntry) -> Optional[int]:
        """Predicted next pc for ``e`` (``None`` stalls fetch until it resolves)."""
        ins, pc, k = e.ins, e.pc, e.ins.kind
        c = self.config
        d = self.defense
        if k not in BRANCH_KINDS:
            return None if k == Kind.HALT else pc + 1
        e.resolved = False
        inject = c.mispredict_rate > 0 and self.rng.random() < c.mispredict_rate
        nxt: Optional[int]
        e.ghist = t.ghist
        if k in COND_KINDS:
            taken = self.pht.predict(pc, t.ghist)
            if inject or pc in c.force_mispredict_pcs:
                taken = not taken
            nxt = ins.target if taken else pc + 1
            e.pred_source = "pht"
            t.ghist = self.pht.push_history(t.ghist, taken)
        elif k in (Kind.JMP_DIRECT, Kind.CALL_DIRECT):
            nxt = ins.target
        elif k in INDIRECT_KINDS:
            e.pred_source = "btb"
            hit = self.btb.lookup(pc)
            if hit is None:
                nxt = None
            elif d is Defense.BTB_LABEL and hit[1] != ins.label:
                nxt = None
            else:
                nxt = hit[0]
            if inject:
                nxt = self._random_code_addr(t)
        else:  # ret
            e.pred_source = "rsb"
            e.rsb_op = "ret"
            if d.rsbscs:
                from_committed = t.rsbscs.tos <= t.rsbscs.lcp
                nxt = t.rsbscs.pop()
                e.old_rs = nxt
                e.popped_from_committed = nxt is not None and from_committed
            else:
                nxt = t.legacy.pop()
                e.old_rs = nxt
                if t.legacy.underflow and d is Defense.BASELINE:
                    hit = self.btb.lookup(pc)
                    if hit is not None:
                        nxt = hit[0]
            if inject:
                nxt = self._random_code_addr(t)
        if k in CALL_KINDS:
            e.rsb_op = "call"
            e.old_rs = pc + 1
            if d.rsbscs:
                t.rsbscs.push(pc + 1)
            else:
                t.legacy.push(pc + 1)
        e.legacy_after = (t.legacy.tos, t.legacy.count)
        e.predicted_target = nxt
        return nxt

    # ------------------------------------------------------------ back end

    def _ready(self, t: HwThread, e: RobEntry) -> bool:
        cyc = self.cycle
        for p in e.producers.values():
            if p is not None and p.state != "committed" and (not p.issued or p.complete_cycle > cyc):
                return False
        return True

    def _sp_ready(self, e: RobEntry) -> bool:
        p = e.producers.get(SP)
        return p is None or p.state == "committed" or (p.issued and p.complete_cycle <= self.cycle)

    @staticmethod
    def _val(t: HwThread, e: RobEntry, reg: int) -> int:
        p = e.producers.get(reg)
        if p is None or p.state == "committed":
            return t.regs[reg]
        return p.results[reg]

    def _load_value(self, t: HwThread, e: RobEntry, addr: int, older_mem: list[RobEntry]):
        """(value, latency) for a load, or ``None`` if it must wait for an older store."""
        line = self.config.cache.line
        for x in reversed(older_mem):
            if x.issued:
                x_addr, x_val = x.mem_addr, x.store_val
            elif x.ins.kind in CALL_KINDS and self._sp_ready(x):
                # a call's stack slot and return address are known before its target
                x_addr, x_val = (self._val(t, x, SP) - WORD) & MASK64, x.pc + 1
            else:
                return None
            if x.ins.kind == Kind.CLFLUSH:
                if x_addr // line == addr // line:
                    return None
                continue
            if x_addr < addr + WORD and addr < x_addr + WORD:
                if x_addr == addr:
                    return x_val, self.config.cache.hit_latency
                return None
        img = t.image
        if not img.in_data(addr, WORD):
            e.fault = True  # raised only if this load commits
            return 0, 1
        lat = self.cache.access(_phys(img.pid, addr))
        if lat >= self.cache.config.threshold:
            self.stats.cache_misses += 1
        return img.read_word(addr), lat

    def _execute(self, t: HwThread, e: RobEntry, older_mem: list[RobEntry]) -> bool:
        ins, k = e.ins, e.ins.kind
        val = lambda r: self._val(t, e, r)
        lat = 1
        res = e.results
        if k == Kind.LOAD_IMM:
            res[ins.rd] = ins.imm & MASK64
        elif k in (Kind.ADD, Kind.SHL):
            b = val(ins.rt) if ins.rt is not None else ins.imm
            a = val(ins.rs)
            res[ins.rd] = ((a + b) if k == Kind.ADD else (a << (b & 63))) & MASK64
        elif k == Kind.CMP:
            res[FLAGS] = int(val(ins.rd) == val(ins.rs))
        elif k == Kind.CMP_IMM:
            res[FLAGS] = int(val(ins.rd) == ins.imm & MASK64)
        elif k == Kind.JZ:
            e.actual_next = ins.target if val(FLAGS) else e.pc + 1
        elif k == Kind.JNZ:
            e.actual_next = e.pc + 1 if val(FLAGS) else ins.target
        elif k == Kind.JMP_DIRECT:
            e.actual_next = ins.target
        elif k == Kind.JMP_INDIRECT:
            e.actual_next = val(ins.rs)
        elif k in CALL_KINDS:
            sp = (val(SP) - WORD) & MASK64
            res[SP] = sp
            e.mem_addr = sp
            e.store_val = e.pc + 1
            e.actual_next = ins.target if k == Kind.CALL_DIRECT else val(ins.rs)
        elif k in (Kind.LOAD, Kind.RET):
            addr = val(SP) if k == Kind.RET else \
                ((val(ins.mem.base) if ins.mem.base is not None else 0) + ins.mem.disp) & MASK64
            got = self._load_value(t, e, addr, older_mem)
            if got is None:
                return False
            v, lat = got
            e.mem_addr = addr
            if k == Kind.RET:
                res[SP] = (addr + WORD) & MASK64
                e.actual_next = v
            else:
                if ins.postinc:
                    res[SP] = (val(SP) + ins.postinc) & MASK64
                res[ins.rd] = v
        elif k == Kind.STORE:
            base = val(ins.mem.base) if ins.mem.base is not None else 0
            e.mem_addr = (base + ins.mem.disp) & MASK64
            e.store_val = val(ins.rs)
        elif k == Kind.CLFLUSH:
            base = val(ins.mem.base) if ins.mem.base is not None else 0
            e.mem_addr = (base + ins.mem.disp) & MASK64
        e.issued = True
        e.state = "issued"
        e.complete_cycle = self.cycle + lat
        t.unissued -= 1
        for h in self.hooks:
            h("issue", self, t, e)
        return True

    def _issue(self, live: list[HwThread]) -> None:
        slots = self.config.issue_width
        cyc = self.cycle
        n = len(live)
        order = live[cyc % n:] + live[:cyc % n] if n > 1 else live
        ports = self.ports
        for t in order:
            older_mem: list[RobEntry] = []
            relaxed = False
            for e in t.rob:
                if slots == 0:
                    return
                if e.is_fence:
                    if e.dispatch_cycle > cyc:
                        break
                    if e.fence_kind is FenceKind.STRICT:
                        break  # nothing younger issues before the fence retires
                    relaxed = True
                    continue
                k = e.ins.kind
                if not e.issued:
                    if e.dispatch_cycle > cyc:
                        break
                    if not (relaxed and e.ins.reads_memory) and self._ready(t, e):
                        port = ports.port_of(PORT_CLASS.get(k))
                        if ports.try_acquire(port, t.tid):
                            if self._execute(t, e, older_mem):
                                slots -= 1
                            elif port is not None:
                                del ports.busy[port]
                if k in MEM_ORDER_KINDS:
                    older_mem.append(e)

    def _resolve(self, t: HwThread) -> None:
        cyc = self.cycle
        for e in t.rob:
            if e.resolved or not e.issued or e.complete_cycle > cyc:
                continue
            e.resolved = True
            if e.predicted_target is None:
                # fetch was stalled on this entry; it now knows where to go
                if t.fetch_wait is e:
                    t.fetch_wait = None
                    t.fetch_pc = e.actual_next
                    t.fetch_resume = cyc + 1
                continue
            if e.predicted_target != e.actual_next:
                self._recover(t, e)
                return

    def _annul(self, t: HwThread, e: RobEntry) -> None:
        if e.rsb_op is not None and self.defense.rsbscs:
            t.rsbscs.annul(e.rsb_op, e.old_rs)
        if not e.is_fence:
            if not e.issued:
                t.unissued -= 1
            if e.ins.reads_memory:
                t.loads -= 1
            if e.ins.writes_memory:
                t.stores -= 1
        e.state = "annulled"
        self.stats.annulled += 1
        if self.config.trace:
            self.trace.append(f"{self.cycle},{t.tid},{e.pc:#x},{e.kind_name},annul")

    def _recover(self, t: HwThread, e: RobEntry) -> None:
        """Squash everything younger than ``e`` and refetch from its actual target."""
        while t.rob[-1] is not e:
            self._annul(t, t.rob.pop())
        e.mispredicted = e.pred_source
        if e.legacy_after is not None:
            t.legacy.tos, t.legacy.count = e.legacy_after
        t.rename = {}
        for x in t.rob:
            if not x.is_fence:
                for d in x.ins.dests():
                    t.rename[d] = x
        t.cfi = IDLE
        t.ghist = e.ghist
        if e.ins.kind in COND_KINDS:
            t.ghist = self.pht.push_history(e.ghist, e.actual_next != e.pc + 1)
        t.fetch_pc = e.actual_next
        t.fetch_resume = self.cycle + self.config.mispredict_redirect_penalty
        t.fetch_wait = None
        t.fetch_stop = False
        for h in self.hooks:
            h("recover", self, t, e)

    def _commit(self, t: HwThread) -> None:
        cyc = self.cycle
        n = 0
        while t.rob and n < self.config.commit_width:
            e = t.rob[0]
            if e.is_fence:
                if e.dispatch_cycle > cyc:
                    return
                if e.fence_kind is FenceKind.STRICT and t.store_buffer:
                    return  # a strict fence retires only with no outstanding older store
            elif not (e.issued and e.complete_cycle <= cyc and e.resolved):
                return
            t.rob.popleft()
            self._retire(t, e)
            n += 1
            if t.done:
                return

    def _violation(self, pc: int, expected, found) -> None:
        self.stats.rsb_spills = sum(x.rsbscs.spills for x in self.threads)
        self.stats.rsb_fills = sum(x.rsbscs.fills for x in self.threads)
        raise CfiViolation(pc, expected, found, self.stats)

    def _retire(self, t: HwThread, e: RobEntry) -> None:
        ins, k = e.ins, e.ins.kind
        st = self.stats
        img = t.image
        self._last_commit[t.tid] = self.cycle
        e.state = "committed"
        if e.is_fence:
            st.fences_committed += 1
        if e.injected:
            if self.config.trace:
                self.trace.append(f"{self.cycle},{t.tid},{e.pc:#x},{e.kind_name},retire")
            return
        if e.fault:
            raise MemoryFault(e.pc, e.mem_addr)
        if self.defense is Defense.SPECCFI_FULL:
            if t.expect_label is not None:
                site, want = t.expect_label
                t.expect_label = None
                if k != Kind.CFI_LBL or ins.label != want:
                    found = f"L{ins.label}" if k == Kind.CFI_LBL else ins.kind.value
                    self._violation(e.pc, f"L{want}", found)
            if k in INDIRECT_KINDS:
                t.expect_label = (e.pc, ins.label or 0)
            elif k == Kind.RET and e.old_rs != e.actual_next:
                self._violation(e.pc, e.old_rs, e.actual_next)
        for r, v in e.results.items():
            t.regs[r] = v
        if k in MEM_ORDER_KINDS:
            addr = e.mem_addr
            if k == Kind.CLFLUSH:
                if img.in_data(addr):
                    self.cache.clflush(_phys(img.pid, addr))
            else:
                if not img.in_data(addr, WORD):
                    raise MemoryFault(e.pc, addr)
                img.write_word(addr, e.store_val)
                lat = self.cache.access(_phys(img.pid, addr), "store")
                t.store_buffer.append(self.cycle + lat)
        if ins.writes_memory:
            t.stores -= 1
        if ins.reads_memory:
            t.loads -= 1
        if k in COND_KINDS:
            taken = e.actual_next != e.pc + 1
            self.pht.update(e.pc, taken, e.ghist)
            t.commit_ghist = self.pht.push_history(t.commit_ghist, taken)
        elif k in INDIRECT_KINDS:
            self.btb.update(e.pc, e.actual_next, ins.label)
        elif k == Kind.RET and self.defense is Defense.BASELINE:
            self.btb.update(e.pc, e.actual_next)
        if e.rsb_op == "call":
            t.call_stack.append(e.pc + 1)
            if self.defense.rsbscs:
                t.rsbscs.commit("call")
        elif e.rsb_op == "ret":
            if t.call_stack:
                t.call_stack.pop()
            if self.defense.rsbscs and e.old_rs is not None:
                t.rsbscs.commit("ret")
        if e.mispredicted == "pht":
            st.mispredict_pht += 1
        elif e.mispredicted == "btb":
            st.mispredict_btb += 1
        elif e.mispredicted == "rsb":
            st.mispredict_rsb += 1
        if k in (Kind.FENCE_STRICT, Kind.FENCE_RELAXED):
            st.fences_executed += 1
        st.committed_instructions += 1
        t.committed += 1
        if k == Kind.HALT:
            t.done = True
            t.arch_pc = e.pc + 1  # a later phase resumes after the halt
        else:
            t.arch_pc = e.actual_next if e.actual_next is not None else e.pc + 1
        if self.config.trace:
            self.trace.append(f"{self.cycle},{t.tid},{e.pc:#x},{e.kind_name},retire")
        for h in self.hooks:
            h("commit", self, t, e)


def run_until_halt(images: list[AddressSpaceImage], schedule: Optional[list[Phase]] = None,
                   config: PipelineConfig = PipelineConfig(), core: Optional[Core] = None) -> RunStats:
    """Run ``schedule`` (default: the first image alone on thread 0) to completion."""
    if schedule is None:
        schedule = [Phase({0: Task(images[0])})]
    core = core or Core(config)
    return core.run(schedule)
