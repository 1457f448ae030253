"""Functional single-step interpreter used as the architectural reference.

It knows nothing about prediction, caches or timing, so the pipeline's
committed state can be checked against it instruction by instruction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .isa import FLAGS, MASK64, NUM_REGS, SP, WORD, AddressSpaceImage, Kind


class StepLimitExceeded(RuntimeError):
    pass


class MemoryFault(RuntimeError):
    def __init__(self, pc: int, addr: int):
        super().__init__(f"pc {pc:#x}: data access at {addr:#x} outside the data region")
        self.pc = pc
        self.addr = addr


class BadTarget(RuntimeError):
    def __init__(self, pc: int, target: int):
        super().__init__(f"pc {pc:#x}: control transfer to {target:#x} outside the code region")
        self.pc = pc
        self.target = target


@dataclass
class ArchState:
    regs: list[int]
    pc: int
    image: AddressSpaceImage
    halted: bool = False
    steps: int = 0
    call_stack: list[int] = field(default_factory=list)  # return addresses of open calls

    def snapshot(self) -> tuple:
        return tuple(self.regs), self.pc, self.image.data.tobytes()


def initial_state(image: AddressSpaceImage, entry: Optional[int] = None,
                  regs: Optional[dict[int, int]] = None) -> ArchState:
    r = [0] * (NUM_REGS + 1)
    r[SP] = image.stack_top()
    for k, v in (regs or {}).items():
        r[k] = v & MASK64
    pc = image.addr_of(image.program.entry) if entry is None else entry
    return ArchState(r, pc, image)


def _addr(st: ArchState, ins) -> int:
    m = ins.mem
    base = st.regs[m.base] if m.base is not None else 0
    return (base + m.disp) & MASK64


def _load(st: ArchState, addr: int) -> int:
    if not st.image.in_data(addr, WORD):
        raise MemoryFault(st.pc, addr)
    return st.image.read_word(addr)


def _store(st: ArchState, addr: int, value: int) -> None:
    if not st.image.in_data(addr, WORD):
        raise MemoryFault(st.pc, addr)
    st.image.write_word(addr, value)


def step(st: ArchState) -> None:
    """Execute the instruction at ``st.pc`` in place."""
    ins = st.image.fetch(st.pc)
    if ins is None:
        raise BadTarget(st.pc, st.pc)
    r = st.regs
    k = ins.kind
    nxt = st.pc + 1
    if k == Kind.LOAD_IMM:
        r[ins.rd] = ins.imm & MASK64
    elif k == Kind.LOAD:
        a = _addr(st, ins)
        v = _load(st, a)
        if ins.postinc:
            r[SP] = (r[SP] + ins.postinc) & MASK64
        r[ins.rd] = v
    elif k == Kind.STORE:
        _store(st, _addr(st, ins), r[ins.rs])
    elif k in (Kind.ADD, Kind.SHL):
        b = r[ins.rt] if ins.rt is not None else ins.imm
        if k == Kind.ADD:
            r[ins.rd] = (r[ins.rs] + b) & MASK64
        else:
            r[ins.rd] = (r[ins.rs] << (b & 63)) & MASK64
    elif k == Kind.CMP:
        r[FLAGS] = int(r[ins.rd] == r[ins.rs])
    elif k == Kind.CMP_IMM:
        r[FLAGS] = int(r[ins.rd] == ins.imm & MASK64)
    elif k == Kind.JZ:
        nxt = ins.target if r[FLAGS] else nxt
    elif k == Kind.JNZ:
        nxt = nxt if r[FLAGS] else ins.target
    elif k == Kind.JMP_DIRECT:
        nxt = ins.target
    elif k == Kind.JMP_INDIRECT:
        nxt = r[ins.rs]
    elif k in (Kind.CALL_DIRECT, Kind.CALL_INDIRECT):
        dest = ins.target if k == Kind.CALL_DIRECT else r[ins.rs]
        sp = (r[SP] - WORD) & MASK64
        _store(st, sp, nxt)
        r[SP] = sp
        st.call_stack.append(nxt)
        nxt = dest
    elif k == Kind.RET:
        nxt = _load(st, r[SP])
        r[SP] = (r[SP] + WORD) & MASK64
        if st.call_stack:
            st.call_stack.pop()
    elif k == Kind.HALT:
        st.halted = True
        nxt = st.pc
    # cfi_lbl, fences, clflush and nop have no architectural effect
    if not st.halted and st.image.index_of(nxt) is None:
        raise BadTarget(st.pc, nxt)
    st.pc = nxt
    st.steps += 1


def run(image: AddressSpaceImage, max_steps: int = 100_000, entry: Optional[int] = None,
        regs: Optional[dict[int, int]] = None, trace: bool = False
        ) -> tuple[ArchState, list[tuple]]:
    """Run a copy of ``image`` to halt.

    With ``trace`` the second result holds ``(pc, regs, call_stack)`` after
    every step; otherwise it is empty.
    """
    st = initial_state(image.copy(), entry, regs)
    log: list[tuple] = []
    while not st.halted:
        if st.steps >= max_steps:
            raise StepLimitExceeded(f"no halt within {max_steps} steps")
        step(st)
        if trace:
            log.append((st.pc, tuple(st.regs), tuple(st.call_stack)))
    return st, log
