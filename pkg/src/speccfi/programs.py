"""Bundled microbenchmarks and the random program generator."""
from __future__ import annotations

import numpy as np

from .isa import Program, assemble

# data region layout used by the benchmarks (relative to the default data base)
DATA = 0x10000


def _arith() -> str:
    return """
main:
    li r1, 0
    li r2, 100
    li r3, 7
loop:
    add r1, r1, r3
    shl r4, r1, 2
    add r5, r4, r1
    add r3, r3, 1
    add r6, r5, r3
    add r2, r2, -1
    cmpi r2, 0
    jnz loop
    halt
"""


def _pointer_chase() -> str:
    # build a 48-node ring with a 72-byte stride, then walk it three times
    return f"""
main:
    li r9, {DATA + 256}
    li r1, 0
    li r2, 47
    li r3, {DATA + 256}
build:
    add r4, r3, 72
    store r4, [r3]
    add r3, r4, 0
    add r2, r2, -1
    cmpi r2, 0
    jnz build
    store r9, [r3]
    li r2, 144
    add r3, r9, 0
walk:
    load r3, [r3]
    call visit
    add r2, r2, -1
    cmpi r2, 0
    jnz walk
    halt
.func visit sig_visit
visit:
    add r1, r1, r3
    ret
"""


def _virtual_dispatch() -> str:
    return f"""
main:
    li r9, {DATA + 64}
    li r1, area
    store r1, [r9]
    li r1, perimeter
    store r1, [r9+8]
    li r2, 100
    li r5, 3
loop:
    load r1, [r9]
    call *r1
    load r1, [r9+8]
    call *r1
    add r2, r2, -1
    cmpi r2, 0
    jnz loop
    halt
.func area sig_shape
area:
    shl r6, r5, 1
    add r7, r7, r6
    ret
.func perimeter sig_shape
perimeter:
    add r6, r5, r5
    add r8, r8, r6
    ret
"""


def _recursion(depth: int = 64) -> str:
    return f"""
main:
    li r2, 4
again:
    li r1, {depth}
    call rec
    add r2, r2, -1
    cmpi r2, 0
    jnz again
    halt
.func rec sig_rec
rec:
    cmpi r1, 0
    jz base
    add r1, r1, -1
    add r3, r1, 0
    shl r3, r3, 63
    cmpi r3, 0
    jz even
    call rec
    ret
even:
    call rec
base:
    ret
"""


def _store_heavy() -> str:
    return f"""
main:
    li r9, {DATA + 512}
    li r8, kernel
    li r2, 60
loop:
    store r2, [r9]
    store r2, [r9+64]
    store r2, [r9+128]
    store r2, [r9+192]
    store r2, [r9+256]
    store r2, [r9+320]
    call *r8
    add r9, r9, 8
    add r2, r2, -1
    cmpi r2, 0
    jnz loop
    halt
.func kernel sig_kernel
kernel:
    add r1, r1, r2
    ret
"""


def _mixed() -> str:
    return f"""
main:
    li r9, {DATA + 1024}
    li r8, accumulate
    li r2, 80
    li r1, 1
loop:
    load r3, [r9]
    add r3, r3, r2
    store r3, [r9]
    shl r4, r2, 3
    add r4, r4, 3
    cmpi r4, 0
    jz skip
    call *r8
skip:
    add r5, r2, 0
    shl r5, r5, 62
    cmpi r5, 0
    jnz odd
    call helper
odd:
    add r2, r2, -1
    cmpi r2, 0
    jnz loop
    halt
.func accumulate sig_acc
accumulate:
    add r1, r1, r3
    ret
helper:
    add r6, r6, 1
    ret
"""


def _deep_return(depth: int = 12) -> str:
    lines = ["main:", "    li r2, 20", "again:", "    call d0", "    add r2, r2, -1",
             "    cmpi r2, 0", "    jnz again", "    halt"]
    for i in range(depth):
        lines += [f"d{i}:", f"    add r{3 + i % 6}, r{3 + i % 6}, {i + 1}"]
        if i + 1 < depth:
            lines.append(f"    call d{i + 1}")
        lines.append("    ret")
    return "\n".join(lines) + "\n"


def _btb_collision() -> str:
    # the call at site_b sits 513 instructions after site_a's: with 9 index bits both pcs
    # XOR-fold to the same BTB entry, so alternating calls evict each other
    return """
main:
    li r2, 60
loop:
    jmp site_a
back_a:
    jmp site_b
back_b:
    add r2, r2, -1
    cmpi r2, 0
    jnz loop
    halt
.func fa sig_a
fa:
    add r3, r3, 1
    ret
.func fb sig_b
fb:
    add r4, r4, 2
    ret
.org 0x3f
site_a:
    li r6, fa
    call *r6
    jmp back_a
.org 0x240
site_b:
    li r7, fb
    call *r7
    jmp back_b
"""


def return_stack_walkthrough_source() -> str:
    """Nested calls whose return addresses are 0x10, 0x25, 0x26 and 0x27.

    ``function3`` starts with a ``jz`` that is architecturally not taken;
    forcing it to predict taken sends fetch down a wrong path through the
    ``ret`` at 0x86 and on into the call to ``function4``. The straight-line
    body of ``function2`` lets both outer calls commit before its ``ret`` is
    fetched.
    """
    return """
main:
    li r1, 1
    cmpi r1, 0
.org 0x0f
    call function1
    halt
.org 0x24
function1:
    call function2
    call function3
    call function4
    ret
.org 0x36
function2:
""" + "    nop\n" * 40 + """    ret
.org 0x74
function3:
    jz f3_out
.org 0x86
f3_out:
    ret
.org 0x90
function4:
    ret
"""


BENCHMARKS = {
    "arith": _arith,
    "pointer-chase": _pointer_chase,
    "virtual-dispatch": _virtual_dispatch,
    "recursion": _recursion,
    "store-heavy": _store_heavy,
    "mixed": _mixed,
    "deep-return": _deep_return,
    "btb-collision": _btb_collision,
}


def benchmark_source(name: str) -> str:
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}") from None


def benchmark(name: str) -> Program:
    return assemble(benchmark_source(name))


# --------------------------------------------------------------------------
# random programs

def random_program_source(seed: int, max_len: int = 100, max_depth: int = 8) -> str:
    """A terminating random program with nested calls.

    ``main`` loops a few times over a call into a chain of up to
    ``max_depth`` functions; every function body mixes arithmetic, loads and
    stores into a scratch area, forward conditional skips and a direct or
    indirect call to the next function. The instruction count stays within
    ``max_len``.
    """
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, max_depth + 1))
    budget = max_len - 12 - 3 * depth  # main plus per-function overhead
    sizes = rng.multinomial(max(budget, depth), np.ones(depth) / depth)
    reg = lambda: int(rng.integers(1, 9))

    def body(f: int, n: int) -> list[str]:
        out: list[str] = []
        calls = f + 1 < depth
        call_at = int(rng.integers(0, max(n, 1))) if calls else -1
        k = 0
        while k < n:
            if k == call_at or (calls and k == n - 1 and call_at >= k):
                if rng.random() < 0.5:
                    out.append(f"    call f{f + 1}")
                    k += 1
                else:
                    out += [f"    li r10, f{f + 1}", "    call *r10"]
                    k += 2
                call_at = -2
                continue
            c = rng.random()
            if c < 0.35:
                out.append(f"    add r{reg()}, r{reg()}, {int(rng.integers(-4, 5))}")
            elif c < 0.45:
                out.append(f"    add r{reg()}, r{reg()}, r{reg()}")
            elif c < 0.55:
                out.append(f"    store r{reg()}, [r9+{8 * int(rng.integers(0, 32))}]")
            elif c < 0.65:
                out.append(f"    load r{reg()}, [r9+{8 * int(rng.integers(0, 32))}]")
            elif c < 0.72:
                out.append(f"    shl r{reg()}, r{reg()}, {int(rng.integers(0, 5))}")
            elif c < 0.92 and n - k >= 3:
                lab = f"f{f}_k{k}"
                out += [f"    cmpi r{reg()}, {int(rng.integers(0, 3))}", f"    jz {lab}",
                        f"    add r{reg()}, r{reg()}, 1", f"{lab}:"]
                k += 3
                continue
            else:
                out.append("    nop")
            k += 1
        return out

    iters = int(rng.integers(2, 5))
    lines = ["main:", f"    li r9, {DATA + 1024}", f"    li r11, {iters}", "top:"]
    if rng.random() < 0.5:
        lines.append("    call f0")
    else:
        lines += ["    li r10, f0", "    call *r10"]
    lines += [f"    add r{reg()}, r{reg()}, r{reg()}", "    add r11, r11, -1", "    cmpi r11, 0",
              "    jnz top", "    halt"]
    for f in range(depth):
        lines += [f".func f{f} sig{f % 3}", f"f{f}:"] + body(f, int(sizes[f])) + ["    ret"]
    return "\n".join(lines) + "\n"


def random_program(seed: int, max_len: int = 100, max_depth: int = 8) -> Program:
    return assemble(random_program_source(seed, max_len, max_depth))
