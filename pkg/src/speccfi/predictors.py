"""Branch prediction structures: direction predictor, BTB, legacy RSB and RSB/SCS."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

RSB_ENTRIES = 16
SPILL_BATCH = 4


def _sat(v: int, taken: bool) -> int:
    return min(v + 1, 3) if taken else max(v - 1, 0)


class Pht:
    """Tournament of a bimodal table and a gshare table with a 2-bit chooser.

    Counters start at 1 (weakly not-taken). The chooser starts at 1 and
    favors the bimodal table until gshare proves itself better for a pc.
    """

    def __init__(self, history_bits: int = 12, gshare_bits: int = 12, bimodal_bits: int = 10):
        self.history_bits = history_bits
        self.gshare_mask = (1 << gshare_bits) - 1
        self.bimodal_mask = (1 << bimodal_bits) - 1
        self.history_mask = (1 << history_bits) - 1
        self.gshare = [1] * (1 << gshare_bits)
        self.bimodal = [1] * (1 << bimodal_bits)
        self.choice = [1] * (1 << bimodal_bits)
        self.history = 0

    def _idx(self, pc: int, history: Optional[int] = None) -> tuple[int, int]:
        h = self.history if history is None else history
        return pc & self.bimodal_mask, (pc ^ h) & self.gshare_mask

    def predict(self, pc: int, history: Optional[int] = None) -> bool:
        """Direction for ``pc``; ``history`` overrides the committed global history."""
        b, g = self._idx(pc, history)
        if self.choice[b] >= 2:
            return self.gshare[g] >= 2
        return self.bimodal[b] >= 2

    def predict_gshare(self, pc: int, history: Optional[int] = None) -> bool:
        return self.gshare[self._idx(pc, history)[1]] >= 2

    def push_history(self, history: int, taken: bool) -> int:
        return ((history << 1) | int(taken)) & self.history_mask

    def update(self, pc: int, taken: bool, history: Optional[int] = None) -> None:
        """Train with the outcome; ``history`` is the one the prediction used."""
        b, g = self._idx(pc, history)
        bim_ok = (self.bimodal[b] >= 2) == taken
        gsh_ok = (self.gshare[g] >= 2) == taken
        if gsh_ok != bim_ok:
            self.choice[b] = _sat(self.choice[b], gsh_ok)
        self.bimodal[b] = _sat(self.bimodal[b], taken)
        self.gshare[g] = _sat(self.gshare[g], taken)
        self.history = self.push_history(self.history, taken)

    def snapshot(self) -> list[str]:
        rows = [f"pht,history,{self.history}"]
        rows += [f"pht,{i},bimodal={v}" for i, v in enumerate(self.bimodal) if v != 1]
        rows += [f"pht,{i},gshare={v}" for i, v in enumerate(self.gshare) if v != 1]
        rows += [f"pht,{i},choice={v}" for i, v in enumerate(self.choice) if v != 1]
        return rows


@dataclass
class BtbEntry:
    tag: int
    target: int
    label: Optional[int] = None


class Btb:
    """Direct-mapped branch target buffer shared by every thread and process.

    The index XOR-folds the low ``index_bits`` of the pc with the next
    ``index_bits``; the tag is the remaining high bits. Two pcs that differ
    by ``1 | 1 << index_bits`` therefore alias completely.
    """

    def __init__(self, index_bits: int = 9, with_labels: bool = False):
        self.index_bits = index_bits
        self.with_labels = with_labels
        self.entries: list[Optional[BtbEntry]] = [None] * (1 << index_bits)

    def index(self, pc: int) -> int:
        m = (1 << self.index_bits) - 1
        return (pc & m) ^ ((pc >> self.index_bits) & m)

    def tag(self, pc: int) -> int:
        return pc >> (2 * self.index_bits)

    def lookup(self, pc: int) -> Optional[tuple[int, Optional[int]]]:
        e = self.entries[self.index(pc)]
        if e is None or e.tag != self.tag(pc):
            return None
        return e.target, e.label

    def update(self, pc: int, target: int, label: Optional[int] = None) -> None:
        self.entries[self.index(pc)] = BtbEntry(self.tag(pc), target, label if self.with_labels else None)

    def alias_of(self, pc: int) -> int:
        """A different pc that maps to the same index and tag."""
        return pc ^ (1 | (1 << self.index_bits))

    def snapshot(self) -> list[str]:
        return [f"btb,{i},tag={e.tag};target={e.target:#x};label={e.label}"
                for i, e in enumerate(self.entries) if e is not None]


class LegacyRsb:
    """Fixed-size circular return stack; overflow overwrites the oldest entry.

    Popping an empty stack still reads the (stale) slot under the top
    pointer; ``underflow`` reports whether that happened.
    """

    def __init__(self, size: int = RSB_ENTRIES):
        self.size = size
        self.slots: list[Optional[int]] = [None] * size
        self.tos = size - 1
        self.count = 0
        self.underflow = False

    def push(self, addr: int) -> None:
        self.tos = (self.tos + 1) % self.size
        self.slots[self.tos] = addr
        self.count = min(self.count + 1, self.size)

    def pop(self) -> Optional[int]:
        self.underflow = self.count == 0
        v = self.slots[self.tos]
        self.tos = (self.tos - 1) % self.size
        self.count = max(self.count - 1, 0)
        return v

    def state(self) -> tuple:
        return tuple(self.slots), self.tos, self.count

    def restore(self, st: tuple) -> None:
        slots, self.tos, self.count = st
        self.slots = list(slots)

    def snapshot(self) -> list[str]:
        return [f"rsb,{i},{'' if v is None else hex(v)}" for i, v in enumerate(self.slots)] + \
            [f"rsb,tos,{self.tos}", f"rsb,count,{self.count}"]


class SpillBlocked(RuntimeError):
    """The oldest cache entries are still speculative; the pushing call must wait."""


class SaveWhileSpeculative(RuntimeError):
    pass


STALL = None  # pop result when neither the cache nor the backing store has an entry


@dataclass
class RsbScs:
    """Unified speculative return stack / shadow call stack.

    ``slots`` is the 16-entry in-processor cache, bottom first; ``tos`` is the
    number of live entries. Pops only move ``tos`` so a speculatively popped
    committed entry stays in its slot until overwritten. ``lcp`` counts the
    committed entries of the cache (the last committed entry is slot
    ``lcp - 1``); it may run ahead of ``tos`` while speculative returns that
    popped committed entries are in flight. Spilled entries in ``backing`` are
    committed and belong to the process ``pid``.
    """

    capacity: int = RSB_ENTRIES
    pid: int = 0
    slots: list[int] = field(default_factory=list)
    tos: int = 0
    lcp: int = 0
    backing: dict[int, list[int]] = field(default_factory=dict)
    spills: int = 0
    fills: int = 0

    @property
    def cache(self) -> list[int]:
        """Live entries, bottom first."""
        return self.slots[:self.tos]

    @property
    def scs(self) -> list[int]:
        return self.backing.setdefault(self.pid, [])

    def _write(self, value: int) -> None:
        if self.tos < len(self.slots):
            self.slots[self.tos] = value
        else:
            self.slots.append(value)
        self.tos += 1

    def can_push(self) -> bool:
        return self.tos < self.capacity or min(self.lcp, self.tos) >= SPILL_BATCH

    def push(self, ret_addr: int) -> None:
        if self.tos >= self.capacity:
            self.spill()
        self._write(ret_addr)

    def pop(self) -> Optional[int]:
        if self.tos == 0:
            if not self.scs or self.lcp >= self.capacity:
                return STALL
            self.fill()
        self.tos -= 1
        return self.slots[self.tos]

    def commit(self, kind: str) -> None:
        if kind == "call":
            self.lcp += 1
        elif kind == "ret":
            self.lcp -= 1
        else:
            raise ValueError(kind)

    def annul(self, kind: str, old_rs: Optional[int] = None) -> None:
        if kind == "call":
            if self.tos:
                self.tos -= 1
        elif kind == "ret":
            if old_rs is not None:
                if self.tos >= self.capacity:
                    self.spill()
                self._write(old_rs)
        else:
            raise ValueError(kind)

    def spill(self) -> None:
        if min(self.lcp, self.tos) < SPILL_BATCH:
            raise SpillBlocked("oldest entries are speculative")
        self.scs.extend(self.slots[:SPILL_BATCH])
        del self.slots[:SPILL_BATCH]
        self.tos -= SPILL_BATCH
        self.lcp -= SPILL_BATCH
        self.spills += 1

    def fill(self) -> None:
        scs = self.scs
        n = min(SPILL_BATCH, len(scs), self.capacity - self.lcp)
        if self.tos or n <= 0:
            raise RuntimeError("fill requires an empty cache and a non-empty backing store")
        moved = scs[-n:]
        del scs[-n:]
        self.slots = moved + self.slots[:self.lcp]
        self.lcp += n
        self.tos = n
        self.fills += 1

    def committed_view(self) -> list[int]:
        return self.slots[:self.lcp]

    def context_save(self) -> None:
        if self.lcp != self.tos:
            raise SaveWhileSpeculative(f"tos={self.tos} lcp={self.lcp}")
        self.scs.extend(self.slots[:self.tos])
        self.slots = []
        self.tos = self.lcp = 0

    def context_restore(self, pid: int) -> None:
        self.pid = pid
        scs = self.scs
        n = min(self.capacity, len(scs))
        self.slots = scs[len(scs) - n:]
        del scs[len(scs) - n:]
        self.tos = self.lcp = n

    def switch_to(self, pid: int) -> None:
        self.context_save()
        self.context_restore(pid)

    def full_stack(self) -> list[int]:
        """Backing entries followed by live cache entries, oldest first."""
        return list(self.scs) + self.slots[:self.tos]

    def state(self) -> tuple:
        return (tuple(self.slots[:max(self.tos, self.lcp)]), self.tos, self.lcp, self.pid,
                tuple((k, tuple(v)) for k, v in sorted(self.backing.items()) if v))

    def snapshot(self) -> list[str]:
        """``structure,index,fields`` rows: resident slots, then pointers, then backing."""
        rows = [f"rsbscs,{i},{v:#x}" for i, v in enumerate(self.slots[:max(self.tos, self.lcp)])]
        rows.append(f"rsbscs,tos,{self.tos - 1}")
        rows.append(f"rsbscs,lcp,{self.lcp - 1}")
        rows += [f"scs,{i},{v:#x}" for i, v in enumerate(self.scs)]
        return rows
