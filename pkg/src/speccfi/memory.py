"""Timing-visible data cache, flush/probe primitives and an execution port model."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class CacheConfig:
    size: int = 32 * 1024
    ways: int = 8
    line: int = 64
    hit_latency: int = 4
    miss_latency: int = 50

    def __post_init__(self):
        if self.size % (self.ways * self.line):
            raise ValueError("size must be divisible by ways * line")
        if not self.hit_latency < self.miss_latency:
            raise ValueError("hit latency must be below miss latency")

    @property
    def sets(self) -> int:
        return self.size // (self.ways * self.line)

    @property
    def threshold(self) -> float:
        return (self.hit_latency + self.miss_latency) / 2


class Cache:
    """Set-associative LRU cache over physical byte addresses.

    ``jitter`` adds a seeded 0..jitter cycle noise to every reported latency;
    it is off by default so classification is exact.
    """

    def __init__(self, config: CacheConfig = CacheConfig(), jitter: int = 0, seed: int = 0,
                 valid_range: Optional[tuple[int, int]] = None):
        self.config = config
        self.sets: list[OrderedDict[int, None]] = [OrderedDict() for _ in range(config.sets)]
        self.jitter = jitter
        self.rng = np.random.default_rng(seed)
        self.valid_range = valid_range
        self.misses = 0
        self.hits = 0

    def _locate(self, addr: int) -> tuple[OrderedDict, int]:
        if self.valid_range is not None and not self.valid_range[0] <= addr < self.valid_range[1]:
            raise OutOfRange(f"{addr:#x}")
        line = addr // self.config.line
        return self.sets[line % self.config.sets], line

    def _noise(self) -> int:
        return int(self.rng.integers(0, self.jitter + 1)) if self.jitter else 0

    def resident(self, addr: int) -> bool:
        s, line = self._locate(addr)
        return line in s

    def access(self, addr: int, kind: str = "load") -> int:
        s, line = self._locate(addr)
        if line in s:
            s.move_to_end(line)
            self.hits += 1
            return self.config.hit_latency + self._noise()
        if len(s) >= self.config.ways:
            s.popitem(last=False)
        s[line] = None
        self.misses += 1
        return self.config.miss_latency + self._noise()

    def clflush(self, addr: int) -> None:
        s, line = self._locate(addr)
        s.pop(line, None)

    def flush_all(self) -> None:
        for s in self.sets:
            s.clear()

    def state(self) -> tuple:
        return tuple(tuple(s) for s in self.sets)


@dataclass
class ProbeResult:
    addresses: list[int]
    latencies: list[int]
    hits: list[bool]

    def hit_indices(self) -> list[int]:
        return [i for i, h in enumerate(self.hits) if h]

    def to_csv(self) -> str:
        rows = ["index,address,latency,hit"]
        rows += [f"{i},{a:#x},{lat},{int(h)}" for i, (a, lat, h) in
                 enumerate(zip(self.addresses, self.latencies, self.hits))]
        return "\n".join(rows) + "\n"


def probe(cache: Cache, addresses: Iterable[int]) -> ProbeResult:
    """Time a reload of each address in caller order and classify hit/miss."""
    addrs = list(addresses)
    line = cache.config.line
    if any(a % line for a in addrs):
        raise ValueError("probe addresses must be line aligned")
    lat = [cache.access(a) for a in addrs]
    thr = cache.config.threshold
    return ProbeResult(addrs, lat, [x < thr for x in lat])


# op class -> port
DEFAULT_PORT_MAP = {"branch": 0, "alu": 1, "mem": 2}


@dataclass
class PortModel:
    """Execution ports shared by SMT threads; one micro-op per port per cycle."""

    n_ports: int = 3
    port_map: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_PORT_MAP))
    watched_port: int = 0
    busy: dict[int, int] = field(default_factory=dict)  # port -> thread holding it this cycle
    # per-thread, per-cycle: was a ready watched-port op of this thread delayed by the other thread
    contention: dict[int, list[bool]] = field(default_factory=dict)
    _wanted: dict[int, bool] = field(default_factory=dict)
    _blocked: dict[int, bool] = field(default_factory=dict)

    def begin_cycle(self) -> None:
        self.busy = {}
        self._wanted = {}
        self._blocked = {}

    def port_of(self, op_class: Optional[str]) -> Optional[int]:
        return None if op_class is None else self.port_map[op_class]

    def try_acquire(self, port: Optional[int], thread: int) -> bool:
        if port is None:
            return True
        holder = self.busy.get(port)
        if holder is None:
            self.busy[port] = thread
            return True
        if port == self.watched_port and holder != thread:
            self._blocked[thread] = True
        return False

    def end_cycle(self, threads: Iterable[int]) -> None:
        for t in threads:
            self.contention.setdefault(t, []).append(self._blocked.get(t, False))

    def issued_per_port(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for p in self.busy:
            counts[p] = counts.get(p, 0) + 1
        return counts


def port_trace(ports: PortModel, thread: int, window_cycles: Optional[int] = None) -> list[bool]:
    trace = ports.contention.get(thread, [])
    return list(trace if window_cycles is None else trace[-window_cycles:])


def port_trace_csv(trace: list[bool]) -> str:
    return "cycle,contended\n" + "".join(f"{i},{int(v)}\n" for i, v in enumerate(trace))
