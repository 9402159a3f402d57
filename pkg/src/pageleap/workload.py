"""Access patterns, paced write bursts and the write journal.

Bursts run in native writer threads (one 8-byte aligned store per write,
open-loop paced with catch-up batching).  A journaled burst records every
write as (seq, offset, old, new, thread); replaying the journal over a
snapshot taken before the burst must reproduce the final memory exactly,
which is the no-lost-write oracle used against the migration engine.
"""
from __future__ import annotations

import ctypes
import enum
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _native
from ._native import lib
from .vmap import VirtualRegion

JOURNAL_DTYPE = np.dtype([
    ("seq", "<u8"), ("offset", "<u8"), ("old", "<u8"), ("new", "<u8"),
    ("thread", "<u4"), ("pad", "<u4"),
])
assert JOURNAL_DTYPE.itemsize == ctypes.sizeof(_native.JournalEntry)

WORD = 8


class Pattern(str, enum.Enum):
    SEQ_READ = "seq-read"
    SEQ_WRITE = "seq-write"
    RAND_READ = "rand-read"
    RAND_WRITE = "rand-write"


_PATTERN_CODES = {Pattern.SEQ_READ: 0, Pattern.SEQ_WRITE: 1, Pattern.RAND_READ: 2, Pattern.RAND_WRITE: 3}


@dataclass(frozen=True)
class AccessResult:
    pattern: Pattern
    accesses: int
    elapsed: float
    checksum: int


def random_offsets(length: int, count: int, seed: int) -> np.ndarray:
    """The byte offsets a random pattern with this seed touches, in order."""
    out = np.empty(count, dtype=np.uint64)
    if count:
        lib.leap_random_offsets(length, count, seed, out.ctypes.data)
    return out


def fill_random(view: np.ndarray, seed: int) -> None:
    """Initialise memory with random integers."""
    rng = np.random.default_rng(seed)
    words = view[: len(view) - len(view) % WORD].view(np.uint64)
    chunk = 1 << 22
    for i in range(0, len(words), chunk):
        words[i:i + chunk] = rng.integers(0, 1 << 63, size=min(chunk, len(words) - i), dtype=np.uint64)
    tail = len(view) % WORD
    if tail:
        view[-tail:] = rng.integers(0, 256, size=tail, dtype=np.uint8)


def run_access_pattern(region: VirtualRegion, pattern: Pattern | str, count: int = 10_000_000,
                       seed: int = 0) -> AccessResult:
    pattern = Pattern(pattern)
    accesses = region.length if pattern in (Pattern.SEQ_READ, Pattern.SEQ_WRITE) else count
    t0 = time.perf_counter()
    checksum = lib.leap_access(region.base, region.length, _PATTERN_CODES[pattern], count, seed)
    return AccessResult(pattern, accesses, time.perf_counter() - t0, int(checksum))


# ---- journal ----

class WriteJournal:
    """Writes of one burst in global sequence order."""

    def __init__(self, entries: np.ndarray):
        entries = np.asarray(entries, dtype=JOURNAL_DTYPE)
        self.entries = entries[np.argsort(entries["seq"], kind="stable")]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def offsets(self) -> np.ndarray:
        return self.entries["offset"]

    def replay(self, snapshot: np.ndarray) -> np.ndarray:
        """Apply every write in sequence order to a copy of `snapshot` (uint8)."""
        out = np.array(snapshot, dtype=np.uint8, copy=True)
        if len(self.entries) == 0:
            return out
        words = out[: len(out) - len(out) % WORD].view("<u8")
        idx = (self.entries["offset"] // WORD).astype(np.int64)
        # last write per word wins: unique over the reversed order keeps the latest
        rev_idx = idx[::-1]
        _, first = np.unique(rev_idx, return_index=True)
        words[rev_idx[first]] = self.entries["new"][::-1][first]
        return out

    def chain_errors(self, snapshot: np.ndarray, limit: int = 10) -> list[str]:
        """Check that every write observed the value left by the previous write to its word."""
        errors: list[str] = []
        words = np.asarray(snapshot, dtype=np.uint8)
        words = words[: len(words) - len(words) % WORD].view("<u8")
        last: dict[int, int] = {}
        for e in self.entries:
            off = int(e["offset"])
            expect = last.get(off, int(words[off // WORD]))
            if int(e["old"]) != expect:
                errors.append(f"seq {int(e['seq'])} @ {off:#x}: old {int(e['old']):#x} != {expect:#x}")
                if len(errors) >= limit:
                    break
            last[off] = int(e["new"])
        return errors

    def to_bytes(self) -> bytes:
        return self.entries.astype(JOURNAL_DTYPE).tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "WriteJournal":
        return cls(np.frombuffer(data, dtype=JOURNAL_DTYPE).copy())

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "WriteJournal":
        return cls.from_bytes(Path(path).read_bytes())


# ---- bursts ----

@dataclass(frozen=True)
class Skew:
    hot_fraction: float
    hot_bytes: int
    hot_offset: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.hot_fraction < 1:
            raise ValueError("hot_fraction must be in (0, 1)")
        if self.hot_bytes <= 0 or self.hot_offset < 0:
            raise ValueError("hot range must be non-empty")


@dataclass(frozen=True)
class BurstSpec:
    rate: float
    duration: float | None = 1.0
    skew: Skew | None = None
    journaled: bool = False
    threads: int = 1
    seed: int = 0
    journal_capacity: int | None = None

    def __post_init__(self) -> None:
        if not self.rate > 0:
            raise ValueError("burst rate must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if self.duration is not None and self.duration <= 0:
            raise ValueError("duration must be positive or None (until stopped)")


@dataclass(frozen=True)
class ThroughputSample:
    requested: float
    achieved: float
    writes: int
    elapsed: float
    journal_full: bool = False

    @property
    def achieved_pct(self) -> float:
        return 100.0 * self.achieved / self.requested if self.requested else float("nan")


class BurstHandle:
    """A running burst; ``stop()`` then ``join()`` for the results."""

    def __init__(self, base: int, n_words: int, stride: int, report_base: int,
                 rate: float | None, duration: float | None, threads: int, seed: int,
                 journaled: bool, max_writes: int = 0, skew: Skew | None = None,
                 journal_capacity: int | None = None):
        self.requested = rate or 0.0
        if max_writes:
            # a zero per-thread quota would mean "no cap" to the native writer
            threads = min(threads, max_writes)
        self._stop = ctypes.c_int32(0)
        self._seq = ctypes.c_uint64(0)
        self._structs: list[_native.Burst] = []
        self._journals: list[np.ndarray] = []
        self._threads: list[threading.Thread] = []
        self._started = threading.Barrier(threads + 1)
        self.journaled = journaled
        per_rate = (rate / threads) if rate else 0.0
        per_max = 0
        for t in range(threads):
            if max_writes:
                per_max = max_writes // threads + (1 if t < max_writes % threads else 0)
            cap = 0
            if journaled:
                if journal_capacity is not None:
                    cap = -(-journal_capacity // threads)
                elif per_max:
                    cap = per_max
                else:
                    cap = int(per_rate * (duration if duration else 20.0) * 1.2) + 4096
            jbuf = np.zeros(cap, dtype=JOURNAL_DTYPE)
            hot_first = hot_count = 0
            if skew is not None:
                hot_first = skew.hot_offset // stride
                hot_count = max(1, skew.hot_bytes // stride)
                if hot_first + hot_count > n_words:
                    raise ValueError("hot range exceeds the written range")
            b = _native.Burst(
                base=base, n_words=n_words, stride=stride, report_base=report_base,
                rate=per_rate, duration=duration or 0.0, max_writes=per_max,
                skewed=int(skew is not None),
                hot_fraction=skew.hot_fraction if skew else 0.0,
                hot_first=hot_first, hot_count=hot_count,
                seed=(seed * 0x9E3779B1 + t * 0x632BE5AB + 1) & (2**64 - 1),
                thread_id=t,
                stop=ctypes.addressof(self._stop), seq_counter=ctypes.addressof(self._seq),
                journal=jbuf.ctypes.data if journaled else None, journal_cap=cap,
            )
            self._structs.append(b)
            self._journals.append(jbuf)
        for b in self._structs:
            th = threading.Thread(target=self._run, args=(b,), name="burst-writer", daemon=True)
            self._threads.append(th)
            th.start()
        self._started.wait()

    def _run(self, b: _native.Burst) -> None:
        self._started.wait()
        lib.leap_burst_run(ctypes.byref(b))

    def stop(self) -> None:
        self._stop.value = 1

    def writes_so_far(self) -> int:
        # per-thread counters are only written at exit; the sequence counter is live
        return int(self._seq.value) if self.journaled else -1

    def join(self) -> tuple[ThroughputSample, WriteJournal | None]:
        for th in self._threads:
            th.join()
        writes = sum(int(b.writes) for b in self._structs)
        elapsed = max((b.active_s for b in self._structs), default=0.0)
        sample = ThroughputSample(
            requested=self.requested,
            achieved=writes / elapsed if elapsed > 0 else 0.0,
            writes=writes,
            elapsed=elapsed,
            journal_full=any(b.journal_full for b in self._structs),
        )
        journal = None
        if self.journaled:
            parts = [j[: int(b.writes)] for j, b in zip(self._journals, self._structs)]
            journal = WriteJournal(np.concatenate(parts) if parts else np.zeros(0, JOURNAL_DTYPE))
        return sample, journal


def start_burst(region: VirtualRegion, spec: BurstSpec) -> BurstHandle:
    if spec.skew is not None and spec.skew.hot_offset + spec.skew.hot_bytes > region.length:
        raise ValueError("hot range must lie inside the region")
    if spec.skew is not None and spec.skew.hot_bytes >= region.length:
        raise ValueError("hot range must be smaller than the region")
    return BurstHandle(region.base, region.length // WORD, WORD, 0, spec.rate, spec.duration,
                       spec.threads, spec.seed, spec.journaled, skew=spec.skew,
                       journal_capacity=spec.journal_capacity)


def run_burst(region: VirtualRegion, spec: BurstSpec,
              stop: threading.Event | None = None) -> tuple[ThroughputSample, WriteJournal | None]:
    """Run a burst to completion (duration elapsed, or `stop` set)."""
    if spec.duration is None and stop is None:
        raise ValueError("an until-stopped burst needs a stop event")
    h = start_burst(region, spec)
    if stop is not None:
        deadline = None if spec.duration is None else time.monotonic() + spec.duration
        while not stop.wait(0.005):
            if deadline is not None and time.monotonic() >= deadline:
                break
        h.stop()
    return h.join()
