"""Asynchronous page migration by copy + atomic remap (``page_leap``).

A job walks the region area by area.  Each attempt write-protects the area,
copies it into a pooled extent of the destination store and, if no write hit
the area meanwhile, remaps the area onto the copy.  Writes during the copy
fault into the native handler, which flags the area dirty and unprotects it;
dirty areas are split by the reduction factor and retried from a FIFO queue
until every page moved or the timeout expired.
"""
from __future__ import annotations

import collections
import ctypes
import enum
import errno
import logging
import math
import os
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import _native
from ._native import COPYING, DIRTY, IDLE, REMAPPED, REMAPPING, SEALED, STATE_NAMES, lib
from .errors import (
    AlignmentError,
    HandlerError,
    MigrationError,
    OutOfCapacity,
    PoolExhausted,
    RegionBusy,
    UnmappedRange,
)
from .mem_file import Extent, PhysicalStore, stores_on
from .numa_topo import pin_to_node
from .vmap import Protection, VirtualRegion, region_at

log = logging.getLogger(__name__)

MiB = 1 << 20

TRANSITION_DTYPE = np.dtype([("slot", "<u8"), ("version", "<u8"), ("from", "<u4"), ("to", "<u4")])

LEGAL_TRANSITIONS = frozenset({
    (IDLE, COPYING),
    (COPYING, SEALED),
    (COPYING, DIRTY),
    (SEALED, REMAPPING),
    (SEALED, DIRTY),  # handler gave up waiting for the remap
    (REMAPPING, REMAPPED),
    (DIRTY, IDLE),
})


@dataclass(frozen=True)
class MigrationOptions:
    initial_area: int = 16 * MiB
    reduction_factor: int = 2
    timeout: float | None = 10.0
    dst_prefault_required: bool = False
    handler_spin: float = 0.010
    record_transitions: bool = False
    pin_worker: bool = True

    def __post_init__(self) -> None:
        if self.reduction_factor < 2:
            raise ValueError("reduction_factor must be >= 2")
        if self.initial_area <= 0:
            raise ValueError("initial_area must be positive")
        if self.timeout is not None and self.timeout < 0:
            raise ValueError("timeout must be >= 0 or None")


@dataclass
class Area:
    voffset: int
    length: int
    retries: int = 0
    slot: int = -1
    dst_extent: Extent | None = None


def split_area(area: Area, factor: int, page_size: int) -> list[Area]:
    """Children of a dirty area: up to `factor` contiguous pieces whose page
    counts differ by at most one.  A single page is returned as is."""
    if factor < 2:
        raise ValueError("factor must be >= 2")
    pages = area.length // page_size
    if pages <= 1:
        return [replace(area, retries=area.retries + 1, dst_extent=None)]
    k = min(factor, pages)
    base, extra = divmod(pages, k)
    children = []
    off = area.voffset
    for i in range(k):
        n = base + (1 if i < extra else 0)
        children.append(Area(off, n * page_size, area.retries + 1))
        off += n * page_size
    return children


class NativeAreaTable:
    """Area state words plus the address -> area index shared with the fault handler."""

    def __init__(self, base: int, length: int, page_size: int, n_slots: int,
                 spin_ns: int, protect: bool, log_cap: int = 0):
        n_pages = length // page_size
        self.page_area = np.zeros(max(n_pages, 1), dtype=np.int32)
        self.state = np.zeros(n_slots, dtype=np.uint64)
        self.off = np.zeros(n_slots, dtype=np.uint64)
        self.len = np.zeros(n_slots, dtype=np.uint64)
        self.log = np.zeros(log_cap, dtype=TRANSITION_DTYPE) if log_cap else None
        self.n_slots = n_slots
        self.next_slot = 0
        self.job = _native.Job(
            base=base, length=length, page_size=page_size,
            page_area=self.page_area.ctypes.data, area_state=self.state.ctypes.data,
            area_off=self.off.ctypes.data, area_len=self.len.ctypes.data,
            n_slots=n_slots, spin_ns=spin_ns, protect=int(protect),
            log=self.log.ctypes.data if log_cap else None, log_cap=log_cap,
        )
        self.ref = ctypes.byref(self.job)

    def new_slot(self, voffset: int, length: int) -> int:
        slot = self.next_slot
        if slot >= self.n_slots:
            raise MigrationError("area slot table exhausted")
        self.next_slot += 1
        self.off[slot] = voffset
        self.len[slot] = length
        p0 = voffset // self.job.page_size
        self.page_area[p0:p0 + length // self.job.page_size] = slot
        return slot

    def state_of(self, slot: int) -> int:
        return lib.leap_state(self.ref, slot)

    def transition(self, slot: int, frm: int, to: int) -> int:
        return lib.leap_transition(self.ref, slot, frm, to)

    def resolve(self, addr: int) -> int:
        return lib.leap_resolve(self.ref, addr)

    def transitions(self) -> np.ndarray | None:
        if self.log is None:
            return None
        n = min(self.job.log_len, len(self.log))
        return self.log[:n].copy()

    def log_overflowed(self) -> bool:
        return self.log is not None and self.job.log_len > len(self.log)

    def counters(self) -> dict[str, int]:
        j = self.job
        return {"faults": j.faults, "dirty_marks": j.dirty_marks, "sealed_waits": j.sealed_waits,
                "spin_timeouts": j.spin_timeouts, "illegal_transitions": j.illegal}


def check_transition_log(log: np.ndarray, n_slots: int | None = None) -> list[str]:
    """Replay a transition log per slot in version order; return violations."""
    problems: list[str] = []
    if log is None or len(log) == 0:
        return problems
    order = np.lexsort((log["version"], log["slot"]))
    rows = log[order]
    prev_slot, prev_to, prev_ver = -1, IDLE, 0
    for r in rows:
        slot, ver, frm, to = int(r["slot"]), int(r["version"]), int(r["from"]), int(r["to"])
        if slot != prev_slot:
            prev_slot, prev_to, prev_ver = slot, IDLE, 0
        if (frm, to) not in LEGAL_TRANSITIONS:
            problems.append(f"slot {slot} v{ver}: illegal {STATE_NAMES[frm]}->{STATE_NAMES[to]}")
        if ver != prev_ver + 1:
            problems.append(f"slot {slot}: version gap {prev_ver}->{ver}")
        if frm != prev_to:
            problems.append(f"slot {slot} v{ver}: from {STATE_NAMES[frm]} but was {STATE_NAMES[prev_to]}")
        prev_to, prev_ver = to, ver
    return problems


# ---- handler installation ----

def install_fault_handler() -> None:
    rc = lib.leap_install()
    if rc == -errno.EEXIST:
        raise HandlerError("fault handler already installed")
    if rc != 0:
        raise HandlerError(f"sigaction failed: {os.strerror(-rc)}")


def uninstall_fault_handler() -> None:
    rc = lib.leap_uninstall()
    if rc == -errno.EBUSY:
        raise HandlerError("cannot uninstall: migration jobs in flight")
    if rc == -errno.ENOENT:
        raise HandlerError("fault handler not installed")


def handler_installed() -> bool:
    return bool(lib.leap_installed())


@contextmanager
def fault_handler():
    """Install the handler for the duration of the block (no-op if already installed)."""
    owned = not handler_installed()
    if owned:
        install_fault_handler()
    try:
        yield
    finally:
        if owned:
            uninstall_fault_handler()


def on_write_fault(addr: int) -> str:
    """Run the handler logic for a write fault at `addr` (as the signal path does)."""
    region = region_at(addr)
    job = region.job if region is not None else None
    if job is None or job.done():
        raise MigrationError(f"foreign fault at {addr:#x}")
    return STATE_NAMES[job.table.resolve(addr)]


# ---- jobs ----

class JobStatus(str, enum.Enum):
    COMPLETE = "Complete"
    TIMED_OUT = "TimedOut"
    FAILED = "Failed"


@dataclass
class MigrationStats:
    bytes_copied_total: int = 0
    bytes_copied_extra: int = 0
    retries: int = 0
    areas_split: int = 0
    elapsed: float = 0.0
    faults: int = 0
    dirty_marks: int = 0
    sealed_waits: int = 0
    spin_timeouts: int = 0
    illegal_transitions: int = 0


@dataclass
class MigrationReport:
    status: JobStatus
    pages_migrated: int
    pages_pending: int
    stats: MigrationStats
    page_status: np.ndarray = field(repr=False)
    remapped_areas: list[tuple[int, int]] = field(repr=False, default_factory=list)
    transitions: np.ndarray | None = field(repr=False, default=None)
    error: str | None = None


class MigrationJob:
    def __init__(self, region: VirtualRegion, dst: PhysicalStore, options: MigrationOptions):
        self.region = region
        self.dst = dst
        self.options = options
        ps = region.page_size
        if options.initial_area % ps:
            raise AlignmentError(f"initial_area {options.initial_area} not a multiple of {ps}")
        if dst.page_size != ps:
            raise AlignmentError("destination page size differs from region page size")
        self.page_size = ps
        self.n_pages = region.n_pages
        if region.job is not None and not region.job.done():
            raise RegionBusy("region already has an active migration")
        self.src_nodes = self._source_nodes()
        self.dst_node = dst.node
        n_slots = 2 * self.n_pages + 2
        log_cap = 64 * self.n_pages + 1024 if options.record_transitions else 0
        self.table = NativeAreaTable(region.base, region.length, ps, n_slots,
                                     int(options.handler_spin * 1e9), True, log_cap)
        self.page_status = np.zeros(self.n_pages, dtype=bool)
        self.stats = MigrationStats()
        self.remapped: list[tuple[int, int]] = []
        self._pending: collections.deque[Area] = collections.deque()
        self._stop = threading.Event()
        self._done = threading.Event()
        self._thread: threading.Thread | None = None
        self._error: BaseException | None = None
        self._report: MigrationReport | None = None
        self._t0 = 0.0
        # pages already backed by `dst` (an earlier job timed out) stay put
        done = region._store_ids[: self.n_pages] == dst.id
        self.page_status[:] = done
        todo = np.flatnonzero(np.diff(np.concatenate(([1], done.astype(np.int8), [1]))))
        for first, last in zip(todo[::2], todo[1::2]):
            lo, hi = int(first) * ps, int(last) * ps
            for off in range(lo, hi, options.initial_area):
                ln = min(options.initial_area, hi - off)
                a = Area(off, ln)
                a.slot = self.table.new_slot(off, ln)
                self._pending.append(a)
        self.bytes_to_move = sum(a.length for a in self._pending)
        self.n_initial_areas = len(self._pending)

    def _source_nodes(self) -> set[int]:
        r = self.region
        if r.length == 0:
            return set()
        if not r.fully_mapped():
            raise UnmappedRange("region is not fully mapped")
        if (r._prot[: r.n_pages] != int(Protection.READ_WRITE)).any():
            raise MigrationError("region must be read-write before migration")
        # several nodes happen after an earlier job timed out part way
        return {e.store.node for e in r.extents_of(0, r.length)}

    # -- lifecycle --

    def start(self) -> "MigrationJob":
        if not handler_installed():
            raise HandlerError("fault handler not installed")
        need = self.bytes_to_move
        st = self.dst.stats()
        if need > st.free_bytes:
            raise PoolExhausted(f"destination pool has {st.free_bytes} free bytes, job needs {need}")
        if self.options.dst_prefault_required and need > st.free_prefaulted_bytes:
            raise PoolExhausted(
                f"destination pool has {st.free_prefaulted_bytes} pooled bytes, job needs {need}")
        if self.region.job is not None and not self.region.job.done():
            raise RegionBusy("region already has an active migration")
        if lib.leap_attach(ctypes.byref(self.region._native), self.table.ref) != 0:
            raise RegionBusy("region already has an active migration")
        self.region.job = self
        self.region._retired_jobs.append(self.table)
        self._t0 = time.perf_counter()
        if not self._pending:
            self._finish()
            return self
        self._thread = threading.Thread(target=self._run, name="page-leap", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        try:
            if self.options.pin_worker:
                try:
                    pin_to_node(self.dst_node, self.dst.topology)
                except OSError as exc:
                    log.debug("could not pin migration worker: %s", exc)
            timeout = self.options.timeout
            deadline = math.inf if timeout is None else self._t0 + timeout
            while self._pending:
                if self._stop.is_set() or time.perf_counter() >= deadline:
                    break
                self._attempt(self._pending.popleft())
        except BaseException as exc:  # reported through wait()
            self._error = exc
        finally:
            self._finish()

    def _attempt(self, area: Area) -> None:
        try:
            dst = self.dst.allocate(area.length, prefault=True)
        except OutOfCapacity as exc:
            self._pending.appendleft(area)
            raise PoolExhausted(str(exc)) from exc
        area.dst_extent = dst
        err = ctypes.c_int(0)
        rc = lib.leap_migrate_area(self.table.ref, area.slot, self.dst.alias + dst.offset,
                                   self.dst.fd, dst.offset, ctypes.byref(err))
        if rc == _native.MIGRATE_ERROR:
            _native.mprotect(self.region.base + area.voffset, area.length,
                             int(Protection.READ_WRITE))
            self.dst.release(dst)
            self._pending.appendleft(area)
            raise MigrationError(f"migrating area {area.voffset:#x}: {os.strerror(err.value)}")
        self.stats.bytes_copied_total += area.length
        if rc == _native.MIGRATE_REMAPPED:
            old = self.region.extents_of(area.voffset, area.length)
            with self.region._lock:
                self.region._record(area.voffset, dst, Protection.READ_WRITE)
            p0 = area.voffset // self.page_size
            self.page_status[p0:p0 + area.length // self.page_size] = True
            for e in old:
                e.store.release(e)
            self.remapped.append((area.voffset, area.length))
            return
        # dirty: discard the copy and retry smaller
        self.stats.bytes_copied_extra += area.length
        self.stats.retries += 1
        self.dst.release(dst)
        self.table.transition(area.slot, DIRTY, IDLE)
        children = split_area(area, self.options.reduction_factor, self.page_size)
        if len(children) > 1:
            self.stats.areas_split += 1
            for c in children:
                c.slot = self.table.new_slot(c.voffset, c.length)
        else:
            children[0].slot = area.slot
        self._pending.extend(children)

    def _finish(self) -> None:
        lib.leap_detach(ctypes.byref(self.region._native), self.table.ref)
        self.stats.elapsed = time.perf_counter() - self._t0
        for k, v in self.table.counters().items():
            setattr(self.stats, k, v)
        migrated = int(np.count_nonzero(self.page_status))
        if self._error is not None:
            status = JobStatus.FAILED
        elif migrated == self.n_pages:
            status = JobStatus.COMPLETE
        else:
            status = JobStatus.TIMED_OUT
        self._report = MigrationReport(
            status=status,
            pages_migrated=migrated,
            pages_pending=self.n_pages - migrated,
            stats=self.stats,
            page_status=self.page_status.copy(),
            remapped_areas=list(self.remapped),
            transitions=self.table.transitions(),
            error=None if self._error is None else f"{type(self._error).__name__}: {self._error}",
        )
        self._done.set()

    # -- observation --

    def done(self) -> bool:
        return self._done.is_set()

    def cancel(self) -> None:
        """Stop after the area in flight (same path as a timeout)."""
        self._stop.set()

    def wait(self, poll: float | None = None) -> MigrationReport:
        if poll is not None and poll <= 0:
            raise ValueError("poll interval must be positive")
        while not self._done.wait(poll):
            pass
        if self._thread is not None:
            self._thread.join()
        assert self._report is not None
        return self._report

    def progress(self) -> tuple[int, int]:
        """(pages migrated, pages pending) right now."""
        m = int(np.count_nonzero(self.page_status))
        return m, self.n_pages - m

    def state_of_page(self, voffset: int) -> str:
        slot = int(self.table.page_area[voffset // self.page_size])
        return STATE_NAMES[self.table.state_of(slot)]


def start_migration(region: VirtualRegion, dst: PhysicalStore | int,
                    options: MigrationOptions | None = None) -> MigrationJob:
    """Begin migrating `region` into the pool `dst` (a store, or a node id whose
    oldest matching store is used).  Returns immediately."""
    options = options or MigrationOptions()
    if isinstance(dst, int):
        candidates = stores_on(dst, region.page_size)
        if not candidates:
            raise PoolExhausted(f"no store with page size {region.page_size} on node {dst}")
        dst = candidates[0]
    return MigrationJob(region, dst, options).start()


def page_leap(region: VirtualRegion, dst: PhysicalStore | int,
              options: MigrationOptions | None = None) -> MigrationReport:
    """Synchronous convenience: start a migration and wait for its report."""
    return start_migration(region, dst, options).wait()
