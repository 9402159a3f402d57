"""Competitors and optima for the migration engine.

* raw copies into fresh or pooled memory (the lower bound on copy cost)
* the kernel's explicit page-move call
* an observer that waits for the kernel's automatic balancing

Per-page outcomes use the kernel's status convention throughout: a value
``>= 0`` is the node the page ended up on and a negative value is
``-errno``.  Outcomes are never reinterpreted.
"""
from __future__ import annotations

import collections
import errno
import enum
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import _native
from .mem_file import Extent, PhysicalStore
from .numa_topo import Topology, balancing_enabled, current_topology, query_pages
from .vmap import VirtualRegion


class Method(str, enum.Enum):
    RAW_COPY_FRESH = "raw-copy-fresh"
    RAW_COPY_POOLED = "raw-copy-pooled"
    OS_MOVE_PAGES = "os-move-pages"
    AUTO_BALANCE = "auto-balance-observe"


@dataclass
class BaselineResult:
    method: Method
    elapsed: float
    status: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int32))
    skipped: str | None = None
    timed_out: bool = False
    extent: Extent | None = None

    @property
    def pages(self) -> int:
        return len(self.status)

    def outcomes(self, dst_node: int | None = None) -> dict[str, int]:
        """Histogram: moved, not-moved (on another node) and failed(ERRNO)."""
        hist: collections.Counter[str] = collections.Counter()
        for st, n in zip(*np.unique(self.status, return_counts=True)):
            st = int(st)
            if st < 0:
                hist[f"failed({errno.errorcode.get(-st, str(-st))})"] += int(n)
            elif dst_node is None or st == dst_node:
                hist["moved"] += int(n)
            else:
                hist["not-moved"] += int(n)
        return dict(hist)

    def moved(self, dst_node: int) -> int:
        return int(np.count_nonzero(self.status == dst_node))


def skipped(method: Method, reason: str) -> BaselineResult:
    return BaselineResult(method, 0.0, skipped=reason)


class AnonBuffer:
    """Private anonymous memory, the kind the kernel's balancing can see."""

    def __init__(self, length: int, transparent_huge: bool = False):
        if length < 0 or length % _native.SMALL_PAGE:
            raise ValueError("length must be a non-negative multiple of 4 KiB")
        self.length = length
        self.page_size = _native.SMALL_PAGE
        self.base = _native.mmap(None, max(length, self.page_size),
                                 _native.PROT_READ | _native.PROT_WRITE,
                                 _native.MAP_PRIVATE | _native.MAP_ANONYMOUS)
        if transparent_huge and length:
            _native.madvise(self.base, length, _native.MADV_HUGEPAGE)

    def view(self) -> np.ndarray:
        return _native.byte_view(self.base, self.length)

    def page_addresses(self) -> np.ndarray:
        return np.arange(self.base, self.base + self.length, self.page_size, dtype=np.uint64)

    def close(self) -> None:
        if self.base:
            _native.munmap(self.base, max(self.length, self.page_size))
            self.base = 0

    def __enter__(self) -> "AnonBuffer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _page_addresses(target: VirtualRegion | AnonBuffer) -> np.ndarray:
    return np.arange(target.base, target.base + target.length, target.page_size, dtype=np.uint64)


def raw_copy(region: VirtualRegion, dst_store: PhysicalStore, pooled: bool,
             release: bool = True) -> BaselineResult:
    """Copy the region into `dst_store` and time the copy alone.

    Fresh copies first drop the destination's physical pages so every page
    faults during the copy.  Pooled copies prefault before the clock starts.
    With ``release=False`` the destination extent is handed back in the result.
    """
    method = Method.RAW_COPY_POOLED if pooled else Method.RAW_COPY_FRESH
    n_pages = region.length // dst_store.page_size
    if region.length == 0:
        return BaselineResult(method, 0.0, np.zeros(0, dtype=np.int32))
    ext = dst_store.allocate(region.length)
    try:
        if pooled:
            dst_store.prefault(ext)
        else:
            dst_store.discard(ext)
        t0 = time.perf_counter()
        _native.lib.leap_copy(dst_store.alias + ext.offset, region.base, region.length)
        elapsed = time.perf_counter() - t0
    except BaseException:
        dst_store.release(ext)
        raise
    if not pooled:
        # the touched pages are now faulted in
        dst_store.prefault(ext)
    status = np.full(n_pages, dst_store.node, dtype=np.int32)
    if release:
        dst_store.release(ext)
        ext = None
    return BaselineResult(method, elapsed, status, extent=ext)


def move_pages(addrs: np.ndarray, node: int, flags: int = _native.MPOL_MF_MOVE) -> np.ndarray:
    """Ask the kernel to move each page to physical `node`; statuses verbatim."""
    addrs = np.ascontiguousarray(addrs, dtype=np.uint64)
    nodes = np.full(len(addrs), node, dtype=np.int32)
    status = np.full(len(addrs), -errno.EINVAL, dtype=np.int32)
    if len(addrs):
        rc = _native.lib.leap_move_pages(0, len(addrs), addrs.ctypes.data, nodes.ctypes.data,
                                         status.ctypes.data, flags)
        if rc < 0:
            raise OSError(-rc, f"move_pages: {os.strerror(-rc)}")
    return status


def os_move_pages(target: VirtualRegion | AnonBuffer, dst_node: int, topo: Topology | None = None,
                  force: bool = False) -> BaselineResult:
    """Migrate every page of `target` with the kernel's page-move call.

    On a simulated topology the result is a skip marker unless ``force`` is
    set, in which case the call targets the physical node behind `dst_node`
    (there is only one, so this exercises status reporting and nothing else).
    """
    topo = topo or current_topology()
    topo.check_node(dst_node)
    if topo.simulated and not force:
        return skipped(Method.OS_MOVE_PAGES, "simulated topology: one physical node")
    phys = topo.physical_node(dst_node)
    addrs = _page_addresses(target)
    t0 = time.perf_counter()
    status = move_pages(addrs, phys)
    return BaselineResult(Method.OS_MOVE_PAGES, time.perf_counter() - t0, status)


def observe_autobalance(target: AnonBuffer, dst_node: int, poll: float = 0.1, timeout: float = 10.0,
                        topo: Topology | None = None) -> BaselineResult:
    """Poll page locations until all sit on `dst_node` or `timeout` passes.

    Elapsed time is counted in whole poll ticks.  Something else must drive
    the accesses from `dst_node` that make the kernel migrate.
    """
    if not poll > 0:
        raise ValueError("poll interval must be positive")
    if timeout < 0:
        raise ValueError("timeout must be non-negative")
    topo = topo or current_topology()
    topo.check_node(dst_node)
    if topo.simulated:
        return skipped(Method.AUTO_BALANCE, "simulated topology: one physical node")
    if not balancing_enabled():
        return skipped(Method.AUTO_BALANCE,
                       "automatic NUMA balancing disabled (set kernel.numa_balancing=1)")
    phys = topo.physical_node(dst_node)
    addrs = _page_addresses(target)
    ticks = 0
    while True:
        status = query_pages(addrs)
        if np.all(status == phys):
            return BaselineResult(Method.AUTO_BALANCE, ticks * poll, status)
        if (ticks + 1) * poll > timeout:
            return BaselineResult(Method.AUTO_BALANCE, timeout, status, timed_out=True)
        ticks += 1
        time.sleep(poll)
