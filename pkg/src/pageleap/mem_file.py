"""Per-node physical memory held as offsets in main-memory files.

A :class:`PhysicalStore` owns one memory-backed file (a memfd, or a file on a
hugetlbfs mount for huge pages) bound to a NUMA node, plus a pooled extent
allocator over it.  Pages stay faulted in after an extent is released, which
is what makes a later allocation "pooled".
"""
from __future__ import annotations

import bisect
import enum
import os
import threading
import weakref
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _native
from .errors import (
    AlignmentError,
    DoubleRelease,
    ForeignExtent,
    InsufficientHugePages,
    OutOfCapacity,
    StoreError,
)
from .numa_topo import Topology, current_topology, hugepage_counts

SMALL_PAGE = 4096
HUGE_PAGE = 2 << 20

HUGETLBFS_ENV = "PAGELEAP_HUGETLBFS"
_MFD_HUGETLB = 0x0004
_MFD_HUGE_2MB = 21 << 26


class Backing(enum.Enum):
    SHM_FILE = "shared-memory-file"
    HUGE_FILE = "huge-page-file"


@dataclass(frozen=True)
class Extent:
    store: "PhysicalStore"
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length

    def __repr__(self) -> str:
        return f"Extent(store={self.store.name}, offset={self.offset:#x}, length={self.length:#x})"


@dataclass(frozen=True)
class PoolStats:
    free_bytes: int
    used_bytes: int
    prefaulted_pages: int
    free_prefaulted_bytes: int


_stores: "weakref.WeakSet[PhysicalStore]" = weakref.WeakSet()
_store_ids = iter(range(1, 1 << 62))


def hugetlbfs_mount() -> Path | None:
    """Configured hugetlbfs mount, if it exists."""
    path = os.environ.get(HUGETLBFS_ENV, "/dev/hugepages")
    p = Path(path)
    if not p.is_dir():
        return None
    try:
        mounts = Path("/proc/mounts").read_text().split("\n")
    except OSError:
        return None
    for line in mounts:
        parts = line.split()
        if len(parts) >= 3 and parts[2] == "hugetlbfs" and Path(parts[1]) == p.resolve():
            return p
    return None


class PhysicalStore:
    """Physical memory of one node, addressed by file offset."""

    def __init__(self, node: int, page_size: int, capacity: int, backing: Backing,
                 topo: Topology, fd: int):
        self.id = next(_store_ids)
        self.node = node
        self.page_size = page_size
        self.capacity = capacity
        self.backing = backing
        self.topology = topo
        self.fd = fd
        self.name = f"store{self.id}@node{node}"
        self.n_pages = capacity // page_size
        self._lock = threading.Lock()
        self._free: list[tuple[int, int]] = [(0, capacity)] if capacity else []
        self._allocated = np.zeros(self.n_pages, dtype=bool)
        self._prefaulted = np.zeros(self.n_pages, dtype=bool)
        self._used = 0
        self.alias = 0
        if capacity:
            self.alias = _native.mmap(None, capacity, _native.PROT_READ | _native.PROT_WRITE,
                                      _native.MAP_SHARED, fd, 0)
            if not topo.simulated:
                rc = _native.lib.leap_mbind(self.alias, capacity, node, 0)
                if rc < 0:
                    _native.munmap(self.alias, capacity)
                    raise StoreError(f"mbind to node {node} failed: {os.strerror(-rc)}")
        self.residency_checked = not topo.simulated
        _stores.add(self)

    # -- allocation --

    def _check_len(self, length: int) -> None:
        if length <= 0 or length % self.page_size:
            raise AlignmentError(f"length {length} is not a positive multiple of {self.page_size}")

    def allocate(self, length: int, prefault: bool = False) -> Extent:
        self._check_len(length)
        with self._lock:
            for i, (off, ln) in enumerate(self._free):
                if ln >= length:
                    break
            else:
                raise OutOfCapacity(
                    f"{self.name}: no free extent of {length} bytes "
                    f"({self.capacity - self._used} free in {len(self._free)} extents)")
            if ln == length:
                del self._free[i]
            else:
                self._free[i] = (off + length, ln - length)
            p0, p1 = off // self.page_size, (off + length) // self.page_size
            self._allocated[p0:p1] = True
            self._used += length
        ext = Extent(self, off, length)
        if prefault:
            self.prefault(ext)
        return ext

    def prefault(self, ext: Extent) -> None:
        """Touch every not-yet-faulted page of `ext` once."""
        p0, p1 = ext.offset // self.page_size, ext.end // self.page_size
        cold = np.flatnonzero(~self._prefaulted[p0:p1])
        if len(cold) == 0:
            return
        # contiguous runs of cold pages
        breaks = np.flatnonzero(np.diff(cold) != 1) + 1
        for run in np.split(cold, breaks):
            start = (p0 + int(run[0])) * self.page_size
            _native.lib.leap_touch(self.alias + start, len(run) * self.page_size, self.page_size)
        with self._lock:
            self._prefaulted[p0:p1] = True

    def release(self, ext: Extent) -> None:
        if ext.store is not self:
            raise ForeignExtent(f"{ext!r} does not belong to {self.name}")
        if ext.offset % self.page_size or ext.length <= 0 or ext.length % self.page_size \
                or ext.end > self.capacity:
            raise AlignmentError(f"{ext!r} is not a valid extent of {self.name}")
        p0, p1 = ext.offset // self.page_size, ext.end // self.page_size
        with self._lock:
            if not self._allocated[p0:p1].all():
                raise DoubleRelease(f"{ext!r} (or part of it) is not allocated")
            self._allocated[p0:p1] = False
            self._used -= ext.length
            self._insert_free(ext.offset, ext.length)

    def _insert_free(self, off: int, length: int) -> None:
        i = bisect.bisect_left(self._free, (off, 0))
        if i > 0 and sum(self._free[i - 1]) == off:
            i -= 1
            off, length = self._free[i][0], self._free[i][1] + length
            del self._free[i]
        if i < len(self._free) and self._free[i][0] == off + length:
            length += self._free[i][1]
            del self._free[i]
        self._free.insert(i, (off, length))

    def discard(self, ext: Extent) -> None:
        """Drop the physical pages behind `ext` so the next touch faults fresh memory."""
        if ext.store is not self:
            raise ForeignExtent(f"{ext!r} does not belong to {self.name}")
        _native.punch_hole(self.fd, ext.offset, ext.length)
        p0, p1 = ext.offset // self.page_size, ext.end // self.page_size
        with self._lock:
            self._prefaulted[p0:p1] = False

    # -- inspection --

    def stats(self) -> PoolStats:
        with self._lock:
            free_pref = int(np.count_nonzero(self._prefaulted & ~self._allocated))
            return PoolStats(
                free_bytes=self.capacity - self._used,
                used_bytes=self._used,
                prefaulted_pages=int(np.count_nonzero(self._prefaulted)),
                free_prefaulted_bytes=free_pref * self.page_size,
            )

    def free_extents(self) -> list[tuple[int, int]]:
        with self._lock:
            return list(self._free)

    def is_prefaulted(self, ext: Extent) -> bool:
        p0, p1 = ext.offset // self.page_size, ext.end // self.page_size
        return bool(self._prefaulted[p0:p1].all())

    def view(self, offset: int = 0, length: int | None = None) -> np.ndarray:
        """uint8 array over the store bytes (through the store's own mapping)."""
        length = self.capacity - offset if length is None else length
        if offset < 0 or offset + length > self.capacity:
            raise StoreError("view out of range")
        return _native.byte_view(self.alias + offset, length)

    def warm(self, nbytes: int | None = None) -> None:
        """Prefault `nbytes` of free memory (default: all of it) to fill the pool."""
        with self._lock:
            free = list(self._free)
        remaining = self.capacity if nbytes is None else -(-nbytes // self.page_size) * self.page_size
        for off, ln in free:
            if remaining <= 0:
                break
            take = min(ln, remaining)
            self.prefault(Extent(self, off, take))
            remaining -= take

    def close(self) -> None:
        if self.alias:
            _native.munmap(self.alias, self.capacity)
            self.alias = 0
        if self.fd >= 0:
            os.close(self.fd)
            self.fd = -1
        _stores.discard(self)

    def __enter__(self) -> "PhysicalStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return (f"PhysicalStore({self.name}, page_size={self.page_size}, "
                f"capacity={self.capacity}, backing={self.backing.value})")


def _open_backing(backing: Backing, capacity: int, name: str) -> int:
    if backing is Backing.SHM_FILE:
        fd = os.memfd_create(name, os.MFD_CLOEXEC)
    else:
        mount = hugetlbfs_mount()
        if mount is not None:
            path = mount / f"pageleap-{os.getpid()}-{name}"
            fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL | os.O_CLOEXEC, 0o600)
            os.unlink(path)
        else:
            fd = os.memfd_create(name, os.MFD_CLOEXEC | _MFD_HUGETLB | _MFD_HUGE_2MB)
    try:
        os.ftruncate(fd, capacity)
    except OSError:
        os.close(fd)
        raise
    return fd


def create_store(node: int, page_size: int, capacity: int,
                 backing: Backing | str = Backing.SHM_FILE,
                 topo: Topology | None = None) -> PhysicalStore:
    topo = topo or current_topology()
    backing = Backing(backing)
    topo.check_node(node)
    if page_size not in (SMALL_PAGE, HUGE_PAGE):
        raise AlignmentError(f"unsupported page size {page_size}")
    if capacity < 0 or capacity % page_size:
        raise AlignmentError(f"capacity {capacity} is not a multiple of page size {page_size}")
    if (page_size == HUGE_PAGE) != (backing is Backing.HUGE_FILE):
        raise AlignmentError("huge pages require huge-page-file backing and vice versa")
    if backing is Backing.HUGE_FILE:
        need = capacity // HUGE_PAGE
        _, free = hugepage_counts(None if topo.simulated else topo.physical_node(node))
        if free < need:
            raise InsufficientHugePages(
                f"need {need} free 2 MiB huge pages on node {node}, {free} available; "
                "reserve more via /sys/devices/system/node/node*/hugepages/"
                "hugepages-2048kB/nr_hugepages")
    fd = _open_backing(backing, capacity, f"pageleap-node{node}")
    try:
        return PhysicalStore(node, page_size, capacity, backing, topo, fd)
    except BaseException:
        os.close(fd)
        raise


def allocate_extent(store: PhysicalStore, length: int, prefault: bool = False) -> Extent:
    return store.allocate(length, prefault)


def release_extent(store: PhysicalStore, extent: Extent) -> None:
    store.release(extent)


def pool_stats(store: PhysicalStore) -> PoolStats:
    return store.stats()


def stores_on(node: int, page_size: int | None = None) -> list[PhysicalStore]:
    """Live stores bound to `node`, oldest first."""
    found = [s for s in list(_stores) if s.node == node and s.fd >= 0
             and (page_size is None or s.page_size == page_size)]
    return sorted(found, key=lambda s: s.id)
