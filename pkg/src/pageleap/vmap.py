"""Virtual regions whose pages are rewired onto store offsets at runtime.

A region is a reserved, initially inaccessible address range.  Ranges of it
are mapped onto extents of a :class:`~pageleap.mem_file.PhysicalStore` with a
single fixed-address ``mmap`` call per range; remapping a range onto another
extent replaces the translation atomically for concurrent readers.
"""
from __future__ import annotations

import ctypes
import enum
import threading
import weakref

import numpy as np

from . import _native
from .errors import AlignmentError, MappingError, PageSizeMismatch, RangeError, UnmappedRange
from .mem_file import HUGE_PAGE, SMALL_PAGE, Extent, PhysicalStore


class Protection(enum.IntEnum):
    NONE = _native.PROT_NONE
    READ_ONLY = _native.PROT_READ
    READ_WRITE = _native.PROT_READ | _native.PROT_WRITE


_registry: dict[int, "weakref.ref[VirtualRegion]"] = {}
_registry_lock = threading.Lock()


def region_at(addr: int) -> "VirtualRegion | None":
    with _registry_lock:
        refs = list(_registry.values())
    for ref in refs:
        r = ref()
        if r is not None and r.base <= addr < r.base + r.length:
            return r
    return None


def live_regions() -> list["VirtualRegion"]:
    with _registry_lock:
        refs = list(_registry.values())
    return [r for r in (ref() for ref in refs) if r is not None]


class VirtualRegion:
    def __init__(self, length: int, page_size: int):
        if page_size not in (SMALL_PAGE, HUGE_PAGE):
            raise AlignmentError(f"unsupported page size {page_size}")
        if length < 0 or length % page_size:
            raise AlignmentError(f"length {length} is not a multiple of page size {page_size}")
        self.length = length
        self.page_size = page_size
        self.n_pages = length // page_size
        # over-reserve so huge-page regions can be aligned
        slack = page_size if page_size > SMALL_PAGE else 0
        self._raw_len = max(length, SMALL_PAGE) + slack
        flags = _native.MAP_PRIVATE | _native.MAP_ANONYMOUS | _native.MAP_NORESERVE
        self._raw = _native.mmap(None, self._raw_len, _native.PROT_NONE, flags)
        self.base = -(-self._raw // page_size) * page_size

        self._store_ids = np.full(self.n_pages, -1, dtype=np.int64)
        self._offsets = np.zeros(self.n_pages, dtype=np.int64)
        self._prot = np.zeros(max(self.n_pages, 1), dtype=np.uint8)
        self._stores: dict[int, PhysicalStore] = {}
        self._lock = threading.Lock()
        self.job = None  # active migration handle, set by the engine
        self._retired_jobs: list = []  # native job memory kept alive for late faults

        self._native = _native.Region(base=self.base, length=length, page_size=page_size,
                                      prot=self._prot.ctypes.data, job=None)
        self._slot = _native.lib.leap_region_register(ctypes.byref(self._native))
        if self._slot < 0:
            _native.munmap(self._raw, self._raw_len)
            raise MappingError("too many live regions")
        with _registry_lock:
            _registry[self._slot] = weakref.ref(self)

    # -- helpers --

    def _check_range(self, voffset: int, length: int) -> tuple[int, int]:
        if voffset % self.page_size or length % self.page_size:
            raise AlignmentError(f"range ({voffset:#x}, {length:#x}) not aligned to {self.page_size}")
        if voffset < 0 or length <= 0 or voffset + length > self.length:
            raise RangeError(f"range ({voffset:#x}, {length:#x}) outside region of {self.length:#x}")
        return voffset // self.page_size, (voffset + length) // self.page_size

    def address(self, voffset: int = 0) -> int:
        return self.base + voffset

    def _record(self, voffset: int, extent: Extent, protection: Protection) -> None:
        p0, p1 = voffset // self.page_size, (voffset + extent.length) // self.page_size
        store = extent.store
        self._stores[store.id] = store
        self._store_ids[p0:p1] = store.id
        self._offsets[p0:p1] = extent.offset + np.arange(p1 - p0, dtype=np.int64) * self.page_size
        self._prot[p0:p1] = int(protection)

    # -- operations --

    def map_range(self, voffset: int, extent: Extent,
                  protection: Protection = Protection.READ_WRITE) -> None:
        if extent.store.page_size != self.page_size:
            raise PageSizeMismatch(
                f"extent page size {extent.store.page_size} != region page size {self.page_size}")
        self._check_range(voffset, extent.length)
        populate = extent.store.is_prefaulted(extent)
        with self._lock:
            _native.map_fixed(self.base + voffset, extent.length, int(protection),
                              extent.store.fd, extent.offset, populate)
            self._record(voffset, extent, protection)

    def protect_range(self, voffset: int, length: int, protection: Protection) -> None:
        p0, p1 = self._check_range(voffset, length)
        with self._lock:
            if (self._store_ids[p0:p1] < 0).any():
                raise UnmappedRange(f"range ({voffset:#x}, {length:#x}) has unmapped pages")
            _native.mprotect(self.base + voffset, length, int(protection))
            self._prot[p0:p1] = int(protection)

    def mapping_of(self, voffset: int) -> tuple[PhysicalStore, int] | None:
        if voffset % self.page_size or not 0 <= voffset < self.length:
            raise RangeError(f"voffset {voffset:#x} not a page of this region")
        p = voffset // self.page_size
        sid = int(self._store_ids[p])
        if sid < 0:
            return None
        return self._stores[sid], int(self._offsets[p])

    def protection_of(self, voffset: int) -> Protection:
        return Protection(int(self._prot[voffset // self.page_size]))

    def node_of(self, voffset: int) -> int | None:
        """Node of the store backing `voffset`, None if the page was never faulted."""
        m = self.mapping_of(voffset - voffset % self.page_size)
        if m is None:
            raise UnmappedRange(f"voffset {voffset:#x} is not mapped")
        store, off = m
        if not _native.resident(store.alias + off, self.page_size, self.page_size)[0]:
            return None
        return store.node

    def extents_of(self, voffset: int, length: int) -> list[Extent]:
        """Backing extents of a mapped range, merged where store offsets are contiguous."""
        p0, p1 = self._check_range(voffset, length)
        ids = self._store_ids[p0:p1]
        offs = self._offsets[p0:p1]
        if (ids < 0).any():
            raise UnmappedRange(f"range ({voffset:#x}, {length:#x}) has unmapped pages")
        cut = np.flatnonzero((np.diff(ids) != 0) | (np.diff(offs) != self.page_size)) + 1
        starts = np.concatenate(([0], cut))
        ends = np.concatenate((cut, [len(ids)]))
        return [Extent(self._stores[int(ids[a])], int(offs[a]), int(b - a) * self.page_size)
                for a, b in zip(starts, ends)]

    def fully_mapped(self) -> bool:
        return bool((self._store_ids >= 0).all())

    def view(self, voffset: int = 0, length: int | None = None) -> np.ndarray:
        length = self.length - voffset if length is None else length
        if voffset < 0 or voffset + length > self.length:
            raise RangeError("view outside region")
        return _native.byte_view(self.base + voffset, length)

    def probe_write(self, voffset: int, value: int = 0) -> int | None:
        """Write one byte; return the fault address if the write faulted unresolved."""
        fault = ctypes.c_size_t(0)
        if _native.lib.leap_probe_write(self.base + voffset, value & 0xFF, ctypes.byref(fault)):
            return fault.value
        return None

    def close(self) -> None:
        if self._slot < 0:
            return
        if self.job is not None and not self.job.done():
            raise MappingError("region has a migration in flight")
        _native.lib.leap_region_unregister(self._slot)
        with _registry_lock:
            _registry.pop(self._slot, None)
        self._slot = -1
        _native.munmap(self._raw, self._raw_len)
        self._retired_jobs.clear()

    def __enter__(self) -> "VirtualRegion":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass

    def __repr__(self) -> str:
        return f"VirtualRegion(base={self.base:#x}, length={self.length:#x}, page_size={self.page_size})"


def reserve_region(length: int, page_size: int = SMALL_PAGE) -> VirtualRegion:
    return VirtualRegion(length, page_size)


def map_range(region: VirtualRegion, voffset: int, extent: Extent,
              protection: Protection = Protection.READ_WRITE) -> None:
    region.map_range(voffset, extent, protection)


def protect_range(region: VirtualRegion, voffset: int, length: int, protection: Protection) -> None:
    region.protect_range(voffset, length, protection)


def mapping_of(region: VirtualRegion, voffset: int) -> tuple[PhysicalStore, int] | None:
    return region.mapping_of(voffset)


def map_call_count() -> int:
    """Number of fixed-address mmap calls issued by this process so far."""
    return int(_native.lib.leap_map_calls())
