"""NUMA topology discovery, thread pinning and page-location queries.

On hosts with fewer than two memory nodes a simulated topology exposes two
logical nodes that share physical node 0, so everything above this module
can be exercised on a single socket.
"""
from __future__ import annotations

import errno
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _native
from .errors import MappingError, UnknownCore, UnknownNode

NODE_ROOT = Path("/sys/devices/system/node")

#: returned by :func:`node_of_page` for pages that were never faulted in
NOT_RESIDENT = None


def parse_cpulist(text: str) -> list[int]:
    """Parse a kernel cpulist such as ``"0-3,8,10-11"``."""
    cpus: list[int] = []
    for part in text.strip().split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-")
            cpus.extend(range(int(lo), int(hi) + 1))
        else:
            cpus.append(int(part))
    return cpus


@dataclass(frozen=True)
class Topology:
    nodes: tuple[int, ...]
    cores_per_node: dict[int, tuple[int, ...]] = field(hash=False)
    simulated: bool
    physical_nodes: tuple[int, ...] = (0,)

    def cores(self) -> list[int]:
        return sorted({c for cs in self.cores_per_node.values() for c in cs})

    def check_node(self, node: int) -> None:
        if node not in self.nodes:
            raise UnknownNode(f"node {node} not in topology {list(self.nodes)}")

    def physical_node(self, node: int) -> int:
        """Physical node backing logical `node` (always 0 when simulated)."""
        self.check_node(node)
        return 0 if self.simulated else node


def _physical_nodes(root: Path) -> dict[int, list[int]]:
    nodes: dict[int, list[int]] = {}
    for d in sorted(root.glob("node[0-9]*")):
        try:
            cpus = parse_cpulist((d / "cpulist").read_text())
        except OSError:
            cpus = []
        nodes[int(d.name[4:])] = cpus
    return nodes


def detect_topology(force_simulated: bool = False, root: Path = NODE_ROOT) -> Topology:
    allowed = sorted(os.sched_getaffinity(0))
    phys = _physical_nodes(root)
    if not phys:
        phys = {0: allowed}
    if len(phys) >= 2 and not force_simulated:
        cores = {n: tuple(c for c in cpus if c in allowed) for n, cpus in phys.items()}
        return Topology(tuple(sorted(phys)), cores, False, tuple(sorted(phys)))
    # two logical nodes on one physical node; split the usable cores
    half = max(1, len(allowed) // 2)
    first, second = allowed[:half], allowed[half:] or allowed[:half]
    return Topology((0, 1), {0: tuple(first), 1: tuple(second)}, True, (0,))


_current: Topology | None = None
_current_lock = threading.Lock()


def current_topology() -> Topology:
    """Process-wide topology, detected once (``PAGELEAP_MODE=simulated`` forces fallback)."""
    global _current
    with _current_lock:
        if _current is None:
            forced = os.environ.get("PAGELEAP_MODE", "auto") == "simulated"
            _current = detect_topology(force_simulated=forced)
        return _current


def set_topology(topo: Topology | None) -> None:
    global _current
    with _current_lock:
        _current = topo


def pin_current_thread(core: int, topo: Topology | None = None) -> None:
    topo = topo or current_topology()
    if core not in topo.cores():
        raise UnknownCore(f"core {core} not available (usable: {topo.cores()})")
    os.sched_setaffinity(0, {core})


def pin_to_node(node: int, topo: Topology | None = None) -> int:
    """Pin the calling thread to the first core of `node`; returns the core."""
    topo = topo or current_topology()
    topo.check_node(node)
    cores = topo.cores_per_node.get(node) or tuple(topo.cores())
    pin_current_thread(cores[0], topo)
    return cores[0]


def query_pages(addrs) -> np.ndarray:
    """Raw per-page status from the kernel's move_pages query form.

    Values >= 0 are node ids; negative values are ``-errno`` (``-ENOENT``
    for pages that are not present).
    """
    addrs = np.ascontiguousarray(addrs, dtype=np.uint64)
    status = np.full(len(addrs), -errno.EINVAL, dtype=np.int32)
    if len(addrs) == 0:
        return status
    rc = _native.lib.leap_move_pages(0, len(addrs), addrs.ctypes.data, None, status.ctypes.data, 0)
    if rc < 0:
        raise OSError(-rc, f"move_pages: {os.strerror(-rc)}")
    return status


def node_of_page(addr: int, topo: Topology | None = None) -> int | None:
    """Node currently backing the page at `addr`, or ``NOT_RESIDENT``."""
    topo = topo or current_topology()
    from .vmap import region_at

    region = region_at(addr)
    if topo.simulated:
        if region is not None:
            return region.node_of(addr - region.base)
        page = addr & ~(4096 - 1)
        try:
            present = _native.resident(page, 4096)[0]
        except OSError as exc:
            raise MappingError(f"address {addr:#x} is not mapped") from exc
        return 0 if present else NOT_RESIDENT
    page = addr & ~((region.page_size if region else 4096) - 1)
    st = int(query_pages([page])[0])
    if st >= 0:
        return st
    if st == -errno.ENOENT:
        return NOT_RESIDENT
    if region is not None and st == -errno.EFAULT:
        # mapped in the table but not yet populated in page tables
        return NOT_RESIDENT
    raise MappingError(f"address {addr:#x}: {os.strerror(-st)}")


def balancing_enabled(path: str = "/proc/sys/kernel/numa_balancing") -> bool | None:
    try:
        return Path(path).read_text().strip() not in ("", "0")
    except OSError:
        return None


def hugepage_counts(node: int | None = None, size_kb: int = 2048) -> tuple[int, int]:
    """(total, free) reserved huge pages, per node or system wide."""
    if node is None:
        base = Path(f"/sys/kernel/mm/hugepages/hugepages-{size_kb}kB")
    else:
        base = NODE_ROOT / f"node{node}" / "hugepages" / f"hugepages-{size_kb}kB"
    try:
        total = int((base / "nr_hugepages").read_text())
        free = int((base / "free_hugepages").read_text())
    except OSError:
        return 0, 0
    return total, free

