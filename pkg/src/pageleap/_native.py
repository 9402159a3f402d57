"""Build and load the native core (``_leap.c``) through ctypes.

The shared object is compiled on first import with the system C compiler and
cached next to the source, keyed by a hash of the source and compiler flags.
Set ``PAGELEAP_CACHE`` to put the cache elsewhere.
"""
from __future__ import annotations

import ctypes
import hashlib
import os
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

_SRC = Path(__file__).with_name("_leap.c")
_CFLAGS = ["-O2", "-std=gnu11", "-fPIC", "-shared", "-Wall"]

# area states, mirrored from _leap.c
IDLE, COPYING, SEALED, REMAPPING, REMAPPED, DIRTY = range(6)
STATE_NAMES = ("Idle", "Copying", "Sealed", "Remapping", "Remapped", "Dirty")

MIGRATE_REMAPPED, MIGRATE_DIRTY, MIGRATE_ERROR = 0, 1, -1

c_u64 = ctypes.c_uint64
c_i64 = ctypes.c_int64
c_vp = ctypes.c_void_p


class Job(ctypes.Structure):
    _fields_ = [
        ("base", ctypes.c_size_t),
        ("length", c_u64),
        ("page_size", c_u64),
        ("page_area", c_vp),
        ("area_state", c_vp),
        ("area_off", c_vp),
        ("area_len", c_vp),
        ("n_slots", c_u64),
        ("spin_ns", c_i64),
        ("protect", ctypes.c_int),
        ("faults", c_u64),
        ("dirty_marks", c_u64),
        ("sealed_waits", c_u64),
        ("spin_timeouts", c_u64),
        ("inflight", c_u64),
        ("illegal", c_u64),
        ("log", c_vp),
        ("log_cap", c_u64),
        ("log_len", c_u64),
    ]


class Region(ctypes.Structure):
    _fields_ = [
        ("base", ctypes.c_size_t),
        ("length", c_u64),
        ("page_size", c_u64),
        ("prot", c_vp),
        ("job", c_vp),
    ]


class Transition(ctypes.Structure):
    _fields_ = [
        ("slot", c_u64),
        ("version", c_u64),
        ("from_state", ctypes.c_uint32),
        ("to_state", ctypes.c_uint32),
    ]


class JournalEntry(ctypes.Structure):
    _fields_ = [
        ("seq", c_u64),
        ("offset", c_u64),
        ("old_value", c_u64),
        ("new_value", c_u64),
        ("thread_id", ctypes.c_uint32),
        ("pad", ctypes.c_uint32),
    ]


class Burst(ctypes.Structure):
    _fields_ = [
        ("base", ctypes.c_size_t),
        ("n_words", c_u64),
        ("stride", c_u64),
        ("report_base", c_u64),
        ("rate", ctypes.c_double),
        ("duration", ctypes.c_double),
        ("max_writes", c_u64),
        ("skewed", ctypes.c_int),
        ("hot_fraction", ctypes.c_double),
        ("hot_first", c_u64),
        ("hot_count", c_u64),
        ("seed", c_u64),
        ("thread_id", ctypes.c_uint32),
        ("stop", c_vp),
        ("seq_counter", c_vp),
        ("journal", c_vp),
        ("journal_cap", c_u64),
        ("writes", c_u64),
        ("active_s", ctypes.c_double),
        ("journal_full", ctypes.c_int),
    ]


def _cache_dir() -> Path:
    env = os.environ.get("PAGELEAP_CACHE")
    if env:
        return Path(env)
    return _SRC.parent / "_build"


def _compile() -> Path:
    source = _SRC.read_bytes()
    tag = hashlib.sha256(source + " ".join(_CFLAGS).encode()).hexdigest()[:16]
    out = _cache_dir() / f"_leap-{tag}.so"
    if out.exists():
        return out
    cc = os.environ.get("CC") or shutil.which("cc") or shutil.which("gcc")
    if cc is None:
        raise ImportError("pageleap needs a C compiler (cc) to build its native core")
    out.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(suffix=".so", dir=out.parent)
    os.close(fd)
    try:
        subprocess.run([cc, *_CFLAGS, "-o", tmp, str(_SRC)], check=True,
                       capture_output=True, text=True)
        os.replace(tmp, out)
    except subprocess.CalledProcessError as exc:
        os.unlink(tmp)
        raise ImportError(f"building native core failed:\n{exc.stderr}") from exc
    return out


def _load() -> ctypes.CDLL:
    lib = ctypes.CDLL(str(_compile()))
    P = ctypes.POINTER
    sigs = {
        "leap_legal": (ctypes.c_int, [ctypes.c_int, ctypes.c_int]),
        "leap_transition": (ctypes.c_int, [P(Job), c_u64, ctypes.c_int, ctypes.c_int]),
        "leap_state": (ctypes.c_int, [P(Job), c_u64]),
        "leap_resolve": (ctypes.c_int, [P(Job), ctypes.c_size_t]),
        "leap_install": (ctypes.c_int, []),
        "leap_uninstall": (ctypes.c_int, []),
        "leap_installed": (ctypes.c_int, []),
        "leap_region_register": (ctypes.c_int, [P(Region)]),
        "leap_region_unregister": (None, [ctypes.c_int]),
        "leap_attach": (ctypes.c_int, [P(Region), P(Job)]),
        "leap_detach": (None, [P(Region), P(Job)]),
        "leap_probe_write": (ctypes.c_int, [ctypes.c_size_t, ctypes.c_uint8, P(ctypes.c_size_t)]),
        "leap_stale_faults": (c_u64, []),
        "leap_region_size": (c_u64, []),
        "leap_job_size": (c_u64, []),
        "leap_trans_size": (c_u64, []),
        "leap_foreign_faults": (c_u64, []),
        "leap_map_calls": (c_u64, []),
        "leap_map_fixed": (ctypes.c_int, [ctypes.c_size_t, c_u64, ctypes.c_int, ctypes.c_int, c_u64, ctypes.c_int]),
        "leap_protect": (ctypes.c_int, [ctypes.c_size_t, c_u64, ctypes.c_int]),
        "leap_migrate_area": (ctypes.c_int, [P(Job), c_u64, c_vp, ctypes.c_int, c_u64, P(ctypes.c_int)]),
        "leap_quiesce": (None, [P(Job)]),
        "leap_move_pages": (ctypes.c_long, [ctypes.c_int, c_u64, c_vp, c_vp, c_vp, ctypes.c_int]),
        "leap_mbind": (ctypes.c_long, [ctypes.c_size_t, c_u64, ctypes.c_int, ctypes.c_int]),
        "leap_touch": (None, [c_vp, c_u64, c_u64]),
        "leap_copy": (None, [c_vp, c_vp, c_u64]),
        "leap_random_offsets": (None, [c_u64, c_u64, c_u64, c_vp]),
        "leap_access": (c_u64, [c_vp, c_u64, ctypes.c_int, c_u64, c_u64]),
        "leap_burst_run": (None, [P(Burst)]),
        "leap_burst_size": (c_u64, []),
        "leap_jentry_size": (c_u64, []),
    }
    for name, (restype, argtypes) in sigs.items():
        fn = getattr(lib, name)
        fn.restype = restype
        fn.argtypes = argtypes
    if lib.leap_job_size() != ctypes.sizeof(Job):
        raise ImportError("native job layout mismatch")
    if lib.leap_region_size() != ctypes.sizeof(Region):
        raise ImportError("native region layout mismatch")
    if lib.leap_trans_size() != ctypes.sizeof(Transition):
        raise ImportError("native transition layout mismatch")
    if lib.leap_burst_size() != ctypes.sizeof(Burst):
        raise ImportError("native burst layout mismatch")
    if lib.leap_jentry_size() != ctypes.sizeof(JournalEntry):
        raise ImportError("native journal layout mismatch")
    return lib


if sys.platform != "linux":  # pragma: no cover
    raise ImportError("pageleap requires Linux (mmap MAP_FIXED, mprotect, SIGSEGV)")

lib = _load()

# ---- thin libc wrappers ----

libc = ctypes.CDLL(None, use_errno=True)
libc.mmap.restype = c_vp
libc.mmap.argtypes = [c_vp, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long]
libc.munmap.restype = ctypes.c_int
libc.munmap.argtypes = [c_vp, ctypes.c_size_t]
libc.mincore.restype = ctypes.c_int
libc.mincore.argtypes = [c_vp, ctypes.c_size_t, c_vp]
libc.madvise.restype = ctypes.c_int
libc.madvise.argtypes = [c_vp, ctypes.c_size_t, ctypes.c_int]
libc.fallocate.restype = ctypes.c_int
libc.fallocate.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_long, ctypes.c_long]

PROT_NONE, PROT_READ, PROT_WRITE = 0, 1, 2
MAP_SHARED, MAP_PRIVATE, MAP_FIXED, MAP_ANONYMOUS = 0x01, 0x02, 0x10, 0x20
MAP_NORESERVE, MAP_POPULATE = 0x4000, 0x8000
FALLOC_FL_KEEP_SIZE, FALLOC_FL_PUNCH_HOLE = 0x01, 0x02
MADV_HUGEPAGE = 14
MPOL_MF_MOVE, MPOL_MF_MOVE_ALL = 1 << 1, 1 << 2
SMALL_PAGE = 4096
_MAP_FAILED = ctypes.c_void_p(-1).value


def _oserror(call: str, err: int | None = None) -> OSError:
    err = ctypes.get_errno() if err is None else err
    return OSError(err, f"{call}: {os.strerror(err)}")


def mmap(addr: int | None, length: int, prot: int, flags: int, fd: int = -1, offset: int = 0) -> int:
    p = libc.mmap(addr, length, prot, flags, fd, offset)
    if p is None or p == _MAP_FAILED:
        raise _oserror("mmap")
    return p


def munmap(addr: int, length: int) -> None:
    if libc.munmap(addr, length) != 0:
        raise _oserror("munmap")


def mprotect(addr: int, length: int, prot: int) -> None:
    rc = lib.leap_protect(addr, length, prot)
    if rc != 0:
        raise _oserror("mprotect", -rc)


def map_fixed(addr: int, length: int, prot: int, fd: int, offset: int, populate: bool) -> None:
    rc = lib.leap_map_fixed(addr, length, prot, fd, offset, int(populate))
    if rc != 0:
        raise _oserror("mmap(MAP_FIXED)", -rc)


def resident(addr: int, length: int, page_size: int = 4096):
    """Per-page residency bitmap (numpy bool) from mincore."""
    import numpy as np

    n = -(-length // 4096)
    vec = np.zeros(n, dtype=np.uint8)
    if libc.mincore(addr, length, vec.ctypes.data) != 0:
        raise _oserror("mincore")
    step = page_size // 4096
    return (vec[::step] & 1).astype(bool)


def madvise(addr: int, length: int, advice: int) -> None:
    if libc.madvise(addr, length, advice) != 0:
        raise _oserror("madvise")


def punch_hole(fd: int, offset: int, length: int) -> None:
    if libc.fallocate(fd, FALLOC_FL_PUNCH_HOLE | FALLOC_FL_KEEP_SIZE, offset, length) != 0:
        raise _oserror("fallocate")


def byte_view(addr: int, length: int):
    """numpy uint8 array aliasing raw memory (no ownership)."""
    import numpy as np

    if length == 0:
        return np.zeros(0, dtype=np.uint8)
    return np.ctypeslib.as_array((ctypes.c_uint8 * length).from_address(addr))
