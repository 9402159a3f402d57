import numpy as np
import pytest

import pageleap as pl
from pageleap.errors import AlignmentError, PageSizeMismatch, RangeError, UnmappedRange
from pageleap.vmap import map_call_count, region_at

MiB = 1 << 20
P = 4096


def test_reserve_validates():
    with pytest.raises(AlignmentError):
        pl.reserve_region(P + 1)
    with pytest.raises(AlignmentError):
        pl.reserve_region(P, page_size=8192)


def test_zero_length_region():
    with pl.reserve_region(0) as r:
        assert r.n_pages == 0 and r.fully_mapped()


def test_unmapped_region_faults_and_reports_none():
    with pl.reserve_region(4 * P) as r:
        assert r.mapping_of(0) is None
        assert r.probe_write(0) == r.base


def test_map_range_is_one_call(make_store):
    s = make_store(capacity=16 * MiB)
    e = s.allocate(16 * MiB)
    with pl.reserve_region(16 * MiB) as r:
        before = map_call_count()
        r.map_range(0, e)
        assert map_call_count() - before == 1
        assert r.mapping_of(15 * MiB) == (s, 15 * MiB)


def test_map_range_errors(make_store):
    s = make_store(capacity=4 * P)
    with pl.reserve_region(2 * P) as r:
        with pytest.raises(RangeError):
            r.map_range(P, s.allocate(2 * P))
        with pytest.raises(AlignmentError):
            r.map_range(100, s.allocate(P))
        with pytest.raises(UnmappedRange):
            r.protect_range(0, P, pl.Protection.READ_ONLY)
        with pytest.raises(RangeError):
            r.mapping_of(3 * P)


def test_page_size_mismatch(make_store):
    s = make_store(capacity=2 * MiB)
    if pl.mem_file.hugepage_counts()[1] == 0:
        # huge regions can be reserved without huge pages; the mismatch is detected first
        with pl.reserve_region(2 * MiB, page_size=pl.HUGE_PAGE) as r:
            with pytest.raises(PageSizeMismatch):
                r.map_range(0, s.allocate(2 * MiB))
    else:
        pytest.skip("checked above only on hosts without huge pages")


def test_remap_moves_translation_and_keeps_content(make_store):
    a, b = make_store(0, MiB), make_store(1, MiB)
    with pl.reserve_region(MiB) as r:
        r.map_range(0, a.allocate(MiB))
        rng = np.random.default_rng(3)
        data = rng.integers(0, 256, MiB, dtype=np.uint8)
        r.view()[:] = data
        eb = b.allocate(MiB)
        b.view(eb.offset, MiB)[:] = r.view()
        r.map_range(0, eb)
        assert r.mapping_of(0) == (b, eb.offset)
        assert np.array_equal(r.view(), data)
        assert r.node_of(0) == 1


def test_protection_and_probe(make_region):
    r = make_region(MiB)
    r.protect_range(0, 2 * P, pl.Protection.READ_ONLY)
    assert r.protection_of(0) == pl.Protection.READ_ONLY
    assert r.probe_write(P + 3) == r.base + P + 3
    assert r.probe_write(2 * P) is None
    assert r.view()[0] == r.view()[0]  # reads still work
    r.protect_range(0, 2 * P, pl.Protection.READ_WRITE)
    assert r.probe_write(P, 42) is None
    assert r.view()[P] == 42


def test_extents_of_merges_contiguous(make_store):
    s = make_store(capacity=8 * P)
    e = s.allocate(8 * P)
    with pl.reserve_region(4 * P) as r:
        r.map_range(0, pl.Extent(s, 0, 2 * P))
        r.map_range(2 * P, pl.Extent(s, 2 * P, P))
        r.map_range(3 * P, pl.Extent(s, 6 * P, P))
        got = [(x.offset, x.length) for x in r.extents_of(0, 4 * P)]
        assert got == [(0, 3 * P), (6 * P, P)]
    del e


def test_region_registry():
    r = pl.reserve_region(2 * P)
    assert region_at(r.base + P) is r
    r.close()
    assert region_at(r.base + P) is None
