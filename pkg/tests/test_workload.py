import math
import threading

import numpy as np
import pytest

from pageleap.workload import (
    JOURNAL_DTYPE,
    BurstSpec,
    Pattern,
    Skew,
    WriteJournal,
    random_offsets,
    run_access_pattern,
    run_burst,
)

MiB = 1 << 20


def test_access_pattern_counts_and_determinism(make_region):
    r = make_region(4 * MiB)
    seq = run_access_pattern(r, "seq-read")
    assert seq.accesses == 4 * MiB
    assert seq.checksum == int(r.view().sum(dtype=np.uint64))
    a = run_access_pattern(r, Pattern.RAND_READ, 10_000, seed=4)
    b = run_access_pattern(r, Pattern.RAND_READ, 10_000, seed=4)
    assert a.accesses == 10_000 and a.checksum == b.checksum
    assert np.array_equal(random_offsets(r.length, 1000, 4), random_offsets(r.length, 1000, 4))
    offs = random_offsets(r.length, 100_000, 1)
    assert offs.max() < r.length
    # roughly uniform: each 16th of the region gets its share
    counts = np.bincount((offs * 16 // r.length).astype(np.int64), minlength=16)
    assert counts.min() > 0.9 * 100_000 / 16


def test_rand_read_checksum_matches_numpy(make_region):
    r = make_region(MiB)
    res = run_access_pattern(r, "rand-read", 5000, seed=2)
    offs = random_offsets(r.length, 5000, 2).astype(np.int64)
    assert res.checksum == int(r.view()[offs].astype(np.uint64).sum())


def test_write_patterns_touch_expected_bytes(make_region):
    r = make_region(MiB)
    assert run_access_pattern(r, "seq-write", seed=3).accesses == MiB
    assert np.array_equal(r.view(), ((np.arange(MiB) + 3) % 256).astype(np.uint8))
    before = r.view().copy()
    run_access_pattern(r, "rand-write", 20_000, seed=8)
    offs = random_offsets(r.length, 20_000, 8).astype(np.int64)
    expect = before.copy()
    np.add.at(expect, offs, np.uint8(1))
    assert np.array_equal(r.view(), expect)


def test_burst_spec_validation():
    with pytest.raises(ValueError):
        BurstSpec(rate=0)
    with pytest.raises(ValueError):
        BurstSpec(rate=10, threads=0)
    with pytest.raises(ValueError):
        Skew(1.0, 10)
    with pytest.raises(ValueError):
        Skew(0.5, 0)


def test_until_stopped_needs_stop_event(make_region):
    with pytest.raises(ValueError):
        run_burst(make_region(MiB), BurstSpec(rate=10, duration=None))


def test_skew_must_fit(make_region):
    r = make_region(MiB)
    with pytest.raises(ValueError):
        run_burst(r, BurstSpec(rate=10, skew=Skew(0.5, MiB)))


def test_pacing_is_honest(make_region):
    r = make_region(4 * MiB)
    sample, journal = run_burst(r, BurstSpec(rate=10_000, duration=1.0))
    assert journal is None
    assert abs(sample.achieved_pct - 100) <= 2
    assert sample.achieved_pct == pytest.approx(100 * sample.achieved / sample.requested)


def test_journal_completeness_and_replay(make_region):
    r = make_region(2 * MiB, seed=1)
    snap = r.view().copy()
    sample, journal = run_burst(r, BurstSpec(rate=50_000, duration=0.3, threads=3, journaled=True))
    assert len(journal) == sample.writes and not sample.journal_full
    e = journal.entries
    assert (np.diff(e["seq"].astype(np.int64)) > 0).all()
    for t in range(3):
        seqs = e["seq"][e["thread"] == t]
        assert (np.diff(seqs.astype(np.int64)) > 0).all()
    assert (e["offset"] % 8 == 0).all() and (e["offset"] < r.length).all()
    assert journal.chain_errors(snap) == []
    assert np.array_equal(journal.replay(snap), r.view())


def test_skewed_offsets_concentrate(make_region):
    r = make_region(32 * MiB)
    hot = 1 * MiB
    sample, journal = run_burst(r, BurstSpec(rate=100_000, duration=0.2, journaled=True,
                                             skew=Skew(0.75, hot, hot_offset=4 * MiB)))
    n = len(journal)
    assert n >= 10_000
    in_hot = np.count_nonzero((journal.offsets >= 4 * MiB) & (journal.offsets < 5 * MiB))
    # 75 % direct plus the uniform remainder's share; 4 sigma binomial margin
    p = 0.75 + 0.25 * hot / r.length
    assert in_hot / n >= p - 4 * math.sqrt(p * (1 - p) / n)
    assert in_hot / n >= 0.70


def test_stop_event_ends_burst(make_region):
    r = make_region(MiB)
    stop = threading.Event()
    threading.Timer(0.1, stop.set).start()
    sample, _ = run_burst(r, BurstSpec(rate=1000, duration=None), stop=stop)
    assert 0.05 < sample.elapsed < 1.0


def test_journal_binary_roundtrip(tmp_path, make_region):
    r = make_region(MiB)
    _, journal = run_burst(r, BurstSpec(rate=20_000, duration=0.05, journaled=True))
    path = tmp_path / "j.bin"
    journal.save(path)
    assert path.stat().st_size == len(journal) * 40
    back = WriteJournal.load(path)
    assert np.array_equal(back.entries, journal.entries)
    raw = np.frombuffer(path.read_bytes(), dtype=JOURNAL_DTYPE)
    assert raw.dtype.fields["seq"][0].str == "<u8"


def test_replay_last_write_wins():
    snap = np.zeros(32, dtype=np.uint8)
    e = np.zeros(3, dtype=JOURNAL_DTYPE)
    e["seq"] = [2, 0, 1]
    e["offset"] = [8, 8, 16]
    e["new"] = [7, 5, 3]
    out = WriteJournal(e).replay(snap).view("<u8")
    assert list(out) == [0, 7, 3, 0]
