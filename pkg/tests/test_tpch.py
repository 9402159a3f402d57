from fractions import Fraction

import numpy as np
import pytest

import pageleap as pl
from pageleap import tpch

MiB = 1 << 20


@pytest.fixture
def table(make_region):
    r = make_region(MiB, fill=False)
    return tpch.gen_lineitem(r, 10_000 * tpch.BYTES_PER_ROW, seed=11)


def one_row_table(make_region, **vals):
    r = make_region(64 * 1024, fill=False)
    t = tpch.gen_lineitem(r, tpch.BYTES_PER_ROW)
    for name, v in vals.items():
        t.column(name)[0] = v
    return t


def test_row_count_and_domains(table):
    assert table.row_count == 10_000
    assert tpch.BYTES_PER_ROW == 46
    q = table.column("L_QUANTITY")
    d = table.column("L_DISCOUNT")
    assert q.min() >= 1 and q.max() <= 50
    assert d.min() >= 0 and d.max() <= 10
    assert set(np.unique(table.column("L_RETURNFLAG"))) <= {ord("A"), ord("N"), ord("R")}
    assert set(np.unique(table.column("L_LINESTATUS"))) <= {ord("F"), ord("O")}


def test_row_count_formula(make_region):
    r = make_region(MiB, fill=False)
    assert tpch.gen_lineitem(r, 999_999).row_count == 999_999 // 46
    with pytest.raises(ValueError):
        tpch.gen_lineitem(r, 2 * MiB)


def test_determinism(make_region):
    a = tpch.gen_lineitem(make_region(MiB, fill=False), 500_000, seed=3)
    b = tpch.gen_lineitem(make_region(MiB, fill=False), 500_000, seed=3)
    assert np.array_equal(a.region.view(), b.region.view())
    assert tpch.q1_scan(a) == tpch.q1_scan(b)


def test_empty_table(make_region):
    t = tpch.gen_lineitem(make_region(64 * 1024, fill=False), 0)
    assert tpch.q1_scan(t) == {}
    assert tpch.q6_scan(t) == 0


def test_q1_single_row(make_region):
    t = one_row_table(make_region, L_RETURNFLAG=ord("A"), L_LINESTATUS=ord("F"), L_QUANTITY=10,
                      L_EXTENDEDPRICE=100_00, L_DISCOUNT=5, L_TAX=2, L_SHIPDATE=tpch.day("1995-01-01"))
    g = tpch.q1_scan(t)[("A", "F")]
    assert g.sum_disc_price == 95
    assert g.sum_charge == Fraction("96.9")
    assert g.count == 1 and g.avg_disc == Fraction("0.05")


def test_q6_single_row(make_region):
    t = one_row_table(make_region, L_EXTENDEDPRICE=100_00, L_DISCOUNT=6, L_QUANTITY=10,
                      L_SHIPDATE=tpch.day("1994-06-01"))
    assert tpch.q6_scan(t) == 6
    t.column("L_SHIPDATE")[0] = tpch.day("1995-01-01")
    assert tpch.q6_scan(t) == 0


def test_queries_match_naive_reference(table):
    assert tpch.q1_scan(table) == tpch.q1_reference(table)
    assert tpch.q6_scan(table) == tpch.q6_reference(table)
    assert tpch.q1_scan(table, tpch.day("1993-01-01")) == tpch.q1_reference(table, tpch.day("1993-01-01"))


def test_orderkey_writer_confined_to_column(table):
    region = table.region
    snap = region.view().copy()
    q1, q6 = tpch.q1_scan(table), tpch.q6_scan(table)
    journal = tpch.orderkey_writer(table, 20_000, threads=2, seed=4)
    assert len(journal) == 20_000
    lo = table.offsets["L_ORDERKEY"]
    assert (journal.offsets >= lo).all() and (journal.offsets < lo + 8 * table.row_count).all()
    assert np.array_equal(journal.replay(snap), region.view())
    assert tpch.q1_scan(table) == q1 and tpch.q6_scan(table) == q6


def test_orderkey_writer_zero_and_paced(table):
    assert len(tpch.orderkey_writer(table, 0)) == 0
    assert len(tpch.orderkey_writer(table, 3, threads=8)) == 3
    assert len(tpch.orderkey_writer(table, 500, rate=50_000)) == 500
    with pytest.raises(ValueError):
        tpch.orderkey_writer(table, -1)


def test_queries_unchanged_by_migration(table, make_store):
    dst = make_store(1, table.region.length)
    q1 = tpch.q1_scan(table)
    assert pl.page_leap(table.region, dst).pages_pending == 0
    assert tpch.q1_scan(table) == q1
