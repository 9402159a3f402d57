"""A columnar miniature of the TPC-H lineitem table and hand-written Q1/Q6 scans.

Numeric columns are fixed-point integers so every aggregate is exact:

* ``L_QUANTITY``: whole units
* ``L_EXTENDEDPRICE``: cents
* ``L_DISCOUNT`` and ``L_TAX``: hundredths

Aggregates come back as :class:`fractions.Fraction`.  Two runs with the same
seed therefore give bit-identical answers, and the naive row-at-a-time
evaluators (built on :mod:`decimal`) can be compared for equality.
"""
from __future__ import annotations

import datetime as _dt
from dataclasses import dataclass
from decimal import Decimal, localcontext
from fractions import Fraction

import numpy as np

from .vmap import VirtualRegion
from .workload import JOURNAL_DTYPE, BurstHandle, WriteJournal

EPOCH = _dt.date(1970, 1, 1)
COLUMN_ALIGN = 64
CHUNK_ROWS = 1 << 20

# name, dtype; order is the in-region layout order
COLUMNS = (
    ("L_ORDERKEY", np.int64),
    ("L_QUANTITY", np.int64),
    ("L_EXTENDEDPRICE", np.int64),
    ("L_DISCOUNT", np.int64),
    ("L_TAX", np.int64),
    ("L_RETURNFLAG", np.uint8),
    ("L_LINESTATUS", np.uint8),
    ("L_SHIPDATE", np.int32),
)
BYTES_PER_ROW = sum(np.dtype(dt).itemsize for _, dt in COLUMNS)


def day(iso: str) -> int:
    """Days since 1970-01-01 for an ISO date."""
    return (_dt.date.fromisoformat(iso) - EPOCH).days


# Standard TPC-H validation parameters
Q1_CUTOFF = day("1998-12-01") - 90
Q6_DATE_LO = day("1994-01-01")
Q6_DATE_HI = day("1995-01-01")
Q6_DISC_LO = 5   # hundredths
Q6_DISC_HI = 7
Q6_QTY_MAX = 24

_START = day("1992-01-01")
_END = day("1998-12-01")
_CURRENT = day("1995-06-17")


@dataclass
class LineitemTable:
    region: VirtualRegion
    row_count: int
    offsets: dict[str, int]
    seed: int

    def column(self, name: str) -> np.ndarray:
        dt = dict(COLUMNS)[name]
        nbytes = self.row_count * np.dtype(dt).itemsize
        return self.region.view(self.offsets[name], nbytes).view(dt)

    @property
    def nbytes(self) -> int:
        return self.row_count * BYTES_PER_ROW


def _layout(rows: int) -> tuple[dict[str, int], int]:
    offsets, pos = {}, 0
    for name, dt in COLUMNS:
        pos = -(-pos // COLUMN_ALIGN) * COLUMN_ALIGN
        offsets[name] = pos
        pos += rows * np.dtype(dt).itemsize
    return offsets, pos


def gen_lineitem(region: VirtualRegion, target_bytes: int | None = None, seed: int = 0) -> LineitemTable:
    """Fill `region` with ``floor(target_bytes / BYTES_PER_ROW)`` rows of lineitem columns."""
    target_bytes = region.length if target_bytes is None else target_bytes
    if target_bytes < 0:
        raise ValueError("target_bytes must be non-negative")
    rows = target_bytes // BYTES_PER_ROW
    offsets, end = _layout(rows)
    if end > region.length:
        raise ValueError(f"region of {region.length} bytes too small for {rows} rows "
                         f"({end} bytes with column alignment)")
    table = LineitemTable(region, rows, offsets, seed)
    rng = np.random.default_rng(seed)
    for lo in range(0, rows, CHUNK_ROWS):
        hi = min(rows, lo + CHUNK_ROWS)
        n = hi - lo
        qty = rng.integers(1, 51, n, dtype=np.int64)
        part_price = rng.integers(90_000, 210_000, n, dtype=np.int64)  # cents
        ship = rng.integers(_START, _END - 90 + 1, n).astype(np.int32)
        receipt = ship + rng.integers(1, 31, n).astype(np.int32)
        flag = np.where(receipt <= _CURRENT,
                        np.where(rng.random(n) < 0.5, ord("R"), ord("A")), ord("N")).astype(np.uint8)
        table.column("L_ORDERKEY")[lo:hi] = np.arange(lo, hi, dtype=np.int64) // 4 * 32 + 1
        table.column("L_QUANTITY")[lo:hi] = qty
        table.column("L_EXTENDEDPRICE")[lo:hi] = qty * part_price // 100
        table.column("L_DISCOUNT")[lo:hi] = rng.integers(0, 11, n, dtype=np.int64)
        table.column("L_TAX")[lo:hi] = rng.integers(0, 9, n, dtype=np.int64)
        table.column("L_RETURNFLAG")[lo:hi] = flag
        table.column("L_LINESTATUS")[lo:hi] = np.where(ship > _CURRENT, ord("O"), ord("F"))
        table.column("L_SHIPDATE")[lo:hi] = ship
    return table


# ---- Q1 ----

@dataclass(frozen=True)
class Q1Group:
    sum_qty: Fraction
    sum_base_price: Fraction
    sum_disc_price: Fraction
    sum_charge: Fraction
    avg_qty: Fraction
    avg_price: Fraction
    avg_disc: Fraction
    count: int


def _q1_group(qty: int, price_c: int, disc_price: int, charge: int, disc: int, count: int) -> Q1Group:
    return Q1Group(
        sum_qty=Fraction(qty),
        sum_base_price=Fraction(price_c, 100),
        sum_disc_price=Fraction(disc_price, 100 * 100),
        sum_charge=Fraction(charge, 100 * 100 * 100),
        avg_qty=Fraction(qty, count),
        avg_price=Fraction(price_c, 100 * count),
        avg_disc=Fraction(disc, 100 * count),
        count=count,
    )


def q1_scan(table: LineitemTable, shipdate_cutoff: int = Q1_CUTOFF) -> dict[tuple[str, str], Q1Group]:
    """Pricing summary report: aggregates per (returnflag, linestatus) for rows shipped by the cutoff."""
    acc: dict[int, list[int]] = {}
    cols = {name: table.column(name) for name, _ in COLUMNS}
    for lo in range(0, table.row_count, CHUNK_ROWS):
        sl = slice(lo, lo + CHUNK_ROWS)
        keep = cols["L_SHIPDATE"][sl] <= shipdate_cutoff
        key = cols["L_RETURNFLAG"][sl][keep].astype(np.int64) * 256 + cols["L_LINESTATUS"][sl][keep]
        qty = cols["L_QUANTITY"][sl][keep]
        price = cols["L_EXTENDEDPRICE"][sl][keep]
        disc = cols["L_DISCOUNT"][sl][keep]
        tax = cols["L_TAX"][sl][keep]
        disc_price = price * (100 - disc)
        charge = disc_price * (100 + tax)
        for k in np.unique(key):
            m = key == k
            sums = (int(qty[m].sum()), int(price[m].sum()), int(disc_price[m].sum()),
                    int(charge[m].sum()), int(disc[m].sum()), int(m.sum()))
            a = acc.setdefault(int(k), [0] * 6)
            for i, v in enumerate(sums):
                a[i] += v
    return {(chr(k >> 8), chr(k & 0xFF)): _q1_group(*v) for k, v in sorted(acc.items())}


# ---- Q6 ----

def q6_scan(table: LineitemTable, date_lo: int = Q6_DATE_LO, date_hi: int = Q6_DATE_HI,
            disc_lo: int = Q6_DISC_LO, disc_hi: int = Q6_DISC_HI,
            qty_max: int = Q6_QTY_MAX) -> Fraction:
    """Forecasting revenue change: sum of price * discount over the selected rows.

    Discount bounds are in hundredths and inclusive; the date range is half open;
    quantity must be strictly below `qty_max`.
    """
    total = 0
    ship = table.column("L_SHIPDATE")
    disc = table.column("L_DISCOUNT")
    qty = table.column("L_QUANTITY")
    price = table.column("L_EXTENDEDPRICE")
    for lo in range(0, table.row_count, CHUNK_ROWS):
        sl = slice(lo, lo + CHUNK_ROWS)
        d = disc[sl]
        m = ((ship[sl] >= date_lo) & (ship[sl] < date_hi) & (d >= disc_lo) & (d <= disc_hi)
             & (qty[sl] < qty_max))
        total += int((price[sl][m] * d[m]).sum())
    return Fraction(total, 100 * 100)


# ---- naive references ----

def _decimal_rows(table: LineitemTable):
    cols = [table.column(n).tolist() for n in ("L_QUANTITY", "L_EXTENDEDPRICE", "L_DISCOUNT",
                                                 "L_TAX", "L_RETURNFLAG", "L_LINESTATUS",
                                                 "L_SHIPDATE")]
    cent = Decimal("0.01")
    for q, p, d, t, f, s, sd in zip(*cols):
        yield Decimal(q), Decimal(p) * cent, Decimal(d) * cent, Decimal(t) * cent, chr(f), chr(s), sd


def q1_reference(table: LineitemTable, shipdate_cutoff: int = Q1_CUTOFF) -> dict[tuple[str, str], Q1Group]:
    """Row-at-a-time Q1 in decimal arithmetic."""
    groups: dict[tuple[str, str], list] = {}
    with localcontext() as ctx:
        ctx.prec = 60
        for q, p, d, t, f, s, sd in _decimal_rows(table):
            if sd > shipdate_cutoff:
                continue
            g = groups.setdefault((f, s), [Decimal(0)] * 5 + [0])
            g[0] += q
            g[1] += p
            g[2] += p * (1 - d)
            g[3] += p * (1 - d) * (1 + t)
            g[4] += d
            g[5] += 1
    out = {}
    for k in sorted(groups):
        sq, sp, sdp, sc, sd_, n = groups[k]
        out[k] = Q1Group(Fraction(sq), Fraction(sp), Fraction(sdp), Fraction(sc),
                         Fraction(sq) / n, Fraction(sp) / n, Fraction(sd_) / n, n)
    return out


def q6_reference(table: LineitemTable, date_lo: int = Q6_DATE_LO, date_hi: int = Q6_DATE_HI,
                 disc_lo: int = Q6_DISC_LO, disc_hi: int = Q6_DISC_HI,
                 qty_max: int = Q6_QTY_MAX) -> Fraction:
    lo_d, hi_d = Decimal(disc_lo) / 100, Decimal(disc_hi) / 100
    total = Decimal(0)
    with localcontext() as ctx:
        ctx.prec = 60
        for q, p, d, _t, _f, _s, sd in _decimal_rows(table):
            if date_lo <= sd < date_hi and lo_d <= d <= hi_d and q < qty_max:
                total += p * d
    return Fraction(total)


# ---- concurrent writes ----

def start_orderkey_writer(table: LineitemTable, count: int, rate: float | None = None,
                          threads: int = 1, seed: int = 0) -> BurstHandle | None:
    """Start `count` journaled writes into L_ORDERKEY of uniformly chosen rows.

    `rate` None runs unpaced.  Returns None when there is nothing to write.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if rate is not None and not rate > 0:
        raise ValueError("rate must be positive (or None for unpaced)")
    if count == 0 or table.row_count == 0:
        return None
    col = table.offsets["L_ORDERKEY"]
    return BurstHandle(table.region.base + col, table.row_count, 8, col, rate, None,
                       threads, seed, journaled=True, max_writes=count, journal_capacity=count)


def orderkey_writer(table: LineitemTable, count: int, rate: float | None = None,
                    threads: int = 1, seed: int = 0) -> WriteJournal:
    h = start_orderkey_writer(table, count, rate, threads, seed)
    if h is None:
        return WriteJournal(np.zeros(0, dtype=JOURNAL_DTYPE))
    _, journal = h.join()
    return journal
