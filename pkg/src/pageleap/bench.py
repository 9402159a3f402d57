"""Experiment harness.

Every experiment emits one record per (method, parameter point, repetition)
and one averaged record per (method, parameter point).  Arms that cannot run
on this host are emitted as records with ``skipped`` set; they never make the
run fail.  Column order is fixed by :data:`FIELDS` for both CSV and JSON.

Exit codes: 0 success (skips included), 1 invalid configuration, 2 a
mandatory arm failed at runtime.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import time
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import baselines, tpch
from .engine import MigrationOptions, MigrationReport, fault_handler, start_migration
from .errors import PageLeapError, StoreError
from .mem_file import HUGE_PAGE, SMALL_PAGE, Backing, PhysicalStore, create_store, hugetlbfs_mount
from .numa_topo import (
    Topology,
    balancing_enabled,
    current_topology,
    detect_topology,
    hugepage_counts,
    pin_to_node,
    set_topology,
)
from .vmap import VirtualRegion, reserve_region
from .workload import BurstHandle, BurstSpec, Pattern, Skew, fill_random, run_access_pattern, start_burst

log = logging.getLogger("pageleap.bench")

KiB, MiB, GiB = 1 << 10, 1 << 20, 1 << 30

EXPERIMENTS = ("E1-access", "E2-baseline", "E3-quiet-sweep", "E4-burst",
               "E5-sustained", "E6-overhead", "E7-tpch")

FIELDS = (
    "experiment", "method", "param", "rep", "mode", "page_size", "region_bytes", "area_bytes",
    "rate", "skew", "seed", "reduction_factor", "timeout_s", "status", "skipped", "elapsed_s",
    "bytes_copied_total", "bytes_copied_extra", "retries", "areas_split", "pages_migrated",
    "pages_pending", "requested_rate", "achieved_rate", "achieved_pct", "page_status", "extra",
)
NUMERIC = ("elapsed_s", "bytes_copied_total", "bytes_copied_extra", "retries", "areas_split",
           "pages_migrated", "pages_pending", "requested_rate", "achieved_rate", "achieved_pct")


SIMULATED_SKIP = "simulated topology: one physical node"


class ConfigError(Exception):
    pass


class ArmFailure(Exception):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    page_size: int = SMALL_PAGE
    region_bytes: int = 256 * MiB
    areas: tuple[int, ...] = ()
    rates: tuple[float, ...] = ()
    skew: Skew | None = None
    seed: int = 0
    reps: int = 3
    timeout_s: float = 10.0
    reduction_factor: int = 2
    mode: str = "auto"
    threads: int = 1
    tpch_writes: int = 1_000_000
    output: str = "csv"

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        if self.reps < 1:
            raise ConfigError("reps must be >= 1")
        if self.page_size not in (SMALL_PAGE, HUGE_PAGE):
            raise ConfigError("page size must be small or huge")
        if self.region_bytes <= 0 or self.region_bytes % self.page_size:
            raise ConfigError("region bytes must be a positive multiple of the page size")
        for a in self.areas:
            if a <= 0 or a % self.page_size:
                raise ConfigError(f"area {a} is not a positive multiple of the page size")
        if any(not r > 0 for r in self.rates):
            raise ConfigError("rates must be positive")
        if self.skew is not None and self.skew.hot_offset + self.skew.hot_bytes >= self.region_bytes:
            raise ConfigError("skew hot range must be smaller than the region")
        if self.timeout_s < 0:
            raise ConfigError("timeout must be non-negative")
        if self.reduction_factor < 2:
            raise ConfigError("reduction factor must be >= 2")
        if self.mode not in ("auto", "real-numa", "simulated"):
            raise ConfigError("mode must be auto, real-numa or simulated")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.output not in ("csv", "json"):
            raise ConfigError("format must be csv or json")

    def default_areas(self) -> tuple[int, ...]:
        if self.areas:
            return self.areas
        if self.experiment == "E3-quiet-sweep":
            if self.page_size == SMALL_PAGE:
                sizes = [4 * KiB * 4 ** k for k in range(11)]      # 4 KiB .. 4 GiB
            else:
                sizes = [2 * MiB * 2 ** k for k in range(8)]       # 2 MiB .. 256 MiB
            return tuple(s for s in sizes if s <= self.region_bytes) or (self.region_bytes,)
        if self.experiment == "E6-overhead":
            sizes = [4 * KiB, 64 * KiB, 1 * MiB, 16 * MiB, 256 * MiB]
            return tuple(s for s in sizes if s % self.page_size == 0 and s <= self.region_bytes)
        return (min(16 * MiB, self.region_bytes),)

    def default_rates(self) -> tuple[float, ...]:
        if self.rates:
            return self.rates
        if self.experiment == "E5-sustained":
            return (1_000.0, 10_000.0, 100_000.0)
        return (1_000.0, 10_000.0, 100_000.0, 1_000_000.0)


# ---- environment ----

def env_check(topo: Topology | None = None) -> dict:
    """What this host can run."""
    topo = topo or detect_topology()
    mount = hugetlbfs_mount()
    huge = {str(n): dict(zip(("total", "free"), hugepage_counts(None if topo.simulated else n)))
            for n in (topo.physical_nodes if not topo.simulated else (0,))}
    balancing = balancing_enabled()
    have_huge = any(v["free"] > 0 for v in huge.values())
    skips = {}
    if topo.simulated:
        skips["os-move-pages"] = "simulated topology: one physical node"
        skips["auto-balance-observe"] = "simulated topology: one physical node"
        skips["performance"] = "timings on one physical node do not reflect remote access"
    elif not balancing:
        skips["auto-balance-observe"] = "automatic NUMA balancing disabled (set kernel.numa_balancing=1)"
    if not have_huge:
        skips["huge-pages"] = ("no free 2 MiB huge pages; reserve them via "
                               "/sys/devices/system/node/node*/hugepages/hugepages-2048kB/nr_hugepages"
                               + ("" if mount else " and mount hugetlbfs (PAGELEAP_HUGETLBFS)"))
    return {
        "nodes": list(topo.nodes),
        "physical_nodes": list(topo.physical_nodes),
        "simulated": topo.simulated,
        "cores_per_node": {str(k): list(v) for k, v in topo.cores_per_node.items()},
        "hugetlbfs_mount": str(mount) if mount else None,
        "hugepages": huge,
        "numa_balancing": balancing,
        "skipped_arms": skips,
        "runnable": list(EXPERIMENTS),
    }


# ---- records ----

def _record(cfg: ExperimentConfig, topo: Topology, method: str, param, rep, **kw) -> dict:
    rec = {f: None for f in FIELDS}
    rec.update(
        experiment=cfg.experiment, method=method, param=param, rep=rep,
        mode="simulated" if topo.simulated else "real-numa",
        page_size=cfg.page_size, region_bytes=cfg.region_bytes, seed=cfg.seed,
        reduction_factor=cfg.reduction_factor, timeout_s=cfg.timeout_s,
        skew=f"{cfg.skew.hot_fraction}:{cfg.skew.hot_bytes}" if cfg.skew else None,
    )
    extra = kw.pop("extra", None)
    rec.update(kw)
    rec["extra"] = extra or {}
    return rec


def _report_fields(rep: MigrationReport) -> dict:
    s = rep.stats
    return dict(
        status=rep.status.value, elapsed_s=s.elapsed, bytes_copied_total=s.bytes_copied_total,
        bytes_copied_extra=s.bytes_copied_extra, retries=s.retries, areas_split=s.areas_split,
        pages_migrated=rep.pages_migrated, pages_pending=rep.pages_pending,
        page_status={"migrated": rep.pages_migrated, "pending": rep.pages_pending},
        extra={"faults": s.faults, "dirty_marks": s.dirty_marks, "sealed_waits": s.sealed_waits,
               "spin_timeouts": s.spin_timeouts, "error": rep.error},
    )


def averaged(records: list[dict]) -> list[dict]:
    """One mean record per (experiment, method, param) over non-skipped repetitions."""
    groups: dict[tuple, list[dict]] = {}
    for r in records:
        groups.setdefault((r["experiment"], r["method"], json.dumps(r["param"])), []).append(r)
    out = []
    for rs in groups.values():
        live = [r for r in rs if not r["skipped"]]
        mean = dict(rs[0], rep="mean", extra={})
        for f in NUMERIC:
            vals = [r[f] for r in live if r[f] is not None]
            mean[f] = float(np.mean(vals)) if vals else None
        if not live:
            mean["skipped"] = rs[0]["skipped"]
        statuses = sorted({r["status"] for r in live if r["status"]})
        mean["status"] = "/".join(statuses) or mean["status"]
        mean["page_status"] = None
        out.append(mean)
    return out


# ---- fixtures ----

class Setup:
    """Source and destination stores plus a populated region on the source."""

    def __init__(self, cfg: ExperimentConfig, topo: Topology, dst_capacity: int | None = None,
                 fill: bool = True):
        backing = Backing.HUGE_FILE if cfg.page_size == HUGE_PAGE else Backing.SHM_FILE
        self.stores: list[PhysicalStore] = []
        self.region: VirtualRegion | None = None
        try:
            self.src = self._store(0, cfg, backing, topo, cfg.region_bytes)
            self.dst = self._store(1, cfg, backing, topo, dst_capacity or cfg.region_bytes)
            self.region = reserve_region(cfg.region_bytes, cfg.page_size)
            self.region.map_range(0, self.src.allocate(cfg.region_bytes, prefault=True))
            self.dst.warm()
            if fill:
                fill_random(self.region.view(), cfg.seed)
        except BaseException:
            self.close()
            raise

    def _store(self, node, cfg, backing, topo, capacity) -> PhysicalStore:
        s = create_store(node, cfg.page_size, capacity, backing, topo)
        self.stores.append(s)
        return s

    def close(self) -> None:
        if self.region is not None:
            self.region.close()
        for s in self.stores:
            s.close()

    def __enter__(self) -> "Setup":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def _options(cfg: ExperimentConfig, area: int) -> MigrationOptions:
    return MigrationOptions(initial_area=area, reduction_factor=cfg.reduction_factor,
                            timeout=cfg.timeout_s)


# ---- experiments ----

def _e1(cfg, topo) -> Iterator[dict]:
    home = pin_to_node(0, topo)
    for rep in range(cfg.reps):
        for node in (0, 1):
            c = dataclasses.replace(cfg, seed=cfg.seed + rep)
            backing = Backing.HUGE_FILE if cfg.page_size == HUGE_PAGE else Backing.SHM_FILE
            with create_store(node, cfg.page_size, cfg.region_bytes, backing, topo) as store, \
                    reserve_region(cfg.region_bytes, cfg.page_size) as region:
                region.map_range(0, store.allocate(cfg.region_bytes, prefault=True))
                fill_random(region.view(), c.seed)
                for pat in Pattern:
                    res = run_access_pattern(region, pat, 10_000_000, seed=c.seed)
                    yield _record(cfg, topo, f"{'local' if node == 0 else 'remote'}", pat.value, rep,
                                  status="ok", elapsed_s=res.elapsed,
                                  extra={"accesses": res.accesses, "checksum": res.checksum,
                                         "core": home, "data_node": node})


def _e2(cfg, topo) -> Iterator[dict]:
    area = cfg.default_areas()[0]
    for rep in range(cfg.reps):
        with Setup(cfg, topo, dst_capacity=cfg.region_bytes) as st:
            pin_to_node(1, topo)
            for pooled in (False, True):
                res = baselines.raw_copy(st.region, st.dst, pooled)
                yield _record(cfg, topo, res.method.value, None, rep, status="ok",
                              elapsed_s=res.elapsed, page_status=res.outcomes())
            res = baselines.os_move_pages(st.region, 1, topo)
            yield _baseline_record(cfg, topo, res, None, rep, 1)
            rep_ = start_migration(st.region, st.dst, _options(cfg, area)).wait()
            _require(rep_)
            yield _record(cfg, topo, "page-leap", None, rep, area_bytes=area, **_report_fields(rep_))


def _baseline_record(cfg, topo, res, param, rep, dst_node) -> dict:
    if res.skipped:
        return _record(cfg, topo, res.method.value, param, rep, status="skipped", skipped=res.skipped)
    moved = res.moved(topo.physical_node(dst_node))
    return _record(cfg, topo, res.method.value, param, rep,
                   status="timed-out" if res.timed_out else "ok", elapsed_s=res.elapsed,
                   pages_migrated=moved, pages_pending=res.pages - moved,
                   page_status=res.outcomes(topo.physical_node(dst_node)))


def _require(rep: MigrationReport) -> None:
    if rep.error is not None:
        raise ArmFailure(f"page-leap failed: {rep.error}")


def _e3(cfg, topo) -> Iterator[dict]:
    for area in cfg.default_areas():
        for rep in range(cfg.reps):
            with Setup(cfg, topo) as st:
                r = start_migration(st.region, st.dst, _options(cfg, area)).wait()
                _require(r)
                yield _record(cfg, topo, "page-leap", area, rep, area_bytes=area, **_report_fields(r))


def _burst_arm(cfg, topo, rate: float, area: int, sustained: bool, rep: int) -> dict:
    with Setup(cfg, topo) as st:
        spec = BurstSpec(rate=rate, duration=None, skew=cfg.skew, threads=cfg.threads,
                         seed=cfg.seed + rep)
        burst = start_burst(st.region, spec)
        t_burst = time.perf_counter()
        try:
            job = start_migration(st.region, st.dst, _options(cfg, area))
            r = job.wait()
            if sustained:
                remaining = cfg.timeout_s - (time.perf_counter() - t_burst)
                if remaining > 0:
                    time.sleep(remaining)
        finally:
            burst.stop()
            sample, _ = burst.join()
        _require(r)
        rec = _record(cfg, topo, "page-leap", rate, rep, area_bytes=area, rate=rate,
                      requested_rate=sample.requested, achieved_rate=sample.achieved,
                      achieved_pct=sample.achieved_pct, **_report_fields(r))
        rec["extra"]["burst_writes"] = sample.writes
        return rec


def _e4(cfg, topo, sustained=False) -> Iterator[dict]:
    area = cfg.default_areas()[0]
    for rate in cfg.default_rates():
        for rep in range(cfg.reps):
            yield _burst_arm(cfg, topo, rate, area, sustained, rep)
            if topo.simulated:
                yield _record(cfg, topo, baselines.Method.OS_MOVE_PAGES.value, rate, rep, rate=rate,
                              status="skipped", skipped=SIMULATED_SKIP)
            else:
                yield _os_burst(cfg, topo, rate, rep)
            yield _autobalance(cfg, topo, rate, rep)


def _anon_burst(cfg, topo, rate, rep, body: Callable[[baselines.AnonBuffer], baselines.BaselineResult]):
    with baselines.AnonBuffer(cfg.region_bytes, transparent_huge=cfg.page_size == HUGE_PAGE) as buf:
        fill_random(buf.view(), cfg.seed)
        words = cfg.region_bytes // 8
        skew = cfg.skew
        h = BurstHandle(buf.base, words, 8, 0, rate, None, cfg.threads, cfg.seed + rep, False, skew=skew)
        try:
            res = body(buf)
        finally:
            h.stop()
            sample, _ = h.join()
    rec = _baseline_record(cfg, topo, res, rate, rep, 1)
    rec.update(rate=rate, requested_rate=sample.requested, achieved_rate=sample.achieved,
               achieved_pct=sample.achieved_pct)
    return rec


def _os_burst(cfg, topo, rate, rep) -> dict:
    return _anon_burst(cfg, topo, rate, rep, lambda buf: baselines.os_move_pages(buf, 1, topo))


def _autobalance(cfg, topo, rate, rep) -> dict:
    reason = SIMULATED_SKIP if topo.simulated else (
        None if balancing_enabled() else "automatic NUMA balancing disabled (set kernel.numa_balancing=1)")
    if reason:
        return _record(cfg, topo, baselines.Method.AUTO_BALANCE.value, rate, rep, rate=rate,
                       status="skipped", skipped=reason)

    def body(buf):
        # writer threads inherit the caller's affinity; run them from the destination node
        pin_to_node(1, topo)
        return baselines.observe_autobalance(buf, 1, timeout=cfg.timeout_s, topo=topo)

    return _anon_burst(cfg, topo, rate, rep, body)


def _e6(cfg, topo) -> Iterator[dict]:
    for area in cfg.default_areas():
        for rep in range(cfg.reps):
            with Setup(cfg, topo) as st:
                r = start_migration(st.region, st.dst, _options(cfg, area)).wait()
                _require(r)
            # matched raw copy: the same number of bytes into pooled memory
            with Setup(cfg, topo) as st:
                base = baselines.raw_copy(st.region, st.dst, pooled=True)
            total = r.stats.bytes_copied_total
            ratio = total / cfg.region_bytes
            rec = _record(cfg, topo, "page-leap", area, rep, area_bytes=area, **_report_fields(r))
            rec["extra"].update(raw_copy_s=base.elapsed * ratio,
                                time_overhead_s=r.stats.elapsed - base.elapsed * ratio,
                                extra_pct=100.0 * r.stats.bytes_copied_extra / cfg.region_bytes)
            yield rec


def _e7(cfg, topo) -> Iterator[dict]:
    area = cfg.default_areas()[0]
    for writes in (0, cfg.tpch_writes):
        method = "tpch-quiet" if writes == 0 else "tpch-orderkey-writes"
        for rep in range(cfg.reps):
            with Setup(cfg, topo, fill=False) as st:
                table = tpch.gen_lineitem(st.region, cfg.region_bytes - 8 * tpch.COLUMN_ALIGN,
                                          seed=cfg.seed)
                q1_ref, q6_ref = tpch.q1_scan(table), tpch.q6_scan(table)
                t0 = time.perf_counter()
                job = start_migration(st.region, st.dst, _options(cfg, area))
                writer = tpch.start_orderkey_writer(table, writes, None, cfg.threads, cfg.seed + rep)
                times, same = [], True
                for _ in range(5):
                    q0 = time.perf_counter()
                    same &= tpch.q1_scan(table) == q1_ref
                    same &= tpch.q6_scan(table) == q6_ref
                    times.append(time.perf_counter() - q0)
                r = job.wait()
                total = time.perf_counter() - t0
                n_writes = 0
                if writer is not None:
                    _, journal = writer.join()
                    n_writes = len(journal)
                _require(r)
                rec = _record(cfg, topo, method, writes, rep, area_bytes=area, **_report_fields(r))
                rec["extra"].update(query_s=times, total_s=total, results_equal=bool(same),
                                    orderkey_writes=n_writes, rows=table.row_count)
                yield rec


RUNNERS: dict[str, Callable] = {
    "E1-access": _e1,
    "E2-baseline": _e2,
    "E3-quiet-sweep": _e3,
    "E4-burst": _e4,
    "E5-sustained": lambda cfg, topo: _e4(cfg, topo, sustained=True),
    "E6-overhead": _e6,
    "E7-tpch": _e7,
}


def _topology(mode: str) -> Topology:
    topo = detect_topology(force_simulated=mode == "simulated")
    set_topology(topo)
    return topo


def run(cfg: ExperimentConfig) -> list[dict]:
    """Run one experiment; returns per-repetition records followed by averages."""
    previous = current_topology()
    topo = _topology(cfg.mode)
    try:
        with fault_handler():
            return _run(cfg, topo)
    finally:
        set_topology(previous)


def _run(cfg: ExperimentConfig, topo: Topology) -> list[dict]:
    records: list[dict] = []
    if cfg.mode == "real-numa" and topo.simulated:
        records.append(_record(cfg, topo, "all", None, 0, status="skipped",
                               skipped="real NUMA requested but the host has one memory node"))
        return records
    try:
        for rec in RUNNERS[cfg.experiment](cfg, topo):
            log.info("%s %s %s rep=%s %s", rec["experiment"], rec["method"], rec["param"],
                     rec["rep"], rec["status"])
            records.append(rec)
    except StoreError as exc:
        # missing huge pages and the like: the whole arm set cannot run here
        if cfg.page_size == HUGE_PAGE:
            records.append(_record(cfg, topo, "all", None, 0, status="skipped", skipped=str(exc)))
        else:
            raise ArmFailure(str(exc)) from exc
    except PageLeapError as exc:
        raise ArmFailure(str(exc)) from exc
    return records + averaged(records)


# ---- output ----

def _cell(v):
    if isinstance(v, (dict, list)):
        return json.dumps(v, sort_keys=True)
    return "" if v is None else v


def to_csv(records: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(FIELDS)
    for r in records:
        w.writerow([_cell(r.get(f)) for f in FIELDS])
    return buf.getvalue()


def to_json(records: list[dict]) -> str:
    return json.dumps({"fields": list(FIELDS), "records": [{f: r.get(f) for f in FIELDS} for r in records]},
                      indent=1, default=str)


# ---- CLI ----

def _size(text: str) -> int:
    text = text.strip().lower()
    units = {"k": KiB, "kib": KiB, "m": MiB, "mib": MiB, "g": GiB, "gib": GiB, "b": 1}
    for suffix in sorted(units, key=len, reverse=True):
        if text.endswith(suffix):
            return int(float(text[: -len(suffix)]) * units[suffix])
    return int(text)


def _rate(text: str) -> float:
    text = text.strip().lower()
    mult = {"k": 1e3, "m": 1e6}.get(text[-1:], 1)
    return float(text[:-1] if mult != 1 else text) * mult


def _skew(text: str) -> Skew:
    frac, _, nbytes = text.partition(":")
    return Skew(float(frac), _size(nbytes))


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 for configuration errors
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pageleap", description="NUMA page migration experiments")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--env-check", action="store_true", help="print host capabilities and exit")
    p.add_argument("--page-size", choices=("small", "huge"), default="small")
    p.add_argument("--region-bytes", type=_size, default=256 * MiB)
    p.add_argument("--areas", type=lambda s: tuple(_size(x) for x in s.split(",")), default=())
    p.add_argument("--rates", type=lambda s: tuple(_rate(x) for x in s.split(",")), default=())
    p.add_argument("--skew", type=_skew, default=None, help="hot fraction and hot bytes, e.g. 0.75:8M")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--timeout-s", type=float, default=10.0)
    p.add_argument("--reduction-factor", type=int, default=2)
    p.add_argument("--mode", choices=("auto", "real-numa", "simulated"), default="auto")
    p.add_argument("--threads", type=int, default=1, help="writer threads for bursts")
    p.add_argument("--tpch-writes", type=int, default=1_000_000)
    p.add_argument("--out", default="-")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
        if args.env_check:
            print(json.dumps(env_check(_topology(args.mode)), indent=1))
            return 0
        if args.experiment is None:
            raise ConfigError("--experiment is required")
        cfg = ExperimentConfig(
            experiment=args.experiment,
            page_size=HUGE_PAGE if args.page_size == "huge" else SMALL_PAGE,
            region_bytes=args.region_bytes, areas=args.areas, rates=args.rates, skew=args.skew,
            seed=args.seed, reps=args.reps, timeout_s=args.timeout_s,
            reduction_factor=args.reduction_factor, mode=args.mode, threads=args.threads,
            tpch_writes=args.tpch_writes, output=args.format,
        )
    except (ConfigError, ValueError) as exc:
        print(f"pageleap: configuration error: {exc}", file=sys.stderr)
        return 1
    try:
        records = run(cfg)
    except ArmFailure as exc:
        print(f"pageleap: runtime failure: {exc}", file=sys.stderr)
        return 2
    text = to_csv(records) if cfg.output == "csv" else to_json(records)
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
    return 0
