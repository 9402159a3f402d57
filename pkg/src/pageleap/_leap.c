/* Native core of pageleap: write-fault handler, area state machine,
 * per-area migration step, paced writers and access kernels.
 *
 * Everything here runs without the Python GIL.  The fault handler only
 * touches atomics, calls mprotect and yields, so it is safe to run on a
 * thread that was interrupted while holding the GIL.
 */
#define _GNU_SOURCE
#include <errno.h>
#include <setjmp.h>
#include <sched.h>
#include <signal.h>
#include <stdint.h>
#include <string.h>
#include <sys/mman.h>
#include <sys/syscall.h>
#include <time.h>
#include <unistd.h>

enum {
    ST_IDLE = 0,
    ST_COPYING = 1,
    ST_SEALED = 2,
    ST_REMAPPING = 3,
    ST_REMAPPED = 4,
    ST_DIRTY = 5,
};

enum { MIGRATE_REMAPPED = 0, MIGRATE_DIRTY = 1, MIGRATE_ERROR = -1 };

#define STATE_BITS 8
#define STATE_MASK 0xffULL

/* area state word: (version << 8) | state */
#define W_STATE(w) ((int)((w) & STATE_MASK))
#define W_VER(w) ((w) >> STATE_BITS)
#define W_MAKE(v, s) (((uint64_t)(v) << STATE_BITS) | (uint64_t)(s))

typedef struct {
    uint64_t slot;
    uint64_t version; /* version reached by this transition */
    uint32_t from;
    uint32_t to;
} leap_trans;

typedef struct {
    uintptr_t base;
    uint64_t length;
    uint64_t page_size;
    int32_t *page_area;  /* page index -> area slot */
    uint64_t *area_state;
    uint64_t *area_off;
    uint64_t *area_len;
    uint64_t n_slots;
    int64_t spin_ns;
    int protect; /* 0: handler logic without mprotect (model checking) */
    /* counters */
    uint64_t faults;
    uint64_t dirty_marks;
    uint64_t sealed_waits;
    uint64_t spin_timeouts;
    uint64_t inflight;
    uint64_t illegal;
    /* optional transition log */
    leap_trans *log;
    uint64_t log_cap;
    uint64_t log_len;
} leap_job;

typedef struct {
    uintptr_t base;
    uint64_t length;
    uint64_t page_size;
    uint8_t *prot; /* per-page protection shadow kept by the region owner */
    leap_job *job; /* attached migration job or NULL */
} leap_region;

#define MAX_REGIONS 4096
#define PROT_SHADOW_WRITE 2

static leap_region *regions[MAX_REGIONS];
static struct sigaction prev_segv;
static struct sigaction prev_bus;
static int installed = 0;
static uint64_t map_calls = 0;
static uint64_t foreign_faults = 0;
static uint64_t stale_faults = 0;

static __thread sigjmp_buf probe_env;
static __thread volatile int probe_armed = 0;
static __thread volatile uintptr_t probe_addr = 0;

static inline int64_t now_ns(void)
{
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return (int64_t)ts.tv_sec * 1000000000LL + ts.tv_nsec;
}

int leap_legal(int from, int to)
{
    switch (from) {
    case ST_IDLE:
        return to == ST_COPYING;
    case ST_COPYING:
        return to == ST_SEALED || to == ST_DIRTY;
    case ST_SEALED:
        /* Sealed -> Dirty only from the handler once its spin bound expires */
        return to == ST_REMAPPING || to == ST_DIRTY;
    case ST_REMAPPING:
        return to == ST_REMAPPED;
    case ST_DIRTY:
        return to == ST_IDLE;
    default:
        return 0;
    }
}

/* CAS the slot from `from` to `to`. Returns 1 on success, 0 when the slot
 * is not in `from`, -1 when the requested transition is illegal. */
int leap_transition(leap_job *job, uint64_t slot, int from, int to)
{
    if (!leap_legal(from, to)) {
        __atomic_fetch_add(&job->illegal, 1, __ATOMIC_SEQ_CST);
        return -1;
    }
    uint64_t *p = &job->area_state[slot];
    uint64_t w = __atomic_load_n(p, __ATOMIC_SEQ_CST);
    for (;;) {
        if (W_STATE(w) != from)
            return 0;
        uint64_t nw = W_MAKE(W_VER(w) + 1, to);
        if (__atomic_compare_exchange_n(p, &w, nw, 0, __ATOMIC_SEQ_CST,
                                        __ATOMIC_SEQ_CST)) {
            if (job->log) {
                uint64_t i = __atomic_fetch_add(&job->log_len, 1, __ATOMIC_SEQ_CST);
                if (i < job->log_cap) {
                    job->log[i].slot = slot;
                    job->log[i].version = W_VER(nw);
                    job->log[i].from = (uint32_t)from;
                    job->log[i].to = (uint32_t)to;
                }
            }
            return 1;
        }
    }
}

int leap_state(leap_job *job, uint64_t slot)
{
    return W_STATE(__atomic_load_n(&job->area_state[slot], __ATOMIC_SEQ_CST));
}

static void unprotect_slot(leap_job *job, uint64_t slot)
{
    if (job->protect)
        mprotect((void *)(job->base + job->area_off[slot]), job->area_len[slot],
                 PROT_READ | PROT_WRITE);
}

/* Handler core. Returns the state observed when the fault was resolved. */
int leap_resolve(leap_job *job, uintptr_t addr)
{
    __atomic_fetch_add(&job->inflight, 1, __ATOMIC_SEQ_CST);
    __atomic_fetch_add(&job->faults, 1, __ATOMIC_RELAXED);
    uint64_t page = (addr - job->base) / job->page_size;
    uint64_t slot = (uint64_t)__atomic_load_n(&job->page_area[page], __ATOMIC_SEQ_CST);
    int seen;
    int64_t deadline = 0;
    for (;;) {
        seen = leap_state(job, slot);
        if (seen == ST_COPYING) {
            int r = leap_transition(job, slot, ST_COPYING, ST_DIRTY);
            if (r == 1) {
                __atomic_fetch_add(&job->dirty_marks, 1, __ATOMIC_RELAXED);
                unprotect_slot(job, slot);
                break;
            }
            continue;
        }
        if (seen == ST_SEALED || seen == ST_REMAPPING) {
            if (deadline == 0) {
                deadline = now_ns() + job->spin_ns;
                __atomic_fetch_add(&job->sealed_waits, 1, __ATOMIC_RELAXED);
            }
            if (seen == ST_SEALED && now_ns() > deadline) {
                if (leap_transition(job, slot, ST_SEALED, ST_DIRTY) == 1) {
                    __atomic_fetch_add(&job->spin_timeouts, 1, __ATOMIC_RELAXED);
                    unprotect_slot(job, slot);
                    break;
                }
                continue;
            }
            sched_yield();
            continue;
        }
        /* Idle (protected, not yet copying), Dirty (another thread is
         * unprotecting) or Remapped: let the write retry. */
        if (seen != ST_REMAPPED)
            sched_yield();
        break;
    }
    __atomic_fetch_sub(&job->inflight, 1, __ATOMIC_SEQ_CST);
    return seen;
}

static leap_region *find_region(uintptr_t addr)
{
    for (int i = 0; i < MAX_REGIONS; i++) {
        leap_region *r = __atomic_load_n(&regions[i], __ATOMIC_ACQUIRE);
        if (r && addr >= r->base && addr < r->base + r->length)
            return r;
    }
    return NULL;
}

static void chain(struct sigaction *prev, int sig, siginfo_t *si, void *uc)
{
    if (prev->sa_flags & SA_SIGINFO) {
        if (prev->sa_sigaction) {
            prev->sa_sigaction(sig, si, uc);
            return;
        }
    } else if (prev->sa_handler != SIG_DFL && prev->sa_handler != SIG_IGN) {
        prev->sa_handler(sig);
        return;
    }
    /* default disposition: re-fault with the default action in place */
    signal(sig, SIG_DFL);
}

static void on_fault(int sig, siginfo_t *si, void *uc)
{
    int saved = errno;
    uintptr_t addr = (uintptr_t)si->si_addr;
    leap_region *r = find_region(addr);
    if (r) {
        leap_job *job = __atomic_load_n(&r->job, __ATOMIC_SEQ_CST);
        if (job) {
            leap_resolve(job, addr);
            errno = saved;
            return;
        }
        if (r->prot[(addr - r->base) / r->page_size] & PROT_SHADOW_WRITE) {
            /* fault raised while a finished job still had the page
             * protected; the page is writable now */
            __atomic_fetch_add(&stale_faults, 1, __ATOMIC_RELAXED);
            errno = saved;
            return;
        }
    }
    if (probe_armed) {
        probe_addr = addr;
        probe_armed = 0;
        siglongjmp(probe_env, 1);
    }
    __atomic_fetch_add(&foreign_faults, 1, __ATOMIC_RELAXED);
    chain(sig == SIGBUS ? &prev_bus : &prev_segv, sig, si, uc);
    errno = saved;
}

int leap_install(void)
{
    if (installed)
        return -EEXIST;
    struct sigaction sa;
    memset(&sa, 0, sizeof sa);
    sa.sa_sigaction = on_fault;
    sa.sa_flags = SA_SIGINFO | SA_NODEFER | SA_RESTART;
    sigemptyset(&sa.sa_mask);
    if (sigaction(SIGSEGV, &sa, &prev_segv) != 0)
        return -errno;
    if (sigaction(SIGBUS, &sa, &prev_bus) != 0) {
        int e = errno;
        sigaction(SIGSEGV, &prev_segv, NULL);
        return -e;
    }
    installed = 1;
    return 0;
}

int leap_uninstall(void)
{
    if (!installed)
        return -ENOENT;
    for (int i = 0; i < MAX_REGIONS; i++) {
        leap_region *r = __atomic_load_n(&regions[i], __ATOMIC_ACQUIRE);
        if (r && __atomic_load_n(&r->job, __ATOMIC_SEQ_CST))
            return -EBUSY;
    }
    sigaction(SIGSEGV, &prev_segv, NULL);
    sigaction(SIGBUS, &prev_bus, NULL);
    installed = 0;
    return 0;
}

int leap_installed(void) { return installed; }

int leap_region_register(leap_region *r)
{
    for (int i = 0; i < MAX_REGIONS; i++) {
        leap_region *expected = NULL;
        if (__atomic_compare_exchange_n(&regions[i], &expected, r, 0,
                                        __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST))
            return i;
    }
    return -ENOSPC;
}

void leap_region_unregister(int idx)
{
    if (idx >= 0 && idx < MAX_REGIONS)
        __atomic_store_n(&regions[idx], NULL, __ATOMIC_SEQ_CST);
}

/* Attach a job to a region; fails with -EBUSY if one is attached. */
int leap_attach(leap_region *r, leap_job *job)
{
    leap_job *expected = NULL;
    if (!__atomic_compare_exchange_n(&r->job, &expected, job, 0, __ATOMIC_SEQ_CST,
                                     __ATOMIC_SEQ_CST))
        return -EBUSY;
    return 0;
}

/* Detach after the caller restored write access everywhere. Handlers that
 * already loaded the job pointer finish against it; the caller keeps the
 * job memory alive for the region's lifetime. */
void leap_detach(leap_region *r, leap_job *job)
{
    __atomic_store_n(&r->job, NULL, __ATOMIC_SEQ_CST);
    while (__atomic_load_n(&job->inflight, __ATOMIC_SEQ_CST) != 0)
        sched_yield();
}

/* Write one byte at addr.  Returns 0 when the write went through, 1 when it
 * raised an unresolved fault (fault address stored in *fault_addr). */
int leap_probe_write(uintptr_t addr, uint8_t value, uintptr_t *fault_addr)
{
    if (sigsetjmp(probe_env, 1)) {
        *fault_addr = probe_addr;
        return 1;
    }
    probe_armed = 1;
    *(volatile uint8_t *)addr = value;
    probe_armed = 0;
    return 0;
}

uint64_t leap_stale_faults(void) { return stale_faults; }
uint64_t leap_region_size(void) { return sizeof(leap_region); }
uint64_t leap_job_size(void) { return sizeof(leap_job); }
uint64_t leap_trans_size(void) { return sizeof(leap_trans); }
uint64_t leap_foreign_faults(void) { return foreign_faults; }

/* ---- mapping primitives ---- */

uint64_t leap_map_calls(void) { return __atomic_load_n(&map_calls, __ATOMIC_SEQ_CST); }

/* Map [addr, addr+len) onto fd at off with the given protection, replacing
 * whatever was there, in a single mmap call. */
int leap_map_fixed(uintptr_t addr, uint64_t len, int prot, int fd, uint64_t off, int populate)
{
    __atomic_fetch_add(&map_calls, 1, __ATOMIC_SEQ_CST);
    int flags = MAP_SHARED | MAP_FIXED | (populate ? MAP_POPULATE : 0);
    void *p = mmap((void *)addr, len, prot, flags, fd, (off_t)off);
    if (p == MAP_FAILED)
        return -errno;
    return 0;
}

int leap_protect(uintptr_t addr, uint64_t len, int prot)
{
    return mprotect((void *)addr, len, prot) == 0 ? 0 : -errno;
}

/* ---- migration step ---- */

/* One attempt at moving area `slot` (voff, len within the job's region)
 * onto dst_fd:dst_off.  dst_alias is a writable mapping of the destination
 * bytes used for the copy. */
int leap_migrate_area(leap_job *job, uint64_t slot, void *dst_alias, int dst_fd,
                      uint64_t dst_off, int *err)
{
    uintptr_t addr = job->base + job->area_off[slot];
    uint64_t len = job->area_len[slot];
    *err = 0;

    /* a handler that won a Dirty CAS on a previous area must finish its
     * unprotect before this area gets protected */
    while (__atomic_load_n(&job->inflight, __ATOMIC_SEQ_CST) != 0)
        sched_yield();

    if (job->protect && mprotect((void *)addr, len, PROT_READ) != 0) {
        *err = errno;
        return MIGRATE_ERROR;
    }
    if (leap_transition(job, slot, ST_IDLE, ST_COPYING) != 1) {
        *err = EINVAL;
        return MIGRATE_ERROR;
    }
    memcpy(dst_alias, (const void *)addr, len);
    if (leap_transition(job, slot, ST_COPYING, ST_SEALED) != 1)
        return MIGRATE_DIRTY;
    if (leap_transition(job, slot, ST_SEALED, ST_REMAPPING) != 1)
        return MIGRATE_DIRTY;
    if (job->protect) {
        int rc = leap_map_fixed(addr, len, PROT_READ | PROT_WRITE, dst_fd, dst_off, 1);
        if (rc != 0) {
            *err = -rc;
            return MIGRATE_ERROR;
        }
    }
    leap_transition(job, slot, ST_REMAPPING, ST_REMAPPED);
    return MIGRATE_REMAPPED;
}

/* Wait until no handler is running for this job. */
void leap_quiesce(leap_job *job)
{
    while (__atomic_load_n(&job->inflight, __ATOMIC_SEQ_CST) != 0)
        sched_yield();
}

/* ---- NUMA syscalls ---- */

long leap_move_pages(int pid, uint64_t count, void **pages, const int *nodes,
                     int *status, int flags)
{
    long rc = syscall(SYS_move_pages, pid, count, pages, nodes, status, flags);
    return rc < 0 ? -errno : rc;
}

long leap_mbind(uintptr_t addr, uint64_t len, int node, int strict)
{
    unsigned long mask[16];
    memset(mask, 0, sizeof mask);
    if (node < 0 || node >= (int)(sizeof mask * 8))
        return -EINVAL;
    mask[node / (8 * sizeof(unsigned long))] |= 1UL << (node % (8 * sizeof(unsigned long)));
    /* MPOL_BIND = 2, MPOL_MF_STRICT = 1, MPOL_MF_MOVE = 2 */
    long rc = syscall(SYS_mbind, addr, len, 2, mask, sizeof mask * 8 + 1,
                      strict ? (1 | 2) : 0);
    return rc < 0 ? -errno : rc;
}

/* ---- memory helpers ---- */

/* Touch every page of [p, p+len) with a content-preserving write. */
void leap_touch(volatile uint8_t *p, uint64_t len, uint64_t page_size)
{
    for (uint64_t i = 0; i < len; i += page_size) {
        uint8_t v = p[i];
        p[i] = v;
    }
}

void leap_copy(void *dst, const void *src, uint64_t len) { memcpy(dst, src, len); }

/* ---- random streams ---- */

static inline uint64_t splitmix64(uint64_t *s)
{
    uint64_t z = (*s += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/* unbiased enough for n << 2^64 (Lemire multiply-shift) */
static inline uint64_t bounded(uint64_t *s, uint64_t n)
{
    return (uint64_t)(((__uint128_t)splitmix64(s) * n) >> 64);
}

static inline double unit(uint64_t *s) { return (splitmix64(s) >> 11) * 0x1.0p-53; }

void leap_random_offsets(uint64_t len, uint64_t count, uint64_t seed, uint64_t *out)
{
    uint64_t s = seed;
    for (uint64_t i = 0; i < count; i++)
        out[i] = bounded(&s, len);
}

/* ---- access patterns ---- */

enum { PAT_SEQ_READ = 0, PAT_SEQ_WRITE = 1, PAT_RAND_READ = 2, PAT_RAND_WRITE = 3 };

uint64_t leap_access(uint8_t *p, uint64_t len, int pattern, uint64_t count, uint64_t seed)
{
    uint64_t sum = 0, s = seed;
    switch (pattern) {
    case PAT_SEQ_READ:
        for (uint64_t i = 0; i < len; i++)
            sum += p[i];
        break;
    case PAT_SEQ_WRITE:
        for (uint64_t i = 0; i < len; i++) {
            p[i] = (uint8_t)(i + seed);
        }
        sum = len;
        break;
    case PAT_RAND_READ:
        for (uint64_t i = 0; i < count; i++)
            sum += p[bounded(&s, len)];
        break;
    case PAT_RAND_WRITE:
        for (uint64_t i = 0; i < count; i++) {
            uint64_t a = bounded(&s, len);
            p[a] = (uint8_t)(p[a] + 1);
            sum += a;
        }
        break;
    }
    return sum;
}

/* ---- paced write burst ---- */

typedef struct {
    uint64_t seq;
    uint64_t offset;
    uint64_t old_value;
    uint64_t new_value;
    uint32_t thread_id;
    uint32_t pad;
} leap_jentry;

typedef struct {
    uintptr_t base;       /* start of the writable word range */
    uint64_t n_words;     /* number of 8-byte slots */
    uint64_t stride;      /* bytes between slots */
    uint64_t report_base; /* offset of `base` inside the region for the journal */
    double rate;          /* writes/s for this thread, 0 = unpaced */
    double duration;      /* seconds, <= 0 = until stopped */
    uint64_t max_writes;  /* 0 = unlimited */
    int skewed;
    double hot_fraction;
    uint64_t hot_first; /* first hot slot */
    uint64_t hot_count; /* number of hot slots */
    uint64_t seed;
    uint32_t thread_id;
    int32_t *stop;
    uint64_t *seq_counter;
    leap_jentry *journal; /* NULL = not journaled */
    uint64_t journal_cap;
    /* outputs */
    uint64_t writes;
    double active_s;
    int journal_full;
} leap_burst;

static inline void sleep_ns(int64_t ns)
{
    struct timespec ts = {ns / 1000000000LL, ns % 1000000000LL};
    nanosleep(&ts, NULL);
}

static inline uint64_t pick_slot(leap_burst *b, uint64_t *s)
{
    if (b->skewed && unit(s) < b->hot_fraction)
        return b->hot_first + bounded(s, b->hot_count);
    return bounded(s, b->n_words);
}

void leap_burst_run(leap_burst *b)
{
    uint64_t s = b->seed;
    uint64_t done = 0;
    int64_t start = now_ns();
    int64_t end = b->duration > 0 ? start + (int64_t)(b->duration * 1e9) : INT64_MAX;
    const int64_t min_sleep = 100000; /* batch writes instead of sleeping for < 100 us */
    b->journal_full = 0;
    for (;;) {
        if (__atomic_load_n(b->stop, __ATOMIC_ACQUIRE))
            break;
        int64_t now = now_ns();
        if (now >= end)
            break;
        if (b->max_writes && done >= b->max_writes)
            break;
        uint64_t due;
        if (b->rate > 0) {
            due = (uint64_t)((double)(now - start) * 1e-9 * b->rate) + 1;
        } else {
            due = done + 1024;
        }
        if (b->max_writes && due > b->max_writes)
            due = b->max_writes;
        while (done < due) {
            if (b->journal && done >= b->journal_cap) {
                b->journal_full = 1;
                goto out;
            }
            uint64_t slot = pick_slot(b, &s);
            uint64_t *word = (uint64_t *)(b->base + slot * b->stride);
            uint64_t value = splitmix64(&s);
            if (b->journal) {
                /* read, then sequence, then CAS: a successful CAS on a word
                 * always carries a larger seq than the write it replaced */
                uint64_t old, seq;
                do {
                    old = __atomic_load_n(word, __ATOMIC_SEQ_CST);
                    seq = __atomic_fetch_add(b->seq_counter, 1, __ATOMIC_SEQ_CST);
                } while (!__atomic_compare_exchange_n(word, &old, value, 0,
                                                      __ATOMIC_SEQ_CST, __ATOMIC_SEQ_CST));
                leap_jentry *e = &b->journal[done];
                e->seq = seq;
                e->offset = b->report_base + slot * b->stride;
                e->old_value = old;
                e->new_value = value;
                e->thread_id = b->thread_id;
                e->pad = 0;
            } else {
                __atomic_store_n(word, value, __ATOMIC_RELAXED);
            }
            done++;
        }
        if (b->rate > 0) {
            int64_t next = start + (int64_t)((double)done / b->rate * 1e9);
            int64_t wait = next - now_ns();
            if (wait > 0)
                sleep_ns(wait < min_sleep ? min_sleep : wait);
        }
    }
out:
    b->writes = done;
    b->active_s = (double)(now_ns() - start) * 1e-9;
}

uint64_t leap_burst_size(void) { return sizeof(leap_burst); }
uint64_t leap_jentry_size(void) { return sizeof(leap_jentry); }
