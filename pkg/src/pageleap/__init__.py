"""User-space NUMA page migration by copy and atomic remap."""
from . import errors
from .engine import (
    JobStatus,
    MigrationJob,
    MigrationOptions,
    MigrationReport,
    MigrationStats,
    fault_handler,
    handler_installed,
    install_fault_handler,
    on_write_fault,
    page_leap,
    split_area,
    start_migration,
    uninstall_fault_handler,
)
from .mem_file import (
    HUGE_PAGE,
    SMALL_PAGE,
    Backing,
    Extent,
    PhysicalStore,
    PoolStats,
    allocate_extent,
    create_store,
    pool_stats,
    release_extent,
)
from .numa_topo import (
    NOT_RESIDENT,
    Topology,
    current_topology,
    detect_topology,
    node_of_page,
    pin_current_thread,
)
from .vmap import Protection, VirtualRegion, map_range, mapping_of, protect_range, reserve_region

__version__ = "0.1.0"
