class PageLeapError(Exception):
    pass


class AlignmentError(PageLeapError, ValueError):
    pass


class TopologyError(PageLeapError):
    pass


class UnknownNode(TopologyError):
    pass


class UnknownCore(TopologyError):
    pass


class StoreError(PageLeapError):
    pass


class InsufficientHugePages(StoreError):
    pass


class OutOfCapacity(StoreError):
    pass


class DoubleRelease(StoreError):
    pass


class ForeignExtent(StoreError):
    pass


class MappingError(PageLeapError):
    pass


class PageSizeMismatch(MappingError):
    pass


class RangeError(MappingError, IndexError):
    pass


class UnmappedRange(MappingError):
    pass


class MigrationError(PageLeapError):
    pass


class HandlerError(MigrationError):
    pass


class PoolExhausted(MigrationError):
    pass


class RegionBusy(MigrationError):
    pass
