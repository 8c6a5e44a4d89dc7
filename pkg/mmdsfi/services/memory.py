"""
Sparse simulated address space: a sorted list of mapped regions, everything else unmapped.
"""
import bisect
import logging
from typing import List, Optional

from mmdsfi.models.runtime import Region

logger = logging.getLogger(__name__)


class Memory:
    def __init__(self):
        self._regions: List[Region] = []
        self._begins: List[int] = []

    def map(self, region: Region) -> Region:
        idx = bisect.bisect_right(self._begins, region.begin)
        before = self._regions[idx - 1] if idx > 0 else None
        after = self._regions[idx] if idx < len(self._regions) else None
        if (before is not None and before.end > region.begin) or (after is not None and region.end > after.begin):
            raise ValueError(f"region at {region.begin:#x} overlaps an existing mapping")
        self._regions.insert(idx, region)
        self._begins.insert(idx, region.begin)
        logger.debug(f"Mapped {region.kind.value} [{region.begin:#x}, {region.end:#x}) for domain {region.domain_id}")
        return region

    def region_at(self, addr: int, size: int = 1) -> Optional[Region]:
        """The region holding every byte of [addr, addr+size), or None."""
        idx = bisect.bisect_right(self._begins, addr) - 1
        if idx < 0:
            return None
        region = self._regions[idx]
        return region if region.contains(addr, size) else None

    def peek(self, addr: int, size: int) -> Optional[bytes]:
        """Raw bytes without any permission check (runtime-internal use)."""
        region = self.region_at(addr, size)
        if region is None:
            return None
        off = addr - region.begin
        return bytes(region.data[off:off + size])

    def read_u64(self, region: Region, addr: int) -> int:
        off = addr - region.begin
        return int.from_bytes(region.data[off:off + 8], "little")

    def write_u64(self, region: Region, addr: int, value: int):
        off = addr - region.begin
        region.data[off:off + 8] = value.to_bytes(8, "little")

    def regions(self) -> List[Region]:
        return list(self._regions)

    def unmap_domain(self, domain_id: int) -> int:
        """Drop every region of `domain_id`; returns how many were removed."""
        keep = [r for r in self._regions if r.domain_id != domain_id]
        removed = len(self._regions) - len(keep)
        self._regions = keep
        self._begins = [r.begin for r in keep]
        if removed:
            logger.debug(f"Unmapped {removed} regions of domain {domain_id}")
        return removed
