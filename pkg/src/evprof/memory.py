"""Per-process region tables, the red area, and field watchpoints.

The red area is the set of regions under the analyzed sample's control:
its own image, runtime code allocations, non-standard libraries it loads,
injected ranges, and the honeypot image. Only accesses whose code address
falls inside the red area count as evasion; everything else is treated as
legitimate library activity. Unmapped addresses are never red.

Watchpoints cover individual structure fields published by layout
declarations. A watchpoint dies permanently the first time its address
range is written: the same stack or heap slot may hold unrelated data
afterwards, so later reads must not be attributed to the original field.

PE header bytes are shadow-stored per offset so that header writes can be
classified as real changes versus rewrites of identical values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .trace import Diagnostic, MemPayload, StructLayout, TraceEvent

RED_REGION_KINDS = frozenset({
    "main_image", "custom_library", "exec_alloc", "injected", "honeypot_image",
})

SIZE_OF_IMAGE_FIELD = "SIZE_OF_IMAGE"
SIZE_OF_IMAGE_WIDTH = 4


class RegionOverlapError(Exception):
    """Attempt to register a region overlapping an existing one."""

    def __init__(self, new, old):
        self.new = new
        self.old = old
        super().__init__(f"region {new} overlaps existing region {old}")


@dataclass(frozen=True)
class MemoryRegion:
    pid: int
    base: int
    size: int
    kind: str
    name: str | None = None

    @property
    def end(self) -> int:
        return self.base + self.size

    def contains(self, address: int) -> bool:
        return self.base <= address < self.end

    def overlaps(self, base: int, size: int) -> bool:
        return base < self.end and self.base < base + size

    def __str__(self):
        label = f" ({self.name})" if self.name else ""
        return f"{self.kind}[0x{self.base:x},+0x{self.size:x}) pid {self.pid}{label}"


@dataclass
class WatchPoint:
    pid: int
    address: int
    width: int
    field: str                 # qualified name, e.g. "PEB.BeingDebugged"
    technique: str | None      # owning technique id, if any
    live: bool = True

    def overlaps(self, address: int, size: int) -> bool:
        return address < self.address + self.width and self.address < address + size


@dataclass
class PeWriteResult:
    changed: bool
    field: str | None  # SIZE_OF_IMAGE when the write touches that field


@dataclass
class _PeShadow:
    base: int
    data: bytearray
    size_of_image_addr: int | None = None


class MemoryTracker:
    """Region table, red-area membership, watchpoints, and PE shadows.

    One tracker per analyzed sample; mutated single-threaded in event
    order. Diagnostics accumulate in ``self.diagnostics``.
    """

    def __init__(self, watch_techniques: dict[str, str] | None = None):
        self._regions: dict[int, list[MemoryRegion]] = {}
        self._watchpoints: dict[int, list[WatchPoint]] = {}
        self._pe_shadows: dict[int, list[_PeShadow]] = {}
        self._watch_techniques = dict(watch_techniques or {})
        self.diagnostics: list[Diagnostic] = []

    # -- regions ------------------------------------------------------------

    def register_region(self, region: MemoryRegion) -> None:
        table = self._regions.setdefault(region.pid, [])
        for existing in table:
            if existing.overlaps(region.base, region.size):
                raise RegionOverlapError(region, existing)
        table.append(region)
        table.sort(key=lambda r: r.base)

    def free_region(self, pid: int, base: int, seq: int = 0) -> None:
        table = self._regions.get(pid, [])
        for i, region in enumerate(table):
            if region.base == base:
                del table[i]
                if region.kind == "pe_header":
                    self._pe_shadows[pid] = [
                        s for s in self._pe_shadows.get(pid, [])
                        if s.base != base
                    ]
                return
        self.diagnostics.append(
            Diagnostic(seq, f"region_free of unknown base 0x{base:x} pid {pid}"))

    def region_at(self, pid: int, address: int) -> MemoryRegion | None:
        for region in self._regions.get(pid, []):
            if region.contains(address):
                return region
        return None

    def regions(self, pid: int) -> list[MemoryRegion]:
        return list(self._regions.get(pid, []))

    def is_red(self, pid: int, address: int) -> bool:
        region = self.region_at(pid, address)
        return region is not None and region.kind in RED_REGION_KINDS

    # -- PE header shadow ---------------------------------------------------

    def register_pe_header(self, pid: int, base: int, data: bytes,
                           size_of_image_addr: int | None = None) -> None:
        """Track a pe_header region's bytes; region must be registered too."""
        self._pe_shadows.setdefault(pid, []).append(
            _PeShadow(base, bytearray(data), size_of_image_addr))

    def _shadow_for(self, pid: int, address: int) -> _PeShadow | None:
        for shadow in self._pe_shadows.get(pid, []):
            if shadow.base <= address < shadow.base + len(shadow.data):
                return shadow
        return None

    def pe_header_write(self, event: TraceEvent) -> PeWriteResult | None:
        """Record a write into a tracked PE header.

        Returns None when the write does not touch any tracked header.
        ``changed`` is true only if at least one stored byte actually
        differs from what the write deposits; stored bytes are updated in
        either case.
        """
        p: MemPayload = event.payload
        shadow = self._shadow_for(event.pid, p.address)
        if shadow is None:
            return None
        # stores truncate to their access width
        masked = p.value & ((1 << (8 * p.size)) - 1)
        new_bytes = masked.to_bytes(p.size, "little", signed=False)
        changed = False
        for i, b in enumerate(new_bytes):
            off = p.address + i - shadow.base
            if 0 <= off < len(shadow.data):
                if shadow.data[off] != b:
                    changed = True
                    shadow.data[off] = b
        fld = None
        if shadow.size_of_image_addr is not None:
            soi = shadow.size_of_image_addr
            if p.address < soi + SIZE_OF_IMAGE_WIDTH and soi < p.address + p.size:
                fld = SIZE_OF_IMAGE_FIELD
        return PeWriteResult(changed, fld)

    def pe_shadow_bytes(self, pid: int, base: int) -> bytes | None:
        for shadow in self._pe_shadows.get(pid, []):
            if shadow.base == base:
                return bytes(shadow.data)
        return None

    # -- watchpoints ----------------------------------------------------------

    def install_watchpoints(self, pid: int, layout: StructLayout,
                            seq: int = 0) -> list[WatchPoint]:
        """Install one live watchpoint per declared field.

        A new declaration at an address that already has a live watchpoint
        replaces it (with a diagnostic): out-parameter structs may be
        re-published by later calls.
        """
        refs = [(name, addr, width) for name, addr, width
                in layout.field_addresses()]
        return self._install(pid, refs, seq)

    def install_field_watchpoints(self, pid: int, refs, seq: int = 0) -> list[WatchPoint]:
        """Install watchpoints from published FieldRef records."""
        return self._install(
            pid, [(r.qualified, r.address, r.width) for r in refs], seq)

    def _install(self, pid: int, refs, seq: int) -> list[WatchPoint]:
        table = self._watchpoints.setdefault(pid, [])
        installed = []
        for name, addr, width in refs:
            for wp in table:
                if wp.live and wp.address == addr:
                    wp.live = False
                    self.diagnostics.append(Diagnostic(
                        seq, f"watchpoint at 0x{addr:x} ({wp.field}) replaced "
                             f"by new declaration of {name}"))
            wp = WatchPoint(pid, addr, width, name,
                            self._watch_techniques.get(name))
            table.append(wp)
            installed.append(wp)
        return installed

    def watchpoints(self, pid: int) -> list[WatchPoint]:
        return list(self._watchpoints.get(pid, []))

    def resolve_access(self, event: TraceEvent) -> list[WatchPoint]:
        """Apply a memory access to the watchpoint table.

        A read overlapping live watchpoints returns them as hits. A write
        overlapping any watchpoint permanently kills it and never counts
        as a hit.
        """
        p: MemPayload = event.payload
        table = self._watchpoints.get(event.pid, [])
        if event.kind == "mem_write":
            for wp in table:
                if wp.live and wp.overlaps(p.address, p.size):
                    wp.live = False
            return []
        hits = [wp for wp in table if wp.live and wp.overlaps(p.address, p.size)]
        return hits
