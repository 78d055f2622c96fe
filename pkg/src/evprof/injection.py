"""Cross-process injection detection and honeypot rerouting.

Every write, thread-create, resume, or APC queued into another process is
rerouted to a single decoy process created at analysis start, so the
injected code stays under the same instrumentation as the sample itself.
Memory the sample writes into the honeypot immediately joins the red area,
which means detections triggered from injected code are attributed to the
originating sample like any other red-area activity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace as dc_replace

from .catalog import INJECTION_APIS
from .memory import MemoryRegion, MemoryTracker
from .trace import ApiPayload, Diagnostic, TraceEvent

HONEYPOT_IMAGE_BASE = 0x71000000
HONEYPOT_IMAGE_SIZE = 0x10000


@dataclass
class RouteResult:
    event: TraceEvent        # with target_pid rewritten when rerouted
    rerouted: bool
    candidate: bool          # Shellcode_injected detection candidate
    substituted_value: str | None = None


@dataclass(frozen=True)
class InjectedPayload:
    source_pid: int
    address: int
    length: int


class InjectionRouter:
    """Reroutes injection APIs to the honeypot process.

    With ``active`` false (mitigation disabled) the router still flags
    injection attempts but leaves targets untouched and registers no
    honeypot memory, so injected code escapes the red area.
    """

    def __init__(self, tracker: MemoryTracker, honeypot_pid: int = 99999,
                 active: bool = True):
        self.tracker = tracker
        self.honeypot_pid = honeypot_pid
        self.active = active
        self.received: list[InjectedPayload] = []
        self.diagnostics: list[Diagnostic] = []
        if active:
            tracker.register_region(MemoryRegion(
                pid=honeypot_pid, base=HONEYPOT_IMAGE_BASE,
                size=HONEYPOT_IMAGE_SIZE, kind="honeypot_image",
                name="honeypot"))

    def route(self, event: TraceEvent) -> RouteResult:
        p = event.payload
        if (event.kind != "api" or p.name not in INJECTION_APIS
                or p.target_pid is None or p.target_pid == event.pid):
            return RouteResult(event, rerouted=False, candidate=False)

        if not self.active:
            return RouteResult(event, rerouted=False, candidate=True)

        routed = dc_replace(event, payload=dc_replace(
            p, target_pid=self.honeypot_pid))
        if p.name == "NtWriteVirtualMemory":
            self._register_injection(event)
        elif p.name == "NtCreateThreadEx":
            start = next((a.v for a in p.args if a.t == "a"), None)
            if start is not None and self.tracker.region_at(
                    self.honeypot_pid, start) is None:
                self.diagnostics.append(Diagnostic(
                    event.seq,
                    f"thread start 0x{start:x} targets memory never "
                    f"written into the honeypot"))
        return RouteResult(routed, rerouted=True, candidate=True,
                           substituted_value=f"target_pid={self.honeypot_pid}")

    def _register_injection(self, event: TraceEvent) -> None:
        p: ApiPayload = event.payload
        address = next((a.v for a in p.args if a.t == "a"), None)
        length = next((a.v for a in p.args if a.t == "l"), None)
        if address is None or length is None or length <= 0:
            self.diagnostics.append(Diagnostic(
                event.seq, "injection write without address/length arguments"))
            return
        self.received.append(InjectedPayload(event.pid, address, length))
        self._add_red_range(address, length, event.seq)

    def _add_red_range(self, base: int, size: int, seq: int) -> None:
        # coalesce with existing injected ranges: repeated writes into the
        # same target memory must not trip the region overlap invariant
        end = base + size
        for region in self.tracker.regions(self.honeypot_pid):
            if region.kind == "injected" and region.overlaps(base, size):
                base = min(base, region.base)
                end = max(end, region.end)
                self.tracker.free_region(self.honeypot_pid, region.base, seq)
        self.tracker.register_region(MemoryRegion(
            pid=self.honeypot_pid, base=base, size=end - base,
            kind="injected"))
