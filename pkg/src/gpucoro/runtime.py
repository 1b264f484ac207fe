"""GPU-coroutine mechanics: dispatch vs remap, cooperative preemption, migration.

Everything here is a pure computation over model objects; the engine owns
time and calls into these helpers from its event handlers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Tuple

from .errors import BindConflict, PolicyError, PoolExhausted, TraceViolation
from .model import Kernel, MemoryRegion, PhysicalContext, VirtualContext, rational

DEFAULT_SEGMENTS = 16


@dataclass(frozen=True)
class CostParameters:
    ctx_switch_overhead: Fraction = Fraction(4, 100)
    preempt_overhead: Fraction = Fraction(12, 100)
    copy_bandwidth: Fraction = Fraction(8 * 2**20)  # bytes per time unit
    remap_fixed: Fraction = Fraction(1, 1000)
    fault_fixed: Fraction = Fraction(1, 10000)
    segments: int = DEFAULT_SEGMENTS
    reset_delay: Fraction = Fraction(1, 10)

    def __post_init__(self):
        for name in ("ctx_switch_overhead", "preempt_overhead", "copy_bandwidth",
                     "remap_fixed", "fault_fixed", "reset_delay"):
            object.__setattr__(self, name, rational(getattr(self, name)))
        for name in ("ctx_switch_overhead", "preempt_overhead"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.copy_bandwidth <= 0:
            raise ValueError("copy_bandwidth must be positive")
        if self.segments < 1:
            raise ValueError("segments must be >= 1")
        if min(self.remap_fixed, self.fault_fixed, self.reset_delay) < 0:
            raise ValueError("fixed costs must be non-negative")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "CostParameters":
        return cls(**(d or {}))


# -- decisions ---------------------------------------------------------------

@dataclass(frozen=True)
class Decision:
    """A policy verdict.

    kind is one of "direct", "remap", "defer", "preempt", "noaction".
    `target` names a pCtx for remap/preempt (and for direct placement of an
    unbound vCtx). `retry_at` lets a deferral request a wake-up.
    `grid_override` exists only so tests can build a semantics-violating
    mutant; the shipped policies never set it.
    """

    kind: str
    target: Optional[str] = None
    reason: str = ""
    retry_at: Optional[Fraction] = None
    grid_override: Optional[int] = None

    @staticmethod
    def direct(target=None):
        return Decision("direct", target)

    @staticmethod
    def remap(target):
        return Decision("remap", target)

    @staticmethod
    def defer(reason="", retry_at=None):
        return Decision("defer", reason=reason, retry_at=retry_at)

    @staticmethod
    def preempt(target, reason=""):
        return Decision("preempt", target, reason=reason)

    @staticmethod
    def noaction():
        return Decision("noaction")


DIRECT = Decision.direct()
NOACTION = Decision.noaction()


@dataclass(frozen=True)
class DispatchOutcome:
    variant: str  # "Direct" | "Remap" | "Defer"
    target: Optional[str] = None
    reason: str = ""


def _feasible(pctx: PhysicalContext, device_pctxs, releasing: Optional[str] = None) -> bool:
    used = sum(p.fraction for p in device_pctxs
               if p.bound is not None and p.id != releasing)
    return used + pctx.fraction <= 1


def dispatch(vctx: VirtualContext, kernel: Kernel, table, decision: Decision,
             pctxs: Dict[str, PhysicalContext]) -> DispatchOutcome:
    """Translate a policy decision for the head kernel of `vctx` into an outcome.

    Raises PolicyError for decisions that would break the binding invariants
    and PoolExhausted when an unbound vCtx is told to run with nothing free.
    """
    if not vctx.pending or vctx.pending[0].id != kernel.id:
        raise ValueError(f"{kernel.id} is not the head of {vctx.id}")
    if decision.kind in ("defer", "noaction", "preempt"):
        return DispatchOutcome("Defer", reason=decision.reason or decision.kind)
    bound = table.get(vctx.id)
    target = decision.target
    if decision.kind == "direct" and target in (None, bound):
        if bound is None:
            if not any(p.bound is None and not p.resetting for p in pctxs.values()):
                raise PoolExhausted(f"no free pCtx for {vctx.id}")
            raise PolicyError(f"direct dispatch of unbound {vctx.id} needs a target")
        return DispatchOutcome("Direct", bound)
    if decision.kind == "direct" and bound is not None:
        raise PolicyError(f"direct dispatch to {target} but {vctx.id} is bound to {bound}")
    if target not in pctxs:
        raise PolicyError(f"unknown pCtx {target!r}")
    p = pctxs[target]
    if p.bound is not None:
        raise PolicyError(f"remap target {target} is bound to {p.bound}")
    if p.resetting:
        raise PolicyError(f"remap target {target} is resetting")
    siblings = [q for q in pctxs.values() if q.device_id == p.device_id]
    releasing = bound if bound is not None and pctxs[bound].device_id == p.device_id else None
    if not _feasible(p, siblings, releasing):
        raise PolicyError(f"binding {target} would oversubscribe device {p.device_id}")
    return DispatchOutcome("Remap", target)


# -- preemption --------------------------------------------------------------

def next_boundary(retired, total_work, segments: int):
    """Work coordinate of the first segment boundary at or after `retired`."""
    seg = total_work / segments
    k = math.ceil(retired / seg)
    return min(total_work, k * seg)


@dataclass
class PreemptionRecord:
    pctx: str
    vctx: str
    kernel: Optional[str]
    signal_time: Fraction
    yield_time: Optional[Fraction] = None
    release_time: Optional[Fraction] = None
    segment_time: Fraction = Fraction(0)  # effective length of one segment
    cost: Fraction = Fraction(0)
    reason: str = ""
    beneficiary: Optional[str] = None
    max_factor: Fraction = Fraction(1)

    @property
    def boundary_wait(self):
        return self.yield_time - self.signal_time

    @property
    def wait(self):
        return self.release_time - self.signal_time

    def as_dict(self):
        return {"pctx": self.pctx, "vctx": self.vctx, "kernel": self.kernel,
                "signal_time": self.signal_time, "yield_time": self.yield_time,
                "release_time": self.release_time, "segment_time": self.segment_time,
                "cost": self.cost, "reason": self.reason, "beneficiary": self.beneficiary}


# -- migration ---------------------------------------------------------------

def compute_migration_set(vctx: VirtualContext, next_kernel: Kernel,
                          dst: Optional[str] = None) -> Tuple[FrozenSet[str], FrozenSet[str]]:
    """Split the working set into (eager, lazy) region ids for a move to `dst`.

    A region needs transfer when `dst` does not hold its latest copy. Regions
    the next kernel touches and that need transfer go eagerly; other dirty
    regions needing transfer go lazily; everything else stays put.
    """
    stray = next_kernel.touched_regions - set(vctx.working_set)
    if stray:
        raise TraceViolation(f"{next_kernel.id} touches {sorted(stray)} outside {vctx.id}")

    def needs(r: MemoryRegion) -> bool:
        if dst is None:
            return r.dirty or not r.resident_on
        return dst not in r.resident_on

    eager = frozenset(r for r in next_kernel.touched_regions if needs(vctx.working_set[r]))
    lazy = frozenset(rid for rid, r in vctx.working_set.items()
                     if r.dirty and needs(r) and rid not in eager)
    return eager, lazy


@dataclass
class MigrationRecord:
    vctx: str
    src: Optional[str]
    dst: str
    eager_bytes: int
    lazy_bytes: int
    start: Fraction
    end: Fraction
    demand_faults: int = 0
    eager: Tuple[str, ...] = ()
    lazy: Tuple[str, ...] = ()
    reason: str = "remap"
    aborted: bool = False

    @property
    def size(self):
        return self.eager_bytes + self.lazy_bytes

    def as_dict(self):
        return {"vctx": self.vctx, "src": self.src, "dst": self.dst,
                "eager_bytes": self.eager_bytes, "lazy_bytes": self.lazy_bytes,
                "start": self.start, "end": self.end, "demand_faults": self.demand_faults,
                "reason": self.reason, "aborted": self.aborted}


def migrate(vctx: VirtualContext, src: Optional[PhysicalContext], dst: PhysicalContext,
            migration_set, now, costs: CostParameters, reason="remap") -> MigrationRecord:
    """Cost out a migration; the caller performs the binding change.

    The vCtx resumes after the fixed remap cost plus the eager copy; lazy
    regions trail behind on a `CopyEngine`.
    """
    if dst.bound is not None and dst.bound != vctx.id:
        raise BindConflict(f"migration target {dst.id} is bound to {dst.bound}")
    eager, lazy = migration_set
    eager_bytes = sum(vctx.working_set[r].bytes for r in sorted(eager))
    lazy_bytes = sum(vctx.working_set[r].bytes for r in sorted(lazy))
    end = now + costs.remap_fixed + eager_bytes / costs.copy_bandwidth
    return MigrationRecord(vctx=vctx.id, src=src.id if src else None, dst=dst.id,
                           eager_bytes=eager_bytes, lazy_bytes=lazy_bytes,
                           start=now, end=end, eager=tuple(sorted(eager)),
                           lazy=tuple(sorted(lazy)), reason=reason)


class CopyEngine:
    """Background transfer of lazy regions, serviced in order at full bandwidth.

    A demand fault pulls the faulted region to the front (most recently
    faulted first); the background queue resumes once it lands.
    """

    def __init__(self, vctx: VirtualContext, dst: str, regions, start, bandwidth,
                 fault_fixed, record: Optional[MigrationRecord] = None):
        self.vctx = vctx
        self.dst = dst
        self.queue: List[list] = [[r, Fraction(vctx.working_set[r].bytes)] for r in regions]
        self.clock = start
        self.bandwidth = bandwidth
        self.fault_fixed = fault_fixed
        self.record = record

    def _land(self, rid):
        region = self.vctx.working_set[rid]
        region.resident_on.add(self.dst)
        region.dirty = False

    def advance(self, t):
        while self.queue and self.clock < t:
            rid, rem = self.queue[0]
            need = rem / self.bandwidth
            if self.clock + need <= t:
                self.clock += need
                self.queue.pop(0)
                self._land(rid)
            else:
                self.queue[0][1] = rem - (t - self.clock) * self.bandwidth
                self.clock = t
        if not self.queue and self.clock < t:
            self.clock = t
        # zero-byte leftovers land immediately
        while self.queue and self.queue[0][1] == 0:
            self._land(self.queue.pop(0)[0])

    def pending(self, rid) -> bool:
        return any(r == rid for r, _ in self.queue)

    def fault(self, rid, t):
        """Service a demand fault at time t; returns the time the region lands."""
        self.advance(t)
        start = max(t, self.clock)
        remaining = None
        for i, (r, rem) in enumerate(self.queue):
            if r == rid:
                remaining = rem
                del self.queue[i]
                break
        if remaining is None:
            remaining = Fraction(self.vctx.working_set[rid].bytes)
        done = start + self.fault_fixed + remaining / self.bandwidth
        self.clock = done
        self._land(rid)
        if self.record is not None:
            self.record.demand_faults += 1
        return done

    def cancel(self, t):
        self.advance(t)
        self.queue.clear()
