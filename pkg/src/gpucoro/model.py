"""Domain types: quota tiers, physical/virtual contexts, kernels, devices."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Dict, FrozenSet, List, Optional, Tuple

from .errors import BindConflict, DoubleBind, InvalidTier


def rational(x) -> Fraction:
    """Exact conversion; floats go through their shortest repr so 0.1 -> 1/10."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


class PriorityClass(str, Enum):
    LATENCY_CRITICAL = "LatencyCritical"
    BEST_EFFORT = "BestEffort"


class Phase(str, Enum):
    PREFILL = "Prefill"
    DECODE = "Decode"
    TRAINING = "Training"
    OTHER = "Other"


class VStatus(str, Enum):
    WAITING = "Waiting"  # not yet arrived
    ACTIVE = "Active"
    DONE = "Done"
    FAILED = "Failed"
    STRANDED = "Stranded"


@dataclass(frozen=True)
class QuotaTier:
    fraction: Fraction

    def __post_init__(self):
        f = rational(self.fraction)
        if f <= 0 or f > 1:
            raise InvalidTier(f"tier fraction must be in (0, 1], got {self.fraction}")
        object.__setattr__(self, "fraction", f)


@dataclass(frozen=True)
class ReductionSpec:
    """Numerical payload of a reduction kernel: n inputs drawn from `seed`."""

    n: int
    fmt: str = "fp16"
    seed: int = 0


@dataclass(frozen=True)
class Kernel:
    id: str
    vctx_id: str
    grid_size: int
    semantic_id: str
    base_duration: Fraction
    compute_saturation: Fraction = Fraction(1)
    mem_bw_demand: Fraction = Fraction(0)
    mem_bound_fraction: Fraction = Fraction(0)
    touched_regions: FrozenSet[str] = frozenset()
    phase: Phase = Phase.OTHER
    # host-side time between the previous kernel's completion and this launch
    launch_delay: Fraction = Fraction(0)
    reduction: Optional[ReductionSpec] = None

    def __post_init__(self):
        for name in ("base_duration", "compute_saturation", "mem_bw_demand",
                     "mem_bound_fraction", "launch_delay"):
            object.__setattr__(self, name, rational(getattr(self, name)))
        object.__setattr__(self, "touched_regions", frozenset(self.touched_regions))
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.base_duration <= 0:
            raise ValueError(f"kernel {self.id}: base_duration must be positive")
        if self.grid_size < 1:
            raise ValueError(f"kernel {self.id}: grid_size must be >= 1")
        if not 0 < self.compute_saturation <= 1:
            raise ValueError(f"kernel {self.id}: compute_saturation must be in (0, 1]")
        if not 0 <= self.mem_bound_fraction <= 1:
            raise ValueError(f"kernel {self.id}: mem_bound_fraction must be in [0, 1]")
        if self.mem_bw_demand < 0 or self.launch_delay < 0:
            raise ValueError(f"kernel {self.id}: negative demand or delay")

    @property
    def signature(self) -> Tuple[str, int]:
        return (self.semantic_id, self.grid_size)

    def fingerprint(self) -> str:
        payload = repr((self.signature, self.base_duration, self.compute_saturation,
                        self.mem_bound_fraction, tuple(sorted(self.touched_regions))))
        return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class MemoryRegion:
    id: str
    bytes: int
    dirty: bool = False
    # physical contexts holding the latest copy; empty = not yet materialized
    resident_on: set = field(default_factory=set)

    def __post_init__(self):
        if self.bytes <= 0:
            raise ValueError(f"region {self.id}: bytes must be positive")


@dataclass
class PhysicalContext:
    id: str
    tier: QuotaTier
    device_id: str = ""
    bound: Optional[str] = None
    hw_queue: List[str] = field(default_factory=list)
    rck_flag: bool = False
    # bookkeeping used by the engine and policies
    last_vctx: Optional[str] = None
    bound_since: Optional[Fraction] = None
    resetting: bool = False

    @property
    def fraction(self) -> Fraction:
        return self.tier.fraction

    def check(self):
        if self.rck_flag and self.bound is None:
            raise AssertionError(f"{self.id}: rck flag set while unbound")
        if self.bound is None and self.hw_queue:
            raise AssertionError(f"{self.id}: hw_queue not empty while unbound")


@dataclass
class VirtualContext:
    id: str
    priority_class: PriorityClass = PriorityClass.BEST_EFFORT
    pending: List[Kernel] = field(default_factory=list)
    working_set: Dict[str, MemoryRegion] = field(default_factory=dict)
    logical_progress: int = 0
    # engine-side state
    status: VStatus = VStatus.WAITING
    arrival_time: Fraction = Fraction(0)
    slo: Optional[object] = None
    request: Optional[object] = None
    quarantined: bool = False
    last_pctx: Optional[str] = None
    completed: List[Kernel] = field(default_factory=list)

    def __post_init__(self):
        self.priority_class = PriorityClass(self.priority_class)
        for k in self.pending:
            stray = k.touched_regions - set(self.working_set)
            if stray:
                raise ValueError(f"kernel {k.id} touches undeclared regions {sorted(stray)}")

    @property
    def head(self) -> Optional[Kernel]:
        return self.pending[0] if self.pending else None

    def retire_head(self) -> Kernel:
        k = self.pending.pop(0)
        self.completed.append(k)
        self.logical_progress += 1
        return k


@dataclass
class Device:
    id: str
    total_sm: int = 108
    total_bandwidth: Fraction = Fraction(1)
    pctx_pool: List[PhysicalContext] = field(default_factory=list)
    standby: bool = False
    failed: bool = False

    def bound_fraction(self) -> Fraction:
        return sum((p.fraction for p in self.pctx_pool if p.bound is not None), Fraction(0))

    def check(self):
        if self.bound_fraction() > 1:
            raise AssertionError(f"device {self.id}: bound tiers exceed the device")
        fracs = {p.fraction for p in self.pctx_pool}
        if not fracs:
            return


def create_pool(device: Device, tier_fractions) -> Device:
    """Populate `device` with one unbound pCtx per requested tier."""
    tier_fractions = list(tier_fractions)
    if not tier_fractions:
        raise InvalidTier("empty tier list")
    tiers = [QuotaTier(f) for f in tier_fractions]
    start = len(device.pctx_pool)
    for i, tier in enumerate(tiers, start=start):
        device.pctx_pool.append(PhysicalContext(id=f"{device.id}/p{i}", tier=tier,
                                                device_id=device.id))
    return device


class BindingTable:
    """Injective vCtx -> pCtx map kept consistent with `PhysicalContext.bound`."""

    def __init__(self):
        self._fwd: Dict[str, str] = {}
        self._rev: Dict[str, str] = {}

    def __contains__(self, vctx_id):
        return vctx_id in self._fwd

    def __len__(self):
        return len(self._fwd)

    def get(self, vctx_id) -> Optional[str]:
        return self._fwd.get(vctx_id)

    def holder(self, pctx_id) -> Optional[str]:
        return self._rev.get(pctx_id)

    def items(self):
        return sorted(self._fwd.items())

    def as_dict(self) -> Dict[str, str]:
        return dict(self._fwd)

    def bind(self, vctx: VirtualContext, pctx: PhysicalContext) -> "BindingTable":
        if pctx.bound is not None or pctx.id in self._rev:
            raise BindConflict(f"{pctx.id} already bound to {pctx.bound}")
        if vctx.id in self._fwd:
            raise DoubleBind(f"{vctx.id} already bound to {self._fwd[vctx.id]}")
        self._fwd[vctx.id] = pctx.id
        self._rev[pctx.id] = vctx.id
        pctx.bound = vctx.id
        return self

    def unbind(self, vctx: VirtualContext, pctx: PhysicalContext) -> "BindingTable":
        if self._fwd.get(vctx.id) != pctx.id:
            raise KeyError(f"{vctx.id} is not bound to {pctx.id}")
        del self._fwd[vctx.id]
        del self._rev[pctx.id]
        pctx.bound = None
        pctx.hw_queue.clear()
        pctx.rck_flag = False
        pctx.last_vctx = vctx.id
        vctx.last_pctx = pctx.id
        return self

    def check(self, pctxs: Dict[str, PhysicalContext]):
        for v, p in self._fwd.items():
            if self._rev.get(p) != v or pctxs[p].bound != v:
                raise AssertionError(f"binding table inconsistent at {v}->{p}")
        for p in pctxs.values():
            if p.bound is not None and self._fwd.get(p.bound) != p.id:
                raise AssertionError(f"{p.id} reports {p.bound} but table disagrees")


def bind(table: BindingTable, vctx: VirtualContext, pctx: PhysicalContext) -> BindingTable:
    return table.bind(vctx, pctx)


def unbind(table: BindingTable, vctx: VirtualContext, pctx: PhysicalContext) -> BindingTable:
    return table.unbind(vctx, pctx)
