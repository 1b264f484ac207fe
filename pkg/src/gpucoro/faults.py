"""Fault injection and isolation: local containment, emergency migration,
soft-hang detection and quarantine."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Optional

from .errors import ConfigError, NoEffect
from .model import VStatus, rational

log = logging.getLogger(__name__)

FAULT_KINDS = ("LocalException", "GlobalException", "SoftHang")


@dataclass(frozen=True)
class Fault:
    kind: str
    target: str
    inject_time: Fraction
    stretch: Optional[Fraction] = None
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        object.__setattr__(self, "inject_time", rational(self.inject_time))
        if self.inject_time < 0:
            raise ConfigError("fault time must be non-negative")
        if self.kind == "SoftHang":
            s = rational(self.stretch if self.stretch is not None
                         else self.params.get("stretch", 10))
            if s <= 1:
                raise ConfigError("SoftHang stretch must exceed 1")
            object.__setattr__(self, "stretch", s)

    @classmethod
    def from_dict(cls, d):
        params = dict(d.get("params", {}))
        return cls(d["kind"], d["target"], d.get("time", d.get("inject_time", 0)),
                   params.pop("stretch", None), params)

    def as_dict(self):
        out = {"kind": self.kind, "target": self.target, "time": self.inject_time}
        if self.stretch is not None:
            out["stretch"] = self.stretch
        return out


def apply_fault(sim, fault: Fault) -> dict:
    if fault.kind == "LocalException":
        try:
            return apply_local_exception(sim, fault.target)
        except NoEffect as e:
            sim._signal("NoEffect", fault=fault.kind, target=fault.target)
            return {"effect": "none", "detail": str(e)}
    if fault.kind == "GlobalException":
        plan = apply_global_exception(sim, fault.target)
        return {"plan": {k: v for k, v in sorted(plan.items())}}
    return inject_soft_hang(sim, fault.target, fault.stretch)


def apply_local_exception(sim, pctx_id) -> dict:
    """Terminate the vCtx bound to `pctx_id`; the pCtx rejoins after a reset."""
    if pctx_id not in sim.pctxs:
        raise ConfigError(f"fault targets unknown pCtx {pctx_id}")
    p = sim.pctxs[pctx_id]
    vid = p.bound
    if vid is None:
        raise NoEffect(f"{pctx_id} is unbound")
    sim.fail_vctx(vid)
    p.resetting = True
    sim.queue.schedule(sim.now + sim.num(sim.costs.reset_delay), "Release",
                       pctx=pctx_id, mode="reset")
    return {"failed": vid}


def _tier_fit(sim, device_id, extra):
    dev = sim.devices[device_id]
    used = sum((p.fraction for p in dev.pctx_pool
                if p.bound is not None or p.id in sim.reserved), Fraction(0))
    return used + extra <= 1


def apply_global_exception(sim, device_id) -> Dict[str, Optional[str]]:
    """Fail the device and plan an emergency move for each bound vCtx.

    Each vCtx goes to the smallest free standby tier at least as large as
    its current one, else the largest smaller one; with nothing left it is
    Stranded. The move starts when the vCtx reaches a segment boundary.
    """
    if device_id not in sim.devices:
        raise ConfigError(f"fault targets unknown device {device_id}")
    dev = sim.devices[device_id]
    dev.failed = True
    plan: Dict[str, Optional[str]] = {}
    for p in sorted(dev.pctx_pool, key=lambda p: (-p.fraction, p.id)):
        vid = p.bound
        if vid is None:
            continue
        spare = [q for d in sim.devices.values() if d.standby and not d.failed
                 for q in d.pctx_pool
                 if q.bound is None and q.id not in sim.reserved and not q.resetting
                 and _tier_fit(sim, d.id, q.fraction)]
        if sim.vctxs[vid].quarantined:
            spare = [q for q in spare if q.fraction == sim.min_tier]
        up = sorted((q for q in spare if q.fraction >= p.fraction),
                    key=lambda q: (q.fraction, q.id))
        down = sorted((q for q in spare if q.fraction < p.fraction),
                      key=lambda q: (-q.fraction, q.id))
        choice = (up or down or [None])[0]
        if choice is None:
            sim.fail_vctx(vid, VStatus.STRANDED)
            plan[vid] = None
            continue
        sim.reserved[choice.id] = vid
        sim.emergency[vid] = choice.id
        plan[vid] = choice.id
        sim._preempt(p.id, reason="global-fault")
    promoted = False
    for d in sim.devices.values():
        if any(q in sim.reserved for q in (x.id for x in d.pctx_pool)):
            d.standby = False
            promoted = True
    if not promoted:
        # nothing was mid-flight; still bring a replacement online for later launches
        spare = sorted(d.id for d in sim.devices.values() if d.standby and not d.failed)
        if spare:
            sim.devices[spare[0]].standby = False
    sim._changed = True
    return plan


def inject_soft_hang(sim, pctx_id, stretch) -> dict:
    """Stretch the work of the kernel running (or next to run) on `pctx_id`."""
    p = sim.pctxs[pctx_id]
    vid = p.bound
    if vid is None:
        sim._signal("NoEffect", fault="SoftHang", target=pctx_id)
        return {"effect": "none"}
    r = sim.running.get(pctx_id)
    k = r.kernel if r is not None else sim.vctxs[vid].head
    if k is None:
        return {"effect": "none"}
    sim.pending_stretch[k.id] = stretch
    if r is not None:
        sim._settle(r)
        r.work = sim.num(k.base_duration * stretch)
        sim._schedule_milestone(r)
    return {"kernel": k.id, "stretch": stretch}


def detect_soft_hang(elapsed, predicted, threshold=3) -> bool:
    """True once normalized elapsed work reaches threshold x prediction."""
    return elapsed >= rational(threshold) * predicted


def quarantine(sim, vctx_id):
    """Pin the vCtx to the minimal tier; move it there if it sits higher."""
    from .engine import QuarantineState
    v = sim.vctxs[vctx_id]
    v.quarantined = True
    pid = sim.table.get(vctx_id)
    if pid is not None and sim.pctxs[pid].fraction > sim.min_tier:
        sim._preempt(pid, reason="quarantine")
    sim._changed = True
    log.info("quarantined %s at %s", vctx_id, sim.now)
    return QuarantineState(vctx_id, sim.min_tier, sim.now)
