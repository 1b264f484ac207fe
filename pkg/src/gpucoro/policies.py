"""Scheduling policies, the duration predictor and head-of-line estimation.

Policies are pure functions of a `PolicyView`; every state change flows
through the returned `Decision`.
"""
from __future__ import annotations

import fnmatch
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Optional

from .engine import PolicyView, Launch, kernel_speed
from .errors import ConfigError
from .model import Kernel, Phase, PriorityClass, rational
from .runtime import Decision, DIRECT, NOACTION


@dataclass(frozen=True)
class SloSpec:
    ttft_deadline: Fraction
    tpot_deadline: Fraction
    e2e_deadline: Optional[Fraction] = None

    def __post_init__(self):
        for name in ("ttft_deadline", "tpot_deadline", "e2e_deadline"):
            v = getattr(self, name)
            if v is None:
                continue
            v = rational(v)
            if v <= 0:
                raise ValueError(f"{name} must be positive")
            object.__setattr__(self, name, v)

    @classmethod
    def from_dict(cls, d):
        return cls(d["ttft_deadline"], d["tpot_deadline"], d.get("e2e_deadline"))


class DurationPredictor:
    """EWMA of contention-normalized durations keyed by kernel signature."""

    def __init__(self, alpha=Fraction(3, 10), default=Fraction(1)):
        self.alpha = rational(alpha)
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        self.default = rational(default)
        self.ewma: Dict[tuple, Fraction] = {}
        self.largest: Dict[str, Fraction] = {}

    def observe(self, signature, duration):
        duration = rational(duration) if not isinstance(duration, float) else duration
        prev = self.ewma.get(signature)
        self.ewma[signature] = duration if prev is None else \
            self.alpha * duration + (1 - self.alpha) * prev
        sem = signature[0]
        if sem not in self.largest or duration > self.largest[sem]:
            self.largest[sem] = duration

    def knows(self, signature) -> bool:
        return signature in self.ewma

    def knows_semantic(self, semantic_id) -> bool:
        return semantic_id in self.largest

    def predict(self, signature, hint=None):
        if signature in self.ewma:
            return self.ewma[signature]
        if hint is not None:
            return rational(hint)
        return self.largest.get(signature[0], self.default)


def estimate(view: PolicyView, kernel: Kernel, pctx_id, hints=False):
    """Predicted effective duration of `kernel` if started now on `pctx_id`."""
    p = view.pctxs[pctx_id]
    work = view.predictor.predict(kernel.signature, kernel.base_duration if hints else None)
    demands = list(view.devices[p.device].demands)
    if p.running is not None:
        demands.remove(p.running.mem_bw_demand)
    demands.append(kernel.mem_bw_demand)
    return work * kernel_speed(kernel, p.tier, demands)


def predict_hol_blocking(view: PolicyView, pctx_id, predictor=None, hints=False):
    """Time until `pctx_id` drains its running and queued kernels."""
    p = view.pctxs[pctx_id]
    if p.bound is None:
        return Fraction(0)
    total = p.running_remaining
    pred = predictor if predictor is not None else view.predictor
    demands = list(view.devices[p.device].demands)
    for k in p.queued:
        work = pred.predict(k.signature, k.base_duration if hints else None)
        total = total + work * kernel_speed(k, p.tier, demands + [k.mem_bw_demand])
    return total


_RANK = {PriorityClass.BEST_EFFORT: 0, PriorityClass.LATENCY_CRITICAL: 1}


class Policy:
    """Hook interface. Subclasses override `on_launch`."""

    name = "base"

    def __init__(self, hints=False, **params):
        if params:
            raise ConfigError(f"{self.name}: unknown params {sorted(params)}")
        self.hints = hints

    def on_launch(self, view: PolicyView, launch: Launch) -> Decision:
        raise NotImplementedError

    def on_completion(self, view: PolicyView, record) -> Decision:
        return NOACTION

    def on_congestion(self, view: PolicyView, device_id) -> Decision:
        return NOACTION

    def order_key(self, view: PolicyView, launch: Launch):
        v = view.vctxs.get(launch.vctx_id)
        rank = 0 if v is not None and v.priority == PriorityClass.LATENCY_CRITICAL else 1
        return (rank, launch.seq)

    # shared helpers
    @staticmethod
    def allowed(view: PolicyView, vctx_id, pctx_id) -> bool:
        v = view.vctxs[vctx_id]
        return not v.quarantined or view.pctxs[pctx_id].tier == view.min_tier

    def candidates(self, view: PolicyView, vctx_id):
        bound = view.vctxs[vctx_id].bound
        return [p for p in view.free_pctxs(releasing=bound)
                if p.id != bound and self.allowed(view, vctx_id, p.id)]


class SloAwarePolicy(Policy):
    """Default policy: deadline-driven placement with preemption of lower classes.

    Latency-critical launches take the smallest tier predicted to meet
    their deadline, remapping or preempting when the bound pCtx would miss.
    Best-effort work tracks a fair share of the device at launch boundaries.
    """

    name = "slo-aware"

    def meets(self, view, launch, pctx_id, bound=False):
        if launch.deadline is None:
            return True
        hol = predict_hol_blocking(view, pctx_id, hints=self.hints) if bound else 0
        return view.clock + hol + estimate(view, launch.kernel, pctx_id, self.hints) \
            <= launch.deadline

    def on_launch(self, view, launch):
        v = view.vctxs[launch.vctx_id]
        if v.priority == PriorityClass.LATENCY_CRITICAL and launch.deadline is not None:
            return self.latency_critical(view, launch)
        return self.best_effort(view, launch)

    # -- latency critical ----------------------------------------------------

    def pending_preempt(self, view, vctx_id):
        return any(p.rck and p.preempt_for == vctx_id for p in view.pctxs.values())

    def latency_critical(self, view, launch):
        vid = launch.vctx_id
        bound = view.vctxs[vid].bound
        if bound is not None and self.meets(view, launch, bound, bound=True):
            return DIRECT
        if self.pending_preempt(view, vid):
            return Decision.defer("awaiting-preemption")
        cands = self.candidates(view, vid)
        here = view.pctxs[bound].tier if bound is not None else Fraction(0)
        good = sorted((p for p in cands if self.meets(view, launch, p.id)),
                      key=lambda p: (p.tier, p.id))
        if good and (bound is None or good[0].tier > here):
            return self.place(view, vid, good[0].id)
        best_free = max((p.tier for p in cands), default=Fraction(0))
        victim = self.pick_victim(view, vid, lambda: self.desired_tier(view, launch),
                                  max(best_free, here))
        if victim is not None:
            return Decision.preempt(victim, reason="deadline")
        if bound is not None:
            bigger = [p for p in cands if p.tier > here]
            if bigger:
                return Decision.remap(max(bigger, key=lambda p: (p.tier, p.id)).id)
            return DIRECT
        if cands:
            return self.place(view, vid, max(cands, key=lambda p: (p.tier, p.id)).id)
        return Decision.defer("pool-exhausted")

    def desired_tier(self, view, launch):
        """Smallest pool tier that would meet the deadline on an idle device."""
        tiers = sorted({p.tier for p in view.pctxs.values()
                        if self.allowed(view, launch.vctx_id, p.id)})
        work = view.predictor.predict(launch.kernel.signature,
                                      launch.kernel.base_duration if self.hints else None)
        for t in tiers:
            k = launch.kernel
            if launch.deadline is None or \
                    view.clock + work * kernel_speed(k, t, [k.mem_bw_demand]) <= launch.deadline:
                return t
        return tiers[-1] if tiers else Fraction(1)

    def victim_classes(self, view, vctx_id, launch=None):
        return (PriorityClass.BEST_EFFORT,)

    def pick_victim(self, view, vctx_id, desired, have, launch=None):
        """Choose a bound pCtx whose release yields a tier >= desired.

        Falls back to the release that frees the largest tier above `have`.
        `desired` may be a callable, evaluated only if some victim exists.
        """
        classes = self.victim_classes(view, vctx_id, launch)
        scored = []
        for p in view.pctxs.values():
            if p.bound is None or p.bound == vctx_id or p.rck or not p.available:
                continue
            owner = view.vctxs.get(p.bound)
            if owner is None or not self.victim_ok(view, owner, p, classes):
                continue
            reach = max((q.tier for q in view.free_pctxs(releasing=p.id)
                         if q.device == p.device and (q.bound is None or q.id == p.id)
                         and self.allowed(view, vctx_id, q.id)), default=Fraction(0))
            if reach <= have:
                continue
            key = (_RANK[owner.priority], -p.running_remaining, owner.seq, p.id)
            scored.append((reach, key, p.id))
        if not scored:
            return None
        if callable(desired):
            desired = desired()
        scored = [(reach >= desired,) + s for s in scored]
        enough = [s for s in scored if s[0]]
        if enough:
            return min(enough, key=lambda s: s[2])[3]
        top = max(s[1] for s in scored)
        return min((s for s in scored if s[1] == top), key=lambda s: s[2])[3]

    def victim_ok(self, view, owner, pctx, classes):
        return owner.priority in classes

    # -- best effort ---------------------------------------------------------

    def fair_share(self, view):
        n = max(1, len(view.vctxs))
        return Fraction(1, n)

    def best_effort(self, view, launch):
        vid = launch.vctx_id
        bound = view.vctxs[vid].bound
        share = self.fair_share(view)
        cands = self.candidates(view, vid)
        under = [p for p in cands if p.tier <= share]
        if bound is not None:
            here = view.pctxs[bound].tier
            if here > share and under:
                return Decision.remap(max(under, key=lambda p: (p.tier, p.id)).id)
            if here < share:
                grow = [p for p in under if p.tier > here]
                if grow:
                    return Decision.remap(max(grow, key=lambda p: (p.tier, p.id)).id)
            return DIRECT
        if under:
            return self.place(view, vid, max(under, key=lambda p: (p.tier, p.id)).id)
        if cands:
            return self.place(view, vid, min(cands, key=lambda p: (p.tier, p.id)).id)
        return Decision.defer("pool-exhausted")

    @staticmethod
    def place(view, vctx_id, pctx_id):
        if view.vctxs[vctx_id].bound is None:
            return Decision.direct(pctx_id)
        return Decision.remap(pctx_id)


class TpotFirstPolicy(SloAwarePolicy):
    """Decode-first variant: throttles prefill admission to protect TPOT."""

    name = "tpot-first"

    def order_key(self, view, launch):
        return (0 if launch.phase == Phase.DECODE else 1,) + super().order_key(view, launch)

    def active_decodes(self, view, exclude=None):
        """Requests decoding now, plus admitted prefills that will decode next."""
        return sum(1 for v in view.vctxs.values()
                   if v.head is not None and v.id != exclude and
                   (v.head.phase == Phase.DECODE or
                    (v.head.phase == Phase.PREFILL and v.bound is not None)))

    def decode_estimate(self, view):
        for v in view.vctxs.values():
            if v.head is not None and v.head.phase == Phase.DECODE:
                k = v.head
                return view.predictor.predict(k.signature, k.base_duration if self.hints else None)
        # only prefills in flight: fall back to what decodes have cost so far
        return view.predictor.largest.get("decode")

    def on_launch(self, view, launch):
        if launch.phase == Phase.PREFILL:
            slo = view.vctxs[launch.vctx_id].slo
            n = self.active_decodes(view, exclude=launch.vctx_id)
            est = self.decode_estimate(view)
            if slo is not None and n > 0 and est is not None and \
                    est * (n + 1) > slo.tpot_deadline:
                return Decision.defer("protect-tpot")
        return super().on_launch(view, launch)

    def victim_classes(self, view, vctx_id, launch=None):
        head = view.vctxs[vctx_id].head
        if head is not None and head.phase == Phase.DECODE:
            return (PriorityClass.BEST_EFFORT, PriorityClass.LATENCY_CRITICAL)
        return (PriorityClass.BEST_EFFORT,)

    def victim_ok(self, view, owner, pctx, classes):
        if owner.priority not in classes:
            return False
        if owner.priority == PriorityClass.LATENCY_CRITICAL:
            return pctx.running is not None and pctx.running.phase == Phase.PREFILL
        return True


class TemporalPolicy(Policy):
    """Round-robin exclusive ownership of the largest-tier pCtx for a quantum."""

    name = "temporal"

    def __init__(self, quantum=Fraction(1), hints=False, **params):
        super().__init__(hints=hints, **params)
        self.quantum = rational(quantum)
        if self.quantum <= 0:
            raise ConfigError("temporal quantum must be positive")

    def order_key(self, view, launch):
        return (launch.seq,)

    @staticmethod
    def full_pctx(view):
        if not view.pctxs:
            raise ConfigError("temporal policy needs a pCtx")
        return min(view.pctxs.values(), key=lambda p: (-p.tier, p.id)).id

    @staticmethod
    def successor(view, last):
        """Next waiting vCtx after `last` in cyclic id order."""
        waiting = sorted({l.vctx_id for l in view.waiting})
        if not waiting:
            return None
        after = [v for v in waiting if last is None or v > last]
        return after[0] if after else waiting[0]

    def on_launch(self, view, launch):
        vid = launch.vctx_id
        pid = self.full_pctx(view)
        p = view.pctxs[pid]
        others = any(l.vctx_id != vid for l in view.waiting)
        if p.rck:
            return Decision.defer("yielding")
        if p.bound == vid:
            if others and view.clock >= p.bound_since + self.quantum:
                return Decision.preempt(pid, reason="quantum")
            return DIRECT
        if p.bound is None:
            if not p.available:
                return Decision.defer("unavailable")
            if self.successor(view, p.last_vctx) == vid:
                return Decision.direct(pid)
            return Decision.defer("not-my-turn")
        end = p.bound_since + self.quantum
        if view.clock >= end:
            return Decision.preempt(pid, reason="quantum")
        return Decision.defer("quantum", retry_at=end)


class StaticPartitionPolicy(Policy):
    """Fixed vCtx -> pCtx assignment; never remaps or preempts."""

    name = "static"

    def __init__(self, assignment=None, hints=False, **params):
        super().__init__(hints=hints, **params)
        self.assignment = dict(assignment or {})

    def target(self, vctx_id):
        if vctx_id in self.assignment:
            return self.assignment[vctx_id]
        for pat in sorted(self.assignment):
            if fnmatch.fnmatchcase(vctx_id, pat):
                return self.assignment[pat]
        raise ConfigError(f"static policy has no assignment for {vctx_id}")

    def on_launch(self, view, launch):
        vid = launch.vctx_id
        target = self.target(vid)
        if target not in view.pctxs:
            raise ConfigError(f"static assignment names unknown pCtx {target}")
        bound = view.vctxs[vid].bound
        if bound == target:
            return DIRECT
        p = view.pctxs[target]
        if p.bound is None and p.available and \
                any(q.id == target for q in view.free_pctxs()):
            return Decision.direct(target)
        return Decision.defer("slice-busy")


POLICIES = {
    "slo-aware": SloAwarePolicy,
    "tpot-first": TpotFirstPolicy,
    "temporal": TemporalPolicy,
    "static": StaticPartitionPolicy,
}


def get_policy(name, params=None) -> Policy:
    if name not in POLICIES:
        raise ConfigError(f"unknown policy {name!r}; valid: {', '.join(sorted(POLICIES))}")
    try:
        return POLICIES[name](**(params or {}))
    except TypeError as e:
        raise ConfigError(f"bad params for policy {name!r}: {e}") from None
