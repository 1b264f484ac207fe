"""Deterministic discrete-event engine and the contention performance model."""
from __future__ import annotations

import heapq
import json
import logging
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from fractions import Fraction
from types import MappingProxyType
from typing import Callable, Dict, Iterable, List, Optional, Tuple

from .errors import (BindConflict, CausalityViolation, DoubleBind, EventBudgetExceeded,
                     NoEffect, NoOpPreempt, PolicyError, PoolExhausted)
from .model import (Device, Kernel, Phase, PhysicalContext, PriorityClass, VirtualContext,
                    VStatus, BindingTable, rational)
from .runtime import (CopyEngine, CostParameters, Decision, MigrationRecord, PreemptionRecord,
                      compute_migration_set, dispatch, migrate, next_boundary)

log = logging.getLogger(__name__)

EVENT_KINDS = ("Arrival", "LaunchReady", "KernelStart", "KernelFinish", "PreemptSignal",
               "MigrationDone", "FaultInjected", "HangCheck", "Release")


def fmt_time(x) -> str:
    """Render a time as a decimal string (exact when the expansion terminates)."""
    if isinstance(x, float):
        return repr(x)
    x = Fraction(x)
    d = x.denominator
    while d % 2 == 0:
        d //= 2
    while d % 5 == 0:
        d //= 5
    with localcontext() as ctx:
        ctx.prec = 60 if d == 1 else 30
        s = str(Decimal(x.numerator) / Decimal(x.denominator))
    if "E" in s or "e" in s:
        s = format(Decimal(s), "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s or "0"


def _jsonable(v):
    if isinstance(v, (Fraction, float)) and not isinstance(v, bool):
        return fmt_time(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if hasattr(v, "value") and isinstance(getattr(v, "value"), str):
        return v.value
    return v


# -- events ------------------------------------------------------------------

@dataclass(order=True)
class Event:
    time: Fraction
    seq: int
    kind: str = field(compare=False)
    data: dict = field(compare=False, default_factory=dict)


class EventQueue:
    """Min-heap on (time, seq); seq is assigned at enqueue."""

    def __init__(self):
        self._heap: List[Event] = []
        self._seq = 0
        self.now = Fraction(0)

    def __len__(self):
        return len(self._heap)

    def __bool__(self):
        return bool(self._heap)

    def schedule(self, time, kind, **data) -> Event:
        if time < self.now:
            raise CausalityViolation(f"{kind} at {time} is before clock {self.now}")
        ev = Event(time, self._seq, kind, data)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def peek(self) -> Optional[Event]:
        return self._heap[0] if self._heap else None

    def pop(self) -> Event:
        ev = heapq.heappop(self._heap)
        if ev.time < self.now:
            raise CausalityViolation(f"dequeued {ev.kind} at {ev.time} before {self.now}")
        self.now = ev.time
        return ev


def schedule(queue: EventQueue, event: Event) -> EventQueue:
    """Enqueue an already-built event (its seq is reassigned)."""
    queue.schedule(event.time, event.kind, **event.data)
    return queue


# -- performance model -------------------------------------------------------

@dataclass(frozen=True)
class ContentionSnapshot:
    device: str
    entries: Tuple[Tuple[str, Fraction, Fraction], ...] = ()  # (pctx, tier, bw demand)

    @property
    def total_demand(self):
        return sum((d for _, _, d in self.entries), Fraction(0))


def kernel_speed(kernel: Kernel, tier, contention) -> Fraction:
    """Slowdown factor (>= 1) of `kernel` on `tier` under `contention`.

    `contention` is a ContentionSnapshot, a plain iterable of bandwidth
    demands, or a number giving the total demand; it must already include
    the kernel's own demand when the kernel is running.
    """
    frac = tier.fraction if hasattr(tier, "fraction") else rational(tier)
    if isinstance(contention, ContentionSnapshot):
        total = contention.total_demand
    elif isinstance(contention, (int, float, Fraction)):
        total = rational(contention)
    else:
        total = sum((rational(d) for d in contention), Fraction(0))
    compute = max(Fraction(1), kernel.compute_saturation / frac)
    m = kernel.mem_bound_fraction
    bw = (1 - m) + m * max(Fraction(1), total)
    return compute * bw


# -- simulation state --------------------------------------------------------

@dataclass
class Launch:
    vctx_id: str
    kernel: Kernel
    ready: Fraction
    seq: int
    deadline: Optional[Fraction] = None
    grid: Optional[int] = None

    @property
    def phase(self):
        return self.kernel.phase


@dataclass
class Running:
    kernel: Kernel
    vctx: str
    pctx: str
    work: Fraction
    retired: Fraction
    factor: Fraction
    since: Fraction
    token: int
    grid: int
    intervals: list
    hang_target: Optional[Fraction] = None
    preempt_target: Optional[Fraction] = None
    max_factor: Fraction = Fraction(0)
    tiers: list = field(default_factory=list)

    def retired_at(self, t):
        return self.retired + (t - self.since) / self.factor


@dataclass
class KernelRecord:
    vctx: str
    kernel: str
    semantic_id: str
    grid: int
    phase: Phase
    dispatch: Fraction
    start: Fraction
    finish: Fraction
    work: Fraction
    intervals: list
    tiers: list

    @property
    def latency(self):
        return self.finish - self.start

    def retired_work(self):
        return sum(((b - a) / f for a, b, f in self.intervals), Fraction(0))


@dataclass
class LedgerEntry:
    kind: str  # ctx_switch | preempt | migration | fault
    time: Fraction
    amount: Fraction
    vctx: Optional[str] = None
    pctx: Optional[str] = None


@dataclass
class QuarantineState:
    vctx: str
    demoted_tier: Fraction
    flagged_at: Fraction


@dataclass
class SimulationReport:
    clock: Fraction
    events: List[dict]
    kernels: List[KernelRecord]
    vctxs: Dict[str, VirtualContext]
    transcripts: Dict[str, List[Tuple[str, int]]]
    ledger: List[LedgerEntry]
    migrations: List[MigrationRecord]
    preemptions: List[PreemptionRecord]
    policy_errors: List[dict]
    quarantines: List[QuarantineState]
    signals: List[dict]
    stuck: List[str]
    event_count: int

    def ledger_total(self, kind=None):
        return sum((e.amount for e in self.ledger if kind is None or e.kind == kind), Fraction(0))

    def event_log_lines(self) -> List[str]:
        return [json.dumps(e, sort_keys=True) for e in self.events]

    def write_event_log(self, path):
        with open(path, "w") as fh:
            for line in self.event_log_lines():
                fh.write(line + "\n")


# -- policy-facing snapshots -------------------------------------------------

@dataclass(frozen=True)
class PctxView:
    id: str
    device: str
    tier: Fraction
    bound: Optional[str]
    bound_since: Optional[Fraction]
    last_vctx: Optional[str]
    available: bool
    rck: bool
    running: Optional[Kernel]
    running_remaining: Fraction
    running_factor: Fraction
    queued: Tuple[Kernel, ...]
    preempt_for: Optional[str] = None

    @property
    def queue_depth(self):
        return len(self.queued) + (1 if self.running is not None else 0)


@dataclass(frozen=True)
class DeviceView:
    id: str
    pctxs: Tuple[str, ...]
    bound_fraction: Fraction
    demands: Tuple[Fraction, ...]
    standby: bool
    failed: bool

    @property
    def free_fraction(self):
        return 1 - self.bound_fraction


@dataclass(frozen=True)
class VctxView:
    id: str
    priority: PriorityClass
    status: VStatus
    state: str
    bound: Optional[str]
    quarantined: bool
    head: Optional[Kernel]
    arrival: Fraction
    slo: object
    seq: int


@dataclass(frozen=True)
class PolicyView:
    clock: Fraction
    bindings: MappingProxyType
    pctxs: MappingProxyType
    devices: MappingProxyType
    vctxs: MappingProxyType
    waiting: Tuple[Launch, ...]
    predictor: object
    costs: CostParameters
    min_tier: Fraction
    reserved: frozenset
    memo: dict = field(default_factory=dict, compare=False, repr=False)

    def active_vctxs(self):
        return [v for v in self.vctxs.values() if v.status == VStatus.ACTIVE]

    def device_of(self, pctx_id):
        return self.devices[self.pctxs[pctx_id].device]

    def contention(self, device_id, extra=()):
        return tuple(self.devices[device_id].demands) + tuple(extra)

    def free_pctxs(self, device_id=None, releasing=None):
        """Unbound, usable pCtxs whose binding keeps the device within capacity."""
        key = ("free", device_id, releasing)
        if key not in self.memo:
            self.memo[key] = self._free_pctxs(device_id, releasing)
        return list(self.memo[key])

    def _free_pctxs(self, device_id, releasing):
        out = []
        for p in self.pctxs.values():
            if device_id is not None and p.device != device_id:
                continue
            dev = self.devices[p.device]
            if dev.failed or dev.standby or not p.available:
                continue
            if p.bound is not None and p.id != releasing:
                continue
            used = dev.bound_fraction
            if releasing is not None and self.pctxs[releasing].device == p.device:
                used -= self.pctxs[releasing].tier
            if used + p.tier <= 1:
                out.append(p)
        return out


class Simulator:
    """Single-threaded event loop hosting vCtxs, the pCtx pool and a policy."""

    def __init__(self, devices: Iterable[Device], vctxs: Iterable[VirtualContext], policy,
                 costs: Optional[CostParameters] = None, predictor=None, faults=(),
                 max_events: int = 5_000_000, hang_threshold=3, predictor_hints=False,
                 numeric="exact", check_invariants=True, observer: Optional[Callable] = None,
                 record_events=True):
        from .policies import DurationPredictor  # local: policies imports this module

        self.devices: Dict[str, Device] = {d.id: d for d in devices}
        self.pctxs: Dict[str, PhysicalContext] = {}
        for d in self.devices.values():
            for p in d.pctx_pool:
                p.device_id = d.id
                self.pctxs[p.id] = p
        self.vctxs: Dict[str, VirtualContext] = {v.id: v for v in vctxs}
        self.policy = policy
        self.costs = costs or CostParameters()
        self.predictor = predictor if predictor is not None else DurationPredictor()
        self.max_events = max_events
        self.hang_threshold = rational(hang_threshold)
        self.predictor_hints = predictor_hints
        self.check_invariants = check_invariants
        self.observer = observer
        self.record_events = record_events
        if numeric not in ("exact", "float"):
            raise ValueError("numeric must be 'exact' or 'float'")
        self.num = rational if numeric == "exact" else float

        self.queue = EventQueue()
        self.queue.now = self.num(0)
        self.table = BindingTable()
        self.min_tier = min(p.fraction for p in self.pctxs.values()) if self.pctxs else Fraction(1)

        self.vstate: Dict[str, str] = {}
        self.waiting: Dict[str, Launch] = {}
        self.running: Dict[str, Running] = {}
        self.partial: Dict[str, Tuple[Fraction, list, list]] = {}
        self.first_start: Dict[str, Fraction] = {}
        self.dispatch_time: Dict[str, Fraction] = {}
        self.switch_due: Dict[str, bool] = {}
        self.copy_engines: Dict[str, CopyEngine] = {}
        self.pending_migration: Dict[str, MigrationRecord] = {}
        self.pending_stretch: Dict[str, Fraction] = {}
        self.hang_flagged: set = set()
        self.hang_pred: Dict[str, Optional[Fraction]] = {}  # fixed at a kernel's first start
        self.reserved: Dict[str, str] = {}  # pctx -> vctx, for emergency moves
        self.emergency: Dict[str, str] = {}  # vctx -> reserved dst pctx
        self.preempt_open: Dict[str, PreemptionRecord] = {}
        self.retry_at: Dict[str, Fraction] = {}
        self.launch_seq = 0
        self.vseq = {vid: i for i, vid in enumerate(sorted(self.vctxs))}
        self.tokens = 0
        self.tokens_live: Dict[str, int] = {}
        self.last_token_time: Dict[str, Fraction] = {}
        self.oversubscribed: Dict[str, bool] = {d: False for d in self.devices}

        self.events: List[dict] = []
        self.kernels: List[KernelRecord] = []
        self.transcripts: Dict[str, List[Tuple[str, int]]] = {vid: [] for vid in self.vctxs}
        self.ledger: List[LedgerEntry] = []
        self.migrations: List[MigrationRecord] = []
        self.preemptions: List[PreemptionRecord] = []
        self.policy_errors: List[dict] = []
        self.quarantines: List[QuarantineState] = []
        self.signals: List[dict] = []
        self.event_count = 0
        self._view_cache = None
        self._version = 0
        self._changed = False

        for v in sorted(self.vctxs.values(), key=lambda v: (v.arrival_time, self.vseq[v.id])):
            self.vstate[v.id] = "waiting"
            self.queue.schedule(self.num(v.arrival_time), "Arrival", vctx=v.id)
        for f in faults:
            self.queue.schedule(self.num(f.inject_time), "FaultInjected", fault=f)

    # -- helpers -------------------------------------------------------------

    @property
    def now(self):
        return self.queue.now

    def _token(self, key):
        self.tokens += 1
        self.tokens_live[key] = self.tokens
        return self.tokens

    def _live(self, key, token):
        return self.tokens_live.get(key) == token

    def _kill(self, key):
        self.tokens_live.pop(key, None)

    def _touch(self):
        self._version += 1
        self._view_cache = None

    def snapshot(self, device_id) -> ContentionSnapshot:
        entries = tuple((pid, self.pctxs[pid].fraction, r.kernel.mem_bw_demand)
                        for pid, r in sorted(self.running.items())
                        if self.pctxs[pid].device_id == device_id)
        return ContentionSnapshot(device_id, entries)

    def _seg(self, work):
        return work / self.costs.segments

    def _est_factor(self, kernel, pctx):
        demands = [d for _, _, d in self.snapshot(pctx.device_id).entries]
        return self.num(kernel_speed(kernel, pctx.tier, demands + [kernel.mem_bw_demand]))

    def _charge(self, kind, amount, vctx=None, pctx=None):
        if amount:
            self.ledger.append(LedgerEntry(kind, self.now, amount, vctx, pctx))

    def _signal(self, what, **data):
        data["what"] = what
        data["t"] = self.now
        self.signals.append(data)
        log.debug("signal %s", data)

    # -- policy view ---------------------------------------------------------

    def view(self) -> PolicyView:
        if self._view_cache is not None:
            return self._view_cache
        now = self.now
        pviews = {}
        for pid, p in self.pctxs.items():
            r = self.running.get(pid)
            if r is not None:
                rem = (r.work - r.retired_at(now)) * r.factor
                running, fac = r.kernel, r.factor
            else:
                rem, running, fac = self.num(0), None, Fraction(1)
            queued = ()
            if p.bound is not None and r is None and p.hw_queue:
                v = self.vctxs[p.bound]
                queued = tuple(k for k in v.pending[:1] if k.id in p.hw_queue)
            dev = self.devices[p.device_id]
            pviews[pid] = PctxView(pid, p.device_id, p.fraction, p.bound, p.bound_since,
                                   p.last_vctx, not p.resetting and not dev.failed
                                   and pid not in self.reserved,
                                   p.rck_flag, running, rem, fac, queued,
                                   getattr(self.preempt_open.get(pid), "beneficiary", None))
        dviews = {}
        for did, d in self.devices.items():
            demands = tuple(r.kernel.mem_bw_demand for pid, r in sorted(self.running.items())
                            if self.pctxs[pid].device_id == did)
            used = sum((p.fraction for p in d.pctx_pool
                        if p.bound is not None or p.id in self.reserved), Fraction(0))
            dviews[did] = DeviceView(did, tuple(p.id for p in d.pctx_pool), used, demands,
                                     d.standby, d.failed)
        vviews = {}
        for vid, v in self.vctxs.items():
            if v.status not in (VStatus.ACTIVE,):
                continue
            vviews[vid] = VctxView(vid, v.priority_class, v.status, self.vstate.get(vid, ""),
                                   self.table.get(vid), v.quarantined, v.head,
                                   v.arrival_time, v.slo, self.vseq[vid])
        self._view_cache = PolicyView(
            clock=now, bindings=MappingProxyType(self.table.as_dict()),
            pctxs=MappingProxyType(pviews), devices=MappingProxyType(dviews),
            vctxs=MappingProxyType(vviews), waiting=tuple(self.waiting.values()),
            predictor=self.predictor, costs=self.costs, min_tier=self.min_tier,
            reserved=frozenset(self.reserved))
        return self._view_cache

    # -- contention ----------------------------------------------------------

    def recompute_on_contention_change(self, device_id):
        """Re-price every running kernel on the device; retired work is kept."""
        now = self.now
        runs = [r for pid, r in sorted(self.running.items())
                if self.pctxs[pid].device_id == device_id]
        if not runs:
            self.oversubscribed[device_id] = False
            return []
        snap = self.snapshot(device_id)
        rescheduled = []
        for r in runs:
            if now > r.since:
                r.intervals.append((r.since, now, r.factor))
                r.retired = r.retired + (now - r.since) / r.factor
                r.since = now
            r.factor = self.num(kernel_speed(r.kernel, self.pctxs[r.pctx].tier, snap))
            r.max_factor = max(r.max_factor, r.factor)
            rescheduled.append(self._schedule_milestone(r))
        over = snap.total_demand > 1
        if over and not self.oversubscribed[device_id]:
            self.oversubscribed[device_id] = True
            self._congestion(device_id)
        elif not over:
            self.oversubscribed[device_id] = False
        return rescheduled

    def _schedule_milestone(self, r: Running):
        targets = [(r.work, 0, "KernelFinish")]
        if r.preempt_target is not None:
            targets.append((r.preempt_target, 1, "PreemptSignal"))
        if r.hang_target is not None:
            targets.append((r.hang_target, 2, "HangCheck"))
        work, _, kind = min(targets)
        work = max(work, r.retired)
        t = r.since + (work - r.retired) * r.factor
        token = self._token(r.pctx)
        r.token = token
        return self.queue.schedule(t, kind, pctx=r.pctx, token=token)

    def _settle(self, r: Running):
        now = self.now
        if now > r.since:
            r.intervals.append((r.since, now, r.factor))
            r.retired = r.retired + (now - r.since) / r.factor
            r.since = now

    # -- main loop -----------------------------------------------------------

    def run(self, until=None) -> SimulationReport:
        until = None if until is None else self.num(until)
        while self.queue:
            nxt = self.queue.peek()
            if until is not None and nxt.time > until:
                break
            ev = self.queue.pop()
            handler = getattr(self, "_on_" + ev.kind)
            handled = handler(ev)
            if handled is False:
                continue
            self.event_count += 1
            if self.event_count > self.max_events:
                raise EventBudgetExceeded(f"more than {self.max_events} events")
            if self.record_events:
                rec = {"t": fmt_time(ev.time), "seq": ev.seq, "kind": ev.kind}
                rec.update(_jsonable({k: v for k, v in ev.data.items()
                                      if k not in ("token", "fault", "launch")}))
                if "fault" in ev.data:
                    rec["fault"] = _jsonable(ev.data["fault"].as_dict())
                if isinstance(handled, dict):
                    rec.update(_jsonable(handled))
                self.events.append(rec)
            self._touch()
            if self._changed:
                self._retry()
            if self.check_invariants:
                self._check()
            if self.observer is not None:
                self.observer(self, ev)
        if until is not None and (self.queue or self.now < until):
            self.queue.now = max(self.now, until)
        stuck = sorted(vid for vid, v in self.vctxs.items() if v.status == VStatus.ACTIVE)
        if until is not None:
            stuck = [] if self.queue else stuck
        return SimulationReport(
            clock=self.now, events=self.events, kernels=self.kernels, vctxs=self.vctxs,
            transcripts=self.transcripts, ledger=self.ledger, migrations=self.migrations,
            preemptions=self.preemptions, policy_errors=self.policy_errors,
            quarantines=self.quarantines, signals=self.signals, stuck=stuck,
            event_count=self.event_count)

    def _check(self):
        self.table.check(self.pctxs)
        for d in self.devices.values():
            d.check()
        for p in self.pctxs.values():
            p.check()

    # -- decisions -----------------------------------------------------------

    def _retry(self):
        for _ in range(8):
            self._changed = False
            if not self.waiting:
                return
            view = self.view()
            order = sorted(self.waiting.values(),
                           key=lambda l: self.policy.order_key(view, l))
            for launch in order:
                if self.waiting.get(launch.vctx_id) is launch:
                    self._consider(launch)
            if not self._changed:
                return

    def _consider(self, launch: Launch):
        view = self.view()
        try:
            decision = self.policy.on_launch(view, launch)
        except PolicyError as e:
            decision = self._policy_error(launch, str(e))
        self._apply(launch, decision)

    def _policy_error(self, launch, msg):
        self.policy_errors.append({"t": self.now, "vctx": launch.vctx_id,
                                   "kernel": launch.kernel.id, "error": msg})
        log.info("policy error for %s: %s", launch.vctx_id, msg)
        return Decision.defer("policy-error")

    def _validate(self, launch: Launch, d: Decision) -> Decision:
        v = self.vctxs[launch.vctx_id]
        if d.kind not in ("direct", "remap", "defer", "preempt", "noaction"):
            raise PolicyError(f"unknown decision kind {d.kind!r}")
        if d.kind == "preempt":
            p = self.pctxs.get(d.target)
            if p is None or p.bound is None:
                raise PolicyError(f"preempt target {d.target} is not bound")
            return d
        if d.kind in ("defer", "noaction"):
            return d
        target = d.target
        if target is not None and target in self.reserved:
            raise PolicyError(f"{target} is reserved for an emergency migration")
        if target is not None and target in self.pctxs:
            p = self.pctxs[target]
            dev = self.devices[p.device_id]
            if dev.failed:
                raise PolicyError(f"{target} lives on failed device {dev.id}")
            if v.quarantined and p.fraction > self.min_tier:
                raise PolicyError(f"quarantined {v.id} may not bind tier {p.fraction}")
        dispatch(v, launch.kernel, self.table, d, self.pctxs)
        return d

    def _apply(self, launch: Launch, d: Decision):
        try:
            d = self._validate(launch, d)
        except (PolicyError, PoolExhausted, BindConflict, DoubleBind) as e:
            d = self._policy_error(launch, str(e))
        vid = launch.vctx_id
        if d.kind == "preempt":
            self._preempt(d.target, reason=d.reason or "policy", beneficiary=vid)
            return
        if d.kind in ("defer", "noaction"):
            if d.retry_at is not None and d.retry_at > self.now:
                at = self.num(d.retry_at)
                if self.retry_at.get(vid) != at:
                    self.retry_at[vid] = at
                    self.queue.schedule(at, "LaunchReady", vctx=vid, retry=True,
                                        token=self._token("retry:" + vid))
            return
        self._kill("retry:" + vid)
        self.retry_at.pop(vid, None)
        if d.grid_override is not None:
            launch.grid = d.grid_override
        bound = self.table.get(vid)
        if d.kind == "direct" and (d.target is None or d.target == bound):
            del self.waiting[vid]
            self._dispatch(vid, bound, launch)
        else:
            self._place(vid, d.target, launch)
        self._changed = True
        self._touch()

    def _congestion(self, device_id):
        hook = getattr(self.policy, "on_congestion", None)
        if hook is None:
            return
        d = hook(self.view(), device_id)
        if d is not None and d.kind == "preempt":
            p = self.pctxs.get(d.target)
            if p is None or p.bound is None:
                self.policy_errors.append({"t": self.now, "hook": "on_congestion",
                                           "error": f"bad preempt target {d.target}"})
            else:
                self._preempt(d.target, reason=d.reason or "congestion")

    # -- binding and dispatch ------------------------------------------------

    def _bind(self, vid, pid):
        v, p = self.vctxs[vid], self.pctxs[pid]
        self.switch_due[vid] = ((p.last_vctx is not None and p.last_vctx != vid) or
                                (v.last_pctx is not None and v.last_pctx != pid))
        self.table.bind(v, p)
        p.bound_since = self.now
        self._changed = True

    def _unbind(self, vid):
        pid = self.table.get(vid)
        if pid is None:
            return None
        p = self.pctxs[pid]
        self.table.unbind(self.vctxs[vid], p)
        p.bound_since = None
        self._changed = True
        return pid

    def _place(self, vid, target, launch: Launch, reason="remap"):
        v = self.vctxs[vid]
        self.waiting.pop(vid, None)
        src = self._unbind(vid)
        self._bind(vid, target)
        prev = v.last_pctx
        if prev is None:
            for r in v.working_set.values():
                if not r.resident_on:
                    r.resident_on.add(target)
            self._dispatch(vid, target, launch)
            return
        if prev == target:
            self._dispatch(vid, target, launch)
            return
        eng = self.copy_engines.pop(vid, None)
        if eng is not None:
            eng.cancel(self.now)
        mset = compute_migration_set(v, launch.kernel, target)
        rec = migrate(v, self.pctxs.get(prev), self.pctxs[target], mset, self.now, self.costs,
                      reason=reason)
        rec.src = src or prev
        self.migrations.append(rec)
        self._charge("migration", rec.end - self.now, vid, target)
        self.pending_migration[vid] = rec
        self.vstate[vid] = "migrating"
        token = self._token("mig:" + vid)
        self.queue.schedule(self.num(rec.end), "MigrationDone", vctx=vid, token=token,
                            launch=launch)

    def _dispatch(self, vid, pid, launch: Launch):
        v, p = self.vctxs[vid], self.pctxs[pid]
        k = launch.kernel
        p.hw_queue.append(k.id)
        self.dispatch_time.setdefault(k.id, self.now)
        t = self.now
        if self.switch_due.pop(vid, False):
            seg = self._seg(self._work_of(k)) * self._est_factor(k, p)
            cost = self.costs.ctx_switch_overhead * seg
            self._charge("ctx_switch", cost, vid, pid)
            t = t + cost
        eng = self.copy_engines.get(vid)
        if eng is not None:
            eng.advance(t)
            if not eng.queue:
                self.copy_engines.pop(vid, None)
        for rid in sorted(k.touched_regions):
            region = v.working_set[rid]
            if pid in region.resident_on:
                continue
            if eng is None:
                eng = CopyEngine(v, pid, [], t, self.costs.copy_bandwidth,
                                 self.costs.fault_fixed)
            landed = eng.fault(rid, t)
            self._charge("fault", landed - t, vid, pid)
            t = landed
        if eng is not None and eng.queue:
            self.copy_engines[vid] = eng
        self.vstate[vid] = "starting"
        token = self._token("start:" + vid)
        self.queue.schedule(t, "KernelStart", vctx=vid, pctx=pid, token=token, launch=launch)

    def _work_of(self, k: Kernel):
        stretch = self.pending_stretch.get(k.id, 1)
        return self.num(k.base_duration * stretch)

    # -- event handlers ------------------------------------------------------

    def _on_Arrival(self, ev):
        v = self.vctxs[ev.data["vctx"]]
        if v.status != VStatus.WAITING:
            return False
        v.status = VStatus.ACTIVE
        self._changed = True
        if not v.pending:
            v.status = VStatus.DONE
            self.vstate[v.id] = "done"
            return {}
        self.vstate[v.id] = "idle"
        self.queue.schedule(self.now + self.num(v.head.launch_delay), "LaunchReady", vctx=v.id)
        return {}

    def _make_launch(self, v: VirtualContext) -> Launch:
        k = v.head
        self.launch_seq += 1
        return Launch(v.id, k, self.now, self.launch_seq, self._deadline(v, k))

    def _deadline(self, v: VirtualContext, k: Kernel):
        slo = v.slo
        if slo is None:
            return None
        if k.phase == Phase.PREFILL:
            return self.num(v.arrival_time + slo.ttft_deadline)
        if k.phase == Phase.DECODE:
            last = self.last_token_time.get(v.id)
            if last is None:
                return self.num(v.arrival_time + slo.ttft_deadline)
            return last + self.num(slo.tpot_deadline)
        if getattr(slo, "e2e_deadline", None) is not None:
            return self.num(v.arrival_time + slo.e2e_deadline)
        return None

    def _on_LaunchReady(self, ev):
        vid = ev.data["vctx"]
        if ev.data.get("retry"):
            if not self._live("retry:" + vid, ev.data["token"]):
                return False
            self._kill("retry:" + vid)
            self.retry_at.pop(vid, None)
        v = self.vctxs[vid]
        if v.status != VStatus.ACTIVE:
            return False
        state = self.vstate.get(vid)
        if ev.data.get("retry") and state != "pending":
            return False
        if state == "idle":
            if not v.pending:
                return False
            launch = self._make_launch(v)
            self.waiting[vid] = launch
            self.vstate[vid] = "pending"
        elif state == "pending":
            launch = self.waiting[vid]
        else:
            return False
        self._touch()
        self._consider(launch)
        return {"kernel": launch.kernel.id}

    def _on_MigrationDone(self, ev):
        vid = ev.data["vctx"]
        if not self._live("mig:" + vid, ev.data["token"]):
            return False
        self._kill("mig:" + vid)
        v = self.vctxs[vid]
        rec = self.pending_migration.pop(vid)
        for rid in rec.eager:
            r = v.working_set[rid]
            r.resident_on.add(rec.dst)
            r.dirty = False
        if rec.lazy:
            self.copy_engines[vid] = CopyEngine(v, rec.dst, rec.lazy, self.now,
                                                self.costs.copy_bandwidth,
                                                self.costs.fault_fixed, rec)
        pid = self.table.get(vid)
        p = self.pctxs[pid]
        launch = ev.data.get("launch")
        if p.rck_flag:
            self._yield_at_boundary(pid, launch.kernel if launch else v.head)
            return {"dst": rec.dst}
        if launch is None:
            self.vstate[vid] = "idle"
            if v.pending:
                self.queue.schedule(self.now, "LaunchReady", vctx=vid)
        else:
            self._dispatch(vid, pid, launch)
        return {"dst": rec.dst, "eager_bytes": rec.eager_bytes, "lazy_bytes": rec.lazy_bytes}

    def _on_KernelStart(self, ev):
        vid = ev.data["vctx"]
        if not self._live("start:" + vid, ev.data["token"]):
            return False
        self._kill("start:" + vid)
        pid = ev.data["pctx"]
        launch: Launch = ev.data["launch"]
        k = launch.kernel
        v = self.vctxs[vid]
        p = self.pctxs[pid]
        if p.rck_flag:
            self._yield_at_boundary(pid, k)
            return {"kernel": k.id, "yielded": True}
        if k.id in self.partial:
            retired, intervals, tiers = self.partial.pop(k.id)
        else:
            retired, intervals, tiers = self.num(0), [], []
        tiers.append(p.fraction)
        work = self._work_of(k)
        r = Running(kernel=k, vctx=vid, pctx=pid, work=work, retired=retired,
                    factor=Fraction(1), since=self.now, token=0,
                    grid=launch.grid or k.grid_size, intervals=intervals, tiers=tiers)
        if k.id not in self.hang_pred:
            self.hang_pred[k.id] = self._hang_prediction(k)
        if not v.quarantined and vid not in self.hang_flagged:
            pred = self.hang_pred[k.id]
            if pred is not None:
                r.hang_target = self.num(self.hang_threshold * pred)
        self.first_start.setdefault(k.id, self.now)
        self.running[pid] = r
        self.vstate[vid] = "running"
        self.recompute_on_contention_change(p.device_id)
        return {"kernel": k.id, "pctx": pid}

    def _hang_prediction(self, k: Kernel):
        pred = self.predictor
        hint = k.base_duration if self.predictor_hints else None
        if not pred.knows(k.signature) and hint is None and not pred.knows_semantic(k.semantic_id):
            return None
        return pred.predict(k.signature, hint)

    def _on_KernelFinish(self, ev):
        pid = ev.data["pctx"]
        if not self._live(pid, ev.data["token"]):
            return False
        self._kill(pid)
        r = self.running.pop(pid)
        self._settle(r)
        r.retired = r.work
        k, vid = r.kernel, r.vctx
        v = self.vctxs[vid]
        p = self.pctxs[pid]
        if k.id in p.hw_queue:
            p.hw_queue.remove(k.id)
        v.retire_head()
        self.transcripts[vid].append((k.semantic_id, r.grid))
        rec = KernelRecord(vid, k.id, k.semantic_id, r.grid, k.phase,
                           self.dispatch_time.pop(k.id), self.first_start.pop(k.id),
                           self.now, r.work, r.intervals, r.tiers)
        self.kernels.append(rec)
        self.predictor.observe(k.signature, r.work)
        self.hang_pred.pop(k.id, None)
        for rid in k.touched_regions:
            region = v.working_set[rid]
            region.resident_on = {pid}
            region.dirty = True
        if k.phase in (Phase.DECODE,):
            self.last_token_time[vid] = self.now
        self._changed = True
        self.recompute_on_contention_change(p.device_id)
        if p.rck_flag:
            self._yield_at_boundary(pid, k, after_finish=r)
        elif not v.pending:
            self._finish_vctx(vid)
        else:
            self.vstate[vid] = "idle"
            self.queue.schedule(self.now + self.num(v.head.launch_delay), "LaunchReady",
                                vctx=vid)
        hook = getattr(self.policy, "on_completion", None)
        if hook is not None:
            d = hook(self.view(), rec)
            if d is not None and d.kind == "preempt":
                q = self.pctxs.get(d.target)
                if q is None or q.bound is None:
                    self.policy_errors.append({"t": self.now, "hook": "on_completion",
                                               "error": f"bad preempt target {d.target}"})
                else:
                    self._preempt(d.target, reason=d.reason or "completion")
        return {"kernel": k.id, "vctx": vid}

    def _finish_vctx(self, vid):
        v = self.vctxs[vid]
        self._unbind(vid)
        eng = self.copy_engines.pop(vid, None)
        if eng is not None:
            eng.cancel(self.now)
        v.status = VStatus.DONE
        self.vstate[vid] = "done"
        self._changed = True

    # -- preemption ----------------------------------------------------------

    def preempt(self, pctx_id, reason="external", beneficiary=None):
        """Raise the RCK flag on a pCtx; NoOpPreempt if nothing is bound."""
        p = self.pctxs[pctx_id]
        if p.bound is None:
            self._signal("NoOpPreempt", pctx=pctx_id)
            raise NoOpPreempt(pctx_id)
        return self._preempt(pctx_id, reason, beneficiary)

    def _preempt(self, pid, reason, beneficiary=None):
        p = self.pctxs[pid]
        if p.bound is None:
            self._signal("NoOpPreempt", pctx=pid)
            return None
        if p.rck_flag:
            rec = self.preempt_open.get(pid)
            if rec is not None and reason == "global-fault":
                rec.reason = reason
            return rec
        vid = p.bound
        p.rck_flag = True
        self._changed = True
        self._touch()
        state = self.vstate.get(vid)
        r = self.running.get(pid)
        rec = PreemptionRecord(pctx=pid, vctx=vid, kernel=r.kernel.id if r else None,
                               signal_time=self.now, reason=reason, beneficiary=beneficiary)
        self.preempt_open[pid] = rec
        self.preemptions.append(rec)
        if r is not None:
            self._settle(r)
            r.max_factor = r.factor
            r.preempt_target = next_boundary(r.retired, r.work, self.costs.segments)
            self._schedule_milestone(r)
        elif state == "starting":
            self._kill("start:" + vid)
            self._yield_at_boundary(pid, self.vctxs[vid].head)
        elif state == "migrating":
            pass  # yields once the migration lands
        else:
            self._yield_at_boundary(pid, None)
        return rec

    def _yield_at_boundary(self, pid, kernel: Optional[Kernel], after_finish=None):
        p = self.pctxs[pid]
        vid = p.bound
        rec = self.preempt_open.get(pid)
        if kernel is not None:
            if after_finish is not None:
                seg = self._seg(after_finish.work) * after_finish.factor
            else:
                seg = self._seg(self._work_of(kernel)) * self._est_factor(kernel, p)
            cost = self.costs.preempt_overhead * seg
        else:
            seg = cost = self.num(0)
        if rec is not None:
            rec.yield_time = self.now
            rec.segment_time = seg
            rec.cost = cost
            if after_finish is not None:
                rec.max_factor = max(rec.max_factor, after_finish.max_factor)
        self._charge("preempt", cost, vid, pid)
        p.hw_queue.clear()
        if vid is not None:
            self.vstate[vid] = "yielding"
        self.queue.schedule(self.now + cost, "Release", pctx=pid, mode="preempt", vctx=vid)

    def _on_PreemptSignal(self, ev):
        pid = ev.data["pctx"]
        if not self._live(pid, ev.data["token"]):
            return False
        self._kill(pid)
        r = self.running.pop(pid)
        self._settle(r)
        r.retired = r.preempt_target
        rec = self.preempt_open.get(pid)
        if rec is not None:
            rec.max_factor = max(rec.max_factor, r.max_factor)
        self.partial[r.kernel.id] = (r.retired, r.intervals, r.tiers)
        seg = self._seg(r.work) * r.factor
        cost = self.costs.preempt_overhead * seg
        p = self.pctxs[pid]
        self.recompute_on_contention_change(p.device_id)
        if rec is not None:
            rec.yield_time = self.now
            rec.segment_time = seg
            rec.cost = cost
        self._charge("preempt", cost, r.vctx, pid)
        p.hw_queue.clear()
        self.vstate[r.vctx] = "yielding"
        self.queue.schedule(self.now + cost, "Release", pctx=pid, mode="preempt", vctx=r.vctx)
        return {"kernel": r.kernel.id, "retired": r.retired}

    def _on_Release(self, ev):
        pid = ev.data["pctx"]
        mode = ev.data["mode"]
        p = self.pctxs[pid]
        self._changed = True
        if mode == "reset":
            p.resetting = False
            return {}
        vid = ev.data.get("vctx")
        rec = self.preempt_open.pop(pid, None)
        if rec is not None:
            rec.release_time = self.now
        if vid is None or p.bound != vid:
            return {}
        v = self.vctxs[vid]
        self._unbind(vid)
        dst = self.emergency.pop(vid, None)
        if dst is not None:
            self.reserved.pop(dst, None)
        if not v.pending:  # its last kernel finished while the signal was in flight
            self._finish_vctx(vid)
            return {}
        if dst is not None:
            self._emergency_move(vid, pid, dst)
            return {"emergency_dst": dst}
        if vid in self.waiting:
            self.vstate[vid] = "pending"  # yielded before its launch was placed
            return {}
        self.vstate[vid] = "idle"
        self.queue.schedule(self.now, "LaunchReady", vctx=vid)
        return {}

    # -- soft hangs ----------------------------------------------------------

    def _on_HangCheck(self, ev):
        pid = ev.data["pctx"]
        if not self._live(pid, ev.data["token"]):
            return False
        self._kill(pid)
        r = self.running[pid]
        self._settle(r)
        target = r.hang_target
        r.retired = max(r.retired, target)
        r.hang_target = None
        self._schedule_milestone(r)
        from .faults import detect_soft_hang, quarantine
        pred = target / self.hang_threshold
        if detect_soft_hang(r.retired, pred, self.hang_threshold):
            self.hang_flagged.add(r.vctx)
            self.quarantines.append(quarantine(self, r.vctx))
            return {"vctx": r.vctx, "flagged": True}
        return {"vctx": r.vctx, "flagged": False}

    # -- faults --------------------------------------------------------------

    def _on_FaultInjected(self, ev):
        from . import faults
        f = ev.data["fault"]
        return faults.apply_fault(self, f) or {}

    def _emergency_move(self, vid, src, dst):
        v = self.vctxs[vid]
        self._bind(vid, dst)
        eng = self.copy_engines.pop(vid, None)
        if eng is not None:
            eng.cancel(self.now)
        everything = frozenset(v.working_set)
        rec = migrate(v, self.pctxs[src], self.pctxs[dst], (everything, frozenset()), self.now,
                      self.costs, reason="emergency")
        self.migrations.append(rec)
        self._charge("migration", rec.end - self.now, vid, dst)
        self.pending_migration[vid] = rec
        self.vstate[vid] = "migrating"
        token = self._token("mig:" + vid)
        self.queue.schedule(self.num(rec.end), "MigrationDone", vctx=vid, token=token,
                            launch=None)

    def fail_vctx(self, vid, status=VStatus.FAILED):
        """Terminate a vCtx wherever it is in its lifecycle."""
        v = self.vctxs[vid]
        self._kill("start:" + vid)
        self._kill("mig:" + vid)
        pid = self.table.get(vid)
        if pid is not None:
            r = self.running.pop(pid, None)
            if r is not None:
                self._kill(pid)
                self.recompute_on_contention_change(self.pctxs[pid].device_id)
            self.preempt_open.pop(pid, None)
            self._unbind(vid)
        rec = self.pending_migration.pop(vid, None)
        if rec is not None:
            rec.aborted = True
        eng = self.copy_engines.pop(vid, None)
        if eng is not None:
            eng.cancel(self.now)
        self.waiting.pop(vid, None)
        dst = self.emergency.pop(vid, None)
        if dst is not None:
            self.reserved.pop(dst, None)
        v.status = status
        self.vstate[vid] = "failed"
        self._changed = True
        return pid
