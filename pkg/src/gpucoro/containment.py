"""Brute-force search for a decision sequence that reproduces a transcript.

Used to check that schedules of the restricted baselines (temporal time
slicing, static slices) lie inside the schedule space of the general
spatial framework.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

from .engine import Simulator
from .policies import Policy
from .runtime import Decision


class _OffTrack(Exception):
    pass


class NeedChoice(Exception):
    def __init__(self, view, launch, woke=False):
        super().__init__(launch.vctx_id)
        self.view = view
        self.launch = launch
        self.woke = woke


class ScriptedPolicy(Policy):
    """Replays a fixed decision list, then asks the caller for the next one.

    A deferral with a wake-up time puts that vCtx to sleep: until then its
    launches are deferred without consuming a scripted decision.
    """

    name = "scripted"

    def __init__(self, script):
        super().__init__()
        self.script = list(script)
        self.pos = 0
        self.asleep = {}

    def order_key(self, view, launch):
        return (launch.seq,)

    def on_launch(self, view, launch):
        vid = launch.vctx_id
        wake = self.asleep.get(vid, view.clock)
        if wake > view.clock:
            return Decision.defer("asleep")
        if self.pos < len(self.script):
            d = self.script[self.pos]
            self.pos += 1
            if d.kind == "defer" and d.retry_at is not None:
                self.asleep[vid] = d.retry_at
            return d
        raise NeedChoice(view, launch, woke=self.asleep.get(vid) == view.clock)


def transcript(kernels) -> List[Tuple[str, str, object, object]]:
    """(vctx, kernel, start, finish) ordered by start time."""
    return sorted(((r.vctx, r.kernel, r.start, r.finish) for r in kernels),
                  key=lambda t: (t[2], t[3], t[0], t[1]))


def alphabet(view, launch, times, remap=True, preempt=True) -> List[Decision]:
    """Every decision the framework could return here."""
    vid = launch.vctx_id
    bound = view.vctxs[vid].bound
    out = []
    if bound is not None:
        out.append(Decision.direct())
    free = sorted(view.free_pctxs(releasing=bound), key=lambda p: (-p.tier, p.id))
    for p in free:
        if p.id == bound:
            continue
        if bound is None:
            out.append(Decision.direct(p.id))
        elif remap:
            out.append(Decision.remap(p.id))
    out += [Decision.defer("scripted", retry_at=t) for t in times if t > view.clock]
    out.append(Decision.defer("scripted"))
    if preempt:
        for p in sorted(view.pctxs.values(), key=lambda p: p.id):
            if p.bound is not None and not p.rck:
                out.append(Decision.preempt(p.id))
    return out


def _order(choices, view, launch, target, times):
    """Try first what the target transcript suggests; order only, never pruning."""
    want = {k: (s, f) for _, k, s, f in target}
    head = want.get(launch.kernel.id)
    later = [t for t in times if t > view.clock]
    soon = head is not None and (not later or min(later) >= head[0])
    interrupted = set()
    for p in view.pctxs.values():
        k = p.running
        if k is not None and k.id in want:
            alone = view.clock + p.running_remaining
            if want[k.id][1] > alone:
                interrupted.add(p.id)

    def rank(d):
        if d.kind == "preempt":
            return 0 if d.target in interrupted else 4
        if d.kind in ("direct", "remap"):
            return 1 if soon else 3
        return 2 if d.retry_at is not None else 5
    return sorted(choices, key=rank)


@dataclass
class SearchResult:
    found: bool
    script: Optional[List[Decision]]
    nodes: int


def _consistent(sim: Simulator, target, complete) -> bool:
    got = transcript(sim.kernels)
    done = {(v, k): (s, f) for v, k, s, f in got}
    want = {(v, k): (s, f) for v, k, s, f in target}
    for key, sf in done.items():
        if want.get(key) != sf:
            return False
    for kid, start in sim.first_start.items():
        match = [sf for (v, k), sf in want.items() if k == kid]
        if not match or match[0][0] != start:
            return False
    for r in sim.running.values():
        sf = want.get((r.vctx, r.kernel.id))
        # slowdown factors are >= 1, so remaining work bounds the finish from below
        if sf is not None and sim.now + r.work - r.retired_at(sim.now) > sf[1]:
            return False
    started = set(sim.first_start) | {k for _, k in done}
    for (v, k), (s, f) in want.items():
        if k not in started and s < sim.now:
            return False
        if (v, k) not in done and f < sim.now:
            return False
    if complete:
        return got == list(target)
    return True


def _may_wake(choice, launch, sim, want):
    """A vCtx asleep past its head kernel's target start can never match."""
    if choice.kind != "defer" or choice.retry_at is None:
        return True
    sf = want.get(launch.kernel.id)
    if sf is None:
        return True
    bound = sf[0] if launch.kernel.id not in sim.first_start else sf[1]
    return choice.retry_at <= bound


def search(build: Callable[[Policy], Simulator], target, times, remap=True, preempt=True,
           max_nodes=200_000, max_depth=120, on_grid=True) -> SearchResult:
    """Depth-first search over scripted decision sequences.

    `build(policy)` returns a fresh simulator; `target` is the transcript to
    reproduce; `times` are candidate wake-up times for deferrals. Each prefix
    is replayed from scratch and abandoned once its partial transcript
    contradicts the target. Children are visited in an order hinted by the
    target, but all of them are visited, so an exhausted search proves that
    no sequence exists (up to the depth and node limits). With `on_grid` a
    run is also abandoned when it processes an event at a time outside
    `times`, which narrows the space to runs whose clock stays on the
    reference grid.
    """
    grid = set(times)
    want = {k: (s, f) for _, k, s, f in target}

    def watch(sim, ev):
        if ev.time not in grid:
            raise _OffTrack()

    stack = [[]]
    nodes = 0
    while stack:
        script = stack.pop()
        nodes += 1
        if nodes > max_nodes:
            break
        sim = build(ScriptedPolicy(script))
        if on_grid:
            sim.observer = watch
        try:
            sim.run()
            complete, need = True, None
        except NeedChoice as nc:
            complete, need = False, nc
        except _OffTrack:
            continue
        if not _consistent(sim, target, complete):
            continue
        if complete:
            return SearchResult(True, script, nodes)
        if len(script) >= max_depth:
            continue
        # sleeping again right after waking equals one longer sleep
        kids = [c for c in alphabet(need.view, need.launch, times, remap, preempt)
                if _may_wake(c, need.launch, sim, want)
                and not (need.woke and c.kind == "defer" and c.retry_at is not None)]
        kids = _order(kids, need.view, need.launch, target, times)
        stack.extend(script + [c] for c in reversed(kids))
    return SearchResult(False, None, nodes)


def reproduce(build: Callable[[Policy], Simulator], reference: Policy, **kw) -> SearchResult:
    """Run `reference`, then search the general framework for its transcript."""
    sim = build(reference)
    times = set()
    sim.observer = lambda _sim, ev: times.add(ev.time)
    rep = sim.run()
    return search(build, transcript(rep.kernels), sorted(times), **kw)


def random_instance(seed, max_kernels=5, tiers=None):
    """Two jobs, at most `max_kernels` kernels, one device with tiers {1, 1/2}."""
    from fractions import Fraction
    import numpy as np
    from .scenario import Scenario
    rng = np.random.default_rng(seed)
    total = int(rng.integers(2, max_kernels + 1))
    na = int(rng.integers(1, total))
    half = Fraction(1, 2)
    pick = lambda xs: xs[int(rng.integers(len(xs)))]

    def kernels(n):
        return [{"duration": pick([half, 1, Fraction(3, 2), 2]),
                 "saturation": pick([half, 1]),
                 "launch_delay": pick([0, 0, half])} for _ in range(n)]
    jobs = [{"id": "a", "kernels": kernels(na)},
            {"id": "b", "arrival": pick([0, half, 1, 2]), "kernels": kernels(total - na)}]
    quantum = pick([1, Fraction(3, 2), 2])
    tiers = [1, half] if tiers is None else list(tiers)
    return Scenario(devices=[{"id": "g", "tiers": tiers}], jobs=jobs), quantum
