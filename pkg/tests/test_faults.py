from fractions import Fraction as F

import pytest

from gpucoro import (Decision, Fault, NoEffect, Scenario, VStatus, detect_soft_hang,
                     kernel_speed)
from gpucoro.faults import apply_local_exception
from gpucoro.policies import Policy
from gpucoro.runtime import DIRECT

HALVES = [{"id": "g", "tiers": [F(1, 2), F(1, 2)]}]


def _pair(faults=(), devices=HALVES, n=6):
    return Scenario(devices=devices, faults=[Fault.from_dict(f) for f in faults],
                    jobs=[{"id": j, "kernels": [{"duration": 1, "saturation": F(1, 2)}],
                           "repeat": n} for j in "ab"])


def _bound_pctx(sc, vid, t):
    sim = sc.simulator()
    sim.run(until=t)
    return sim.table.get(vid)


# -- local exceptions ----------------------------------------------------------

def test_local_exception_contained():
    base = _pair().run()
    pid = _bound_pctx(_pair(), "a", F(5, 2))
    rep = _pair([{"kind": "LocalException", "target": pid, "time": F(5, 2)}]).run()
    assert rep.vctxs["a"].status == VStatus.FAILED
    assert rep.transcripts["b"] == base.transcripts["b"]
    times = lambda r: [(k.kernel, k.start, k.finish) for k in r.kernels if k.vctx == "b"]
    assert times(rep) == times(base)


def test_local_exception_on_unbound_pctx():
    sc = _pair([{"kind": "LocalException", "target": "g/p0", "time": 100}])
    rep = sc.run()
    assert any(s["what"] == "NoEffect" for s in rep.signals)
    sim = _pair().simulator()
    with pytest.raises(NoEffect):
        apply_local_exception(sim, "g/p0")


def test_reset_delay_before_reuse():
    jobs = [{"id": "a", "kernels": [{"duration": 4}]},
            {"id": "b", "arrival": 1, "kernels": [{"duration": 1}]}]
    sc = Scenario(devices=[{"id": "g", "tiers": [1]}], jobs=jobs,
                  faults=[Fault("LocalException", "g/p0", F(1, 2))])
    rep = sc.run()
    (rb,) = rep.kernels
    switch = F(4, 100) / 16
    assert rb.vctx == "b" and rb.start == 1 + switch  # reset ended at 6/10
    sc.faults = [Fault("LocalException", "g/p0", F(19, 20))]
    (rb,) = sc.run().kernels
    assert rb.start == F(19, 20) + F(1, 10) + switch


class SlowMove(Policy):
    name = "slow-move"

    def on_launch(self, view, launch):
        v = view.vctxs[launch.vctx_id]
        if v.bound is None:
            return Decision.direct("g/p0")
        return Decision.remap("g/p1") if launch.kernel.id.endswith("k1") else DIRECT


def test_fault_mid_migration():
    MB = 2 ** 20
    sc = Scenario(devices=HALVES, faults=[Fault("LocalException", "g/p1", F(3, 2))],
                  jobs=[{"id": "v", "regions": {"A": 8 * MB},
                         "kernels": [{"duration": F(1, 2), "saturation": F(1, 2),
                                      "touches": ["A"]},
                                     {"duration": 1, "touches": ["A"]}]}])
    sim = sc.simulator(SlowMove())
    rep = sim.run()
    (mig,) = rep.migrations
    assert mig.start == F(1, 2) and mig.end > F(3, 2) and mig.aborted
    assert rep.vctxs["v"].status == VStatus.FAILED
    p = sim.pctxs["g/p1"]
    assert p.bound is None and not p.hw_queue and not p.rck_flag and not p.resetting


# -- global exceptions ---------------------------------------------------------

def _progress_watch(sim):
    seen = {}

    def obs(s, ev):
        for vid, v in s.vctxs.items():
            seen.setdefault(vid, []).append((ev.time, ev.kind, v.logical_progress))
    sim.observer = obs
    return seen


def _global(standby_tiers):
    devices = HALVES + ([{"id": "s", "tiers": standby_tiers, "standby": True}]
                        if standby_tiers else [])
    return _pair([{"kind": "GlobalException", "target": "g", "time": F(9, 4)}], devices)


def test_global_exception_with_matching_standby():
    sim = _global([F(1, 2), F(1, 2)]).simulator()
    seen = _progress_watch(sim)
    rep = sim.run()
    assert all(v.status == VStatus.DONE for v in rep.vctxs.values())
    moves = [m for m in rep.migrations if m.reason == "emergency"]
    assert len(moves) == 2 and all(m.dst.startswith("s/") and m.lazy_bytes == 0 for m in moves)
    for m in moves:
        at = {t: p for t, _, p in seen[m.vctx]}
        assert at[m.start] == at[m.end]
    for r in rep.kernels:
        assert r.retired_work() == r.work
    assert all(r.intervals[-1][0] >= F(9, 4) for r in rep.kernels if len(r.tiers) > 1)


def test_global_exception_without_standby():
    rep = _global(None).run()
    assert {v.status for v in rep.vctxs.values()} == {VStatus.STRANDED}


def test_global_exception_to_smaller_tiers():
    rep = _global([F(1, 4), F(1, 4)]).run()
    assert all(v.status == VStatus.DONE for v in rep.vctxs.values())
    moved = [r for r in rep.kernels if F(1, 4) in r.tiers]
    assert moved
    k_half = rep.vctxs["a"].completed[0]
    for r in moved:
        assert r.intervals[-1][2] == kernel_speed(k_half, F(1, 4), [])


# -- soft hangs ----------------------------------------------------------------

def test_detect_boundary():
    assert not detect_soft_hang(F(29, 10), 1)
    assert detect_soft_hang(3, 1)


def _hang_scenario(tiers=(1, F(1, 4)), stretch=10, extra=(), target="g/p0"):
    jobs = [{"id": "h", "kernels": [{"duration": 1, "saturation": F(1, 4)}], "repeat": 4}]
    jobs += list(extra)
    return Scenario(devices=[{"id": "g", "tiers": list(tiers)}], jobs=jobs,
                    faults=[Fault("SoftHang", target, F(3, 2), stretch)])


def test_soft_hang_detected_at_three_times_prediction():
    sim = _hang_scenario().simulator()
    rep = sim.run()
    (q,) = rep.quarantines
    # second kernel starts at t=1 with a prediction of 1 from the first
    assert q.flagged_at == 1 + 3 * 1 and q.demoted_tier == F(1, 4)
    hung = rep.kernels[1]
    assert hung.work == 10 and hung.retired_work() == 10
    assert hung.tiers == [1, F(1, 4)]


def test_quarantine_ceiling():
    sc = _hang_scenario()
    sim = sc.simulator()
    bad = []

    def obs(s, ev):
        pid = s.table.get("h")
        if s.vctxs["h"].quarantined and pid and s.pctxs[pid].fraction > s.min_tier:
            if ev.kind not in ("HangCheck", "PreemptSignal"):  # yielding in progress
                bad.append((ev.time, pid))
    sim.observer = obs
    sim.run()
    assert not bad


def test_hang_alone_keeps_running_at_min_tier_speed():
    rep = _hang_scenario().run()
    for r in rep.kernels[2:]:
        assert r.tiers == [F(1, 4)] and r.latency == r.work * max(1, F(1, 4) / F(1, 4))


def test_no_false_positive_under_contention():
    jobs = [{"id": "w", "kernels": [{"duration": 1, "mem_fraction": 1, "bw": F(1, 2),
                                     "saturation": F(1, 2)}], "repeat": 6},
            {"id": "noise", "kernels": [{"duration": 20, "bw": 2, "saturation": F(1, 2)}]}]
    sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2)]}], jobs=jobs)
    rep = sc.run()
    assert not rep.quarantines
    assert all(r.intervals[0][2] == F(5, 2) for r in rep.kernels if r.vctx == "w")


def test_two_hangs_one_minimal_slot():
    jobs = [{"id": h, "kernels": [{"duration": 1, "saturation": F(1, 4)}], "repeat": 3}
            for h in ("h1", "h2")]
    sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 4), F(1, 4)]}], jobs=jobs,
                  faults=[Fault("SoftHang", "g/p0", F(3, 2), 10),
                          Fault("SoftHang", "g/p1", F(3, 2), 10)])
    sim = sc.simulator()
    ceiling = []
    sim.observer = lambda s, ev: ceiling.extend(
        s.pctxs[s.table.get(v)].fraction for v in ("h1", "h2")
        if s.vctxs[v].quarantined and s.table.get(v) and ev.kind == "KernelStart")
    rep = sim.run()
    assert rep.quarantines and all(f == F(1, 4) for f in ceiling)
    assert all(v.status == VStatus.DONE for v in rep.vctxs.values())


def test_latency_critical_unaffected_after_quarantine():
    slo = {"ttft_deadline": 2, "tpot_deadline": 2}
    lc = {"id": "lc", "priority": "LatencyCritical", "slo": slo, "arrival": 6,
          "kernels": [{"duration": F(1, 2), "saturation": F(1, 2)}], "repeat": 6}
    tiers = (F(1, 2), F(1, 2), F(1, 4))
    target = _bound_pctx(_hang_scenario(tiers=tiers, extra=[lc]), "h", F(3, 2))
    shared = _hang_scenario(tiers=tiers, extra=[lc], target=target).run()
    solo = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2), F(1, 4)]}],
                    jobs=[lc]).run()
    assert shared.quarantines and shared.quarantines[0].flagged_at < 6
    lat = lambda rep: sorted(r.latency for r in rep.kernels if r.vctx == "lc")
    assert lat(shared) == lat(solo)  # the hung job has no bandwidth demand, so epsilon = 0


def test_fault_validation():
    from gpucoro import ConfigError
    with pytest.raises(ConfigError):
        Fault("Meteor", "g", 0)
    with pytest.raises(ConfigError):
        Fault("SoftHang", "g/p0", 0, 1)
    with pytest.raises(ConfigError):
        Fault("LocalException", "g/p0", -1)


def test_global_exception_before_any_arrival_uses_standby():
    sc = Scenario(devices=HALVES + [{"id": "s", "tiers": [F(1, 2), F(1, 2)], "standby": True}],
                  faults=[Fault("GlobalException", "g", F(1, 4))],
                  jobs=[{"id": "late", "arrival": 1, "kernels": [{"duration": 1}]}])
    rep = sc.run()
    assert rep.vctxs["late"].status == VStatus.DONE
    assert rep.kernels[0].tiers and not rep.migrations


def test_global_exception_as_last_kernel_finishes():
    jobs = [{"id": "a", "kernels": [{"duration": F(1, 2), "saturation": F(1, 4)}], "repeat": 2}]
    sc = Scenario(devices=HALVES + [{"id": "s", "tiers": [F(1, 2), F(1, 2)], "standby": True}],
                  faults=[Fault("GlobalException", "g", 1)], jobs=jobs)
    rep = sc.run()
    assert rep.vctxs["a"].status == VStatus.DONE and not rep.stuck
    assert not rep.migrations


def test_resume_keeps_hang_prediction_from_first_start():
    # j2/j3 start before any op0 has finished, so they run unchecked; after the move
    # they must not be re-armed with the shorter op0 prediction learned meanwhile
    def job(jid, arrival, dur, sat, grid, repeat):
        return {"id": jid, "arrival": arrival, "repeat": repeat,
                "kernels": [{"duration": dur, "saturation": sat, "grid": grid}]}
    jobs = [job("j0", F(1, 2), F(1, 2), 1, 64, 2), job("j1", 0, F(1, 2), 1, 8, 3),
            job("j2", F(1, 2), 2, F(1, 4), 64, 2), job("j3", F(1, 2), 2, F(1, 4), 8, 3)]
    tiers = [F(1, 4)] * 4
    sc = Scenario(devices=[{"id": "g", "tiers": tiers},
                           {"id": "s", "tiers": tiers, "standby": True}],
                  faults=[Fault("GlobalException", "g", F(9, 4))], jobs=jobs)
    rep = sc.run()
    assert not rep.quarantines
    assert all(r.retired_work() == r.work for r in rep.kernels)
    assert all(v.status == VStatus.DONE for v in rep.vctxs.values())


def test_hang_check_never_rolls_back_progress():
    sim = _hang_scenario().simulator()
    sim.run(until=F(3, 2))
    r = sim.running["g/p0"]
    sim._settle(r)
    r.hang_target = r.retired / 2  # a target already passed
    sim._schedule_milestone(r)
    rep = sim.run()
    assert all(k.retired_work() == k.work for k in rep.kernels)
