import itertools
import random
from fractions import Fraction as F
from types import MappingProxyType

import pytest

from gpucoro import (ConfigError, CostParameters, Decision, Kernel, Scenario,
                     SloAwarePolicy, StaticPartitionPolicy, TemporalPolicy, TpotFirstPolicy)
from gpucoro.engine import DeviceView, Launch, PctxView, PolicyView, VctxView
from gpucoro.metrics import compute_metrics
from gpucoro.model import Phase, PriorityClass, VStatus
from gpucoro.policies import DurationPredictor, SloSpec, predict_hol_blocking
from oracles import ewma

LC, BE = PriorityClass.LATENCY_CRITICAL, PriorityClass.BEST_EFFORT


# -- predictor -----------------------------------------------------------------

def test_ewma_hand_example():
    p = DurationPredictor(alpha=F(1, 2))
    p.observe(("op", 1), 8)
    p.observe(("op", 1), 12)
    assert p.predict(("op", 1)) == 10 == ewma([8, 12], F(1, 2))


def test_ewma_matches_oracle():
    rng = random.Random(5)
    for _ in range(50):
        alpha = F(rng.randint(1, 10), 10)
        xs = [F(rng.randint(1, 100), 7) for _ in range(rng.randint(1, 12))]
        p = DurationPredictor(alpha)
        for x in xs:
            p.observe(("k", 2), x)
        assert p.predict(("k", 2)) == ewma(xs, alpha)


def test_cold_start_rule():
    p = DurationPredictor(default=F(7))
    assert p.predict(("new", 1)) == 7
    assert p.predict(("new", 1), hint=F(2)) == 2
    p.observe(("new", 4), 3)
    p.observe(("new", 8), 9)
    assert p.predict(("new", 1)) == 9  # pessimistic: largest seen for the semantic id


# -- hand-built views ----------------------------------------------------------

def kern(kid, vid, work=1, s=1, phase=Phase.OTHER, m=0, bw=0):
    return Kernel(kid, vid, 1, kid.split(".")[-1], work, s, bw, m, phase=phase)


def view(pctxs, vctxs, clock=F(0), predictor=None):
    """pctxs: list of (id, tier, bound, running kernel, remaining, queued)."""
    pv = {}
    for pid, tier, bound, running, rem, queued in pctxs:
        pv[pid] = PctxView(pid, "g", F(tier), bound, F(0) if bound else None, None, True, False,
                           running, F(rem), F(1), tuple(queued))
    used = sum((p.tier for p in pv.values() if p.bound), F(0))
    demands = tuple(p.running.mem_bw_demand for p in pv.values() if p.running)
    vv = {}
    for i, (vid, prio, head, slo) in enumerate(vctxs):
        bound = next((p.id for p in pv.values() if p.bound == vid), None)
        vv[vid] = VctxView(vid, prio, VStatus.ACTIVE, "pending", bound, False, head, F(0), slo, i)
    return PolicyView(clock, MappingProxyType({v.bound: v.id for v in vv.values() if v.bound}),
                      MappingProxyType(pv),
                      MappingProxyType({"g": DeviceView("g", tuple(pv), used, demands, False,
                                                        False)}),
                      MappingProxyType(vv), (), predictor or DurationPredictor(),
                      CostParameters(), min(p.tier for p in pv.values()), frozenset())


def test_hol_idle_is_zero():
    v = view([("g/p0", 1, None, None, 0, ())], [])
    assert predict_hol_blocking(v, "g/p0") == 0


def test_hol_running_plus_queued():
    # running kernel 40% through an effective duration of 10 leaves 6
    queued = kern("q.op", "a", work=5)
    pred = DurationPredictor()
    pred.observe(queued.signature, 5)
    v = view([("g/p0", 1, "a", kern("r.run", "a", 10), 6, (queued,))],
             [("a", BE, queued, None)], predictor=pred)
    assert predict_hol_blocking(v, "g/p0") == 11
    pred2 = DurationPredictor(alpha=F(1, 2))
    pred2.observe(queued.signature, 8)
    pred2.observe(queued.signature, 12)
    assert predict_hol_blocking(v, "g/p0", predictor=pred2) == 16


def _launch(k, deadline=None, seq=1):
    return Launch(k.vctx_id, k, F(0), seq, deadline)


def test_slo_aware_direct_when_deadline_far():
    k = kern("a.op", "a")
    v = view([("g/p0", F(1, 2), "a", None, 0, ())], [("a", LC, k, None)])
    assert SloAwarePolicy().on_launch(v, _launch(k, deadline=F(10))).kind == "direct"


def test_slo_aware_remaps_on_predicted_miss():
    k = kern("a.op", "a")
    v = view([("g/p0", F(1, 4), "a", None, 0, ()), ("g/p1", F(1, 2), None, None, 0, ()),
              ("g/p2", 1, None, None, 0, ())], [("a", LC, k, None)])
    d = SloAwarePolicy().on_launch(v, _launch(k, deadline=F(3, 2)))
    assert (d.kind, d.target) == ("remap", "g/p2")


def test_slo_aware_preempts_best_effort_holder():
    k = kern("lc.op", "lc")
    v = view([("g/p0", 1, "be", kern("be.train", "be", 4), 4, ())],
             [("lc", LC, k, None), ("be", BE, kern("be.train", "be", 4), None)])
    d = SloAwarePolicy().on_launch(v, _launch(k, deadline=F(2)))
    assert (d.kind, d.target) == ("preempt", "g/p0")


def test_victim_prefers_largest_remaining():
    k = kern("lc.op", "lc")
    v = view([("g/p0", F(1, 2), "b1", kern("b1.x", "b1"), 1, ()),
              ("g/p1", F(1, 2), "b2", kern("b2.x", "b2"), 3, ())],
             [("lc", LC, k, None), ("b1", BE, None, None), ("b2", BE, None, None)])
    d = SloAwarePolicy().on_launch(v, _launch(k, deadline=F(5)))
    assert (d.kind, d.target) == ("preempt", "g/p1")


def test_hook_purity_in_runs():
    calls = []

    class Twice(SloAwarePolicy):
        def on_launch(self, view, launch):
            a, b = super().on_launch(view, launch), super().on_launch(view, launch)
            calls.append(a == b)
            return a

    sc = _mixed_scenario()
    sc.run(Twice())
    assert calls and all(calls)


def _mixed_scenario(seed=0):
    return Scenario(
        devices=[{"id": "g", "tiers": [1, F(1, 2), F(1, 4), F(1, 4)]}], seed=seed,
        jobs=[{"id": "train", "kernels": [{"duration": 2, "saturation": 1}], "repeat": 4}],
        records=__import__("gpucoro").gen_poisson(
            2, 3, {"prompt_tokens": [64, 512], "output_tokens": [2, 6],
                   "slo": {"ttft_deadline": 1, "tpot_deadline": F(1, 10)}}, seed))


# -- fail-safe -----------------------------------------------------------------

class Bad(SloAwarePolicy):
    """Answers the first launch of `b` with an illegal remap."""

    def __init__(self, answer):
        super().__init__()
        self.answer, self.used = answer, False

    def on_launch(self, view, launch):
        if launch.vctx_id == "b" and not self.used and view.vctxs["a"].bound:
            self.used = True
            return self.answer(view)
        return super().on_launch(view, launch)


def _two_jobs():
    return Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2)]}],
                    jobs=[{"id": "a", "kernels": [{"duration": 1}] * 3},
                          {"id": "b", "arrival": F(1, 2), "kernels": [{"duration": 1}] * 2}])


def test_policy_error_becomes_defer():
    bad = _two_jobs().run(Bad(lambda v: Decision.remap(v.vctxs["a"].bound)))
    ok = _two_jobs().run(Bad(lambda v: Decision.defer("stub")))
    assert len(bad.policy_errors) == 1 and not ok.policy_errors
    key = lambda rep: [(r.kernel, r.start, r.finish) for r in rep.kernels]
    assert key(bad) == key(ok)


def test_policy_exception_is_caught():
    from gpucoro.errors import PolicyError

    class Raises(SloAwarePolicy):
        n = 0

        def on_launch(self, view, launch):
            self.n += 1
            if self.n == 1:
                raise PolicyError("boom")
            return super().on_launch(view, launch)

    rep = _two_jobs().run(Raises())
    assert rep.policy_errors and len(rep.kernels) == 5


# -- TPOT-first ----------------------------------------------------------------

def test_decode_first_brute_force():
    """Over every phase mix, arrival pattern and pool: no prefill is dispatched
    while a decode launch that became ready earlier is still waiting."""
    slo = {"ttft_deadline": 3, "tpot_deadline": 3}
    checked = 0
    for pool in ([F(1, 2), F(1, 2)], [1, F(1, 2)]):
        for phases in itertools.product(("Prefill", "Decode"), repeat=4):
            for arrivals in itertools.product((0, F(1, 4)), repeat=4):
                jobs = [{"id": f"r{i}", "priority": "LatencyCritical", "arrival": a,
                         "slo": slo, "kernels": [{"duration": F(1, 2), "phase": ph,
                                                  "saturation": F(1, 2)}]}
                        for i, (ph, a) in enumerate(zip(phases, arrivals))]
                rep = Scenario(devices=[{"id": "g", "tiers": pool}], policy="tpot-first",
                               jobs=jobs).run()
                ready = {f"r{i}": a for i, a in enumerate(arrivals)}
                recs = {r.vctx: r for r in rep.kernels}
                assert len(recs) == 4
                for p in recs.values():
                    if p.phase != Phase.PREFILL:
                        continue
                    for d in recs.values():
                        if d.phase == Phase.DECODE and ready[d.vctx] < p.dispatch:
                            assert d.dispatch <= p.dispatch
                checked += 1
    assert checked == 2 * 16 * 16


def test_only_decodes_matches_slo_aware():
    slo = {"ttft_deadline": 1, "tpot_deadline": F(1, 5)}
    jobs = [{"id": f"d{i}", "priority": "LatencyCritical", "arrival": F(i, 8), "slo": slo,
             "kernels": [{"duration": F(1, 10), "phase": "Decode"}] * 3} for i in range(4)]
    runs = [Scenario(devices=[{"id": "g", "tiers": [1, F(1, 2)]}], policy=p, jobs=jobs).run()
            for p in ("slo-aware", "tpot-first")]
    assert runs[0].event_log_lines() == runs[1].event_log_lines()


def test_prefill_burst_deferred_during_decode():
    slo = {"ttft_deadline": 1, "tpot_deadline": F(3, 100)}
    recs = __import__("gpucoro").gen_burst(1, 20, 1, 10, seed=3, duration=3,
                                           request_template={"prompt_tokens": 256,
                                                             "output_tokens": 12, "slo": slo})
    out = {}
    for pol in ("slo-aware", "tpot-first"):
        sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 4), F(1, 4)]}], policy=pol,
                      records=recs)
        out[pol] = compute_metrics(sc.run())
    assert out["tpot-first"].tpot.mean < out["slo-aware"].tpot.mean
    assert out["tpot-first"].ttft.mean > out["slo-aware"].ttft.mean


# -- baselines -----------------------------------------------------------------

def test_temporal_single_job_is_exclusive():
    jobs = [{"id": "a", "kernels": [{"duration": F(3, 4)}] * 5}]
    sc = Scenario(devices=[{"id": "g", "tiers": [1]}], jobs=jobs)
    solo = [(r.start, r.finish) for r in sc.run().kernels]
    sc.policy, sc.params = "temporal", {"quantum": 1}
    assert [(r.start, r.finish) for r in sc.run().kernels] == solo


def test_temporal_pair_halves_throughput():
    jobs = [{"id": j, "kernels": [{"duration": F(1, 4)}], "repeat": 64} for j in "ab"]
    sc = Scenario(devices=[{"id": "g", "tiers": [1]}], policy="temporal",
                  params={"quantum": 2}, jobs=jobs, normalize=True)
    rep, m = sc.evaluate()
    # one pCtx, no idle gaps: makespan is the work plus every charged overhead
    assert rep.clock == 32 + rep.ledger_total()
    for j in "ab":
        assert F(45, 100) < m.normalized_throughput[j] < F(55, 100)
    assert rep.ledger_total("ctx_switch") > 0


def test_temporal_below_spatial_for_mixed_pair():
    jobs = [{"id": "cpu", "kernels": [{"duration": 1, "saturation": 1}], "repeat": 8},
            {"id": "mem", "kernels": [{"duration": 1, "saturation": F(1, 4), "mem_fraction": 1,
                                       "bw": F(1, 2)}], "repeat": 8}]
    agg = {}
    for pol, params in (("temporal", {"quantum": 2}), ("slo-aware", {})):
        sc = Scenario(devices=[{"id": "g", "tiers": [1, F(1, 2), F(1, 2)]}], policy=pol,
                      params=params, jobs=jobs, normalize=True)
        agg[pol] = sc.evaluate()[1].aggregate_normalized_throughput
    assert agg["temporal"] < agg["slo-aware"]


def test_static_factor_and_unassigned():
    jobs = [{"id": "a", "kernels": [{"duration": 1, "saturation": 1}]},
            {"id": "b", "kernels": [{"duration": 1, "saturation": F(1, 4)}]}]
    sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2)]}], policy="static",
                  params={"assignment": {"a": "g/p0", "b": "g/p1"}}, jobs=jobs)
    lat = {r.vctx: r.latency for r in sc.run().kernels}
    assert lat == {"a": 2, "b": 1}
    sc.params = {"assignment": {"a": "g/p0"}}
    with pytest.raises(ConfigError):
        sc.run()


def test_static_slice_stays_idle():
    slo = {"ttft_deadline": 1, "tpot_deadline": 1}
    jobs = [{"id": "inf", "priority": "LatencyCritical", "slo": slo, "arrival": 5,
             "kernels": [{"duration": F(1, 2), "phase": "Prefill"}]},
            {"id": "train", "kernels": [{"duration": 1}], "repeat": 4}]
    sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2)]}], policy="static",
                  params={"assignment": {"inf": "g/p0", "train": "g/p1"}}, jobs=jobs)
    rep = sc.run()
    busy = sum((r.finish - r.start for r in rep.kernels if r.vctx == "inf"), F(0))
    # the inference slice idles for all but one prefill while training runs at half speed
    assert busy == 1 and max(r.finish for r in rep.kernels if r.vctx == "train") == 8


def test_unknown_policy_and_params():
    with pytest.raises(ConfigError):
        Scenario(policy="nope").make_policy()
    with pytest.raises(ConfigError):
        Scenario(policy="temporal", params={"bogus": 1}).make_policy()
