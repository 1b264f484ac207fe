from fractions import Fraction as F
from types import SimpleNamespace as NS

import numpy as np
import pytest

from gpucoro import Phase, Scenario, VStatus
from gpucoro.metrics import compute_metrics, percentile, request_latencies
from gpucoro.policies import SloSpec
from gpucoro.workload import InferenceProfile, RequestTraceRecord

from oracles import latencies_from_finishes, nearest_rank


def synthetic_report(seed, n=100):
    """Hand-placed decode completions for n requests, no simulation involved."""
    rng = np.random.default_rng(seed)
    slo = SloSpec(F(1, 2), F(1, 20))
    kernels, vctxs, raw = [], {}, {}
    for i in range(n):
        vid = f"r{i}"
        arrival = F(int(rng.integers(0, 1000)), 100)
        k = int(rng.integers(1, 6))
        fins = sorted(arrival + F(int(rng.integers(1, 200)), 200) for _ in range(k))
        raw[vid] = (arrival, fins)
        kernels += [NS(vctx=vid, phase=Phase.DECODE, finish=f) for f in fins]
        kernels.append(NS(vctx=vid, phase=Phase.PREFILL, finish=arrival))
        vctxs[vid] = NS(status=VStatus.DONE, arrival_time=arrival, slo=slo,
                        request={"kind": "inference"}, pending=[])
    return NS(kernels=kernels, vctxs=vctxs, clock=F(20), ledger_total=lambda k=None: 0), raw, slo


@pytest.mark.parametrize("seed", range(5))
def test_metrics_match_brute_force(seed):
    rep, raw, slo = synthetic_report(seed)
    m = compute_metrics(rep)
    want = {vid: latencies_from_finishes(a, fins) for vid, (a, fins) in raw.items()}
    got = {r.job_id: (r.ttft, r.tpot) for r in request_latencies(rep)}
    assert got == want
    ttfts = [t for t, _ in want.values()]
    tpots = [p for _, p in want.values() if p is not None]
    for p, attr in ((50, "p50"), (90, "p90"), (99, "p99")):
        assert getattr(m.ttft, attr) == nearest_rank(ttfts, p)
        assert getattr(m.tpot, attr) == nearest_rank(tpots, p)
    assert m.ttft.mean == sum(ttfts, F(0)) / len(ttfts)
    n = len(want)
    assert m.ttft_violation_rate == F(sum(t > slo.ttft_deadline for t, _ in want.values()), n)
    assert m.tpot_violation_rate == F(
        sum(p is not None and p > slo.tpot_deadline for _, p in want.values()), n)
    assert m.tpot_excluded == sum(p is None for _, p in want.values())


def test_percentile_random_vs_oracle():
    rng = np.random.default_rng(0)
    for _ in range(300):
        xs = [int(x) for x in rng.integers(0, 50, size=int(rng.integers(1, 100)))]
        p = int(rng.integers(1, 101))
        assert percentile(xs, p) == nearest_rank(xs, p)
    assert percentile([], 50) is None


def _single(deadline):
    prof = InferenceProfile()
    rec = RequestTraceRecord(0, "r", "inference", 512, 4, SloSpec(deadline, 1))
    sc = Scenario(devices=[{"id": "g", "tiers": [1]}], records=[rec], inference=prof)
    return compute_metrics(sc.run()), prof


def test_single_request_uncontended():
    m, prof = _single(10)
    # TTFT = prefill + first decode (the first token is emitted by a decode step)
    assert m.ttft.p50 == 10 * prof.decode_cost + prof.decode_cost  # no switch cost on a fresh pCtx
    assert m.tpot.p50 == prof.decode_cost
    assert m.ttft_violation_rate == 0 and m.completed_requests == 1


def test_tight_deadline_is_a_violation_even_alone():
    m, _ = _single(F(1, 10))
    assert m.ttft_violation_rate == 1


def test_single_token_tpot_excluded():
    rec = RequestTraceRecord(0, "r", "inference", 64, 1, SloSpec(1, 1))
    m = compute_metrics(Scenario(devices=[{"id": "g", "tiers": [1]}], records=[rec]).run())
    assert m.tpot.count == 0 and m.tpot_excluded == 1 and m.tpot_violation_rate == 0


def test_normalized_throughput_against_exclusive():
    sc = Scenario(devices=[{"id": "g", "tiers": [F(1, 2), F(1, 2)]}], normalize=True,
                  jobs=[{"id": j, "kernels": [{"duration": 1}], "repeat": 4} for j in "ab"])
    _, m = sc.evaluate()
    for j in "ab":
        assert m.normalized_throughput[j] == pytest.approx(0.5, abs=0.01)
    assert m.as_dict()["aggregate_normalized_throughput"]
