"""Latency/throughput metrics over a simulation report."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional

from .engine import fmt_time
from .model import Phase, VStatus


def percentile(values, p):
    """Nearest-rank percentile: the ceil(p/100 * N)-th smallest value."""
    if not values:
        return None
    xs = sorted(values)
    rank = max(1, math.ceil(Fraction(p) / 100 * len(xs)))
    return xs[rank - 1]


@dataclass
class Distribution:
    count: int
    mean: Optional[Fraction]
    p50: Optional[Fraction]
    p90: Optional[Fraction]
    p99: Optional[Fraction]

    @classmethod
    def of(cls, values):
        if not values:
            return cls(0, None, None, None, None)
        return cls(len(values), sum(values, Fraction(0)) / len(values) if not
                   isinstance(values[0], float) else sum(values) / len(values),
                   percentile(values, 50), percentile(values, 90), percentile(values, 99))

    def as_dict(self):
        return {k: (fmt_time(v) if v is not None and not isinstance(v, int) else v)
                for k, v in self.__dict__.items()}


@dataclass
class RequestLatency:
    job_id: str
    arrival: Fraction
    ttft: Fraction
    tpot: Optional[Fraction]
    ttft_violation: bool
    tpot_violation: bool


def request_latencies(report) -> List[RequestLatency]:
    """TTFT/TPOT for every completed inference request."""
    decodes: Dict[str, List[Fraction]] = {}
    for rec in report.kernels:
        if rec.phase == Phase.DECODE:
            decodes.setdefault(rec.vctx, []).append(rec.finish)
    out = []
    for vid, v in sorted(report.vctxs.items()):
        req = v.request or {}
        if req.get("kind") != "inference" or v.status != VStatus.DONE:
            continue
        done = sorted(decodes.get(vid, []))
        if not done:
            continue
        ttft = done[0] - v.arrival_time
        tpot = (done[-1] - done[0]) / (len(done) - 1) if len(done) >= 2 else None
        slo = v.slo
        out.append(RequestLatency(
            vid, v.arrival_time, ttft, tpot,
            slo is not None and ttft > slo.ttft_deadline,
            slo is not None and tpot is not None and tpot > slo.tpot_deadline))
    return out


@dataclass
class MetricsReport:
    horizon: Fraction
    completed_requests: int
    request_throughput: Fraction
    training_throughput: Dict[str, Fraction]
    kernel_throughput: Dict[str, Fraction]
    ttft: Distribution
    tpot: Distribution
    ttft_violation_rate: Optional[Fraction]
    tpot_violation_rate: Optional[Fraction]
    tpot_excluded: int
    overhead: Dict[str, Fraction]
    normalized_throughput: Dict[str, Fraction] = field(default_factory=dict)
    failed: List[str] = field(default_factory=list)
    stranded: List[str] = field(default_factory=list)

    @property
    def aggregate_normalized_throughput(self):
        return sum(self.normalized_throughput.values(), Fraction(0))

    def as_dict(self):
        f = lambda x: None if x is None else fmt_time(x)
        return {
            "horizon": f(self.horizon),
            "completed_requests": self.completed_requests,
            "request_throughput": f(self.request_throughput),
            "training_throughput": {k: f(v) for k, v in sorted(self.training_throughput.items())},
            "kernel_throughput": {k: f(v) for k, v in sorted(self.kernel_throughput.items())},
            "ttft": self.ttft.as_dict(),
            "tpot": self.tpot.as_dict(),
            "ttft_violation_rate": f(self.ttft_violation_rate),
            "tpot_violation_rate": f(self.tpot_violation_rate),
            "tpot_excluded": self.tpot_excluded,
            "overhead": {k: f(v) for k, v in sorted(self.overhead.items())},
            "normalized_throughput": {k: f(v) for k, v in
                                      sorted(self.normalized_throughput.items())},
            "aggregate_normalized_throughput": f(self.aggregate_normalized_throughput),
            "failed": self.failed,
            "stranded": self.stranded,
        }


def _rate(n, horizon):
    return Fraction(0) if not horizon else n / horizon


def job_throughput(report, horizon=None) -> Dict[str, Fraction]:
    """Completed kernels per unit time for each non-inference job.

    A job's window runs from its arrival to its last completion if it
    finished, else to the horizon.
    """
    horizon = report.clock if horizon is None else horizon
    counts: Dict[str, int] = {}
    last: Dict[str, Fraction] = {}
    for rec in report.kernels:
        if rec.finish <= horizon:
            counts[rec.vctx] = counts.get(rec.vctx, 0) + 1
            last[rec.vctx] = max(last.get(rec.vctx, rec.finish), rec.finish)
    out = {}
    for vid, v in report.vctxs.items():
        if (v.request or {}).get("kind") == "inference":
            continue
        end = last.get(vid, horizon) if v.status == VStatus.DONE and not v.pending else horizon
        out[vid] = _rate(counts.get(vid, 0), end - v.arrival_time)
    return out


def compute_metrics(report, baseline=None, horizon=None) -> MetricsReport:
    """Metrics for `report`; `baseline` maps job id -> exclusive-run report."""
    horizon = report.clock if horizon is None else horizon
    lat = request_latencies(report)
    ttfts = [r.ttft for r in lat]
    tpots = [r.tpot for r in lat if r.tpot is not None]
    n = len(lat)
    kernel_tp = job_throughput(report, horizon)
    train_tp = {}
    for vid, v in report.vctxs.items():
        req = v.request or {}
        if req.get("kind") == "training":
            train_tp[vid] = kernel_tp[vid] / req.get("kernels_per_iteration", 1)
    overhead = {k: report.ledger_total(k) for k in ("ctx_switch", "preempt", "migration",
                                                    "fault")}
    overhead["total"] = report.ledger_total()
    norm = {}
    if baseline:
        for vid, tp in kernel_tp.items():
            base = baseline.get(vid)
            if base is None:
                continue
            ref = job_throughput(base)[vid]
            if ref:
                norm[vid] = tp / ref
    return MetricsReport(
        horizon=horizon,
        completed_requests=n,
        request_throughput=_rate(n, horizon),
        training_throughput=train_tp,
        kernel_throughput=kernel_tp,
        ttft=Distribution.of(ttfts),
        tpot=Distribution.of(tpots),
        ttft_violation_rate=Fraction(sum(r.ttft_violation for r in lat), n) if n else None,
        tpot_violation_rate=Fraction(sum(r.tpot_violation for r in lat), n) if n else None,
        tpot_excluded=sum(1 for r in lat if r.tpot is None),
        overhead=overhead,
        normalized_throughput=norm,
        failed=sorted(v for v, x in report.vctxs.items() if x.status == VStatus.FAILED),
        stranded=sorted(v for v, x in report.vctxs.items() if x.status == VStatus.STRANDED),
    )
