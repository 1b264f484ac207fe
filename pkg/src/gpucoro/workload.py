"""Request traces, synthetic arrival generators, and request -> kernel expansion."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .engine import fmt_time
from .errors import ConfigError, ParseError
from .model import Kernel, MemoryRegion, Phase, PriorityClass, ReductionSpec, VirtualContext, rational

KINDS = ("inference", "training")
TIME_QUANTUM = 10 ** 6  # generated arrivals are snapped to 1e-6 so they serialize exactly


@dataclass(frozen=True)
class RequestTraceRecord:
    arrival_time: Fraction
    job_id: str
    kind: str
    prompt_tokens: Optional[int] = None
    output_tokens: Optional[int] = None
    slo: Optional[object] = None  # SloSpec
    priority_class: Optional[PriorityClass] = None
    iterations: Optional[int] = None
    profile: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "arrival_time", rational(self.arrival_time))
        if self.arrival_time < 0:
            raise ValueError("arrival_time must be non-negative")
        if self.kind not in KINDS:
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == "inference":
            if not self.prompt_tokens or self.prompt_tokens < 1 or \
                    not self.output_tokens or self.output_tokens < 1:
                raise ValueError("inference records need positive prompt and output tokens")
        if self.priority_class is None:
            pc = PriorityClass.LATENCY_CRITICAL if self.kind == "inference" \
                else PriorityClass.BEST_EFFORT
            object.__setattr__(self, "priority_class", pc)
        else:
            object.__setattr__(self, "priority_class", PriorityClass(self.priority_class))

    def to_dict(self) -> dict:
        d = {"arrival_time": exact_time(self.arrival_time), "job_id": self.job_id,
             "kind": self.kind, "priority_class": self.priority_class.value}
        for name in ("prompt_tokens", "output_tokens", "iterations", "profile"):
            v = getattr(self, name)
            if v is not None:
                d[name] = v
        if self.slo is not None:
            d["slo"] = {k: exact_time(v) for k, v in
                        (("ttft_deadline", self.slo.ttft_deadline),
                         ("tpot_deadline", self.slo.tpot_deadline),
                         ("e2e_deadline", self.slo.e2e_deadline)) if v is not None}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RequestTraceRecord":
        from .policies import SloSpec
        t = d["arrival_time"]
        if isinstance(t, float):
            t = repr(t)
        slo = SloSpec.from_dict(d["slo"]) if d.get("slo") else None
        return cls(Fraction(t), str(d["job_id"]), d["kind"], d.get("prompt_tokens"),
                   d.get("output_tokens"), slo, d.get("priority_class"),
                   d.get("iterations"), d.get("profile"))


def parse_trace(stream) -> List[RequestTraceRecord]:
    """Parse JSON Lines records; blank lines are skipped. Stable-sorted by arrival."""
    if isinstance(stream, str):
        stream = stream.splitlines()
    out = []
    for no, line in enumerate(stream, start=1):
        line = line.strip()
        if not line:
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"malformed JSON ({e.msg})", line=no) from None
        if not isinstance(d, dict):
            raise ParseError("record must be a JSON object", line=no)
        try:
            out.append(RequestTraceRecord.from_dict(d))
        except KeyError as e:
            raise ParseError(f"missing field {e.args[0]!r}", line=no) from None
        except (ValueError, TypeError, ZeroDivisionError) as e:
            raise ParseError(str(e), line=no) from None
    return sorted(out, key=lambda r: r.arrival_time)


def dump_trace(records: Iterable[RequestTraceRecord], stream=None) -> str:
    text = "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in records)
    if stream is not None:
        stream.write(text)
    return text


def exact_time(x) -> str:
    """Decimal string when it terminates, else "p/q", so parsing is lossless."""
    x = rational(x)
    d = x.denominator
    for f in (2, 5):
        while d % f == 0:
            d //= f
    return fmt_time(x) if d == 1 else f"{x.numerator}/{x.denominator}"


# -- generators --------------------------------------------------------------

def _snap(t: float) -> Fraction:
    return Fraction(int(round(t * TIME_QUANTUM)), TIME_QUANTUM)


def _draw_tokens(spec, rng):
    if isinstance(spec, (list, tuple)):
        lo, hi = spec
        return int(rng.integers(lo, hi + 1))
    return int(spec)


def _make_record(t, i, template, rng, prefix):
    from .policies import SloSpec
    template = template or {}
    kind = template.get("kind", "inference")
    slo = template.get("slo")
    if isinstance(slo, dict):
        slo = SloSpec.from_dict(slo)
    if kind == "inference":
        return RequestTraceRecord(t, f"{prefix}{i}", kind,
                                  _draw_tokens(template.get("prompt_tokens", 512), rng),
                                  _draw_tokens(template.get("output_tokens", 16), rng),
                                  slo, template.get("priority_class"))
    return RequestTraceRecord(t, f"{prefix}{i}", kind, slo=slo,
                              priority_class=template.get("priority_class"),
                              iterations=template.get("iterations", 1),
                              profile=template.get("profile"))


def gen_poisson(rate, duration, request_template=None, seed=0, start=0, prefix="req"):
    """Homogeneous Poisson arrivals on [start, start + duration)."""
    rate, duration = float(rate), float(duration)
    if rate < 0 or duration < 0:
        raise ValueError("rate and duration must be non-negative")
    if rate == 0 or duration == 0:
        return []
    rng = np.random.default_rng(seed)
    out, t = [], float(start)
    end = float(start) + duration
    while True:
        t += rng.exponential(1.0 / rate)
        if t >= end:
            break
        out.append(_make_record(_snap(t), len(out), request_template, rng, prefix))
    return out


def gen_burst(base_rate, burst_rate, burst_duration, period, seed=0, duration=None,
              request_template=None, prefix="req"):
    """Piecewise Poisson: `burst_rate` for the first `burst_duration` of every period."""
    base_rate, burst_rate = float(base_rate), float(burst_rate)
    burst_duration, period = float(burst_duration), float(period)
    if period <= 0 or burst_duration < 0 or burst_duration > period:
        raise ValueError("need 0 <= burst_duration <= period and period > 0")
    duration = 5 * period if duration is None else float(duration)
    rng = np.random.default_rng(seed)
    out = []
    seg_start = 0.0
    while seg_start < duration:
        for lo, hi, rate in ((seg_start, seg_start + burst_duration, burst_rate),
                             (seg_start + burst_duration, seg_start + period, base_rate)):
            hi = min(hi, duration)
            if rate <= 0 or hi <= lo:
                continue
            t = lo
            while True:
                t += rng.exponential(1.0 / rate)
                if t >= hi:
                    break
                out.append(_make_record(_snap(t), len(out), request_template, rng, prefix))
        seg_start += period
    return out


# -- expansion ---------------------------------------------------------------

@dataclass(frozen=True)
class InferenceProfile:
    """Per-token costs; a 512-token prefill is about ten decode steps."""

    decode_cost: Fraction = Fraction(2, 100)
    prefill_per_token: Fraction = Fraction(2, 100) * 10 / 512
    prefill_saturation: Fraction = Fraction(1)
    prefill_mem_fraction: Fraction = Fraction(2, 10)
    prefill_bw: Fraction = Fraction(3, 10)
    decode_saturation: Fraction = Fraction(1, 4)
    decode_mem_fraction: Fraction = Fraction(9, 10)
    decode_bw: Fraction = Fraction(4, 10)
    decode_gap: Fraction = Fraction(0)  # host time between decode steps
    kv_bytes_per_token: int = 2 ** 14
    decode_grid: int = 1

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        for k, v in list(d.items()):
            if k not in ("kv_bytes_per_token", "decode_grid"):
                d[k] = rational(v)
        return cls(**d)


@dataclass(frozen=True)
class TrainingKernel:
    semantic_id: str
    duration: Fraction
    saturation: Fraction = Fraction(1)
    mem_fraction: Fraction = Fraction(0)
    bw: Fraction = Fraction(0)
    grid: int = 128
    touches: tuple = ("params",)
    reduction_n: Optional[int] = None
    reduction_fmt: str = "fp16"


@dataclass(frozen=True)
class TrainingProfile:
    kernels: tuple = (TrainingKernel("fwd_bwd", Fraction(1)),)
    launch_delay: Fraction = Fraction(0)  # host gap before each iteration
    regions: tuple = (("params", 2 ** 26),)

    @property
    def kernels_per_iteration(self):
        return len(self.kernels)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        ks = []
        for k in d.get("kernels", [{"semantic_id": "fwd_bwd", "duration": 1}]):
            k = dict(k)
            for name in ("duration", "saturation", "mem_fraction", "bw"):
                if name in k:
                    k[name] = rational(k[name])
            if "touches" in k:
                k["touches"] = tuple(k["touches"])
            ks.append(TrainingKernel(**k))
        regions = tuple((r, int(b)) for r, b in d.get("regions", {"params": 2 ** 26}).items())
        return cls(tuple(ks), rational(d.get("launch_delay", 0)), regions)


def expand_inference(rec: RequestTraceRecord, prof: InferenceProfile) -> VirtualContext:
    vid = rec.job_id
    kv = MemoryRegion("kv", prof.kv_bytes_per_token * (rec.prompt_tokens + rec.output_tokens))
    ks = [Kernel(f"{vid}.prefill", vid, rec.prompt_tokens, "prefill",
                 prof.prefill_per_token * rec.prompt_tokens, prof.prefill_saturation,
                 prof.prefill_bw, prof.prefill_mem_fraction, {"kv"}, Phase.PREFILL)]
    for i in range(rec.output_tokens):
        ks.append(Kernel(f"{vid}.decode{i}", vid, prof.decode_grid, "decode", prof.decode_cost,
                         prof.decode_saturation, prof.decode_bw, prof.decode_mem_fraction,
                         {"kv"}, Phase.DECODE, launch_delay=prof.decode_gap if i else 0))
    return VirtualContext(vid, rec.priority_class, ks, {"kv": kv},
                          arrival_time=rec.arrival_time, slo=rec.slo,
                          request={"kind": "inference", "record": rec})


def expand_training(rec: RequestTraceRecord, prof: TrainingProfile, seed=0) -> VirtualContext:
    vid = rec.job_id
    regions = {r: MemoryRegion(r, b) for r, b in prof.regions}
    ks = []
    for it in range(rec.iterations or 1):
        for j, tk in enumerate(prof.kernels):
            red = None
            if tk.reduction_n:
                red = ReductionSpec(tk.reduction_n, tk.reduction_fmt, seed * 100003 + it * 101 + j)
            ks.append(Kernel(f"{vid}.it{it}.{tk.semantic_id}", vid, tk.grid, tk.semantic_id,
                             tk.duration, tk.saturation, tk.bw, tk.mem_fraction,
                             set(tk.touches), Phase.TRAINING,
                             launch_delay=prof.launch_delay if j == 0 else 0, reduction=red))
    return VirtualContext(vid, rec.priority_class, ks, regions, arrival_time=rec.arrival_time,
                          slo=rec.slo, request={"kind": "training", "record": rec,
                                                "kernels_per_iteration": len(prof.kernels)})


def expand(records: Sequence[RequestTraceRecord], inference: InferenceProfile = None,
           training: Dict[str, TrainingProfile] = None, seed=0) -> List[VirtualContext]:
    """Deterministic expansion of records into vCtxs (one per record)."""
    inference = inference or InferenceProfile()
    training = training or {}
    out, seen = [], set()
    for i, rec in enumerate(records):
        if rec.job_id in seen:
            raise ConfigError(f"duplicate job id {rec.job_id}")
        seen.add(rec.job_id)
        if rec.kind == "inference":
            out.append(expand_inference(rec, inference))
        else:
            name = rec.profile or "default"
            if name not in training and name != "default":
                raise ConfigError(f"unknown training profile {name!r}")
            out.append(expand_training(rec, training.get(name, TrainingProfile()), seed + i))
    return out
