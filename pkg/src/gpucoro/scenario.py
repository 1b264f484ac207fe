"""Scenario configs: JSON -> devices, vCtxs, policy, faults -> simulation."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Dict, List, Optional

from .engine import Simulator, SimulationReport
from .errors import ConfigError
from .faults import Fault
from .metrics import MetricsReport, compute_metrics
from .model import (Device, Kernel, MemoryRegion, Phase, PriorityClass, ReductionSpec,
                    VirtualContext, create_pool, rational)
from .policies import DurationPredictor, SloSpec, get_policy
from .runtime import CostParameters
from .workload import (InferenceProfile, RequestTraceRecord, TrainingProfile, expand,
                       gen_burst, gen_poisson, parse_trace)

SOLO_DEVICE = [{"id": "solo", "tiers": [1]}]


def job_from_spec(spec: dict) -> VirtualContext:
    """Explicit job: {id, priority, arrival, slo, regions, kernels, repeat}."""
    jid = str(spec["id"])
    regions = {r: MemoryRegion(r, int(b)) for r, b in spec.get("regions", {}).items()}
    kernels = []
    for rep in range(int(spec.get("repeat", 1))):
        for j, k in enumerate(spec.get("kernels", [])):
            red = k.get("reduction")
            if red is not None:
                red = ReductionSpec(int(red["n"]), red.get("fmt", "fp16"),
                                    int(red.get("seed", 0)) + rep)
            base = k.get("id", f"{jid}.k{j}")
            kernels.append(Kernel(
                base if rep == 0 else f"{base}.r{rep}", jid, int(k.get("grid", 1)),
                k.get("semantic_id", f"op{j}"),
                rational(k.get("duration", 1)), rational(k.get("saturation", 1)),
                rational(k.get("bw", 0)), rational(k.get("mem_fraction", 0)),
                frozenset(k.get("touches", ())), Phase(k.get("phase", "Other")),
                rational(k.get("launch_delay", 0)), red))
    slo = spec.get("slo")
    kind = spec.get("kind", "job")
    prio = PriorityClass(spec.get("priority", "BestEffort"))
    return VirtualContext(jid, prio, kernels, regions,
                          arrival_time=rational(spec.get("arrival", 0)),
                          slo=SloSpec.from_dict(slo) if slo else None,
                          request={"kind": kind, "kernels_per_iteration":
                                   max(1, len(spec.get("kernels", [])))})


@dataclass
class Scenario:
    devices: List[dict] = field(default_factory=list)
    policy: str = "slo-aware"
    params: dict = field(default_factory=dict)
    costs: CostParameters = field(default_factory=CostParameters)
    records: List[RequestTraceRecord] = field(default_factory=list)
    jobs: List[dict] = field(default_factory=list)
    inference: InferenceProfile = field(default_factory=InferenceProfile)
    training: Dict[str, TrainingProfile] = field(default_factory=dict)
    faults: List[Fault] = field(default_factory=list)
    seed: int = 0
    until: Optional[Fraction] = None
    hang_threshold: Fraction = Fraction(3)
    predictor: dict = field(default_factory=dict)
    numeric: str = "exact"
    max_events: int = 5_000_000
    normalize: bool = False

    # -- construction --------------------------------------------------------

    def build_devices(self) -> List[Device]:
        out = []
        for i, d in enumerate(self.devices):
            dev = Device(str(d.get("id", f"gpu{i}")), standby=bool(d.get("standby", False)))
            try:
                create_pool(dev, [rational(t) for t in d["tiers"]])
            except KeyError:
                raise ConfigError(f"device {dev.id} lists no tiers") from None
            out.append(dev)
        return out

    def build_vctxs(self) -> List[VirtualContext]:
        vs = expand(self.records, self.inference, self.training, self.seed)
        vs += [job_from_spec(j) for j in self.jobs]
        ids = [v.id for v in vs]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate job ids in workload")
        return vs

    def job_ids(self):
        return [v.id for v in self.build_vctxs()]

    def make_policy(self, policy=None):
        if policy is not None and not isinstance(policy, str):
            return policy
        return get_policy(policy or self.policy, self.params if policy in (None, self.policy)
                          else {})

    def simulator(self, policy=None, **overrides) -> Simulator:
        pred = DurationPredictor(self.predictor.get("alpha", Fraction(3, 10)),
                                 self.predictor.get("default", 1))
        kw = dict(costs=self.costs, predictor=pred, faults=self.faults,
                  max_events=self.max_events, hang_threshold=self.hang_threshold,
                  predictor_hints=bool(self.predictor.get("hints", False)),
                  numeric=self.numeric)
        kw.update(overrides)
        return Simulator(self.build_devices(), self.build_vctxs(), self.make_policy(policy), **kw)

    def run(self, policy=None, **overrides) -> SimulationReport:
        return self.simulator(policy, **overrides).run(self.until)

    # -- paired runs ---------------------------------------------------------

    def only(self, job_id) -> "Scenario":
        """This scenario restricted to one job on a full-device pCtx."""
        s = copy.copy(self)
        s.records = [r for r in self.records if r.job_id == job_id]
        s.jobs = [j for j in self.jobs if str(j["id"]) == job_id]
        s.devices = SOLO_DEVICE
        s.policy, s.params, s.faults = "slo-aware", {}, []
        return s

    def run_exclusive(self, job_id) -> SimulationReport:
        return self.only(job_id).run()

    def run_shared(self, policy=None) -> SimulationReport:
        return self.run(policy)

    def baselines(self) -> Dict[str, SimulationReport]:
        out = {}
        for v in self.build_vctxs():
            if (v.request or {}).get("kind") != "inference":
                out[v.id] = self.run_exclusive(v.id)
        return out

    def evaluate(self, policy=None):
        report = self.run(policy)
        base = self.baselines() if self.normalize else None
        return report, compute_metrics(report, base, self.until)


# -- config parsing ----------------------------------------------------------

def _workload(entries, base_dir, slo, seed):
    records, jobs = [], []
    if isinstance(entries, dict):
        entries = [entries]
    for i, w in enumerate(entries):
        w = dict(w)
        template = dict(w.get("template", {}))
        if slo is not None and "slo" not in template:
            template["slo"] = slo
        prefix = w.get("prefix", f"w{i}-" if len(entries) > 1 else "req")
        wseed = int(w.get("seed", seed))
        if "trace" in w:
            path = w["trace"]
            if not os.path.isabs(path):
                path = os.path.join(base_dir, path)
            if not os.path.exists(path):
                raise ConfigError(f"trace file not found: {path}")
            with open(path) as fh:
                records += parse_trace(fh)
        elif "records" in w:
            records += parse_trace(json.dumps(r) for r in w["records"])
        elif "jobs" in w:
            jobs += list(w["jobs"])
        elif w.get("generator") == "poisson":
            records += gen_poisson(w["rate"], w["duration"], template, wseed, prefix=prefix)
        elif w.get("generator") == "burst":
            records += gen_burst(w["base_rate"], w["burst_rate"], w["burst_duration"],
                                 w["period"], wseed, w.get("duration"), template, prefix=prefix)
        else:
            raise ConfigError(f"unrecognized workload entry {sorted(w)}")
    if slo is not None:
        records = [r if r.slo is not None or r.kind != "inference"
                   else replace(r, slo=SloSpec.from_dict(slo)) for r in records]
    for r in records:
        if r.kind == "inference" and r.slo is None:
            raise ConfigError(f"inference request {r.job_id} has no SLO thresholds")
    return sorted(records, key=lambda r: r.arrival_time), jobs


def scenario_from_dict(cfg: dict, base_dir=".") -> Scenario:
    if not isinstance(cfg, dict):
        raise ConfigError("scenario config must be a JSON object")
    known = {"devices", "policy", "params", "cost_parameters", "workload", "profiles", "faults",
             "slo", "seed", "until", "hang_threshold", "predictor", "numeric", "max_events",
             "normalize", "description"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    seed = int(cfg.get("seed", 0))
    profiles = cfg.get("profiles", {})
    try:
        records, jobs = _workload(cfg.get("workload", []), base_dir, cfg.get("slo"), seed)
        sc = Scenario(
            devices=list(cfg.get("devices", [])),
            policy=cfg.get("policy", "slo-aware"),
            params=dict(cfg.get("params", {})),
            costs=CostParameters.from_dict(cfg.get("cost_parameters")),
            records=records, jobs=jobs,
            inference=InferenceProfile.from_dict(profiles.get("inference")),
            training={k: TrainingProfile.from_dict(v)
                      for k, v in profiles.get("training", {}).items()},
            faults=[Fault.from_dict(f) for f in cfg.get("faults", [])],
            seed=seed,
            until=None if cfg.get("until") is None else rational(cfg["until"]),
            hang_threshold=rational(cfg.get("hang_threshold", 3)),
            predictor=dict(cfg.get("predictor", {})),
            numeric=cfg.get("numeric", "exact"),
            max_events=int(cfg.get("max_events", 5_000_000)),
            normalize=bool(cfg.get("normalize", False)))
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid scenario: {e}") from None
    get_policy(sc.policy, sc.params)  # validate early
    return sc


def load_scenario(path) -> Scenario:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg})") from None
    return scenario_from_dict(cfg, os.path.dirname(os.path.abspath(path)))
