"""
Failure containment
===================

Three failure kinds on a small device:
  * a local exception kills one context; the neighbour's schedule is untouched
  * a soft hang stretches a kernel tenfold; it is flagged at three times its
    predicted length and pinned to the smallest slice
  * a whole-device failure moves every resident context to a standby device
    at its next segment boundary, keeping its progress
"""
from fractions import Fraction as F

from gpucoro import Fault, Scenario

HALVES = [{"id": "g", "tiers": [F(1, 2), F(1, 2)]}]
JOBS = [{"id": j, "kernels": [{"duration": 1, "saturation": F(1, 2)}], "repeat": 6} for j in "ab"]

# local exception
clean = Scenario(devices=HALVES, jobs=JOBS).run()
sim = Scenario(devices=HALVES, jobs=JOBS).simulator()
sim.run(until=F(5, 2))
target = sim.table.get("a")
hit = Scenario(devices=HALVES, jobs=JOBS, faults=[Fault("LocalException", target, F(5, 2))]).run()
print("local exception on", target)
print("  a:", hit.vctxs["a"].status.value, " b transcript unchanged:",
      hit.transcripts["b"] == clean.transcripts["b"])

# soft hang
sc = Scenario(devices=[{"id": "g", "tiers": [1, F(1, 4)]}],
              jobs=[{"id": "h", "kernels": [{"duration": 1, "saturation": F(1, 4)}], "repeat": 4}],
              faults=[Fault("SoftHang", "g/p0", F(3, 2), 10)])
rep = sc.run()
q = rep.quarantines[0]
print("\nsoft hang: kernel started at t=1 with predicted length 1")
print(f"  flagged at t={q.flagged_at}, demoted to tier {q.demoted_tier}")
for r in rep.kernels:
    print(f"  {r.kernel:8s} start={float(r.start):7.3f} finish={float(r.finish):7.3f} tiers={[str(t) for t in r.tiers]}")

# global exception
devices = HALVES + [{"id": "s", "tiers": [F(1, 2), F(1, 2)], "standby": True}]
rep = Scenario(devices=devices, jobs=JOBS,
               faults=[Fault("GlobalException", "g", F(9, 4))]).run()
print("\ndevice g fails at t=2.25")
for m in rep.migrations:
    print(f"  {m.vctx}: {m.src} -> {m.dst}  [{float(m.start):.4f}, {float(m.end):.4f}]")
print("  all done:", all(v.status.value == "Done" for v in rep.vctxs.values()))
