"""
Time slicing is a special case
==============================

For a small random instance, run the time-slicing baseline, then search
the decision space of the general framework for a script that reproduces
its schedule exactly. The found script is replayed to confirm.
"""
from gpucoro.containment import ScriptedPolicy, random_instance, reproduce, transcript
from gpucoro.policies import TemporalPolicy

sc, quantum = random_instance(7)
ref = sc.simulator(TemporalPolicy(quantum=quantum)).run()
print(f"quantum={quantum}")
for v, k, s, f in transcript(ref.kernels):
    print(f"  {v} {k:8s} [{float(s):.4f}, {float(f):.4f}]")

res = reproduce(lambda p: sc.simulator(p), TemporalPolicy(quantum=quantum))
print(f"\nfound={res.found} after {res.nodes} replays, {len(res.script)} decisions:")
for d in res.script:
    print("  ", d.kind, d.target or "", d.retry_at if d.retry_at is not None else "")

again = sc.simulator(ScriptedPolicy(res.script)).run()
print("\nreplay matches:", transcript(again.kernels) == transcript(ref.kernels))
