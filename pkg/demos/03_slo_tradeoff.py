"""
Protecting decode latency under prefill bursts
==============================================

Bursty inference traffic: every ten time units a one-unit burst at five
times the base rate. The default policy admits prefills eagerly; the
TPOT-first policy defers a prefill when admitting it would push running
decodes past their per-token deadline. Decode latency improves and time to
first token gets worse.
"""
from gpucoro import scenario_from_dict


def bursty(policy, seed):
    return scenario_from_dict({
        "devices": [{"id": "g", "tiers": ["1/2", "1/4", "1/4", "1/4", "1/4"]}],
        "policy": policy, "seed": seed,
        "slo": {"ttft_deadline": "1", "tpot_deadline": "0.0205"},
        "workload": [{"generator": "burst", "base_rate": 1, "burst_rate": 5,
                      "burst_duration": 1, "period": 10, "duration": 20,
                      "template": {"prompt_tokens": [128, 1024], "output_tokens": [4, 32]}}]})


print("seed  policy       requests  TTFT viol  TPOT viol  TTFT p99  TPOT p99")
for seed in range(5):
    for policy in ("slo-aware", "tpot-first"):
        _, m = bursty(policy, seed).evaluate()
        print(f"{seed:4d}  {policy:11s}  {m.completed_requests:8d}  "
              f"{float(m.ttft_violation_rate):9.3f}  {float(m.tpot_violation_rate):9.3f}  "
              f"{float(m.ttft.p99):8.3f}  {float(m.tpot.p99):8.4f}")
