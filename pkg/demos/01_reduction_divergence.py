"""
Reduction order and floating-point divergence
=============================================

A kernel that sums n values in g chunks rounds after every add, so the
result depends on g. Below: the same inputs reduced with different splits,
first by hand on a tiny trace, then over many seeds for each format.
"""

import numpy as np

from gpucoro import ReductionPlan, coupling_delta, reduce_with_plan
from gpucoro.determinism import BF16, FP16, FP32, delta_batch, make_inputs

# A three-element trace in fp16: 1 + 2^-11 + 2^-11.
# Summed left to right each small term is lost to rounding; summed as
# (2^-11 + 2^-11) + 1 the small terms combine first and survive.
vals = [1.0, 2.0 ** -11, 2.0 ** -11]
seq = ReductionPlan.balanced(3, 1)
swapped = ReductionPlan.from_chunks([[1, 2], [0]])
print("left to right :", reduce_with_plan(vals, FP16, seq))
print("small first   :", reduce_with_plan(vals, FP16, swapped))
d = coupling_delta(vals, FP16, seq, swapped)
print("delta         :", d.delta)

# The same plan always gives the same bits.
x = make_inputs(FP16, 4096, 0)
p1 = ReductionPlan.balanced(4096, 1)
print("\nsame plan twice, delta =", coupling_delta(x, FP16, p1, p1).delta)

# Across 300 seeds: how often and how much does g=1 vs g=64 differ?
p64 = ReductionPlan.balanced(4096, 64)
print("\nformat  P(delta>0)  median delta")
for fmt in (FP16, BF16, FP32):
    m = np.stack([make_inputs(fmt, 4096, s) for s in range(300)])
    deltas = np.array([float(v) for v in delta_batch(m, fmt, p1, p64)])
    print(f"{fmt.name:6s}  {np.mean(deltas > 0):10.3f}  {np.median(deltas):.3e}")

# Divergence grows with the split size.
m = np.stack([make_inputs(FP16, 4096, s) for s in range(200)])
print("\nfp16 median delta vs g=1:")
for g in (2, 4, 8, 16, 32, 64):
    dd = [float(v) for v in delta_batch(m, FP16, p1, ReductionPlan.balanced(4096, g))]
    print(f"  g={g:3d}  {np.median(dd):.4f}")
