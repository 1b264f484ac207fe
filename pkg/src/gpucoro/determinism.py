"""Low-precision reduction divergence under fragmentation, and its absence
when launch configuration is immutable.

Two independent routes compute a reduction: `reduce_exact` walks the
rounding sequence on exact rationals, `reduce_with_plan` runs it vectorized
on a wider binary carrier with correct final rounding. Carrier precision is
at least 2p+2 bits for every supported format, so rounding the exact sum
first to the carrier and then to the target gives the same result as
rounding once.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidSplit, PlanMismatch


# -- formats -----------------------------------------------------------------

@dataclass(frozen=True)
class FloatFormat:
    name: str
    exp_bits: int
    frac_bits: int

    @property
    def precision(self):
        return self.frac_bits + 1

    @property
    def bias(self):
        return 2 ** (self.exp_bits - 1) - 1

    @property
    def emin(self):
        return 1 - self.bias

    @property
    def emax(self):
        return self.bias

    @property
    def max_finite(self) -> Fraction:
        return Fraction(2) ** self.emax * (2 - Fraction(1, 2 ** self.frac_bits))

    @property
    def min_subnormal(self) -> Fraction:
        return Fraction(1, 2 ** (self.frac_bits - self.emin))


FP16 = FloatFormat("fp16", 5, 10)
BF16 = FloatFormat("bf16", 8, 7)
FP32 = FloatFormat("fp32", 8, 23)
FORMATS = {f.name: f for f in (FP16, BF16, FP32)}


def get_format(fmt) -> FloatFormat:
    if isinstance(fmt, FloatFormat):
        return fmt
    try:
        return FORMATS[str(fmt).lower()]
    except KeyError:
        raise ValueError(f"unknown format {fmt!r}; valid: {', '.join(FORMATS)}") from None


def _floor_log2(a: Fraction) -> int:
    e = a.numerator.bit_length() - a.denominator.bit_length()
    if Fraction(2) ** e > a:
        e -= 1
    elif Fraction(2) ** (e + 1) <= a:
        e += 1
    return e


def round_to(fmt, x):
    """Correctly rounded (nearest, ties to even) value of real `x` in `fmt`.

    Finite results come back as Fractions; overflow gives a signed float inf.
    """
    fmt = get_format(fmt)
    if isinstance(x, (float, np.floating)):
        if math.isinf(x):
            return float(x)
        x = float(x)
    x = Fraction(x)
    if x == 0:
        return Fraction(0)
    sign = -1 if x < 0 else 1
    a = abs(x)
    e = max(_floor_log2(a), fmt.emin)
    quantum = Fraction(2) ** (e - fmt.frac_bits)
    q = a / quantum
    n = q.numerator // q.denominator
    rem = q - n
    if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and n % 2 == 1):
        n += 1
    r = n * quantum
    if r > fmt.max_finite:
        return sign * math.inf
    return sign * r


# -- plans -------------------------------------------------------------------

@dataclass(frozen=True)
class ReductionPlan:
    """Partition of [0, n) into ordered chunks, each summed left to right."""

    n: int
    chunks: Tuple[Tuple[int, ...], ...]
    tree: bool = False  # pairwise combine of partials instead of sequential

    def __post_init__(self):
        flat = sorted(i for c in self.chunks for i in c)
        if self.n < 1 or not self.chunks or any(len(c) == 0 for c in self.chunks):
            raise ValueError("a plan needs n >= 1 and non-empty chunks")
        if flat != list(range(self.n)):
            raise ValueError("plan chunks must partition range(n)")

    @property
    def g(self):
        return len(self.chunks)

    @classmethod
    def balanced(cls, n: int, g: int, tree=False) -> "ReductionPlan":
        """Contiguous chunks of size ceil(n/g) first, then floor(n/g)."""
        if not 1 <= g <= n:
            raise ValueError(f"grid split g={g} must be in [1, {n}]")
        base, extra = divmod(n, g)
        chunks, start = [], 0
        for i in range(g):
            size = base + (1 if i < extra else 0)
            chunks.append(tuple(range(start, start + size)))
            start += size
        return cls(n, tuple(chunks), tree)

    @classmethod
    def from_chunks(cls, chunks, tree=False) -> "ReductionPlan":
        chunks = tuple(tuple(c) for c in chunks)
        return cls(sum(len(c) for c in chunks), chunks, tree)


def _combine_exact(parts, rnd, tree):
    if not tree:
        total = parts[0]
        for p in parts[1:]:
            total = rnd(total + p)
        return total
    while len(parts) > 1:
        nxt = [rnd(parts[i] + parts[i + 1]) for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def reduce_exact(values, fmt, plan: ReductionPlan):
    """Golden route: exact rationals with an explicit rounding after every add."""
    fmt = get_format(fmt)
    if len(values) != plan.n:
        raise PlanMismatch(f"{len(values)} values for a plan over {plan.n}")
    vals = [Fraction(float(v)) if isinstance(v, (float, np.floating)) else Fraction(v)
            for v in values]

    def rnd(x):
        if isinstance(x, float):  # inf propagates
            return x
        return round_to(fmt, x)

    parts = []
    for chunk in plan.chunks:
        acc = vals[chunk[0]]
        for i in chunk[1:]:
            acc = rnd(acc + vals[i])
        parts.append(acc)
    return _combine_exact(parts, rnd, plan.tree)


# -- vectorized carrier route ------------------------------------------------

def _bf16_round(x32: np.ndarray) -> np.ndarray:
    bits = x32.view(np.uint32).astype(np.uint64)
    bits = (bits + 0x7FFF + ((bits >> 16) & 1)) & 0xFFFF0000
    return bits.astype(np.uint32).view(np.float32)


def _carrier(fmt: FloatFormat):
    """(carrier dtype, rounding function carrier -> carrier holding fmt values)."""
    if fmt is FP16:
        return np.float32, lambda x: x.astype(np.float16).astype(np.float32)
    if fmt is BF16:
        return np.float32, _bf16_round
    if fmt is FP32:
        return np.float64, lambda x: x.astype(np.float32).astype(np.float64)
    raise ValueError(f"no carrier for {fmt.name}")


def cast_to(fmt, values) -> np.ndarray:
    """Cast arbitrary float data into the format (returned on its carrier)."""
    fmt = get_format(fmt)
    dtype, rnd = _carrier(fmt)
    arr = np.asarray(values, dtype=np.float64)
    with np.errstate(over="ignore"):
        if fmt is FP16:
            return arr.astype(np.float16).astype(np.float32)
        if fmt is BF16:
            return _bf16_round(arr.astype(np.float32))
        return arr.astype(np.float32).astype(np.float64)


def reduce_batch(matrix, fmt, plan: ReductionPlan) -> np.ndarray:
    """Reduce each row of `matrix` under `plan`; returns carrier values."""
    fmt = get_format(fmt)
    dtype, rnd = _carrier(fmt)
    x = np.asarray(matrix, dtype=dtype)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != plan.n:
        raise PlanMismatch(f"{x.shape[1]} values for a plan over {plan.n}")
    width = max(len(c) for c in plan.chunks)
    idx = np.full((plan.g, width), plan.n, dtype=np.int64)
    for j, c in enumerate(plan.chunks):
        idx[j, :len(c)] = c
    padded = np.concatenate([x, np.zeros((x.shape[0], 1), dtype=dtype)], axis=1)
    g = padded[:, idx]  # (rows, chunks, width); zero padding adds nothing
    with np.errstate(over="ignore", invalid="ignore"):
        acc = g[:, :, 0].copy()
        for i in range(1, width):
            acc = rnd(acc + g[:, :, i])
        if plan.tree:
            parts = acc
            while parts.shape[1] > 1:
                m = parts.shape[1] // 2
                merged = rnd(parts[:, 0:2 * m:2] + parts[:, 1:2 * m:2])
                if parts.shape[1] % 2:
                    merged = np.concatenate([merged, parts[:, -1:]], axis=1)
                parts = merged
            return parts[:, 0]
        total = acc[:, 0]
        for j in range(1, acc.shape[1]):
            total = rnd(total + acc[:, j])
    return total


def reduce_with_plan(values, fmt, plan: ReductionPlan) -> float:
    """Fast route for a single vector; the result is a value of `fmt`."""
    return float(reduce_batch(np.asarray(values)[None, :], fmt, plan)[0])


def to_bits(fmt, value) -> int:
    fmt = get_format(fmt)
    if fmt is FP16:
        return int(np.array(value, dtype=np.float16).view(np.uint16))
    if fmt is BF16:
        return int(np.array(value, dtype=np.float32).view(np.uint32)) >> 16
    return int(np.array(value, dtype=np.float32).view(np.uint32))


def make_inputs(fmt, n, seed, low=-1.0, high=1.0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return cast_to(fmt, rng.uniform(low, high, n))


# -- coupling delta ----------------------------------------------------------

@dataclass(frozen=True)
class CouplingDelta:
    delta: object  # Fraction, or inf when exactly one side overflowed
    left: float
    right: float

    @property
    def bit_identical(self):
        return self.left == self.right and math.copysign(1, self.left) == \
            math.copysign(1, self.right)


def exact_delta(a: float, b: float):
    if a == b:
        return Fraction(0)
    if math.isinf(a) or math.isinf(b):
        return math.inf
    return abs(Fraction(a) - Fraction(b))


def coupling_delta(values, fmt, plan_i: ReductionPlan, plan_j: ReductionPlan) -> CouplingDelta:
    if plan_i.n != plan_j.n or len(values) != plan_i.n:
        raise PlanMismatch(f"plans over {plan_i.n} and {plan_j.n} for {len(values)} values")
    a = reduce_with_plan(values, fmt, plan_i)
    b = reduce_with_plan(values, fmt, plan_j)
    return CouplingDelta(exact_delta(a, b), a, b)


def delta_batch(matrix, fmt, plan_i, plan_j) -> List[Fraction]:
    """Exact deltas for every row of `matrix` (vectorized reductions)."""
    a = reduce_batch(matrix, fmt, plan_i)
    b = reduce_batch(matrix, fmt, plan_j)
    return [exact_delta(float(x), float(y)) for x, y in zip(a, b)]


def divergence_sweep(fmt, n, splits: Sequence[int], seeds: int, base_g=1, start_seed=0):
    """Rows (format, n, g_i, g_j, seed, delta) comparing base_g to each split."""
    fmt = get_format(fmt)
    seeds_list = list(range(start_seed, start_seed + seeds))
    matrix = np.stack([make_inputs(fmt, n, s) for s in seeds_list]) if seeds_list else \
        np.zeros((0, n))
    base = ReductionPlan.balanced(n, base_g)
    rows = []
    if not seeds_list:
        return rows
    ref = reduce_batch(matrix, fmt, base)
    cols = {}
    for g in splits:
        cols[g] = reduce_batch(matrix, fmt, ReductionPlan.balanced(n, g))
    for r, seed in enumerate(seeds_list):
        for g in splits:
            d = exact_delta(float(ref[r]), float(cols[g][r]))
            rows.append((fmt.name, n, base_g, g, seed, d))
    return rows


def write_sweep_csv(rows, path_or_file):
    close = False
    fh = path_or_file
    if isinstance(path_or_file, str):
        fh = open(path_or_file, "w", newline="")
        close = True
    try:
        w = csv.writer(fh)
        w.writerow(["format", "n", "g_i", "g_j", "seed", "delta"])
        for fmt, n, gi, gj, seed, d in rows:
            w.writerow([fmt, n, gi, gj, seed, repr(float(d))])
    finally:
        if close:
            fh.close()


# -- batch statistics --------------------------------------------------------

@dataclass(frozen=True)
class BatchStats:
    full_mean: Fraction
    full_var: Fraction
    splits: Tuple[Tuple[Fraction, Fraction], ...]
    mean_deviation: Fraction
    var_deviation: Fraction

    @property
    def max_deviation(self):
        return max(self.mean_deviation, self.var_deviation)


def _mean_var(xs):
    n = len(xs)
    mean = sum(xs, Fraction(0)) / n
    var = sum(((x - mean) ** 2 for x in xs), Fraction(0)) / n
    return mean, var


def batch_stats_divergence(batch, split_sizes) -> BatchStats:
    """Population mean/variance of the batch and of each contiguous split.

    `split_sizes` is a list of sizes or a list of the split lists themselves.
    """
    xs = [Fraction(float(x)) if isinstance(x, (float, np.floating)) else Fraction(x)
          for x in batch]
    if not xs:
        raise InvalidSplit("empty batch")
    sizes = [len(s) if isinstance(s, (list, tuple, np.ndarray)) else int(s)
             for s in split_sizes]
    if any(s <= 0 for s in sizes):
        raise InvalidSplit("empty split")
    if sum(sizes) != len(xs):
        raise InvalidSplit(f"splits cover {sum(sizes)} of {len(xs)} elements")
    full = _mean_var(xs)
    stats, start = [], 0
    for s in sizes:
        stats.append(_mean_var(xs[start:start + s]))
        start += s
    return BatchStats(full[0], full[1], tuple(stats),
                      max(abs(m - full[0]) for m, _ in stats),
                      max(abs(v - full[1]) for _, v in stats))


# -- immutable-launch equivalence --------------------------------------------

def kernel_result(kernel, grid):
    """Reduction output a kernel would produce when executed with `grid` chunks."""
    spec = kernel.reduction
    values = make_inputs(spec.fmt, spec.n, spec.seed)
    plan = ReductionPlan.balanced(spec.n, min(grid, spec.n))
    return reduce_with_plan(values, spec.fmt, plan)


@dataclass
class EquivalenceReport:
    equivalent: bool
    transcript_mismatches: List[str] = field(default_factory=list)
    result_mismatches: List[Tuple[str, object]] = field(default_factory=list)


def compare_runs(exclusive: Dict[str, object], shared) -> EquivalenceReport:
    """Compare per-vCtx transcripts and reduction outputs of two runs."""
    rep = EquivalenceReport(True)
    for vid, ex in sorted(exclusive.items()):
        if ex.transcripts.get(vid, []) != shared.transcripts.get(vid, []):
            rep.transcript_mismatches.append(vid)
    kernels = {}
    for ex in exclusive.values():
        for rec in ex.kernels:
            kernels[rec.kernel] = rec
    shared_recs = {rec.kernel: rec for rec in shared.kernels}
    by_id = {}
    for ex in exclusive.values():
        for v in ex.vctxs.values():
            for k in v.completed:
                by_id[k.id] = k
    for kid, rec in sorted(kernels.items()):
        k = by_id.get(kid)
        if k is None or k.reduction is None:
            continue
        other = shared_recs.get(kid)
        if other is None:
            rep.result_mismatches.append((kid, None))
            continue
        a, b = kernel_result(k, rec.grid), kernel_result(k, other.grid)
        if to_bits(k.reduction.fmt, a) != to_bits(k.reduction.fmt, b):
            rep.result_mismatches.append((kid, exact_delta(a, b)))
    rep.equivalent = not rep.transcript_mismatches and not rep.result_mismatches
    return rep


def equivalence_report(scenario) -> EquivalenceReport:
    """Run every job alone on a full-device pCtx and all jobs together."""
    if not scenario.job_ids():
        return EquivalenceReport(True)
    exclusive = {jid: scenario.run_exclusive(jid) for jid in scenario.job_ids()}
    shared = scenario.run_shared()
    return compare_runs(exclusive, shared)


def verify_immutable_equivalence(scenario) -> bool:
    return equivalence_report(scenario).equivalent
