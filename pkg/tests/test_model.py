import itertools
from fractions import Fraction as F

import pytest

from gpucoro import (BindConflict, BindingTable, Device, DoubleBind, InvalidTier, Kernel,
                     MemoryRegion, VirtualContext, create_pool)
from gpucoro.model import bind, unbind


def test_pool_of_three_tiers():
    dev = create_pool(Device("g"), [F(1, 4), F(1, 2), 1])
    assert [p.fraction for p in dev.pctx_pool] == [F(1, 4), F(1, 2), 1]
    assert all(p.bound is None and not p.hw_queue for p in dev.pctx_pool)


def test_single_full_tier():
    dev = create_pool(Device("g"), [1])
    assert len(dev.pctx_pool) == 1 and dev.pctx_pool[0].fraction == 1


@pytest.mark.parametrize("bad", [0, -F(1, 2), F(3, 2)])
def test_invalid_tier(bad):
    with pytest.raises(InvalidTier):
        create_pool(Device("g"), [bad])


def test_quarter_pool_exhaustive_binding():
    dev = create_pool(Device("g"), [F(1, 4)] * 4)
    vs = [VirtualContext(f"v{i}") for i in range(4)]
    for r in range(5):
        for subset in itertools.combinations(range(4), r):
            t = BindingTable()
            for i in subset:
                t.bind(vs[i], dev.pctx_pool[i])
            dev.check()
            assert dev.bound_fraction() == F(r, 4) <= 1
            for i in subset:
                t.unbind(vs[i], dev.pctx_pool[i])


def test_bind_conflict_and_double_bind():
    dev = create_pool(Device("g"), [F(1, 2), F(1, 2)])
    p1, p2 = dev.pctx_pool
    v1, v2 = VirtualContext("v1"), VirtualContext("v2")
    t = bind(BindingTable(), v1, p1)
    assert t.as_dict() == {"v1": p1.id}
    with pytest.raises(BindConflict):
        bind(t, v2, p1)
    with pytest.raises(DoubleBind):
        bind(t, v1, p2)


def test_rebind_preserves_progress():
    dev = create_pool(Device("g"), [F(1, 2), F(1, 2)])
    p1, p2 = dev.pctx_pool
    k = Kernel("k0", "v1", 1, "op", 1)
    v1 = VirtualContext("v1", pending=[k, Kernel("k1", "v1", 1, "op", 1)])
    t = BindingTable()
    bind(t, v1, p1)
    v1.retire_head()
    unbind(t, v1, p1)
    bind(t, v1, p2)
    assert t.as_dict() == {"v1": p2.id}
    assert v1.logical_progress == 1 and [x.id for x in v1.pending] == ["k1"]
    assert p1.bound is None and not p1.hw_queue and not p1.rck_flag
    t.check({p.id: p for p in dev.pctx_pool})


def test_kernel_validation():
    with pytest.raises(ValueError):
        Kernel("k", "v", 1, "op", 0)
    with pytest.raises(ValueError):
        Kernel("k", "v", 0, "op", 1)
    with pytest.raises(ValueError):
        VirtualContext("v", pending=[Kernel("k", "v", 1, "op", 1, touched_regions={"x"})])
    with pytest.raises(ValueError):
        MemoryRegion("r", 0)


def test_kernel_fingerprint_is_stable():
    k = Kernel("k", "v", 4, "op", F(3, 2), F(1, 2), F(1, 4), F(1, 3), {"a"})
    assert k.fingerprint() == Kernel("k", "v", 4, "op", F(3, 2), F(1, 2), F(1, 4), F(1, 3),
                                     {"a"}).fingerprint()
    assert k.signature == ("op", 4)
