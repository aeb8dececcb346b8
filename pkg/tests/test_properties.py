"""Property-based checks of the structural invariants."""

import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bandshare.model import (
    PeriodSample,
    QualityModel,
    SharingMatrix,
    SystemConfig,
    VirtualQueueLedger,
    quality,
    validate_sharing,
)
from bandshare.ra import RaProblem, solve_ra
from bandshare.sharing import project_onto_omega, update_virtual_queues

Q = QualityModel()
caps = st.floats(1e5, 1e8)
taus = st.floats(0.0, 200.0)


@given(caps, taus, taus, taus)
def test_quality_concave(c, x, y, z):
    a, b, d = sorted((x, y, z))
    assume(d - a > 1e-6)
    qa, qb, qd = (float(quality(t, c, Q, 20)) for t in (a, b, d))
    assert qb >= ((d - b) * qa + (b - a) * qd) / (d - a) - 1e-9


@given(caps, st.floats(0.0, 100.0), st.floats(1e-6, 50.0))
def test_quality_strictly_increasing(c, t, dt):
    assert quality(t + dt, c, Q, 20) > quality(t, c, Q, 20)


def sharing_points(R=2, O=2):
    return arrays(np.float64, (R, O, O), elements=st.floats(-30, 50))


CFG = SystemConfig()


@settings(max_examples=150, deadline=None)
@given(sharing_points())
def test_projection_lands_in_polytope_and_is_idempotent(x):
    y = project_onto_omega(x, CFG)
    assert validate_sharing(y, CFG)
    z = project_onto_omega(y, CFG)
    assert np.allclose(y.entries, z.entries, atol=1e-8)


@settings(max_examples=150, deadline=None)
@given(sharing_points(), sharing_points())
def test_projection_nonexpansive(x, y):
    px = project_onto_omega(x, CFG).entries
    py = project_onto_omega(y, CFG).entries
    assert np.linalg.norm(px - py) <= np.linalg.norm(x - y) + 1e-8


@settings(max_examples=100, deadline=None)
@given(sharing_points())
def test_validate_agrees_with_projection_fixed_points(x):
    # a point is a member iff projecting it leaves it (numerically) in place
    member = bool(validate_sharing(SharingMatrix(x), CFG))
    moved = np.abs(project_onto_omega(x, CFG).entries - x).max()
    if member:
        assert moved <= 1e-8
    else:
        assert moved > 1e-10


@st.composite
def ra_instances(draw):
    n = draw(st.integers(1, 6))
    arrivals = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n)))
    assume(arrivals.any())
    capacity = np.array(draw(st.lists(caps, min_size=n, max_size=n)))
    p = np.array(draw(st.lists(st.floats(0, 20), min_size=n, max_size=n)))
    b1 = draw(st.floats(0.0, 40.0))
    b2 = draw(st.floats(0.0, 40.0))
    return arrivals, capacity, p, min(b1, b2), max(b1, b2)


def _solve(arrivals, capacity, p, budget):
    sample = PeriodSample(arrivals[None, None], capacity[None, None])
    prob = RaProblem(np.array([[budget]]), sample, VirtualQueueLedger(p[None, None]), 1.0, 0.3, 0.008, Q, 20)
    return solve_ra(prob)


@settings(max_examples=200, deadline=None)
@given(ra_instances())
def test_ra_monotone_in_budget(inst):
    arrivals, capacity, p, lo, hi = inst
    a, b = _solve(arrivals, capacity, p, lo), _solve(arrivals, capacity, p, hi)
    assert b.duals[0, 0] <= a.duals[0, 0] * (1 + 1e-6) + 1e-12
    assert np.all(b.tau >= a.tau - 1e-6 * max(1.0, hi))
    for res, budget in ((a, lo), (b, hi)):
        used = res.tau.sum()
        assert used <= budget + 1e-8 * max(1.0, budget)
        # slackness up to the bisection's budget tolerance 1e-8 * max(1, budget)
        lam = res.duals[0, 0]
        assert lam * (budget - used) <= lam * 1e-8 * max(1.0, budget) + 1e-12
        assert np.all(res.tau[0, 0][~arrivals] == 0)


@given(arrays(np.float64, 4, elements=st.floats(0, 10)),
       arrays(np.float64, 4, elements=st.floats(0, 40)),
       arrays(np.bool_, 4))
def test_queues_nonnegative_and_untouched(p, tau, arrived):
    sample = PeriodSample(arrived.reshape(1, 1, 4), np.full((1, 1, 4), 10e6))
    from bandshare.model import AllocationResult
    alloc = AllocationResult(np.where(arrived, tau, 0.0).reshape(1, 1, 4), np.zeros((1, 1)))
    new = update_virtual_queues(VirtualQueueLedger(p.reshape(1, 1, 4)), sample, alloc,
                                0.3, 0.008, 0.95, Q, 20).p.ravel()
    assert np.all(new >= 0)
    assert np.array_equal(new[~arrived], p[~arrived])
