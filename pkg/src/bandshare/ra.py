"""Per-period resource allocation (RA): split each cell's slot budget among
the clients that have a packet, trading quality against virtual-queue debt.

For one cell the problem is

    min  sum_n  -V Q(tau_n) + P_n (Q_min - Q(tau_n) + alpha)_+
    s.t. sum_n tau_n <= budget,  tau_n >= 0

Each client's term is convex with a single kink where Q crosses
Q_min + alpha, so for a fixed budget price the best response is closed form.
The price is found by bisection on the (decreasing) total demand.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import (
    AllocationResult,
    PeriodSample,
    QualityModel,
    VirtualQueueLedger,
    quality,
    quality_inverse,
    quality_slope,
    slot_rate,
)

UNBOUNDED = math.inf
BISECTION_TOL = 1e-8
BISECTION_MAX_ITER = 200
ORACLE_MAX_CLIENTS = 4


@dataclass(frozen=True)
class RaProblem:
    budget: np.ndarray  # (O, R)
    sample: PeriodSample
    queues: VirtualQueueLedger
    v_weight: float
    q_min: float
    alpha: float
    model: QualityModel
    slots_per_period: int

    def __post_init__(self):
        b = np.asarray(self.budget, dtype=float)
        if not np.isfinite(b).all():
            raise ValueError("budget must be finite")
        if (b < 0).any():
            raise ValueError("negative budget")
        if b.shape != self.sample.arrivals.shape[:2]:
            raise ValueError("budget shape does not match the sample's cells")
        object.__setattr__(self, "budget", b)

    @classmethod
    def build(cls, budget, sample, queues, cfg, q_min=None):
        return cls(budget, sample, queues, cfg.v_weight,
                   cfg.q_min if q_min is None else q_min, cfg.alpha,
                   cfg.quality, cfg.slots_per_period)

    def kink(self):
        return quality_inverse(self.q_min + self.alpha, self.sample.capacities,
                               self.model, self.slots_per_period)


def per_client_best_response(lam, p, v, capacity, model, T, q_min, alpha):
    """Minimiser of -V Q(tau) + p (q_min - Q(tau) + alpha)_+ + lam * tau over tau >= 0.

    Returns ``UNBOUNDED`` for ``lam == 0``: the log utility never saturates.
    """
    if lam < 0 or p < 0 or v <= 0:
        raise ValueError("need lam >= 0, p >= 0, v > 0")
    if lam == 0:
        return UNBOUNDED
    a = float(slot_rate(capacity, model, T))
    kink = float(quality_inverse(q_min + alpha, capacity, model, T))
    offset = model.theta / a
    above = v / (model.gamma_q * lam) - offset
    if above >= kink:
        return above
    below = (v + p) / (model.gamma_q * lam) - offset
    if below <= kink:
        return max(below, 0.0)
    return kink


def solve_ra(problem, rel_tol=BISECTION_TOL, max_iter=BISECTION_MAX_ITER):
    """Exact RA solve; every cell is independent.

    Cells without arrivals get ``lam = 0``. A cell with arrivals but a zero
    budget reports the largest marginal utility at zero allocation, which is
    the left-end multiplier of its budget constraint.
    """
    s = problem.sample
    if not np.isfinite(s.capacities).all():
        raise ValueError("non-finite capacity")
    O, R, N = s.arrivals.shape
    rate = slot_rate(s.capacities, problem.model, problem.slots_per_period).reshape(O * R, N)
    tau, lam, _ = kernels.solve_cells(
        rate,
        np.asarray(problem.queues.p, dtype=float).reshape(O * R, N),
        s.arrivals.reshape(O * R, N),
        problem.budget.reshape(O * R),
        float(problem.v_weight),
        problem.model.gamma_q,
        problem.model.theta,
        problem.kink().reshape(O * R, N),
        rel_tol,
        max_iter,
    )
    return AllocationResult(tau.reshape(O, R, N), lam.reshape(O, R))


def client_costs(tau, problem):
    """Per-client RA objective terms (zero for clients without a packet)."""
    q = quality(tau, problem.sample.capacities, problem.model, problem.slots_per_period)
    hinge = np.maximum(problem.q_min - q + problem.alpha, 0.0)
    cost = -problem.v_weight * q + problem.queues.p * hinge
    return np.where(problem.sample.arrivals, cost, 0.0)


def ra_objective(problem, tau):
    return float(client_costs(tau, problem).sum())


def brute_force_ra(problem, grid_step, refine=0):
    """Grid-search oracle for RA. Test use only.

    The last arrived client of each cell takes the grid-snapped remainder
    (every term is decreasing in its own allocation). ``refine`` extra rounds
    zoom the grid by 10x around the incumbent.
    """
    if grid_step <= 0:
        raise ValueError("grid_step must be positive")
    s = problem.sample
    O, R, N = s.arrivals.shape
    tau = np.zeros((O, R, N))
    duals = np.zeros((O, R))
    p = np.asarray(problem.queues.p)
    for i, r in itertools.product(range(O), range(R)):
        idx = np.flatnonzero(s.arrivals[i, r])
        if idx.size > ORACLE_MAX_CLIENTS:
            raise ValueError("oracle scale exceeded")
        if idx.size == 0:
            continue
        b = float(problem.budget[i, r])
        cap = s.capacities[i, r, idx]
        pq = p[i, r, idx]

        def cost(points):
            # points: (G, m)
            q = quality(points, cap, problem.model, problem.slots_per_period)
            hinge = np.maximum(problem.q_min - q + problem.alpha, 0.0)
            return (-problem.v_weight * q + pq * hinge).sum(axis=1)

        def search(axes, step):
            if axes:
                mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
            else:
                mesh = np.zeros((1, 0))
            rest = b - mesh.sum(axis=1)
            keep = rest >= -1e-12
            mesh, rest = mesh[keep], np.maximum(rest[keep], 0.0)
            last = np.floor(rest / step + 1e-9) * step
            pts = np.column_stack([mesh, last])
            vals = cost(pts)
            k = int(np.argmin(vals))
            return pts[k]

        m = idx.size
        step = grid_step
        best = search([np.arange(0.0, b + 1e-12, step)] * (m - 1), step)
        for _ in range(refine):
            step /= 10.0
            offs = step * np.arange(-10, 11)
            axes = [np.maximum(best[d] + offs, 0.0) for d in range(m - 1)]
            axes = [np.unique(ax) for ax in axes]
            best = search(axes, step)
        tau[i, r, idx] = best
        w = problem.v_weight + np.where(
            quality(best, cap, problem.model, problem.slots_per_period) < problem.q_min + problem.alpha, pq, 0.0)
        marg = w * quality_slope(best, cap, problem.model, problem.slots_per_period)
        duals[i, r] = float(np.median(marg[best > 0])) if (best > 0).any() else float(marg.max())
    return AllocationResult(tau, duals)
