"""Comparison policies: no sharing, the offline optimal static sharing
(convexified, solved by cutting planes), a per-period dynamic-sharing
proxy, and the closed-form static-vs-no-sharing gap."""

from __future__ import annotations

import enum
import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, minimize

from . import kernels
from .model import (
    SharingMatrix,
    VirtualQueueLedger,
    no_sharing_matrix,
    quality,
    quality_inverse,
    slot_rate,
)
from .ra import RaProblem, client_costs, solve_ra
from .scenario import RunTrace, hyperperiod_samples
from .sharing import SolverError, project_onto_omega, run_static, update_virtual_queues

log = logging.getLogger(__name__)

# price per slot of accumulated exchange debt in the dynamic proxy
DYNAMIC_WEIGHT = 0.01

__all__ = [
    "PolicyKind",
    "OptSsResult",
    "no_sharing_matrix",
    "run_no_sharing",
    "solve_opt_ss_star",
    "evaluate_static",
    "run_dynamic_proxy",
    "lemma3_gap",
]


class PolicyKind(enum.Enum):
    NO_SHARING = "no_sharing"
    OPTIMAL_STATIC = "static"
    DYNAMIC_PROXY = "dynamic"
    ABS = "abs"


def run_no_sharing(cfg, scenario, num_hyperperiods=None, detail="hyperperiod"):
    """No sharing, evaluated with Q_min = 0 as in the experiments."""
    trace, _ = run_static(cfg, scenario, no_sharing_matrix(cfg), num_hyperperiods, q_min=0.0,
                          detail=detail, policy="no_sharing")
    return trace


# ---------------------------------------------------------------------------
# offline optimal static sharing


class _Cell:
    """Stacked samples of one (operator, region) cell across K periods."""

    def __init__(self, cfg, samples, i, r, q_min):
        T = cfg.slots_per_period
        caps = np.stack([s.capacities[i, r] for s in samples])
        self.active = np.stack([s.arrivals[i, r] for s in samples])
        self.rate = slot_rate(caps, cfg.quality, T)
        self.caps = caps
        self.kink = quality_inverse(q_min + cfg.alpha, caps, cfg.quality, T)
        self.count = self.active.sum(axis=0)
        self.K = len(samples)
        self.cfg = cfg
        self.q_min = q_min
        self.p = np.zeros(cfg.clients_per_cell)

    def _solve(self, budget, p):
        extra = np.broadcast_to(p, self.rate.shape)
        tau, lam, _ = kernels.solve_cells(self.rate, extra, self.active,
                                          np.full(self.K, budget), 1.0,
                                          self.cfg.quality.gamma_q, self.cfg.quality.theta, self.kink)
        q = quality(tau, self.caps, self.cfg.quality, self.cfg.slots_per_period)
        hinge = np.where(self.active, np.maximum(self.q_min - q + self.cfg.alpha, 0.0), 0.0)
        qoe = float(np.where(self.active, q, 0.0).sum()) / self.K
        # constraint residual, scaled by 1/K: sum_k hinge - K_n * allowance
        resid = (hinge.sum(axis=0) - self.count * self.cfg.slack_allowance) / self.K
        dual_value = qoe - float(p @ resid)
        return dual_value, qoe, resid, float(lam.mean()), tau

    def value(self, budget, p_max):
        """Penalised value of the cell at ``budget`` (exact dual, p <= p_max).

        Returns ``(value, qoe, residual, mean multiplier)``.
        """
        val, qoe, resid, lam, _ = self._solve(budget, np.zeros_like(self.p))
        if (resid <= 1e-12).all():
            self.p[:] = 0.0
            return val, qoe, resid, lam

        def dual(p):
            v, _, g, _, _ = self._solve(budget, p)
            return v, -g

        res = minimize(dual, self.p, jac=True, method="L-BFGS-B",
                       bounds=[(0.0, p_max)] * self.p.size,
                       options={"ftol": 1e-13, "gtol": 1e-10, "maxiter": 500})
        self.p[:] = res.x
        val, qoe, resid, lam, _ = self._solve(budget, self.p)
        return val, qoe, resid, lam


@dataclass(frozen=True)
class OptSsResult:
    sharing: SharingMatrix
    objective: float          # time-averaged total QoE
    converged: bool
    iterations: int
    max_violation: float      # largest per-client hinge-average excess
    gap: float                # certified upper bound minus achieved penalised value


def _omega_rows(cfg):
    """Linear description A_ub x <= b_ub of the sharing polytope (x = entries.ravel())."""
    R, O, _ = cfg.sharing_shape
    n = R * O * O
    pos = np.arange(n).reshape(R, O, O)
    rows, rhs = [], []
    for r, j in itertools.product(range(R), range(O)):
        row = np.zeros(n)
        row[pos[r, j, :]] = 1.0
        rows.append(row)
        rhs.append(cfg.slots_per_period)
    for j in range(O):
        for i in range(j + 1, O):
            row = np.zeros(n)
            row[pos[:, j, i]] = 1.0
            row[pos[:, i, j]] = -1.0
            rows += [row, -row]
            rhs += [cfg.balance_bound, cfg.balance_bound]
    return np.array(rows), np.array(rhs, dtype=float), pos


def solve_opt_ss_star(cfg, samples, q_min=None, max_iter=300, tol=1e-7, p_max=1e3):
    """Offline optimal static sharing on a recorded sample path.

    For fixed sharing, each cell's time-averaged problem (including the
    per-client hinge-average constraints) is solved exactly through its
    Lagrange dual, giving the cell value and its average budget multiplier.
    The cell values are concave in the budget but kinked where a hinge
    constraint becomes infeasible, so the outer maximisation over the
    polytope uses Kelley cutting planes: every evaluation adds a supporting
    line per cell and an LP over the sharing entries proposes the next
    point. Stops when the LP bound and the best value agree to ``tol``
    (relative).
    """
    if not samples:
        raise ValueError("no periods")
    q_min = cfg.q_min if q_min is None else q_min
    O, R = cfg.cell_shape
    keys = list(itertools.product(range(O), range(R)))
    cells = {key: _Cell(cfg, samples, *key, q_min) for key in keys}
    A_ub, b_ub, pos = _omega_rows(cfg)
    n = A_ub.shape[1]
    m = len(keys)
    # budget of cell (i, r) = sum_j entries[r, j, i]
    B = np.zeros((m, n))
    for c, (i, r) in enumerate(keys):
        B[c, pos[r, :, i]] = 1.0

    cuts = []  # (cell index, value, slope, budget)

    def evaluate(S):
        vals, worst, qoe = np.zeros(m), 0.0, 0.0
        b = B @ S.ravel()
        for c, key in enumerate(keys):
            v, q, resid, lam = cells[key].value(float(b[c]), p_max)
            vals[c] = v
            qoe += q
            cuts.append((c, v, lam, b[c]))
            worst = max(worst, float(np.max(resid * cells[key].K / np.maximum(cells[key].count, 1))))
        return vals.sum(), qoe, worst

    S = no_sharing_matrix(cfg).entries
    best = (*evaluate(S), S)
    full = np.full(cfg.sharing_shape, cfg.slots_per_period / O)
    cand = (*evaluate(full), full)
    if cand[0] > best[0]:
        best = cand
    upper = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        # variables: entries (n), cell values (m); maximise sum of cell values
        rows, rhs = [], []
        for c, v, lam, b0 in cuts:
            row = np.zeros(n + m)
            row[n + c] = 1.0
            row[:n] = -lam * B[c]
            rows.append(row)
            rhs.append(v - lam * b0)
        A = np.vstack([np.hstack([A_ub, np.zeros((A_ub.shape[0], m))]), np.array(rows)])
        rhs = np.concatenate([b_ub, rhs])
        cost = np.concatenate([np.zeros(n), -np.ones(m)])
        bounds = [(0.0, None)] * n + [(None, None)] * m
        lp = linprog(cost, A_ub=A, b_ub=rhs, bounds=bounds, method="highs")
        if lp.status != 0:
            raise SolverError(f"cutting-plane LP failed: {lp.message}", "baselines")
        upper = min(upper, -lp.fun)
        if upper - best[0] <= tol * max(1.0, abs(best[0])):
            break
        S = np.clip(lp.x[:n].reshape(cfg.sharing_shape), 0.0, None)
        S = project_onto_omega(S, cfg).entries
        cand = (*evaluate(S), S)
        if cand[0] > best[0]:
            best = cand
    gap = max(upper - best[0], 0.0)
    converged = gap <= tol * max(1.0, abs(best[0]))
    if not converged:
        log.warning("optimal static sharing not fully converged (gap %.2e)", gap)
    return OptSsResult(SharingMatrix(best[3]), best[1], converged, it, best[2], gap)


def evaluate_static(cfg, samples, sharing, q_min=None, p_max=1e3):
    """Best time-averaged QoE reachable on ``samples`` with ``sharing`` held fixed.

    Returns ``(qoe, max_violation)``.
    """
    q_min = cfg.q_min if q_min is None else q_min
    budgets = sharing.budgets()
    qoe, worst = 0.0, 0.0
    for i, r in itertools.product(*map(range, cfg.cell_shape)):
        cell = _Cell(cfg, samples, i, r, q_min)
        _, q, resid, _ = cell.value(float(budgets[i, r]), p_max)
        qoe += q
        worst = max(worst, float(np.max(resid * cell.K / np.maximum(cell.count, 1))))
    return qoe, worst


# ---------------------------------------------------------------------------
# dynamic sharing proxy


def _region_costs(cfg, sample, queues, r, budgets, q_min):
    """RA objective and multiplier of every operator's cell in region ``r``."""
    O = cfg.num_operators
    T = cfg.slots_per_period
    caps = sample.capacities[:, r]
    rate = slot_rate(caps, cfg.quality, T)
    kink = quality_inverse(q_min + cfg.alpha, caps, cfg.quality, T)
    tau, lam, _ = kernels.solve_cells(rate, queues.p[:, r], sample.arrivals[:, r], budgets,
                                      cfg.v_weight, cfg.quality.gamma_q, cfg.quality.theta, kink)
    q = quality(tau, caps, cfg.quality, T)
    hinge = np.maximum(q_min - q + cfg.alpha, 0.0)
    cost = np.where(sample.arrivals[:, r], -cfg.v_weight * q + queues.p[:, r] * hinge, 0.0).sum(axis=1)
    return cost, lam, tau


def _split_two(cfg, sample, queues, r, debt, weight, q_min, tol=1e-7):
    """Two operators: net transfer z from operator 1 to 2 minimising cost + weight*debt*z.

    ``debt`` is the accumulated slots operator 2 has received from 1 in excess.
    """
    T = float(cfg.slots_per_period)

    def slope(z):
        _, lam, _ = _region_costs(cfg, sample, queues, r, np.array([T - z, T + z]), q_min)
        return lam[0] - lam[1] + weight * debt

    lo, hi = -T, T
    if slope(lo) >= 0:
        z = lo
    elif slope(hi) <= 0:
        z = hi
    else:
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if slope(mid) > 0:
                hi = mid
            else:
                lo = mid
        z = 0.5 * (lo + hi)
    e = np.zeros((2, 2))
    if z >= 0:
        e[0, 1], e[0, 0], e[1, 1] = z, T - z, T
    else:
        e[1, 0], e[1, 1], e[0, 0] = -z, T + z, T
    return e


def _split_general(cfg, sample, queues, r, debt, weight, q_min):
    """Any number of operators: gifts g[j, i] (j != i), owners keep the rest."""
    O = cfg.num_operators
    T = float(cfg.slots_per_period)
    off = [(j, i) for j in range(O) for i in range(O) if i != j]

    def unpack(x):
        e = np.zeros((O, O))
        for k, (j, i) in enumerate(off):
            e[j, i] = x[k]
        e[np.arange(O), np.arange(O)] = T - e.sum(axis=1)
        return e

    def fun(x):
        e = unpack(x)
        cost, lam, _ = _region_costs(cfg, sample, queues, r, e.sum(axis=0), q_min)
        pen = sum(weight * debt[i, j] * x[k] for k, (j, i) in enumerate(off))
        grad = np.array([-lam[i] + lam[j] + weight * debt[i, j] for (j, i) in off])
        return float(cost.sum() + pen), grad

    cons = [{"type": "ineq", "fun": (lambda x, j=j: T - sum(x[k] for k, (jj, _) in enumerate(off) if jj == j)),
             "jac": (lambda x, j=j: -np.array([1.0 if jj == j else 0.0 for (jj, _) in off]))}
            for j in range(O)]
    res = minimize(fun, np.zeros(len(off)), jac=True, method="SLSQP",
                   bounds=[(0.0, T)] * len(off), constraints=cons,
                   options={"ftol": 1e-10, "maxiter": 200})
    e = unpack(np.clip(res.x, 0.0, T))
    # SLSQP can overshoot a cap by round-off; scale that owner's gifts back
    gifts = e - np.diag(np.diag(e))
    over = gifts.sum(axis=1) > T
    gifts[over] *= T / gifts[over].sum(axis=1, keepdims=True)
    return gifts + np.diag(np.maximum(T - gifts.sum(axis=1), 0.0))


def run_dynamic_proxy(cfg, scenario, num_hyperperiods=None, weight=DYNAMIC_WEIGHT, detail="hyperperiod"):
    """Per-period joint sharing and allocation with a balance virtual queue.

    Each period and region the sharing is re-chosen to minimise the RA
    objective plus ``weight * debt`` per slot received, where ``debt[i, j]``
    counts the net slots ``i`` has received from ``j`` so far. The quadratic
    drift of that debt keeps the long-run exchange balanced.
    """
    horizon = scenario.horizon if num_hyperperiods is None else num_hyperperiods
    O, R = cfg.cell_shape
    H = cfg.periods_per_hyperperiod
    q_min = cfg.q_min
    queues = VirtualQueueLedger.zeros(cfg)
    debt = np.zeros((O, O))
    trace = RunTrace(policy="dynamic", q_min=q_min, period_tau=[] if detail == "period" else None)
    k = 0
    for t in range(horizon):
        qoe, used = [], np.zeros(cfg.sharing_shape)
        for sample in hyperperiod_samples(scenario, cfg, t):
            e = np.zeros(cfg.sharing_shape)
            for r in range(R):
                if O == 2:
                    e[r] = _split_two(cfg, sample, queues, r, debt[1, 0], weight, q_min)
                else:
                    e[r] = _split_general(cfg, sample, queues, r, debt, weight, q_min)
            S = SharingMatrix(e)
            try:
                alloc = solve_ra(RaProblem.build(S.budgets(), sample, queues, cfg))
            except (RuntimeError, ValueError) as exc:
                raise SolverError(str(exc), f"baselines, period {k}") from exc
            qoe.append(trace.record_period(sample, alloc.tau, cfg, q_min))
            queues = update_virtual_queues(queues, sample, alloc, q_min, cfg.alpha, cfg.percentile,
                                           cfg.quality, cfg.slots_per_period)
            flows = S.flows()
            debt += (flows - flows.T).T
            used += e
            k += 1
        trace.hyperperiod_qoe.append(float(np.mean(qoe)))
        trace.sharing.append(used / H)
        trace.grad_norm.append(0.0)
        trace.max_queue.append(float(queues.p.max()))
        trace.imbalance.append(float(np.max(np.abs(debt))) / k)
    trace.final_queue = np.array(queues.p)
    return trace


# ---------------------------------------------------------------------------
# closed-form gap


def lemma3_gap(counts, cfg, capacity=10e6):
    """Static-pooling vs no-sharing QoE gap under deterministic arrivals.

    ``counts`` (O, R) holds the arrivals per period of every cell. Returns
    ``(exact, approx)`` where ``approx`` assumes capacity >> theta.
    """
    sigma = np.asarray(counts, dtype=float)
    if (sigma <= 0).any():
        raise ValueError("formula requires arrivals in every cell")
    m = cfg.quality
    c = capacity / m.rate_unit_divisor
    cells = sigma.size
    total = sigma.sum()
    exact = np.sum(sigma * np.log((cells * c / total + m.theta) / (c / sigma + m.theta))) / m.gamma_q
    approx = np.sum(sigma * np.log(cells * sigma / total)) / m.gamma_q
    return float(exact), float(approx)
