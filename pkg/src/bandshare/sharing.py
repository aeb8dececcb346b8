"""The ABS policy: per-period RA with virtual queues, and a projected
stochastic-gradient update of the sharing matrix once per hyperperiod."""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from . import kernels
from .model import (
    SharingMatrix,
    VirtualQueueLedger,
    no_sharing_matrix,
    quality,
    validate_sharing,
)
from .ra import RaProblem, solve_ra
from .scenario import RunTrace, hyperperiod_samples

log = logging.getLogger(__name__)

PROJECTION_TOL = 1e-9
PROJECTION_MAX_SWEEPS = 10_000  # past this the exact finish takes over


class SolverError(RuntimeError):
    """A numerical routine failed; ``where`` names the module and period."""

    def __init__(self, msg, where=""):
        super().__init__(f"{where}: {msg}" if where else msg)
        self.where = where


def update_virtual_queues(queues, sample, allocation, q_min, alpha, percentile, model, T):
    """One queue step: P <- max(P + hinge - (1 - pct) * alpha, 0) for clients with a packet."""
    q = quality(allocation.tau, sample.capacities, model, T)
    hinge = np.maximum(q_min - q + alpha, 0.0)
    grown = np.maximum(queues.p + hinge - (1.0 - percentile) * alpha, 0.0)
    return VirtualQueueLedger(np.where(sample.arrivals, grown, queues.p))


def sharing_gradient(accumulated_duals):
    """g[r, j, i] = -sum_k lam[i, r](k), identical for every donor j.

    ``accumulated_duals`` is (O, R); the result has sharing shape (R, O, O).
    """
    acc = np.asarray(accumulated_duals, dtype=float)
    O, R = acc.shape
    return np.broadcast_to(-acc.T[:, None, :], (R, O, O)).copy()


@functools.lru_cache(maxsize=16)
def _omega_halfspaces(R, O, T, band):
    """Dense ``A y <= b`` description of the polytope (y = entries.ravel())."""
    n = R * O * O
    pos = np.arange(n).reshape(R, O, O)
    rows = [-np.eye(n)]
    rhs = [np.zeros(n)]
    caps = np.zeros((R * O, n))
    for k, (r, j) in enumerate(np.ndindex(R, O)):
        caps[k, pos[r, j, :]] = 1.0
    rows.append(caps)
    rhs.append(np.full(R * O, float(T)))
    for j in range(O):
        for i in range(j + 1, O):
            d = np.zeros(n)
            d[pos[:, j, i]] = 1.0
            d[pos[:, i, j]] = -1.0
            rows.append(np.stack([d, -d]))
            rhs.append(np.array([band, band]))
    A = np.vstack(rows)
    A.setflags(write=False)
    b = np.concatenate(rhs)
    b.setflags(write=False)
    return A, b


def _kkt_residual(x, y, A, b, tol):
    """How far ``y`` is from certifying as the projection of ``x``.

    Nonnegative multipliers of the (numerically) active constraints are
    fitted to ``x - y = A_act^T mu``; the residual is the worst misfit or
    infeasibility.
    """
    slack = b - A @ y
    infeas = max(float(-slack.min()), 0.0)
    act = np.flatnonzero(slack <= 10 * tol * max(1.0, float(np.abs(b).max())))
    r = x - y
    if act.size == 0:
        return max(float(np.abs(r).max()), infeas)
    mu = nnls(A[act].T, r)[0]
    return max(float(np.abs(A[act].T @ mu - r).max()), infeas)


def _active_set_finish(x, y, A, b, tol, anchor=None, max_iter=1000):
    """Primal active-set method for min ||z - x||^2 / 2 over A z <= b, warm-started at y."""
    z = np.array(y)
    n = z.size
    scale = max(1.0, float(np.abs(b).max()))
    if anchor is not None:
        # move towards a known feasible point just far enough to be feasible
        gap = A @ z - b
        bad = gap > 0
        if bad.any():
            s = float(np.max(gap[bad] / (gap[bad] - (A[bad] @ anchor - b[bad]))))
            z = z + min(s, 1.0) * (anchor - z)
    work = []
    for k in np.flatnonzero(b - A @ z <= 10 * tol * scale):
        if np.linalg.matrix_rank(A[work + [k]]) == len(work) + 1:
            work.append(int(k))
    for _ in range(max_iter):
        if work:
            Aw = A[work]
            kkt = np.block([[np.eye(n), Aw.T], [Aw, np.zeros((len(work), len(work)))]])
            sol = np.linalg.lstsq(kkt, np.concatenate([x - z, np.zeros(len(work))]), rcond=None)[0]
            step, mu = sol[:n], sol[n:]
        else:
            step, mu = x - z, np.zeros(0)
        if np.abs(step).max() <= tol:
            neg = [w for w, m in zip(work, mu) if m < -tol]
            if not neg:
                return z
            work.remove(min(neg))  # smallest index leaves: no cycling
            continue
        t, block = 1.0, None
        Ad = A @ step
        for k in np.flatnonzero(Ad > 1e-12 * np.abs(step).max()):
            if k in work:
                continue
            tk = max((b[k] - A[k] @ z) / Ad[k], 0.0)
            if tk < t - 1e-15:
                t, block = tk, int(k)
        z = z + t * step
        if block is not None and np.linalg.matrix_rank(A[work + [block]]) == len(work) + 1:
            work.append(block)
    return None


def project_onto_omega(point, cfg, tol=PROJECTION_TOL, max_sweeps=PROJECTION_MAX_SWEEPS):
    """Euclidean projection onto the sharing polytope.

    Dykstra's algorithm over the elementary sets does the work. Far from
    the polytope Dykstra can stall: the iterate stays put (and may even be
    feasible) while the correction terms migrate, so a small step is not
    proof of optimality. The result is therefore checked against the KKT
    conditions and, when that fails, finished exactly by a warm-started
    active-set step.
    """
    x = point.entries if isinstance(point, SharingMatrix) else np.asarray(point, dtype=float)
    if not np.isfinite(x).all():
        raise ValueError("projection input must be finite")
    y, sweeps = kernels.dykstra_project(x, float(cfg.slots_per_period), float(cfg.balance_bound),
                                        tol, max_sweeps)
    A, b = _omega_halfspaces(*cfg.sharing_shape[:2], cfg.slots_per_period, float(cfg.balance_bound))
    xs, ys = x.ravel(), y.ravel()
    if sweeps < 0 or _kkt_residual(xs, ys, A, b, tol) > 1e3 * tol * max(1.0, float(np.abs(xs).max())):
        log.debug("Dykstra result not certified (sweeps=%d); finishing by active set", sweeps)
        z = _active_set_finish(xs, ys, A, b, tol, anchor=no_sharing_matrix(cfg).entries.ravel())
        if z is None:
            raise SolverError("projection stalled", "sharing-optimizer")
        y = z.reshape(x.shape)
    # tiny (< tol) negatives can survive either route; clamp them so
    # downstream budgets are exactly nonnegative
    S = SharingMatrix(np.maximum(y, 0.0))
    verdict = validate_sharing(S, cfg)
    if not verdict:
        raise SolverError("projection left the polytope: " + "; ".join(map(str, verdict.violations)),
                          "sharing-optimizer")
    return S


@dataclass(frozen=True)
class AbsState:
    sharing: SharingMatrix
    queues: VirtualQueueLedger
    hyperperiod_index: int = 1
    accumulated_duals: np.ndarray | None = None

    @classmethod
    def initial(cls, cfg, sharing=None):
        S = no_sharing_matrix(cfg) if sharing is None else sharing
        verdict = validate_sharing(S, cfg)
        if not verdict:
            raise ValueError("initial sharing outside the polytope: "
                             + "; ".join(map(str, verdict.violations)))
        return cls(S, VirtualQueueLedger.zeros(cfg), 1, np.zeros(cfg.cell_shape))


@dataclass(frozen=True)
class HyperperiodTrace:
    allocations: list
    qualities: np.ndarray   # (H, O, R, N), NaN where no packet
    queues: np.ndarray      # (H, O, R, N) after each period
    period_qoe: np.ndarray  # (H,)
    gradient: np.ndarray
    next_sharing: SharingMatrix


def abs_hyperperiod_step(state, samples, cfg, q_min=None, step=None, recorder=None, first_period=0):
    """Run the H periods of one hyperperiod with the sharing frozen, then update it.

    ``q_min`` overrides the configured threshold (the no-sharing baseline
    runs with 0). ``step`` overrides the scheduled step size.
    """
    q_min = cfg.q_min if q_min is None else q_min
    T = cfg.slots_per_period
    budget = state.sharing.budgets()
    queues = state.queues
    acc = np.zeros(cfg.cell_shape)
    allocs, quals, snaps, qoe = [], [], [], []
    for h, sample in enumerate(samples):
        try:
            alloc = solve_ra(RaProblem.build(budget, sample, queues, cfg, q_min=q_min))
        except (RuntimeError, ValueError) as exc:
            raise SolverError(str(exc), f"ra-solver, period {first_period + h}") from exc
        acc += alloc.duals
        q = quality(alloc.tau, sample.capacities, cfg.quality, T)
        quals.append(np.where(sample.arrivals, q, np.nan))
        qoe.append(float(np.sum(np.where(sample.arrivals, q, 0.0))))
        if recorder is not None:
            recorder.record_period(sample, alloc.tau, cfg, q_min)
        queues = update_virtual_queues(queues, sample, alloc, q_min, cfg.alpha, cfg.percentile,
                                       cfg.quality, T)
        snaps.append(queues.p)
        allocs.append(alloc)

    grad = sharing_gradient(acc)
    eta = cfg.step_at(state.hyperperiod_index) if step is None else step
    if eta == 0 or not samples:
        nxt = state.sharing
    else:
        nxt = project_onto_omega(state.sharing.entries - eta * grad, cfg)
    trace = HyperperiodTrace(allocs, np.array(quals), np.array(snaps), np.array(qoe), grad, nxt)
    new_state = AbsState(nxt, queues, state.hyperperiod_index + 1, acc)
    return new_state, trace


def run_abs(cfg, scenario, num_hyperperiods=None, initial_sharing=None, q_min=None,
            detail="hyperperiod", step=None, start_state=None, policy="abs"):
    """Drive ABS over ``num_hyperperiods`` of the scenario stream.

    Returns ``(RunTrace, final AbsState)``.
    """
    horizon = scenario.horizon if num_hyperperiods is None else num_hyperperiods
    state = start_state or AbsState.initial(cfg, initial_sharing)
    q_used = cfg.q_min if q_min is None else q_min
    trace = RunTrace(policy=policy, q_min=q_used, period_tau=[] if detail == "period" else None)
    first = state.hyperperiod_index - 1
    H = cfg.periods_per_hyperperiod
    for t in range(first, first + horizon):
        samples = hyperperiod_samples(scenario, cfg, t)
        used = state.sharing
        state, hp = abs_hyperperiod_step(state, samples, cfg, q_min=q_used, step=step,
                                         recorder=trace, first_period=t * H)
        trace.hyperperiod_qoe.append(float(hp.period_qoe.mean()))
        trace.sharing.append(np.array(used.entries))
        trace.grad_norm.append(float(np.linalg.norm(hp.gradient)))
        trace.max_queue.append(float(state.queues.p.max()))
        flows = used.flows()
        trace.imbalance.append(float(np.max(np.abs(flows - flows.T))))
        if t % 50 == 0:
            log.debug("hyperperiod %d qoe %.4f", t, trace.hyperperiod_qoe[-1])
    trace.final_queue = np.array(state.queues.p)
    return trace, state


def run_static(cfg, scenario, sharing, num_hyperperiods=None, q_min=None, detail="hyperperiod",
               policy="static"):
    """Hold ``sharing`` fixed (step 0) and run the per-period allocation with queues."""
    return run_abs(cfg, scenario, num_hyperperiods, initial_sharing=sharing, q_min=q_min,
                   detail=detail, step=0.0, policy=policy)

