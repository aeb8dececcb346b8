"""Domain types, the log quality model, total QoE and sharing-polytope checks.

Array conventions used throughout the package:

* client-indexed arrays have shape ``(operators, regions, clients_per_cell)``;
* sharing entries have shape ``(regions, owners, recipients)`` so that
  ``entries[r, j, i]`` is the number of slots operator ``j`` hands to
  operator ``i`` in region ``r`` (``i == j`` is self-use).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

FEAS_TOL = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class QualityModel:
    """Q(rate) = ln((rate + theta) / beta) / gamma_q, rate in Mbps."""

    gamma_q: float = 0.8
    theta: float = 0.1
    beta: float = 0.4
    rate_unit_divisor: float = 1e6

    def __post_init__(self):
        for name in ("gamma_q", "theta", "beta", "rate_unit_divisor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def of_rate(self, rate):
        return np.log((rate + self.theta) / self.beta) / self.gamma_q

    def rate_for(self, q):
        """Rate (Mbps) reaching quality ``q``; negative when q < Q(0)."""
        return self.beta * np.exp(self.gamma_q * q) - self.theta


@dataclass(frozen=True)
class SystemConfig:
    num_operators: int = 2
    num_regions: int = 2
    clients_per_cell: int = 30
    slots_per_period: int = 20
    periods_per_hyperperiod: int = 20
    balance_bound: float = 0.001
    q_min: float = 0.3
    alpha: float = 0.008
    v_weight: float = 1.0
    step_size: float = 0.01
    step_schedule: str = "constant"
    percentile: float = 0.95
    quality: QualityModel = field(default_factory=QualityModel)

    def __post_init__(self):
        for name in ("num_operators", "num_regions", "clients_per_cell",
                     "slots_per_period", "periods_per_hyperperiod"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.balance_bound < 0:
            raise ValueError("balance_bound must be >= 0")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.v_weight > 0:
            raise ValueError("v_weight must be positive")
        if self.step_size < 0:
            # zero is allowed: it freezes the sharing matrix
            raise ValueError("step_size must be >= 0")
        if self.step_schedule not in ("constant", "inv_sqrt"):
            raise ValueError("step_schedule must be 'constant' or 'inv_sqrt'")
        if not 0 < self.percentile < 1:
            raise ValueError("percentile must lie in (0, 1)")

    @property
    def cell_shape(self):
        return (self.num_operators, self.num_regions)

    @property
    def client_shape(self):
        return (self.num_operators, self.num_regions, self.clients_per_cell)

    @property
    def sharing_shape(self):
        return (self.num_regions, self.num_operators, self.num_operators)

    @property
    def slack_allowance(self):
        """Per-arrival hinge allowance, 0.05 * alpha at the 95th percentile."""
        return (1.0 - self.percentile) * self.alpha

    def step_at(self, t):
        """Step size for hyperperiod ``t`` (1-based)."""
        if self.step_schedule == "inv_sqrt":
            return self.step_size / np.sqrt(max(t, 1))
        return self.step_size

    def with_(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class SharingMatrix:
    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=float)
        if e.ndim != 3 or e.shape[1] != e.shape[2]:
            raise ValueError("sharing entries must have shape (regions, owners, recipients)")
        object.__setattr__(self, "entries", _frozen(e))

    def budgets(self):
        """Slots usable by each (operator, region) cell, shape (O, R)."""
        return self.entries.sum(axis=1).T

    def flows(self):
        """Total slots j -> i summed over regions, shape (O, O) [owner, recipient]."""
        return self.entries.sum(axis=0)

    def shared_off_diagonal(self):
        e = self.entries.copy()
        idx = np.arange(e.shape[1])
        e[:, idx, idx] = 0.0
        return e


@dataclass(frozen=True)
class PeriodSample:
    arrivals: np.ndarray
    capacities: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.arrivals)
        c = np.asarray(self.capacities, dtype=float)
        if a.shape != c.shape:
            raise ValueError("arrivals and capacities must share a shape")
        if not np.isin(a, (0, 1)).all():
            raise ValueError("arrivals must be 0/1")
        if not (np.isfinite(c).all() and (c > 0).all()):
            raise ValueError("capacities must be finite and positive")
        object.__setattr__(self, "arrivals", _frozen(a, dtype=bool))
        object.__setattr__(self, "capacities", _frozen(c))


@dataclass(frozen=True)
class AllocationResult:
    tau: np.ndarray
    duals: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tau", _frozen(self.tau))
        object.__setattr__(self, "duals", _frozen(self.duals))


@dataclass(frozen=True)
class VirtualQueueLedger:
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if (p < 0).any():
            raise ValueError("virtual queues must be nonnegative")
        object.__setattr__(self, "p", _frozen(p))

    @classmethod
    def zeros(cls, cfg):
        return cls(np.zeros(cfg.client_shape))


def slot_rate(capacity, model, T):
    """Mbps delivered by one slot of a T-slot period at ``capacity`` bits/slot."""
    return np.asarray(capacity, dtype=float) / (T * model.rate_unit_divisor)


def quality(tau, capacity, model, T):
    return model.of_rate(np.asarray(tau, dtype=float) * slot_rate(capacity, model, T))


def quality_slope(tau, capacity, model, T):
    a = slot_rate(capacity, model, T)
    return a / (model.gamma_q * (np.asarray(tau, dtype=float) * a + model.theta))


def quality_inverse(q, capacity, model, T):
    """Smallest tau >= 0 with quality(tau) >= q (0 when q <= quality(0))."""
    rate = model.rate_for(np.asarray(q, dtype=float))
    return np.maximum(rate, 0.0) / slot_rate(capacity, model, T)


def total_qoe(traces, model, T):
    """Average over periods of the summed quality of every arrived packet.

    ``traces`` is a sequence of ``(PeriodSample, AllocationResult)`` pairs.
    """
    traces = list(traces)
    if not traces:
        raise ValueError("no periods")
    acc = 0.0
    for sample, alloc in traces:
        q = quality(alloc.tau, sample.capacities, model, T)
        acc += float(np.sum(np.where(sample.arrivals, q, 0.0)))
    return acc / len(traces)


@dataclass(frozen=True)
class Violation:
    kind: str
    where: tuple
    slack: float

    def __str__(self):
        return f"{self.kind} {self.where}: slack {self.slack:.3g}"


@dataclass(frozen=True)
class SharingVerdict:
    ok: bool
    violations: tuple

    def __bool__(self):
        return self.ok


def validate_sharing(S, cfg, tol=FEAS_TOL):
    """Check nonnegativity, per-owner caps and the pairwise balance band.

    Every violated constraint is reported with its (negative) slack.
    Operator indices in the report are 1-based.
    """
    e = S.entries if isinstance(S, SharingMatrix) else np.asarray(S, dtype=float)
    out = []
    if e.shape != cfg.sharing_shape:
        return SharingVerdict(False, (Violation("shape", tuple(e.shape), float("nan")),))
    for r, j, i in zip(*np.nonzero(e < -tol)):
        out.append(Violation("nonnegativity", (int(r) + 1, int(j) + 1, int(i) + 1), float(e[r, j, i])))
    T = cfg.slots_per_period
    used = e.sum(axis=2)
    for r, j in zip(*np.nonzero(used > T + tol)):
        out.append(Violation("cap", (int(r) + 1, int(j) + 1), float(T - used[r, j])))
    flows = e.sum(axis=0)
    O = cfg.num_operators
    for a in range(O):
        for b in range(a + 1, O):
            gap = abs(flows[b, a] - flows[a, b])
            if gap > cfg.balance_bound + tol:
                out.append(Violation("balance pair", (a + 1, b + 1), float(cfg.balance_bound - gap)))
    return SharingVerdict(not out, tuple(out))


def no_sharing_matrix(cfg):
    """Every operator keeps all of its slots in every region."""
    e = np.zeros(cfg.sharing_shape)
    idx = np.arange(cfg.num_operators)
    e[:, idx, idx] = cfg.slots_per_period
    return SharingMatrix(e)
