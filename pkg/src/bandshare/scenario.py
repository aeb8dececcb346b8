"""Arrival/channel streams, run traces and the metrics plotted in the experiments."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import PeriodSample, quality

_KEY_MASK = (1 << 64) - 1


@dataclass(frozen=True)
class RegimeSwitch:
    """From hyperperiod ``at`` (0-based) onward use new rates and/or capacity."""

    at: int
    arrival_rates: np.ndarray | None = None
    capacity: np.ndarray | float | None = None


@dataclass(frozen=True)
class ScenarioSpec:
    """Bernoulli arrivals per (operator, region) cell, constant capacity per regime.

    ``arrival_rates`` has shape (O, R). ``capacity`` is bits per slot, either
    a scalar or an (O, R) array. ``deterministic`` replaces Bernoulli draws
    by a fixed count ``round(rate * clients)`` of arrivals (the first clients
    of the cell) in every period.
    """

    arrival_rates: np.ndarray
    capacity: np.ndarray | float = 10e6
    regime_switches: tuple = ()
    seed: int = 0
    horizon: int = 200
    deterministic: bool = False

    def __post_init__(self):
        rates = np.asarray(self.arrival_rates, dtype=float)
        if rates.ndim != 2:
            raise ValueError("arrival_rates must be an (operators, regions) array")
        object.__setattr__(self, "arrival_rates", rates)
        ats = [sw.at for sw in self.regime_switches]
        if any(b <= a for a, b in zip(ats, ats[1:])):
            raise ValueError("regime switch indices must be strictly increasing")
        for r in [rates] + [sw.arrival_rates for sw in self.regime_switches if sw.arrival_rates is not None]:
            if ((np.asarray(r) < 0) | (np.asarray(r) > 1)).any():
                raise ValueError("arrival rates must lie in [0, 1]")
        for c in [self.capacity] + [sw.capacity for sw in self.regime_switches if sw.capacity is not None]:
            if not (np.asarray(c, dtype=float) > 0).all():
                raise ValueError("capacity must be positive")

    def regime(self, hyperperiod):
        rates, cap = self.arrival_rates, self.capacity
        for sw in self.regime_switches:
            if sw.at > hyperperiod:
                break
            if sw.arrival_rates is not None:
                rates = np.asarray(sw.arrival_rates, dtype=float)
            if sw.capacity is not None:
                cap = sw.capacity
        return rates, cap

    def swapped(self):
        """Same scenario with the two operator labels exchanged."""
        def flip(x):
            x = np.asarray(x, dtype=float)
            return x[::-1] if x.ndim == 2 else x
        switches = tuple(
            RegimeSwitch(sw.at,
                         None if sw.arrival_rates is None else flip(sw.arrival_rates),
                         None if sw.capacity is None else flip(sw.capacity))
            for sw in self.regime_switches)
        return ScenarioSpec(flip(self.arrival_rates), flip(self.capacity), switches,
                            self.seed, self.horizon, self.deterministic)


def mirrored_rates(low, high):
    """Two operators, two regions: operator 1 is light in region 1, heavy in region 2."""
    return np.array([[low, high], [high, low]])


def generate_period(spec, cfg, k):
    """Sample of period ``k`` (0-based); depends only on (seed, k)."""
    rates, cap = spec.regime(k // cfg.periods_per_hyperperiod)
    shape = cfg.client_shape
    if rates.shape != cfg.cell_shape:
        raise ValueError("arrival_rates shape does not match the system")
    caps = np.broadcast_to(np.asarray(cap, dtype=float)[..., None] if np.ndim(cap) else cap, shape)
    if spec.deterministic:
        counts = np.rint(rates * cfg.clients_per_cell).astype(int)
        arrivals = np.arange(cfg.clients_per_cell)[None, None, :] < counts[:, :, None]
    else:
        bitgen = np.random.Philox(key=spec.seed & _KEY_MASK, counter=[0, k, 0, 0])
        u = np.random.Generator(bitgen).random(shape)
        arrivals = u < rates[:, :, None]
    return PeriodSample(arrivals, caps)


def hyperperiod_samples(spec, cfg, t):
    H = cfg.periods_per_hyperperiod
    return [generate_period(spec, cfg, t * H + h) for h in range(H)]


def window_samples(spec, cfg, start, stop):
    """Samples of hyperperiods ``start <= t < stop``."""
    out = []
    for t in range(start, stop):
        out.extend(hyperperiod_samples(spec, cfg, t))
    return out


@dataclass
class RunTrace:
    """Per-hyperperiod and per-client record of one policy run."""

    policy: str
    q_min: float
    hyperperiod_qoe: list = field(default_factory=list)
    sharing: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    max_queue: list = field(default_factory=list)
    period_qoe: list = field(default_factory=list)
    period_tau: list | None = None
    arrivals: np.ndarray | None = None
    satisfied: np.ndarray | None = None
    hinge_sum: np.ndarray | None = None
    final_queue: np.ndarray | None = None
    imbalance: list = field(default_factory=list)

    @property
    def num_hyperperiods(self):
        return len(self.hyperperiod_qoe)

    def record_period(self, sample, tau, cfg, q_min):
        q = quality(tau, sample.capacities, cfg.quality, cfg.slots_per_period)
        a = sample.arrivals
        if self.arrivals is None:
            self.arrivals = np.zeros(cfg.client_shape, dtype=int)
            self.satisfied = np.zeros(cfg.client_shape, dtype=int)
            self.hinge_sum = np.zeros(cfg.client_shape)
        self.arrivals += a
        self.satisfied += a & (q >= q_min)
        self.hinge_sum += np.where(a, np.maximum(q_min - q + cfg.alpha, 0.0), 0.0)
        total = float(np.sum(np.where(a, q, 0.0)))
        self.period_qoe.append(total)
        if self.period_tau is not None:
            self.period_tau.append(np.array(tau))
        return total

    def window_qoe(self, start=0, stop=None):
        """Mean per-period total QoE over hyperperiods ``start <= t < stop``."""
        q = np.asarray(self.hyperperiod_qoe[start:stop], dtype=float)
        if q.size == 0:
            raise ValueError("empty window")
        return float(q.mean())

    def as_arrays(self):
        return {
            "hyperperiod_qoe": np.asarray(self.hyperperiod_qoe),
            "sharing": np.asarray(self.sharing),
            "grad_norm": np.asarray(self.grad_norm),
            "max_queue": np.asarray(self.max_queue),
        }


def percentile_satisfaction(trace):
    """Fraction of each client's packets reaching Q_min; NaN where K_n = 0."""
    if trace.arrivals is None:
        return np.array([])
    k = trace.arrivals
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(k > 0, trace.satisfied / np.maximum(k, 1), np.nan)


def hinge_implies_percentile(trace, cfg):
    """Check: average hinge <= (1 - pct) * alpha must imply the percentile.

    Returns the list of offending client indices (empty on success).
    """
    k = trace.arrivals
    bad = []
    for idx in zip(*np.nonzero(k > 0)):
        avg = trace.hinge_sum[idx] / k[idx]
        if avg <= cfg.slack_allowance and trace.satisfied[idx] / k[idx] < cfg.percentile:
            bad.append(tuple(int(x) for x in idx))
    return bad


@dataclass(frozen=True)
class Improvement:
    value: float
    relative: bool

    def __float__(self):
        return self.value


def improvement_over_no_sharing(policy_trace, nosharing_trace, start=0, stop=None):
    """Percent QoE gain over the no-sharing run on the same window.

    Falls back to the absolute difference (``relative=False``) when the
    no-sharing QoE is zero.
    """
    if policy_trace.num_hyperperiods != nosharing_trace.num_hyperperiods:
        raise ValueError("traces must cover the same horizon")
    return improvement_pct(policy_trace.window_qoe(start, stop), nosharing_trace.window_qoe(start, stop))


def improvement_pct(value, base):
    if base == 0:
        return Improvement(value - base, False)
    return Improvement(100.0 * (value - base) / abs(base), True)
