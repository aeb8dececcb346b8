import numpy as np
import pytest

from bandshare.model import SystemConfig
from bandshare.scenario import (
    RegimeSwitch,
    RunTrace,
    ScenarioSpec,
    generate_period,
    hinge_implies_percentile,
    improvement_over_no_sharing,
    mirrored_rates,
    percentile_satisfaction,
)
from bandshare.sharing import run_abs


def test_extreme_rates(cfg):
    s = generate_period(ScenarioSpec(np.array([[0.0, 1.0], [1.0, 0.0]]), seed=1), cfg, 0)
    assert not s.arrivals[0, 0].any() and s.arrivals[0, 1].all()
    assert s.arrivals[1, 0].all() and not s.arrivals[1, 1].any()


def test_bernoulli_mean(cfg):
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9), seed=123)
    counts = [generate_period(spec, cfg, k).arrivals[0, 1].sum() for k in range(3000)]
    assert np.mean(counts) == pytest.approx(27.0, abs=0.5)


def test_counter_based_stream(cfg):
    spec = ScenarioSpec(mirrored_rates(0.3, 0.6), seed=42)
    forward = [generate_period(spec, cfg, k).arrivals for k in range(10)]
    backward = [generate_period(spec, cfg, k).arrivals for k in reversed(range(10))][::-1]
    assert all(np.array_equal(a, b) for a, b in zip(forward, backward))
    other = generate_period(ScenarioSpec(mirrored_rates(0.3, 0.6), seed=43), cfg, 0).arrivals
    assert not np.array_equal(forward[0], other)


def test_regime_switch_at_boundary():
    cfg = SystemConfig(periods_per_hyperperiod=4)
    spec = ScenarioSpec(np.zeros((2, 2)), regime_switches=(RegimeSwitch(3, np.ones((2, 2)), 5e6),))
    H = cfg.periods_per_hyperperiod
    assert not generate_period(spec, cfg, 3 * H - 1).arrivals.any()
    s = generate_period(spec, cfg, 3 * H)
    assert s.arrivals.all() and np.all(s.capacities == 5e6)


def test_spec_validation():
    with pytest.raises(ValueError):
        ScenarioSpec(np.array([[1.5, 0.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        ScenarioSpec(np.zeros((2, 2)), regime_switches=(RegimeSwitch(5), RegimeSwitch(5)))
    with pytest.raises(ValueError):
        ScenarioSpec(np.zeros((2, 2)), capacity=0.0)


def test_per_cell_capacity(cfg):
    caps = np.array([[1e6, 2e6], [3e6, 4e6]])
    s = generate_period(ScenarioSpec(np.ones((2, 2)), capacity=caps), cfg, 0)
    assert np.all(s.capacities[1, 0] == 3e6)


def test_deterministic_counts(cfg):
    s = generate_period(ScenarioSpec(mirrored_rates(0.1, 0.9), deterministic=True), cfg, 17)
    assert s.arrivals.sum(axis=2).tolist() == [[3, 27], [27, 3]]


def _trace(arrivals, satisfied):
    t = RunTrace("x", 0.3)
    t.arrivals = np.array(arrivals)
    t.satisfied = np.array(satisfied)
    t.hinge_sum = np.zeros_like(t.arrivals, dtype=float)
    return t


def test_percentile_satisfaction_examples():
    frac = percentile_satisfaction(_trace([20, 20, 0], [20, 19, 0]))
    assert frac[0] == 1.0 and frac[1] == pytest.approx(0.95)
    assert np.isnan(frac[2])


def _qoe_trace(values):
    t = RunTrace("x", 0.3)
    t.hyperperiod_qoe = list(values)
    return t


def test_improvement():
    a = _qoe_trace([10.0, 12.0])
    assert improvement_over_no_sharing(a, a).value == 0.0
    imp = improvement_over_no_sharing(_qoe_trace([11.0, 13.0]), a)
    assert imp.relative and imp.value == pytest.approx(100 * 2 / 22)
    zero = improvement_over_no_sharing(_qoe_trace([1.0]), _qoe_trace([0.0]))
    assert not zero.relative and zero.value == 1.0
    with pytest.raises(ValueError):
        improvement_over_no_sharing(a, _qoe_trace([1.0]))


def test_trace_bookkeeping_and_implication(cfg):
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9), seed=4)
    trace, _ = run_abs(cfg, spec, 20)
    assert np.all(trace.satisfied <= trace.arrivals)
    assert np.all(np.isfinite(trace.hyperperiod_qoe))
    assert trace.arrivals.sum() == sum(
        generate_period(spec, cfg, k).arrivals.sum() for k in range(20 * cfg.periods_per_hyperperiod))
    assert hinge_implies_percentile(trace, cfg) == []


def test_determinism(cfg):
    spec = ScenarioSpec(mirrored_rates(0.2, 0.8), seed=77)
    a, _ = run_abs(cfg, spec, 10)
    b, _ = run_abs(cfg, spec, 10)
    assert a.hyperperiod_qoe == b.hyperperiod_qoe
    assert all(np.array_equal(x, y) for x, y in zip(a.sharing, b.sharing))
    assert np.array_equal(a.final_queue, b.final_queue)


def test_label_swap_gives_swapped_trace(cfg):
    spec = ScenarioSpec(np.array([[0.1, 0.7], [0.6, 0.2]]), seed=8, deterministic=True)
    a, _ = run_abs(cfg, spec, 15)
    b, _ = run_abs(cfg, spec.swapped(), 15)
    assert np.allclose(a.hyperperiod_qoe, b.hyperperiod_qoe, rtol=1e-12)
    for x, y in zip(a.sharing, b.sharing):
        assert np.allclose(x, y[:, ::-1, ::-1], atol=1e-9)
    assert np.allclose(a.final_queue, b.final_queue[::-1], atol=1e-9)
