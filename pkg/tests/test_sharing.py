import numpy as np
import pytest

from bandshare.model import (
    AllocationResult,
    PeriodSample,
    SharingMatrix,
    SystemConfig,
    VirtualQueueLedger,
    no_sharing_matrix,
    validate_sharing,
)
from bandshare.scenario import ScenarioSpec, hyperperiod_samples, mirrored_rates
from bandshare.sharing import (
    AbsState,
    abs_hyperperiod_step,
    project_onto_omega,
    run_abs,
    sharing_gradient,
    update_virtual_queues,
)
from oracles import active_set_projection, polytope_rows


def _queue_case(p0, tau, arrived, q_min=0.3, alpha=0.008):
    cfg = SystemConfig(num_operators=1, num_regions=1, clients_per_cell=1, alpha=alpha)
    sample = PeriodSample(np.array([[[arrived]]]), np.array([[[10e6]]]))
    alloc = AllocationResult(np.array([[[tau]]]), np.zeros((1, 1)))
    out = update_virtual_queues(VirtualQueueLedger(np.array([[[p0]]])), sample, alloc, q_min,
                                alpha, 0.95, cfg.quality, 20)
    return float(out.p[0, 0, 0])


def test_queue_update_arithmetic():
    # pick tau so that the hinge is exactly 0.02: Q = q_min + alpha - 0.02
    from bandshare.model import QualityModel, quality_inverse
    tau = float(quality_inverse(0.3 + 0.008 - 0.02, 10e6, QualityModel(), 20))
    assert _queue_case(0.5, tau, 1) == pytest.approx(0.5196, abs=1e-12)


def test_queue_untouched_without_arrival():
    assert _queue_case(0.5, 0.0, 0) == 0.5


def test_queue_stays_zero_when_satisfied():
    assert _queue_case(0.0, 20.0, 1) == 0.0


def test_gradient_examples():
    assert np.all(sharing_gradient(np.zeros((2, 2))) == 0)
    g = sharing_gradient(np.full((2, 2), 20 * 0.1))
    assert g.shape == (2, 2, 2)
    assert np.allclose(g, -2.0)
    acc = np.array([[0.3, 0.0], [0.1, 0.0]]) * 20  # (O, R): recipient 1 vs 2 in region 1
    g = sharing_gradient(acc)
    # linear in the duals: a 0.3 vs 0.1 split is three times as negative
    assert np.allclose(g[0, :, 0], 3 * g[0, :, 1])
    g = sharing_gradient(np.array([[0.2, 0.0], [0.1, 0.0]]) * 20)
    assert np.allclose(g[0, :, 0], 2 * g[0, :, 1])
    # identical for every donor
    assert np.all(g[:, 0, :] == g[:, 1, :])


def test_projection_identity_on_member(cfg):
    S = no_sharing_matrix(cfg)
    assert np.allclose(project_onto_omega(S, cfg).entries, S.entries, atol=1e-9)


def test_projection_zero_band_example():
    cfg = SystemConfig(num_regions=1, balance_bound=0.0)
    y = project_onto_omega(np.array([[[10.0, 4.0], [0.0, 10.0]]]), cfg).entries
    assert y[0, 0, 1] == pytest.approx(2.0, abs=1e-9)
    assert y[0, 1, 0] == pytest.approx(2.0, abs=1e-9)
    A, b = polytope_rows(1, 2, 20, 0.0)
    oracle = active_set_projection(np.array([10.0, 4.0, 0.0, 10.0]), A, b,
                                   no_sharing_matrix(cfg).entries.ravel())
    assert np.allclose(y.ravel(), oracle, atol=1e-8)


def test_projection_far_point_where_dykstra_stalls(cfg):
    # a large ABS step: Dykstra sits on a non-optimal point for >1e5 sweeps here
    x = np.array([[[328.45731737, 34.78703544], [328.45731737, 34.78703544]],
                  [[34.64448189, 258.36222787], [34.64448189, 258.36222787]]])
    y = project_onto_omega(x, cfg).entries
    A, b = polytope_rows(2, 2, 20, cfg.balance_bound)
    oracle = active_set_projection(x.ravel(), A, b, no_sharing_matrix(cfg).entries.ravel())
    assert np.allclose(y.ravel(), oracle, atol=1e-6)
    assert np.allclose(y, [[[20, 0], [20, 0]], [[0, 20], [0, 20]]], atol=1e-6)


@pytest.mark.parametrize("operators, regions, band", [(2, 2, 0.001), (3, 2, 0.001), (2, 3, 0.0)])
def test_projection_matches_oracle_far_away(operators, regions, band):
    cfg = SystemConfig(num_operators=operators, num_regions=regions, balance_bound=band)
    A, b = polytope_rows(regions, operators, 20, band)
    x0 = no_sharing_matrix(cfg).entries.ravel()
    rng = np.random.default_rng(7)
    for _ in range(15):
        x = rng.normal(10, 300, cfg.sharing_shape)
        y = project_onto_omega(x, cfg).entries.ravel()
        assert np.linalg.norm(y - active_set_projection(x.ravel(), A, b, x0)) < 1e-6


def test_projection_clamps_single_negative(cfg):
    x = np.array([[[12.0, 3.0], [3.0, 12.0]], [[12.0, 3.0], [3.0, 12.0]]])
    x[1, 0, 0] = -1.0
    y = project_onto_omega(x, cfg).entries
    expected = x.copy()
    expected[1, 0, 0] = 0.0
    assert np.allclose(y, expected, atol=1e-9)
    A, b = polytope_rows(2, 2, 20, cfg.balance_bound)
    oracle = active_set_projection(x.ravel(), A, b, no_sharing_matrix(cfg).entries.ravel())
    assert np.allclose(y.ravel(), oracle, atol=1e-8)


def test_projection_rejects_nonfinite(cfg):
    x = no_sharing_matrix(cfg).entries.copy()
    x[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        project_onto_omega(x, cfg)


def test_step_without_arrivals_keeps_sharing(cfg):
    spec = ScenarioSpec(np.zeros((2, 2)))
    S = SharingMatrix(np.full(cfg.sharing_shape, 10.0))
    state = AbsState.initial(cfg, S)
    new, trace = abs_hyperperiod_step(state, hyperperiod_samples(spec, cfg, 0), cfg)
    assert np.allclose(new.sharing.entries, S.entries, atol=1e-9)
    assert np.all(trace.gradient == 0)
    assert new.hyperperiod_index == 2


def test_zero_step_keeps_sharing(cfg):
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9), seed=3)
    state = AbsState.initial(cfg)
    new, trace = abs_hyperperiod_step(state, hyperperiod_samples(spec, cfg, 0), cfg, step=0.0)
    assert np.array_equal(new.sharing.entries, state.sharing.entries)
    assert trace.queues.shape == (cfg.periods_per_hyperperiod, *cfg.client_shape)
    assert len(trace.allocations) == cfg.periods_per_hyperperiod


def test_run_abs_zero_horizon(cfg):
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9))
    trace, state = run_abs(cfg, spec, 0)
    assert trace.num_hyperperiods == 0
    assert np.array_equal(state.sharing.entries, no_sharing_matrix(cfg).entries)


def test_initial_sharing_must_be_member(cfg):
    bad = no_sharing_matrix(cfg).entries.copy()
    bad[0, 0, 1] = 5.0
    with pytest.raises(ValueError):
        AbsState.initial(cfg, SharingMatrix(bad))


def test_iterates_stay_in_polytope(cfg):
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9), seed=11)
    trace, state = run_abs(cfg.with_(step_size=0.1), spec, 40)
    for S in trace.sharing + [state.sharing.entries]:
        assert validate_sharing(SharingMatrix(S), cfg)


def test_heavy_cell_gains_slots(cfg):
    """The busier cell of a region has the larger dual, so it receives slots."""
    spec = ScenarioSpec(mirrored_rates(0.1, 0.9), seed=5)
    state = AbsState.initial(cfg)
    new, trace = abs_hyperperiod_step(state, hyperperiod_samples(spec, cfg, 0), cfg)
    raw = state.sharing.entries - cfg.step_size * trace.gradient
    # region 1: operator 2 is heavy
    assert raw.sum(axis=1)[0, 1] > raw.sum(axis=1)[0, 0]
    assert new.sharing.budgets()[1, 0] > cfg.slots_per_period
    assert new.sharing.budgets()[0, 0] < cfg.slots_per_period


def test_mirror_symmetric_iterates():
    cfg = SystemConfig()
    spec = ScenarioSpec(mirrored_rates(0.2, 0.7), seed=9, deterministic=True)
    trace, _ = run_abs(cfg, spec, 30)
    for S in trace.sharing:
        # swap operators and regions together: S[r, j, i] == S[1-r, 1-j, 1-i]
        assert np.allclose(S, S[::-1, ::-1, ::-1], atol=1e-9)
