"""Experiment configuration (YAML) and the orchestration behind the CLI.

Config layout::

    system:      SystemConfig fields; ``quality`` is a nested mapping
    scenario:    arrival_rates, capacity, seed, horizon, deterministic,
                 regime_switches: [{at, arrival_rates?, capacity?}]
    policy:      abs | no_sharing | static | dynamic
    initial_sharing: optional (regions, owners, recipients) nested list
    output:      {out_dir, detail}
    compare:     {policies, rate_pairs, window}
    sweep:       {step_sizes, variable, variable_eta0, window}
    dynamic:     {weight}
    static:      {window}

Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields

import numpy as np
import yaml

from .baselines import DYNAMIC_WEIGHT, run_dynamic_proxy, run_no_sharing, solve_opt_ss_star
from .model import QualityModel, SharingMatrix, SystemConfig, quality, validate_sharing
from .scenario import (
    RegimeSwitch,
    ScenarioSpec,
    improvement_pct,
    mirrored_rates,
    window_samples,
)
from .sharing import run_abs, run_static

POLICIES = ("abs", "no_sharing", "static", "dynamic")
DEFAULT_RATE_PAIRS = ((0.1, 0.9), (0.2, 0.8), (0.3, 0.7), (0.4, 0.6), (0.5, 0.5))

_REQUIRED_SYSTEM = (
    "num_operators", "num_regions", "clients_per_cell", "slots_per_period",
    "periods_per_hyperperiod", "balance_bound", "q_min", "alpha", "step_size",
)
_INT_FIELDS = {"num_operators", "num_regions", "clients_per_cell", "slots_per_period",
               "periods_per_hyperperiod"}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass(frozen=True)
class CompareSettings:
    policies: tuple = ("no_sharing", "abs", "static", "dynamic")
    rate_pairs: tuple = DEFAULT_RATE_PAIRS
    window: tuple | None = None   # (start, stop) hyperperiods; default last 50


@dataclass(frozen=True)
class SweepSettings:
    step_sizes: tuple = (0.1, 0.01, 0.0001)
    variable: bool = True
    variable_eta0: float = 0.1
    window: tuple | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemConfig
    scenario: ScenarioSpec
    policy: str = "abs"
    initial_sharing: SharingMatrix | None = None
    out_dir: str = "out"
    detail: str = "hyperperiod"
    compare: CompareSettings = field(default_factory=CompareSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)
    dynamic_weight: float = DYNAMIC_WEIGHT
    static_window: tuple | None = None
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def config_hash(self):
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()

    def default_window(self, horizon):
        return (max(horizon - 50, 0), horizon)


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where}: expected a mapping")
    extra = sorted(set(section) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(map(str, extra))}")


def _num(value, name, kind=float):
    if isinstance(value, str):
        # YAML 1.1 reads exponents without a sign ("1.0e6") as strings
        try:
            value = float(value)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {value!r}") from None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if kind is int:
        if float(value) != int(value):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _window(value, name):
    if value is None:
        return None
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        raise ConfigError(f"{name}: expected [start, stop]")
    a, b = (_num(v, name, int) for v in value)
    if not 0 <= a < b:
        raise ConfigError(f"{name}: need 0 <= start < stop")
    return (a, b)


def _system(raw):
    allowed = [f.name for f in fields(SystemConfig)]
    _check_keys(raw, allowed, "system")
    for name in _REQUIRED_SYSTEM:
        if name not in raw:
            raise ConfigError(f"system.{name}: required field missing")
    kw = {}
    for name, value in raw.items():
        if name == "quality":
            qallowed = [f.name for f in fields(QualityModel)]
            _check_keys(value, qallowed, "system.quality")
            try:
                kw["quality"] = QualityModel(**{k: _num(v, f"system.quality.{k}") for k, v in value.items()})
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(f"system.quality.{_field_in(str(exc))}: {exc}") from None
        elif name == "step_schedule":
            kw[name] = str(value)
        else:
            kw[name] = _num(value, f"system.{name}", int if name in _INT_FIELDS else float)
    try:
        return SystemConfig(**kw)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"system.{_field_in(str(exc))}: {exc}") from None


def _field_in(msg):
    return msg.split()[0] if msg else "?"


def _scenario(raw, cfg):
    allowed = ["arrival_rates", "capacity", "seed", "horizon", "deterministic", "regime_switches"]
    _check_keys(raw, allowed, "scenario")
    if "arrival_rates" not in raw:
        raise ConfigError("scenario.arrival_rates: required field missing")
    rates = np.asarray(raw["arrival_rates"], dtype=float)
    if rates.shape != cfg.cell_shape:
        raise ConfigError(f"scenario.arrival_rates: expected shape {cfg.cell_shape}, got {rates.shape}")
    switches = []
    for k, sw in enumerate(raw.get("regime_switches", []) or []):
        _check_keys(sw, ["at", "arrival_rates", "capacity"], f"scenario.regime_switches[{k}]")
        if "at" not in sw:
            raise ConfigError(f"scenario.regime_switches[{k}].at: required field missing")
        r = sw.get("arrival_rates")
        if r is not None and np.shape(r) != cfg.cell_shape:
            raise ConfigError(f"scenario.regime_switches[{k}].arrival_rates: bad shape")
        c = sw.get("capacity")
        switches.append(RegimeSwitch(_num(sw["at"], f"scenario.regime_switches[{k}].at", int),
                                     None if r is None else np.asarray(r, dtype=float),
                                     None if c is None else np.asarray(c, dtype=float)))
    cap = raw.get("capacity", 10e6)
    try:
        return ScenarioSpec(
            arrival_rates=rates,
            capacity=np.asarray(cap, dtype=float) if isinstance(cap, list) else _num(cap, "scenario.capacity"),
            regime_switches=tuple(switches),
            seed=_num(raw.get("seed", 0), "scenario.seed", int),
            horizon=_num(raw.get("horizon", 200), "scenario.horizon", int),
            deterministic=bool(raw.get("deterministic", False)),
        )
    except ValueError as exc:
        raise ConfigError(f"scenario: {exc}") from None


def parse_config(raw):
    """Validate a config mapping and build an :class:`ExperimentConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be a mapping")
    _check_keys(raw, ["system", "scenario", "policy", "initial_sharing", "output", "compare",
                      "sweep", "dynamic", "static"], "config")
    for name in ("system", "scenario"):
        if name not in raw:
            raise ConfigError(f"{name}: required section missing")
    cfg = _system(raw["system"])
    spec = _scenario(raw["scenario"], cfg)
    if spec.horizon < 0:
        raise ConfigError("scenario.horizon: must be >= 0")
    policy = raw.get("policy", "abs")
    if policy not in POLICIES:
        raise ConfigError(f"policy: must be one of {', '.join(POLICIES)}")
    init = None
    if raw.get("initial_sharing") is not None:
        e = np.asarray(raw["initial_sharing"], dtype=float)
        if e.shape != cfg.sharing_shape:
            raise ConfigError(f"initial_sharing: expected shape {cfg.sharing_shape}")
        init = SharingMatrix(e)
        verdict = validate_sharing(init, cfg)
        if not verdict:
            raise ConfigError("initial_sharing: outside the sharing polytope: "
                              + "; ".join(map(str, verdict.violations)))
    out = raw.get("output", {}) or {}
    _check_keys(out, ["out_dir", "detail"], "output")
    detail = out.get("detail", "hyperperiod")
    if detail not in ("hyperperiod", "period"):
        raise ConfigError("output.detail: must be 'hyperperiod' or 'period'")

    comp = raw.get("compare", {}) or {}
    _check_keys(comp, ["policies", "rate_pairs", "window"], "compare")
    policies = tuple(comp.get("policies", CompareSettings.policies))
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"compare.policies: unknown policy {p!r}")
    pairs = tuple(tuple(float(x) for x in p) for p in comp.get("rate_pairs", DEFAULT_RATE_PAIRS))
    if any(len(p) != 2 or not all(0 <= x <= 1 for x in p) for p in pairs):
        raise ConfigError("compare.rate_pairs: expected [low, high] pairs in [0, 1]")
    compare = CompareSettings(policies, pairs, _window(comp.get("window"), "compare.window"))

    sw = raw.get("sweep", {}) or {}
    _check_keys(sw, ["step_sizes", "variable", "variable_eta0", "window"], "sweep")
    steps = tuple(_num(x, "sweep.step_sizes") for x in sw.get("step_sizes", SweepSettings.step_sizes))
    if any(x < 0 for x in steps):
        raise ConfigError("sweep.step_sizes: must be >= 0")
    eta0 = _num(sw.get("variable_eta0", SweepSettings.variable_eta0), "sweep.variable_eta0")
    if eta0 <= 0:
        raise ConfigError("sweep.variable_eta0: must be > 0")
    sweep = SweepSettings(steps, bool(sw.get("variable", True)), eta0,
                          _window(sw.get("window"), "sweep.window"))

    dyn = raw.get("dynamic", {}) or {}
    _check_keys(dyn, ["weight"], "dynamic")
    weight = _num(dyn.get("weight", DYNAMIC_WEIGHT), "dynamic.weight")
    if weight < 0:
        raise ConfigError("dynamic.weight: must be >= 0")
    st = raw.get("static", {}) or {}
    _check_keys(st, ["window"], "static")

    return ExperimentConfig(cfg, spec, policy, init, str(out.get("out_dir", "out")), detail,
                            compare, sweep, weight, _window(st.get("window"), "static.window"), raw)


def load_config(path):
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: malformed YAML: {exc}") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# orchestration


@dataclass
class PolicyRun:
    trace: object
    opt_objective: float | None = None
    opt_sharing: SharingMatrix | None = None


def run_policy(exp, policy=None, scenario=None, horizon=None, system=None):
    """Run one policy for ``horizon`` hyperperiods and return a :class:`PolicyRun`."""
    policy = policy or exp.policy
    spec = scenario or exp.scenario
    cfg = system or exp.system
    horizon = spec.horizon if horizon is None else horizon
    if policy == "abs":
        trace, _ = run_abs(cfg, spec, horizon, initial_sharing=exp.initial_sharing, detail=exp.detail)
        return PolicyRun(trace)
    if policy == "no_sharing":
        return PolicyRun(run_no_sharing(cfg, spec, horizon, detail=exp.detail))
    if policy == "dynamic":
        return PolicyRun(run_dynamic_proxy(cfg, spec, horizon, weight=exp.dynamic_weight, detail=exp.detail))
    # offline optimal static sharing, solved on the recorded window, then replayed
    start, stop = exp.static_window or exp.default_window(horizon)
    opt = solve_opt_ss_star(cfg, window_samples(spec, cfg, start, min(stop, horizon)))
    trace, _ = run_static(cfg, spec, opt.sharing, horizon, detail=exp.detail)
    return PolicyRun(trace, opt.objective, opt.sharing)


@dataclass(frozen=True)
class CompareRow:
    rate_low: float
    rate_high: float
    policy: str
    qoe: float
    improvement: float
    relative: bool


def long_run_qoe(run, start, stop):
    """Window QoE of a run; for the static policy this is its offline objective."""
    if run.opt_objective is not None:
        return run.opt_objective
    return run.trace.window_qoe(start, stop)


def compare_policies(exp, policies=None, rate_pairs=None):
    policies = tuple(policies or exp.compare.policies)
    if len(policies) < 2:
        raise ConfigError("compare.policies: at least two policies are required")
    pairs = rate_pairs or exp.compare.rate_pairs
    horizon = exp.scenario.horizon
    start, stop = exp.compare.window or exp.default_window(horizon)
    rows = []
    for low, high in pairs:
        spec = ScenarioSpec(mirrored_rates(low, high), exp.scenario.capacity, exp.scenario.regime_switches,
                            exp.scenario.seed, horizon, exp.scenario.deterministic)
        base = run_policy(exp, "no_sharing", spec, horizon)
        base_q = base.trace.window_qoe(start, stop)
        for policy in policies:
            run = base if policy == "no_sharing" else run_policy(exp, policy, spec, horizon)
            q = long_run_qoe(run, start, stop)
            imp = improvement_pct(q, base_q)
            rows.append(CompareRow(low, high, policy, q, imp.value, imp.relative))
    return rows


@dataclass(frozen=True)
class SweepRow:
    label: str
    hyperperiod: int
    total_qoe: float
    smoothed_qoe: float


@dataclass(frozen=True)
class SweepSummary:
    label: str
    step_size: float
    schedule: str
    opt_objective: float
    final_qoe: float
    final_gap: float          # |OPT - final window QoE|
    signed_gap: float         # OPT - final window QoE
    iters_to_5pct: int        # first hyperperiod (1-based) within 5%, -1 if never
    reached_2pct: bool


SMOOTHING = 10


def trailing_mean(values, width=SMOOTHING):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return v
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(idx - width, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def first_within(smoothed, target, rel):
    hit = np.flatnonzero(np.abs(smoothed - target) <= rel * abs(target))
    return int(hit[0]) + 1 if hit.size else -1


def sweep_step_sizes(exp, step_sizes=None, variable=None):
    """ABS trajectories for several step sizes against the OPT-SS* objective.

    The OPT-SS* reference is solved on the final window of the horizon. A
    trajectory's progress is judged on the trailing mean of the last
    ``SMOOTHING`` hyperperiod QoEs.
    """
    cfg = exp.system
    spec = exp.scenario
    horizon = spec.horizon
    start, stop = exp.sweep.window or exp.default_window(horizon)
    opt = solve_opt_ss_star(cfg, window_samples(spec, cfg, start, stop)).objective
    steps = exp.sweep.step_sizes if step_sizes is None else step_sizes
    variable = exp.sweep.variable if variable is None else variable
    plans = [(f"eta={s:g}", cfg.with_(step_size=s, step_schedule="constant")) for s in steps]
    if variable:
        eta0 = exp.sweep.variable_eta0
        plans.append((f"variable(eta0={eta0:g})", cfg.with_(step_size=eta0, step_schedule="inv_sqrt")))
    rows, summaries = [], []
    for label, c in plans:
        trace, _ = run_abs(c, spec, horizon, initial_sharing=exp.initial_sharing)
        sm = trailing_mean(trace.hyperperiod_qoe)
        rows += [SweepRow(label, t + 1, q, s) for t, (q, s) in enumerate(zip(trace.hyperperiod_qoe, sm))]
        final = trace.window_qoe(start, stop)
        summaries.append(SweepSummary(label, c.step_size, c.step_schedule, opt, final,
                                      abs(opt - final), opt - final, first_within(sm, opt, 0.05),
                                      first_within(sm, opt, 0.02) > 0))
    return rows, summaries


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    messages: tuple
    max_queue: tuple = ()


SMOKE_HYPERPERIODS = 5


def validate_experiment(exp):
    """Smoke test: run a few ABS hyperperiods and look for runaway queues.

    Queues are flagged as growing when the best quality any client could
    reach (all pooled slots of its region at its capacity) stays below
    ``q_min + alpha`` -- the hinge can then never clear -- or when the
    per-period queue growth does not slow down over the smoke run.
    """
    cfg, spec = exp.system, exp.scenario
    msgs = []
    trace, _ = run_abs(cfg, spec, SMOKE_HYPERPERIODS, initial_sharing=exp.initial_sharing)
    mq = tuple(trace.max_queue)
    pooled = cfg.num_operators * cfg.slots_per_period
    caps = []
    for t in range(SMOKE_HYPERPERIODS):
        _, cap = spec.regime(t)
        caps.append(np.max(cap))
    ceiling = float(quality(pooled, min(caps), cfg.quality, cfg.slots_per_period))
    ok = True
    if ceiling < cfg.q_min + cfg.alpha:
        ok = False
        msgs.append(f"growing queues: quality ceiling {ceiling:.4g} < q_min + alpha "
                    f"{cfg.q_min + cfg.alpha:.4g}; the percentile constraint is infeasible")
    growth = np.diff((0.0,) + mq)
    if ok and len(growth) >= 2 and growth[0] > 0 and growth[-1] >= growth[0]:
        ok = False
        msgs.append("growing queues: per-hyperperiod queue growth is not slowing down")
    msgs.append("max queue per hyperperiod: " + ", ".join(f"{x:.4g}" for x in mq))
    return ValidationReport(ok, tuple(msgs), mq)
