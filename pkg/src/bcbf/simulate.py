"""EKF-in-the-loop simulation, Monte Carlo studies and jump-bound reports.

Ground truth follows the SDE ``dx = (f(x) + g(x) u) dt + dW`` integrated by
Euler-Maruyama on ``truth_substeps`` substeps per control period, with the
control held constant over the period.  Measurements are drawn from the
truth at the scheduled control-step boundaries and fed to the EKF.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .barrier import SafetyFilter, gamma_margin, natural_bound
from .belief_dynamics import MeasurementClock, hybrid_step, integrate_flow, kalman_gain, kalman_update
from .errors import InfeasibleQPError
from .gaussian_belief import GaussianBelief, _tri_indices, var_value
from .scenario import Scenario, load_scenario

log = logging.getLogger(__name__)

CONTROLLERS = ("bcbf", "state_cbf", "lqr_only")


def _sqrtm_psd(S):
    w, v = np.linalg.eigh(np.asarray(S, dtype=float))
    return v * np.sqrt(np.maximum(w, 0.0))


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based per-run stream."""
    return np.random.Generator(np.random.Philox(int(seed)))


@dataclass
class SimRecord:
    """One simulated run sampled at every control step (``n_steps + 1`` rows).

    Row ``k`` holds the state and belief at ``t_k`` (after any measurement at
    ``t_k``) and the control applied on ``[t_k, t_{k+1})``; the last row has
    no control.  ``violation_substep[k]`` flags a ground-truth violation
    anywhere inside that interval.
    """

    scenario: str
    controller: str
    seed: int
    t: np.ndarray
    x_true: np.ndarray
    belief: np.ndarray
    u_ref: np.ndarray
    u: np.ndarray
    h_b: np.ndarray
    h_tilde: np.ndarray
    gamma: np.ndarray
    slack: np.ndarray
    meas: np.ndarray
    z: np.ndarray
    violation: np.ndarray
    violation_substep: np.ndarray
    constraint_names: list
    status: str = "ok"
    message: str = ""
    solve_time: np.ndarray = field(default=None, repr=False)

    DATA_FIELDS = (
        "t", "x_true", "belief", "u_ref", "u", "h_b", "h_tilde",
        "gamma", "slack", "meas", "z", "violation", "violation_substep",
    )

    @property
    def n(self) -> int:
        return self.x_true.shape[1]

    @property
    def collided(self) -> bool:
        return bool(self.violation_substep.any() or self.violation.any())

    def same_data(self, other: "SimRecord") -> bool:
        """Bitwise equality of every field except wall-clock solve times."""
        for name in self.DATA_FIELDS:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return self.constraint_names == other.constraint_names and self.status == other.status

    def csv_header(self) -> list:
        n = self.n
        m = self.u.shape[1]
        iu = _tri_indices(n)[0]
        cols = ["t"]
        cols += [f"x{i}" for i in range(n)]
        cols += [f"mu{i}" for i in range(n)]
        cols += [f"sigma{i}{j}" for i, j in zip(*iu)]
        cols += [f"u_ref{j}" for j in range(m)]
        cols += [f"u{j}" for j in range(m)]
        cols += [f"htilde_{c}" for c in self.constraint_names]
        cols += [f"hb_{c}" for c in self.constraint_names]
        cols += ["meas", "violation"]
        return cols

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.csv_header())
            for k in range(len(self.t)):
                row = [self.t[k], *self.x_true[k], *self.belief[k], *self.u_ref[k], *self.u[k]]
                row += [*self.h_tilde[k], *self.h_b[k], int(self.meas[k]), int(self.violation[k])]
                w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
        return path


def _safe_set_violated(safe_set, x) -> bool:
    return any(p.violated(x) for p in safe_set)


def _resolve_all(safe_set, b):
    out = []
    for p in safe_set:
        r = p.resolve(b)
        out.extend(r if isinstance(r, list) else [r])
    return out


def simulate(scenario: Scenario, controller: str = "bcbf", seed: int | None = None) -> SimRecord:
    """Run one closed-loop simulation; deterministic given ``seed``."""
    if controller not in CONTROLLERS:
        raise ValueError(f"controller must be one of {CONTROLLERS}, got {controller!r}")
    seed = scenario.seed if seed is None else int(seed)
    log.debug("simulating %s with %s, seed=%d, %d steps", scenario.name, controller, seed, scenario.n_steps)
    rng = make_rng(seed)
    model = scenario.model
    n, m = model.n, model.m
    N = scenario.n_steps
    dt = scenario.dt
    S = scenario.truth_substeps
    h = dt / S
    sqrt_q = _sqrtm_psd(scenario.truth_Q) * math.sqrt(h)

    safe_set = scenario.build_safe_set()
    reference = scenario.build_reference()
    filt = SafetyFilter(
        model,
        safe_set,
        scenario.lower,
        scenario.upper,
        scenario.slack_weight,
        mean_only=(controller == "state_cbf"),
    )

    x = scenario.initial_state.mean + _sqrtm_psd(scenario.initial_state.cov) @ rng.standard_normal(n)
    b = scenario.initial_belief
    clock = MeasurementClock()
    z_dim = max(s.obs.dim for s in scenario.sensing)

    t_arr = dt * np.arange(N + 1)
    xs = np.full((N + 1, n), np.nan)
    bs = np.full((N + 1, b.n_b), np.nan)
    u_refs = np.full((N + 1, m), np.nan)
    us = np.full((N + 1, m), np.nan)
    slack = np.zeros(N + 1)
    meas = np.zeros(N + 1, dtype=bool)
    zs = np.full((N + 1, z_dim), np.nan)
    viol = np.zeros(N + 1, dtype=bool)
    viol_sub = np.zeros(N + 1, dtype=bool)
    solve_time = np.full(N + 1, np.nan)
    hb_rows, ht_rows, g_rows = [], [], []
    names = None
    status, message = "ok", ""

    def sensor(xt, bt):
        return scenario.sensor_at(xt if scenario.sensing_key == "truth" else bt.mean)

    last = N
    for k in range(N + 1):
        t = t_arr[k]
        xs[k] = x
        bs[k] = b.vec()
        viol[k] = _safe_set_violated(safe_set, x)
        originals = _resolve_all(safe_set, b)
        if names is None:
            names = [c.name for c in originals]
        hb_rows.append([var_value(b, c.hs) for c in originals])
        if k == N:
            ht_rows.append(hb_rows[-1])
            g_rows.append([0.0] * len(originals))
            break
        u_ref = np.asarray(reference(t, b), dtype=float)
        u_refs[k] = u_ref
        obs = sensor(x, b).obs
        if controller == "lqr_only":
            u = u_ref
            if scenario.lower is not None:
                u = np.maximum(u, scenario.lower)
            if scenario.upper is not None:
                u = np.minimum(u, scenario.upper)
            ht_rows.append(hb_rows[-1])
            g_rows.append([0.0] * len(originals))
        else:
            try:
                res = filt(b, u_ref, obs)
            except InfeasibleQPError as exc:
                status, message = "infeasible", str(exc)
                ht_rows.append(hb_rows[-1])
                g_rows.append([0.0] * len(originals))
                last = k
                log.warning("run seed=%d terminated at t=%.3f: %s", seed, t, exc)
                break
            u = res.u
            solve_time[k] = res.solve_time
            slack[k] = res.qp.slack
            if controller == "bcbf":
                ht_rows.append([r.h_tilde for r in res.rows])
                g_rows.append([r.gamma for r in res.rows])
            else:
                # mean-only rows carry no risk term; report h_b of the underlying risk constraint
                ht_rows.append(hb_rows[-1])
                g_rows.append([0.0] * len(originals))
        us[k] = u

        # ground truth, zero-order hold on u
        for _ in range(S):
            x = x + h * np.asarray(model.dynamics(x, u), dtype=float) + sqrt_q @ rng.standard_normal(n)
            if _safe_set_violated(safe_set, x):
                viol_sub[k] = True

        b = GaussianBelief.from_vec(integrate_flow(b.vec(), model, u, dt, scenario.integrator), n, repair=True)
        t_next = t_arr[k + 1]
        obs = sensor(x, b).obs
        if clock.due(t_next, obs.rate_hz):
            z = np.asarray(obs.ell(x), dtype=float) + _sqrtm_psd(obs.R) @ rng.standard_normal(obs.dim)
            b = kalman_update(b, obs, z)
            clock.fire(t_next)
            filt.notify_measurement()
            meas[k + 1] = True
            zs[k + 1, : obs.dim] = z

    rows = last + 1
    width = max(len(r) for r in hb_rows)

    def pad(r):
        a = np.full((len(r), width), np.nan)
        for i, row in enumerate(r):
            a[i, : len(row)] = row
        return a

    return SimRecord(
        scenario=scenario.name,
        controller=controller,
        seed=seed,
        t=t_arr[:rows],
        x_true=xs[:rows],
        belief=bs[:rows],
        u_ref=u_refs[:rows],
        u=us[:rows],
        h_b=pad(hb_rows)[:rows],
        h_tilde=pad(ht_rows)[:rows],
        gamma=pad(g_rows)[:rows],
        slack=slack[:rows],
        meas=meas[:rows],
        z=zs[:rows],
        violation=viol[:rows],
        violation_substep=viol_sub[:rows],
        constraint_names=names,
        status=status,
        message=message,
        solve_time=solve_time[:rows],
    )


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _mean_std(values):
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return None, None
    return float(v.mean()), float(v.std())


@dataclass
class MetricsReport:
    scenario: str
    controller: str
    runs: int
    base_seed: int
    collisions: int
    belief_violation_fraction: float
    belief_violation_steps: int
    chance_violation_fraction: float
    total_steps: int
    u_norm_mean: float
    u_norm_std: float
    t_goal_mean: float | None
    t_goal_std: float | None
    goal_reached: int
    goal_missed: int
    slack_events: int
    infeasible_runs: int
    solve_time_mean: float | None = None
    solve_time_std: float | None = None

    TIMING_FIELDS = ("solve_time_mean", "solve_time_std")

    def to_dict(self, include_timing: bool = True) -> dict:
        d = asdict(self)
        if not include_timing:
            for k in self.TIMING_FIELDS:
                d.pop(k)
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)


def time_to_goal(rec: SimRecord, goal: dict | None):
    if not goal:
        return None
    idx = list(goal["pos_idx"])
    tol = goal.get("tolerance", 0.3)
    mu = rec.belief[:, idx]
    dist = np.linalg.norm(mu - np.asarray(goal["position"]), axis=1)
    hit = np.nonzero(dist <= tol)[0]
    return float(rec.t[hit[0]]) if hit.size else None


def summarize(records, scenario: Scenario, controller: str, base_seed: int) -> MetricsReport:
    steps = 0
    bviol = 0
    cviol = 0
    u_norms = []
    times = []
    t_goals = []
    missed = 0
    slack_events = 0
    infeasible = 0
    collisions = 0
    for rec in records:
        hb = rec.h_b
        steps += len(rec.t)
        bviol += int(np.sum(np.any(hb < 0.0, axis=1)))
        cviol += int(np.sum(rec.violation))
        collisions += int(rec.collided)
        ok = ~np.isnan(rec.u[:, 0])
        u_norms.append(np.linalg.norm(rec.u[ok], axis=1))
        st = rec.solve_time[~np.isnan(rec.solve_time)]
        times.append(st)
        slack_events += int(np.sum(rec.slack > 0.0))
        infeasible += int(rec.status != "ok")
        tg = time_to_goal(rec, scenario.goal)
        if tg is None:
            missed += 1
        else:
            t_goals.append(tg)
    u_mean, u_std = _mean_std(np.concatenate(u_norms) if u_norms else [])
    t_mean, t_std = _mean_std(np.concatenate(times) if times else [])
    g_mean, g_std = _mean_std(t_goals)
    return MetricsReport(
        scenario=scenario.name,
        controller=controller,
        runs=len(records),
        base_seed=base_seed,
        collisions=collisions,
        belief_violation_fraction=bviol / steps if steps else 0.0,
        belief_violation_steps=bviol,
        chance_violation_fraction=cviol / steps if steps else 0.0,
        total_steps=steps,
        u_norm_mean=u_mean,
        u_norm_std=u_std,
        t_goal_mean=g_mean,
        t_goal_std=g_std,
        goal_reached=len(t_goals),
        goal_missed=missed if scenario.goal else 0,
        slack_events=slack_events,
        infeasible_runs=infeasible,
        solve_time_mean=t_mean,
        solve_time_std=t_std,
    )


def _run_one(args):
    config, controller, seed = args
    return simulate(Scenario(config), controller, seed)


def monte_carlo(
    scenario: Scenario,
    controller: str = "bcbf",
    runs: int = 100,
    workers: int = 1,
    base_seed: int | None = None,
):
    """Run ``runs`` seeded simulations (``seed_i = base_seed + i``).

    Returns ``(report, records)``.  Results do not depend on ``workers``.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    base_seed = scenario.seed if base_seed is None else int(base_seed)
    seeds = [base_seed + i for i in range(runs)]
    if workers <= 1:
        records = [simulate(scenario, controller, s) for s in seeds]
    else:
        jobs = [(scenario.config, controller, s) for s in seeds]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            records = list(ex.map(_run_one, jobs, chunksize=max(1, runs // (4 * workers))))
    return summarize(records, scenario, controller, base_seed), records


# ---------------------------------------------------------------------------
# jump-bound report
# ---------------------------------------------------------------------------

@dataclass
class BoundRow:
    t: float
    constraint: str
    h_b: float
    natural_bound: float
    gamma: float
    sensor: str


def bound_report(scenario: Scenario, steps: int | None = None, controller: str = "bcbf") -> list:
    """Natural bound and jump margin per constraint along a nominal run.

    The nominal run propagates the belief without process noise and applies
    every scheduled measurement with zero innovation, so only the covariance
    reacts to sensing.  Each row evaluates the bounds treating the current
    belief as the prior of an immediate measurement.
    """
    model = scenario.model
    n = model.n
    safe_set = scenario.build_safe_set()
    reference = scenario.build_reference()
    filt = SafetyFilter(model, safe_set, scenario.lower, scenario.upper, scenario.slack_weight)
    b = scenario.initial_belief
    clock = MeasurementClock()
    N = scenario.n_steps if steps is None else min(steps, scenario.n_steps)
    log.debug("bound report for %s over %d steps", scenario.name, N)
    out = []
    for k in range(N + 1):
        t = k * scenario.dt
        sensing = scenario.sensor_at(b.mean)
        obs = sensing.obs
        gain = kalman_gain(b, obs)
        for c in _resolve_all(safe_set, b):
            out.append(
                BoundRow(
                    t=t,
                    constraint=c.name,
                    h_b=var_value(b, c.hs),
                    natural_bound=natural_bound(b, obs, c.hs, gain),
                    gamma=gamma_margin(b, obs, c.hs, c.epsilon, gain),
                    sensor=sensing.name,
                )
            )
        if k == N:
            break
        u_ref = np.asarray(reference(t, b), dtype=float)
        u = u_ref if controller == "lqr_only" else filt(b, u_ref, obs).u
        b = hybrid_step(b, model, None, u, scenario.dt, method=scenario.integrator)
        obs = scenario.sensor_at(b.mean).obs
        if clock.due(t + scenario.dt, obs.rate_hz):
            b = kalman_update(b, obs, np.asarray(obs.ell(b.mean), dtype=float))
            clock.fire(t + scenario.dt)
            filt.notify_measurement()
    return out


def format_bound_table(rows) -> str:
    lines = ["t\tconstraint\tsensor\th_b\tnatural_bound\tgamma"]
    for r in rows:
        lines.append(f"{r.t:.4f}\t{r.constraint}\t{r.sensor}\t{r.h_b:.6f}\t{r.natural_bound:.6f}\t{r.gamma:.6f}")
    return "\n".join(lines)


def write_outputs(records, report: MetricsReport | None, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in records:
        rec.write_csv(out / f"{rec.scenario}_{rec.controller}_seed{rec.seed}.csv")
    if report is not None:
        (out / "metrics.json").write_text(report.to_json() + "\n")
    return out


__all__ = [
    "CONTROLLERS",
    "SimRecord",
    "MetricsReport",
    "BoundRow",
    "simulate",
    "monte_carlo",
    "bound_report",
    "summarize",
    "format_bound_table",
    "write_outputs",
    "load_scenario",
    "time_to_goal",
]
