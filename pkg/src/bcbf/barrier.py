"""Belief control barrier functions and the QP safety filter.

A barrier row constrains the input so that the VaR half-space ``h(b) >= 0``
is forward invariant under the continuous belief flow:

* order 1:  dh/db (f_b + g_b u) >= -h
* order 2:  Lf^2 h + LgLf h u + zeta_1 h + zeta_2 Lf h >= 0

Measurement jumps are handled by shrinking the set by ``gamma`` so that a
single Kalman update leaves the unshrunk set with probability at most
``epsilon``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import dual
from .belief_dynamics import (
    ObservationModel,
    SystemModel,
    drift_vec,
    input_matrix_vec,
    kalman_gain,
)
from .errors import ConfigurationError
from .gaussian_belief import (
    EPS_SING,
    GaussianBelief,
    RiskHalfSpace,
    erfinv,
    split_vector,
    var_gradient_vec,
    var_value,
)
from .qp import QPProblem, QPResult, solve_qp

log = logging.getLogger(__name__)

LAMBDA_EPS = 1e-15
DEFAULT_ZETA = (4.0, 4.0)
DEFAULT_SLACK_WEIGHT = 1e6


@dataclass(frozen=True, eq=False)
class BarrierConstraint:
    """A VaR half-space used as a first- or second-order barrier.

    ``alpha_fn`` optionally maps the (possibly Dual) mean to ``(alpha, beta)``;
    when set the dependence of the half-space on the mean is differentiated
    instead of frozen.
    """

    hs: RiskHalfSpace
    order: int = 1
    zeta: tuple = DEFAULT_ZETA
    epsilon: float = 0.5
    name: str = ""
    alpha_fn: Callable | None = None

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ConfigurationError(f"barrier order must be 1 or 2, got {self.order}")
        z = tuple(float(v) for v in self.zeta)
        if len(z) != 2:
            raise ConfigurationError("zeta must have two entries")
        if self.order == 2:
            # s^2 + z2 s + z1 is Hurwitz iff both coefficients are positive
            if not (z[0] > 0 and z[1] > 0):
                raise ConfigurationError(f"zeta={z} does not give a Hurwitz characteristic polynomial")
        if not 0.0 < self.epsilon <= 0.5:
            raise ConfigurationError(f"epsilon must be in (0, 0.5], got {self.epsilon}")
        object.__setattr__(self, "zeta", z)

    def mean_only(self) -> "BarrierConstraint":
        """The same barrier on the mean state alone (no covariance, no jump margin)."""
        hs = RiskHalfSpace(self.hs.alpha, self.hs.beta, 0.5, 0.0)
        return BarrierConstraint(hs, self.order, self.zeta, 0.5, self.name, self.alpha_fn)


def zeta_from_poles(p1: float, p2: float) -> tuple:
    """Gains ``(zeta_1, zeta_2)`` placing the closed-loop barrier poles at ``p1, p2 < 0``."""
    if not (p1 < 0 and p2 < 0):
        raise ConfigurationError("poles must be strictly negative")
    return (p1 * p2, -(p1 + p2))


@dataclass
class LieTerms:
    h: float
    Lf_h: float
    Lg_h: np.ndarray
    Lf2_h: float | None = None
    LgLf_h: np.ndarray | None = None


# ---------------------------------------------------------------------------
# Lie derivatives
# ---------------------------------------------------------------------------

def _tracked_value(bvec, n, c: BarrierConstraint):
    mean, cov = split_vector(bvec, n)
    alpha, beta = c.alpha_fn(mean)
    s = dual.dot(alpha, dual.matmul(cov, alpha))
    return dual.dot(alpha, mean) - beta - c.hs.risk * dual.sqrt(2.0 * s) - c.hs.gamma


def _gradient(bvec, n, c: BarrierConstraint, eps_sing=EPS_SING):
    if c.alpha_fn is None:
        return var_gradient_vec(bvec, n, c.hs.alpha, c.hs.risk, eps_sing)
    nb = len(bvec)
    out = _tracked_value(dual.seed(bvec, np.eye(nb)), n, c)
    return out.der


def _phi(bvec, model: SystemModel, c: BarrierConstraint):
    """``dh/db . f_b`` on a (possibly Dual) belief vector."""
    return dual.dot(var_gradient_vec(bvec, model.n, c.hs.alpha, c.hs.risk), drift_vec(bvec, model))


def _second_order_dual(bvec, model, c, directions):
    out = _phi(dual.seed(bvec, directions), model, c)
    return np.asarray(out.der, dtype=float).reshape(-1)


def _second_order_fd(bvec, model, c, directions, rel_step=1e-6):
    def phi(x):
        return float(np.dot(_gradient(x, model.n, c), np.asarray(drift_vec(x, model), dtype=float)))

    out = np.empty(directions.shape[1])
    for j in range(directions.shape[1]):
        d = directions[:, j]
        scale = np.linalg.norm(d)
        if scale == 0.0:
            out[j] = 0.0
            continue
        step = rel_step * max(1.0, np.linalg.norm(bvec)) / scale
        out[j] = (phi(bvec + step * d) - phi(bvec - step * d)) / (2 * step)
    return out


def lie_derivatives(
    b: GaussianBelief,
    model: SystemModel,
    constraint: BarrierConstraint,
    gamma: float | None = None,
) -> LieTerms:
    """Barrier value and Lie derivatives along the belief flow.

    ``h`` includes the shrink margin (``gamma`` overrides ``constraint.hs.gamma``).
    Second-order terms come from forward-mode differentiation of
    ``dh/db . f_b`` along ``f_b`` and the columns of ``g_b``.
    """
    c = constraint
    if gamma is not None:
        c = BarrierConstraint(c.hs.with_gamma(gamma), c.order, c.zeta, c.epsilon, c.name, c.alpha_fn)
    n = model.n
    bvec = b.vec()
    if c.alpha_fn is None:
        h = var_value(b, c.hs)
    else:
        h = float(_tracked_value(bvec, n, c))
    grad = _gradient(bvec, n, c)
    fb = np.asarray(drift_vec(bvec, model), dtype=float)
    gb = input_matrix_vec(bvec, model)
    terms = LieTerms(h=h, Lf_h=float(grad @ fb), Lg_h=grad @ gb)
    if c.order == 2:
        directions = np.column_stack([fb, gb])
        if c.alpha_fn is None:
            try:
                d = _second_order_dual(bvec, model, c, directions)
            except (TypeError, ValueError):
                log.debug("model %s is not dual-compatible; using finite differences", model.name)
                d = _second_order_fd(bvec, model, c, directions)
        else:
            d = _second_order_fd(bvec, model, c, directions)
        terms.Lf2_h = float(d[0])
        terms.LgLf_h = d[1:]
    return terms


# ---------------------------------------------------------------------------
# measurement-jump bounds
# ---------------------------------------------------------------------------

def jump_statistics(b_minus: GaussianBelief, obs: ObservationModel, hs: RiskHalfSpace, gain=None):
    """Return ``(xi, s_lambda)``.

    ``xi`` is the deterministic increase of the barrier caused by the
    covariance contraction at a measurement and ``s_lambda = alpha^T Lambda alpha``
    the variance of its random mean shift.
    """
    K, H, S = gain if gain is not None else kalman_gain(b_minus, obs)
    a = hs.alpha
    s_minus = max(float(a @ b_minus.cov @ a), 0.0)
    cov_plus = (np.eye(b_minus.n) - K @ H) @ b_minus.cov
    s_plus = max(float(a @ cov_plus @ a), 0.0)
    xi = hs.risk * (math.sqrt(2.0 * s_minus) - math.sqrt(2.0 * s_plus))
    Ka = K.T @ a
    s_lambda = max(float(Ka @ S @ Ka), 0.0)
    return xi, s_lambda


def natural_bound(b_minus: GaussianBelief, obs: ObservationModel, hs: RiskHalfSpace, gain=None) -> float:
    """Upper bound on ``Pr[h(b+) < 0]`` for a belief on the barrier boundary."""
    xi, s_lambda = jump_statistics(b_minus, obs, hs, gain)
    if s_lambda <= LAMBDA_EPS:
        return 0.0
    return 0.5 * (1.0 - math.erf(xi / math.sqrt(2.0 * s_lambda)))


def gamma_margin(
    b_minus: GaussianBelief,
    obs: ObservationModel,
    hs: RiskHalfSpace,
    epsilon: float,
    gain=None,
) -> float:
    """Smallest shrink ``gamma >= 0`` keeping the leave probability below ``epsilon``."""
    if not 0.0 < epsilon <= 0.5:
        raise ConfigurationError(f"epsilon must be in (0, 0.5], got {epsilon}")
    xi, s_lambda = jump_statistics(b_minus, obs, hs, gain)
    return max(0.0, math.sqrt(2.0 * s_lambda) * erfinv(1.0 - 2.0 * epsilon) - xi)


# ---------------------------------------------------------------------------
# constraint rows and the filter
# ---------------------------------------------------------------------------

@dataclass
class BarrierRow:
    a: np.ndarray
    rhs: float
    h_tilde: float
    h_b: float
    gamma: float
    terms: LieTerms
    degenerate: bool = False
    name: str = ""


def assemble_constraint(
    b: GaussianBelief,
    model: SystemModel,
    obs: ObservationModel | None,
    constraint: BarrierConstraint,
    gamma: float | None = None,
    gain=None,
) -> BarrierRow:
    """QP row ``a @ u >= rhs`` for one barrier.

    Without an explicit ``gamma`` the jump margin is evaluated at ``b`` (as a
    proxy for the belief just before the next measurement); with no
    observation model there are no jumps and ``gamma = 0``.
    """
    if gamma is None:
        if obs is None or constraint.epsilon >= 0.5:
            gamma = 0.0
        else:
            gamma = gamma_margin(b, obs, constraint.hs, constraint.epsilon, gain)
    terms = lie_derivatives(b, model, constraint, gamma=gamma)
    h_tilde = terms.h
    if constraint.order == 1:
        a = np.asarray(terms.Lg_h, dtype=float)
        rhs = -h_tilde - terms.Lf_h
    else:
        z1, z2 = constraint.zeta
        a = np.asarray(terms.LgLf_h, dtype=float)
        rhs = -terms.Lf2_h - z1 * h_tilde - z2 * terms.Lf_h
    degenerate = bool(np.linalg.norm(a) < 1e-12 and rhs > 0.0)
    if degenerate:
        log.warning(
            "barrier %r: input coefficient vanishes while demanding %.3e (relative degree violated)",
            constraint.name,
            rhs,
        )
    return BarrierRow(a, float(rhs), h_tilde, h_tilde + gamma, gamma, terms, degenerate, constraint.name)


@dataclass
class FilterResult:
    u: np.ndarray
    qp: QPResult
    rows: list
    solve_time: float = 0.0

    @property
    def slack_used(self) -> bool:
        return self.qp.slack_used


def filter_control(
    b: GaussianBelief,
    model: SystemModel,
    obs: ObservationModel | None,
    constraints: Sequence[BarrierConstraint],
    u_ref,
    lower=None,
    upper=None,
    slack_weight: float | None = DEFAULT_SLACK_WEIGHT,
    gammas: Sequence[float] | None = None,
) -> FilterResult:
    """Minimally modify ``u_ref`` so that every barrier row holds."""
    t0 = time.perf_counter()
    gain = None
    if obs is not None and any(c.epsilon < 0.5 for c in constraints):
        gain = kalman_gain(b, obs)
    rows = []
    for i, c in enumerate(constraints):
        g = None if gammas is None else gammas[i]
        rows.append(assemble_constraint(b, model, obs, c, gamma=g, gain=gain))
    problem = QPProblem(
        u_ref,
        [(r.a, r.rhs) for r in rows],
        lower=lower,
        upper=upper,
        slack_weight=slack_weight,
    )
    res = solve_qp(problem)
    if res.slack_used:
        log.info("safety QP infeasible; slack %.3e used", res.slack)
    return FilterResult(res.u, res, rows, time.perf_counter() - t0)


@dataclass
class SafetyFilter:
    """Stateful filter: holds the running maximum of each jump margin between measurements.

    ``constraints`` may hold :class:`BarrierConstraint` objects or providers
    with a ``resolve(belief)`` method returning one (e.g. circular obstacles
    whose half-space is re-linearised every step).
    """

    model: SystemModel
    constraints: list
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    slack_weight: float | None = DEFAULT_SLACK_WEIGHT
    mean_only: bool = False
    _gamma_max: dict = field(default_factory=dict, repr=False)

    def notify_measurement(self):
        self._gamma_max.clear()

    def resolve(self, b: GaussianBelief) -> list:
        out = []
        for c in self.constraints:
            bc = c.resolve(b) if hasattr(c, "resolve") else c
            for item in bc if isinstance(bc, list) else [bc]:
                out.append(item.mean_only() if self.mean_only else item)
        return out

    def __call__(self, b: GaussianBelief, u_ref, obs: ObservationModel | None) -> FilterResult:
        t0 = time.perf_counter()
        resolved = self.resolve(b)
        gammas = []
        gain = None
        for i, c in enumerate(resolved):
            if obs is None or c.epsilon >= 0.5:
                gammas.append(0.0)
                continue
            if gain is None:
                gain = kalman_gain(b, obs)
            g = gamma_margin(b, obs, c.hs, c.epsilon, gain)
            key = c.name or i
            g = max(g, self._gamma_max.get(key, 0.0))
            self._gamma_max[key] = g
            gammas.append(g)
        res = filter_control(
            b, self.model, obs, resolved, u_ref, self.lower, self.upper, self.slack_weight, gammas
        )
        res.solve_time = time.perf_counter() - t0
        return res
