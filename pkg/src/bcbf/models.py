"""Concrete systems, safe-set constructors and reference controllers.

* unicycle with a circular obstacle (state ``(px, py, v, phi)``, input ``(a, omega)``)
* double-integrator drone (state ``(p, p_dot)`` in R^6, input: accelerations)
* scalar integrator used for the jump-bound examples
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla

from . import dual
from .barrier import DEFAULT_ZETA, BarrierConstraint
from .belief_dynamics import ObservationModel, SystemModel, linear_observation
from .errors import ConfigurationError
from .gaussian_belief import GaussianBelief, RiskHalfSpace, var_value

log = logging.getLogger(__name__)

UNICYCLE_Q = np.diag([0.1**2, 0.1**2, 0.005**2, 0.005**2])
UNICYCLE_R = np.diag([0.2**2, 0.2**2, 0.1**2, 0.1**2])
UNICYCLE_RATE_HZ = 10.0
UNICYCLE_U_MAX = np.array([5.0, 4.0])
DRONE_Q = 0.05**2 * np.eye(6)
DRONE_U_MAX = 6.0


# ---------------------------------------------------------------------------
# unicycle
# ---------------------------------------------------------------------------

def unicycle_drift(x):
    v, phi = x[2], x[3]
    return dual.array([v * dual.cos(phi), v * dual.sin(phi), 0.0, 0.0])


_UNICYCLE_G = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
_UNICYCLE_G.setflags(write=False)


def unicycle_input_map(x):
    return _UNICYCLE_G


def unicycle_dynamics(x, u):
    return unicycle_drift(x) + dual.matmul(_UNICYCLE_G, u)


def unicycle_jacobian(x, u=None):
    v, phi = x[2], x[3]
    c, s = dual.cos(phi), dual.sin(phi)
    return dual.array(
        [
            [0.0, 0.0, c, -v * s],
            [0.0, 0.0, s, v * c],
            [0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ]
    )


def unicycle_model(Q=UNICYCLE_Q) -> SystemModel:
    return SystemModel(
        n=4,
        m=2,
        drift=unicycle_drift,
        input_map=unicycle_input_map,
        jacobian=unicycle_jacobian,
        Q=Q,
        constant_input_map=True,
        name="unicycle",
    )


def full_state_observation(n: int, R, rate_hz: float) -> ObservationModel:
    return linear_observation(np.eye(n), R, rate_hz, name="full")


# ---------------------------------------------------------------------------
# linear models: drone and scalar integrator
# ---------------------------------------------------------------------------

def linear_model(A, B, Q, name="linear") -> SystemModel:
    A = np.array(A, dtype=float)
    B = np.array(B, dtype=float)
    A.setflags(write=False)
    B.setflags(write=False)
    return SystemModel(
        n=A.shape[0],
        m=B.shape[1],
        drift=lambda x: dual.matmul(A, x),
        input_map=lambda x: B,
        jacobian=lambda x, u=None: A,
        Q=Q,
        constant_input_map=True,
        name=name,
    )


def drone_matrices():
    A = np.zeros((6, 6))
    A[:3, 3:] = np.eye(3)
    B = np.zeros((6, 3))
    B[3:, :] = np.eye(3)
    return A, B


def drone_model(Q=DRONE_Q) -> SystemModel:
    A, B = drone_matrices()
    return linear_model(A, B, Q, name="drone")


def drone_position_observation(R, rate_hz: float) -> ObservationModel:
    H = np.hstack([np.eye(3), np.zeros((3, 3))])
    return linear_observation(H, R, rate_hz, name="position")


def drone_velocity_observation(R, rate_hz: float) -> ObservationModel:
    H = np.hstack([np.zeros((3, 3)), np.eye(3)])
    return linear_observation(H, R, rate_hz, name="velocity")


def integrator_model(q: float = 0.0) -> SystemModel:
    """Scalar ``x' = u + w``."""
    return linear_model([[0.0]], [[1.0]], [[q]], name="integrator")


# ---------------------------------------------------------------------------
# safe sets
# ---------------------------------------------------------------------------

def obstacle_halfspace(b: GaussianBelief, center, radius: float, delta: float, pos_idx=(0, 1), prev_alpha=None):
    """Linearise ``||p - c|| >= r`` at the belief mean.

    Returns a half-space with ``alpha = (mu_p - c)/||mu_p - c||`` embedded in
    the position coordinates and ``beta = alpha^T c + r``.  If the mean sits on
    the center, ``prev_alpha`` is reused.
    """
    center = np.asarray(center, dtype=float)
    idx = list(pos_idx)
    d = b.mean[idx] - center
    dist = float(np.linalg.norm(d))
    alpha = np.zeros(b.n)
    if dist < 1e-9:
        if prev_alpha is None:
            raise ConfigurationError("belief mean is at the obstacle center and no previous direction is known")
        alpha[:] = prev_alpha
    else:
        alpha[idx] = d / dist
    beta = float(alpha[idx] @ center) + radius
    return RiskHalfSpace(alpha, beta, delta)


@dataclass
class CircularObstacle:
    """Circular obstacle re-linearised at the current mean every control step."""

    center: np.ndarray
    radius: float
    delta: float
    pos_idx: tuple = (0, 1)
    order: int = 2
    zeta: tuple = DEFAULT_ZETA
    epsilon: float = 0.5
    track_alpha: bool = False
    name: str = "obstacle"
    _prev_alpha: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)

    def halfspace(self, b: GaussianBelief) -> RiskHalfSpace:
        hs = obstacle_halfspace(b, self.center, self.radius, self.delta, self.pos_idx, self._prev_alpha)
        self._prev_alpha = hs.alpha.copy()
        return hs

    def _alpha_fn(self, n):
        idx = list(self.pos_idx)
        center = self.center
        radius = self.radius

        def fn(mean):
            d = mean[idx] - center
            dist = dual.sqrt(dual.dot(d, d))
            unit = d / dist
            parts = [0.0] * n
            for k, i in enumerate(idx):
                parts[i] = unit[k]
            alpha = dual.array(parts)
            return alpha, dual.dot(unit, center) + radius

        return fn

    def resolve(self, b: GaussianBelief) -> BarrierConstraint:
        hs = self.halfspace(b)
        return BarrierConstraint(
            hs,
            self.order,
            self.zeta,
            self.epsilon,
            self.name,
            self._alpha_fn(b.n) if self.track_alpha else None,
        )

    def violated(self, x) -> bool:
        return float(np.linalg.norm(np.asarray(x)[list(self.pos_idx)] - self.center)) < self.radius


def box_halfspaces(lo, hi, pos_idx, n: int, delta: float):
    """Faces of the axis-aligned box ``lo <= p <= hi`` as risk half-spaces."""
    out = []
    for k, i in enumerate(pos_idx):
        a = np.zeros(n)
        a[i] = 1.0
        out.append(RiskHalfSpace(a, lo[k], delta))
        out.append(RiskHalfSpace(-a, -hi[k], delta))
    return out


@dataclass
class HalfSpaceSet:
    """Fixed intersection of half-spaces ``alpha^T x >= beta``."""

    halfspaces: list
    order: int = 2
    zeta: tuple = DEFAULT_ZETA
    epsilon: float = 0.5
    name: str = "halfspace"

    def resolve(self, b: GaussianBelief):
        return [
            BarrierConstraint(hs, self.order, self.zeta, self.epsilon, f"{self.name}{i}")
            for i, hs in enumerate(self.halfspaces)
        ]

    def violated(self, x) -> bool:
        x = np.asarray(x)
        return any(float(hs.alpha @ x) < hs.beta for hs in self.halfspaces)


@dataclass
class PolytopeSequence:
    """A corridor given as an ordered union of convex polytopes.

    The barrier rows are the faces of the active polytope.  The active index
    advances once the belief satisfies every risk half-space of the next
    polytope, so the switch happens inside the overlap of the two.
    """

    polytopes: list  # each a list of RiskHalfSpace
    order: int = 2
    zeta: tuple = DEFAULT_ZETA
    epsilon: float = 0.5
    name: str = "poly"
    active: int = 0

    def _inside(self, b: GaussianBelief, k: int) -> bool:
        return all(var_value(b, hs) >= 0.0 for hs in self.polytopes[k])

    def resolve(self, b: GaussianBelief):
        while self.active + 1 < len(self.polytopes) and self._inside(b, self.active + 1):
            self.active += 1
        # names are per face slot so telemetry columns stay stable across switches
        return [
            BarrierConstraint(hs, self.order, self.zeta, self.epsilon, f"{self.name}.face{i}")
            for i, hs in enumerate(self.polytopes[self.active])
        ]

    def violated(self, x) -> bool:
        x = np.asarray(x)
        return not any(all(float(hs.alpha @ x) >= hs.beta for hs in poly) for poly in self.polytopes)


# ---------------------------------------------------------------------------
# reference controllers
# ---------------------------------------------------------------------------

def _is_stabilizing(A, B, K) -> bool:
    return bool(np.max(np.linalg.eigvals(A - B @ K).real) < 0.0)


def lqr_gain(A, B, Q, R, K0=None, tol: float = 1e-9, max_iter: int = 50):
    """Continuous-time LQR gain by Newton-Kleinman iteration.

    ``K0`` must be stabilising; without one the iteration starts from the
    Riccati solution of the Hamiltonian method.  Returns ``(K, P)``.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if K0 is None or not _is_stabilizing(A, B, K0):
        P = sla.solve_continuous_are(A, B, Q, R)
        K0 = np.linalg.solve(R, B.T @ P)
    K = np.asarray(K0, dtype=float)
    for _ in range(max_iter):
        Acl = A - B @ K
        P = sla.solve_continuous_lyapunov(Acl.T, -(Q + K.T @ R @ K))
        P = 0.5 * (P + P.T)
        K_next = np.linalg.solve(R, B.T @ P)
        if np.max(np.abs(K_next - K)) <= tol * max(1.0, np.max(np.abs(K))):
            return K_next, P
        K = K_next
    raise RuntimeError("Newton-Kleinman iteration did not converge")


def _wrap_angle(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


@dataclass
class LQRReference:
    """Goal-seeking LQR re-linearised at the belief mean every call.

    The heading entry of the error is wrapped to ``(-pi, pi]``.  For the
    unicycle the speed used in the linearisation is floored at ``v_min`` so
    that the heading stays controllable near standstill.
    """

    model: SystemModel
    goal: np.ndarray
    Q_L: np.ndarray
    R_L: np.ndarray
    angle_idx: tuple = ()
    speed_idx: int | None = None
    v_min: float = 0.1
    _K: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.goal = np.asarray(self.goal, dtype=float)
        self.Q_L = np.atleast_2d(np.asarray(self.Q_L, dtype=float))
        self.R_L = np.atleast_2d(np.asarray(self.R_L, dtype=float))

    def gain(self, mean) -> np.ndarray:
        x_lin = np.array(mean, dtype=float)
        if self.speed_idx is not None:
            x_lin[self.speed_idx] = max(x_lin[self.speed_idx], self.v_min)
        m = self.model.m
        A = np.asarray(self.model.jacobian(x_lin, np.zeros(m)), dtype=float)
        B = np.asarray(self.model.input_map(x_lin), dtype=float).reshape(self.model.n, m)
        try:
            K, _ = lqr_gain(A, B, self.Q_L, self.R_L, self._K)
        except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
            if self._K is None:
                raise
            log.warning("LQR update failed (%s); keeping previous gain", exc)
            K = self._K
        self._K = K
        return K

    def __call__(self, t: float, b: GaussianBelief) -> np.ndarray:
        err = b.mean - self.goal
        for i in self.angle_idx:
            err[i] = _wrap_angle(err[i])
        return -self.gain(b.mean) @ err


def lqr_reference(b: GaussianBelief, goal, Q_L, R_L, model: SystemModel, **kwargs) -> np.ndarray:
    """One-shot LQR command ``-K (mu - goal)`` (no warm start)."""
    return LQRReference(model, goal, Q_L, R_L, **kwargs)(0.0, b)


@dataclass
class AdversarialReference:
    """Scripted operator that keeps pushing toward points outside a box.

    Targets are the box corners pushed outward by ``overshoot``; their visiting
    order is a seeded permutation and each is held for ``dwell`` seconds.  The
    command has norm ``u_max`` and points from the mean position to the target.
    """

    lo: np.ndarray
    hi: np.ndarray
    u_max: float = 3.0
    dwell: float = 2.0
    overshoot: float = 0.5
    seed: int = 0
    pos_idx: tuple = (0, 1, 2)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        center = 0.5 * (self.lo + self.hi)
        half = 0.5 * (self.hi - self.lo)
        d = len(self.lo)
        corners = np.array([[(1 if (k >> j) & 1 else -1) for j in range(d)] for k in range(2**d)], dtype=float)
        targets = center + corners * (half + self.overshoot)
        rng = np.random.Generator(np.random.Philox(self.seed))
        self.targets = targets[rng.permutation(len(targets))]

    def target(self, t: float) -> np.ndarray:
        k = int(math.floor(t / self.dwell)) % len(self.targets)
        return self.targets[k]

    def __call__(self, t: float, b: GaussianBelief) -> np.ndarray:
        p = b.mean[list(self.pos_idx)]
        d = self.target(t) - p
        norm = float(np.linalg.norm(d))
        if norm < 1e-12:
            d = self.target(t) - 0.5 * (self.lo + self.hi)
            norm = float(np.linalg.norm(d))
        return self.u_max * d / norm


def adversarial_reference(t: float, b: GaussianBelief, lo, hi, u_max=3.0, seed=0, **kwargs) -> np.ndarray:
    return AdversarialReference(lo, hi, u_max=u_max, seed=seed, **kwargs)(t, b)


@dataclass
class WaypointReference:
    """PD tracking of a list of position waypoints for a double integrator."""

    waypoints: np.ndarray
    kp: float = 1.5
    kd: float = 2.0
    u_max: float = 2.0
    switch_radius: float = 0.3
    dim: int = 3
    _k: int = 0

    def __post_init__(self):
        self.waypoints = np.atleast_2d(np.asarray(self.waypoints, dtype=float))

    def __call__(self, t: float, b: GaussianBelief) -> np.ndarray:
        d = self.dim
        p, v = b.mean[:d], b.mean[d : 2 * d]
        w = self.waypoints[self._k]
        if self._k + 1 < len(self.waypoints) and np.linalg.norm(p - w) < self.switch_radius:
            self._k += 1
            w = self.waypoints[self._k]
        u = self.kp * (w - p) - self.kd * v
        norm = float(np.linalg.norm(u))
        if norm > self.u_max:
            u *= self.u_max / norm
        return u
