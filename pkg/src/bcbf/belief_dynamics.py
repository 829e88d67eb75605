"""Hybrid belief dynamics of a continuous-discrete extended Kalman filter.

Between measurements the belief follows the EKF moment equations

    mu'    = f(mu) + g(mu) u
    Sigma' = A Sigma + Sigma A^T + Q,     A = d(f(x) + g(x) u)/dx at mu

which are control affine in ``u`` when written over the belief vector.  At a
measurement the belief jumps through the Kalman update.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dual
from .errors import DimensionError, SingularInnovationError
from .gaussian_belief import GaussianBelief, belief_dim, join_vector, split_vector

COND_MAX = 1e12


@dataclass(frozen=True, eq=False)
class SystemModel:
    """Control-affine motion model ``x' = f(x) + g(x) u + w``, ``w ~ N(0, Q)``.

    ``drift``, ``input_map`` and ``jacobian`` must be written with the
    helpers in :mod:`bcbf.dual` if second-order barriers are used on the model.
    ``jacobian(x, u)`` is the Jacobian of ``f(x) + g(x) u`` w.r.t. ``x``.
    """

    n: int
    m: int
    drift: Callable
    input_map: Callable
    jacobian: Callable
    Q: np.ndarray
    constant_input_map: bool = False
    name: str = "model"

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        if Q.shape != (self.n, self.n):
            raise DimensionError(f"Q must be {self.n}x{self.n}, got {Q.shape}")
        if not np.allclose(Q, Q.T, atol=1e-12) or np.linalg.eigvalsh(Q)[0] < -1e-12:
            raise ValueError("motion noise Q must be symmetric PSD")
        Q.setflags(write=False)
        object.__setattr__(self, "Q", Q)

    def dynamics(self, x, u):
        return self.drift(x) + dual.matmul(self.input_map(x), u)


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Discrete measurements ``z_k = ell(x_k) + v_k``, ``v_k ~ N(0, R)``."""

    ell: Callable
    jacobian: Callable
    R: np.ndarray
    rate_hz: float
    name: str = "obs"

    def __post_init__(self):
        R = np.atleast_2d(np.array(self.R, dtype=float))
        if R.shape[0] != R.shape[1]:
            raise DimensionError(f"R must be square, got {R.shape}")
        if not np.allclose(R, R.T, atol=1e-12) or np.linalg.eigvalsh(R)[0] <= 0.0:
            raise ValueError("measurement noise R must be symmetric positive definite")
        if self.rate_hz <= 0:
            raise ValueError("sensor rate must be positive")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @property
    def dim(self) -> int:
        return self.R.shape[0]


def linear_observation(H, R, rate_hz: float, name: str = "linear") -> ObservationModel:
    H = np.atleast_2d(np.array(H, dtype=float))
    H.setflags(write=False)
    return ObservationModel(
        ell=lambda x: dual.matmul(H, x),
        jacobian=lambda x: H,
        R=R,
        rate_hz=rate_hz,
        name=name,
    )


def _check_input(model: SystemModel, u):
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.shape[0] != model.m:
        raise DimensionError(f"input has length {u.shape[0]}, model expects m={model.m}")
    return u


def drift_vec(bvec, model: SystemModel):
    """Belief drift ``f_b`` on a raw (possibly Dual) belief vector."""
    n = model.n
    mean, cov = split_vector(bvec, n)
    A0 = model.jacobian(mean, np.zeros(model.m))
    AS = dual.matmul(A0, cov)
    dcov = AS + AS.T + model.Q
    return join_vector(model.drift(mean), dcov)


def input_matrix_vec(bvec, model: SystemModel) -> np.ndarray:
    """Belief input matrix ``g_b`` (``n_b x m``) at a plain belief vector."""
    n, m = model.n, model.m
    bvec = np.asarray(bvec, dtype=float)
    mean, cov = split_vector(bvec, n)
    G = np.asarray(model.input_map(mean), dtype=float).reshape(n, m)
    gb = np.zeros((belief_dim(n), m))
    gb[:n] = G
    if not model.constant_input_map:
        A0 = np.asarray(model.jacobian(mean, np.zeros(m)), dtype=float)
        for j in range(m):
            Aj = np.asarray(model.jacobian(mean, np.eye(m)[j]), dtype=float) - A0
            AS = Aj @ cov
            gb[n:, j] = join_vector(np.zeros(n), AS + AS.T)[n:]
    return gb


def belief_affine_parts(b: GaussianBelief, model: SystemModel):
    """Split the belief flow into drift ``f_b`` and input matrix ``g_b``.

    ``belief_flow(b, model, u) == f_b + g_b @ u``.  The covariance rows of
    ``g_b`` vanish whenever ``g`` is state independent.
    """
    if b.n != model.n:
        raise DimensionError(f"belief has n={b.n}, model has n={model.n}")
    bvec = b.vec()
    return np.asarray(drift_vec(bvec, model), dtype=float), input_matrix_vec(bvec, model)


def flow_vec(bvec, model: SystemModel, u) -> np.ndarray:
    n = model.n
    mean, cov = split_vector(bvec, n)
    A = np.asarray(model.jacobian(mean, u), dtype=float)
    AS = A @ cov
    dmean = np.asarray(model.dynamics(mean, u), dtype=float)
    return join_vector(dmean, AS + AS.T + model.Q)


def belief_flow(b: GaussianBelief, model: SystemModel, u) -> np.ndarray:
    """Time derivative of the belief vector under input ``u``."""
    if b.n != model.n:
        raise DimensionError(f"belief has n={b.n}, model has n={model.n}")
    u = _check_input(model, u)
    return flow_vec(b.vec(), model, u)


def kalman_gain(b_minus: GaussianBelief, obs: ObservationModel):
    """Return ``(K, H, S)`` for a measurement at ``b_minus``."""
    H = np.atleast_2d(np.asarray(obs.jacobian(b_minus.mean), dtype=float))
    if H.shape != (obs.dim, b_minus.n):
        raise DimensionError(f"observation Jacobian has shape {H.shape}, expected {(obs.dim, b_minus.n)}")
    PHt = b_minus.cov @ H.T
    S = H @ PHt + obs.R
    S = 0.5 * (S + S.T)
    w = np.linalg.eigvalsh(S)
    if w[0] <= 0.0 or w[-1] / w[0] > COND_MAX:
        raise SingularInnovationError(f"innovation covariance is ill-conditioned (eigenvalues {w[0]:.3e}..{w[-1]:.3e})")
    K = np.linalg.solve(S, PHt.T).T
    return K, H, S


def kalman_update(b_minus: GaussianBelief, obs: ObservationModel, z) -> GaussianBelief:
    """Condition the belief on measurement ``z``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != obs.dim:
        raise DimensionError(f"measurement has length {z.shape[0]}, expected {obs.dim}")
    K, H, _ = kalman_gain(b_minus, obs)
    innovation = z - np.asarray(obs.ell(b_minus.mean), dtype=float)
    mean = b_minus.mean + K @ innovation
    # Joseph form: equals (I - KH) Sigma for the optimal gain but stays PSD in floating point
    IKH = np.eye(b_minus.n) - K @ H
    cov = IKH @ b_minus.cov @ IKH.T + K @ obs.R @ K.T
    return GaussianBelief(mean, cov, repair=True)


def innovation_covariance(b_minus: GaussianBelief, obs: ObservationModel) -> np.ndarray:
    """Covariance ``K (H Sigma H^T + R) K^T`` of the mean correction at a measurement."""
    K, _, S = kalman_gain(b_minus, obs)
    lam = K @ S @ K.T
    return 0.5 * (lam + lam.T)


def integrate_flow(bvec, model: SystemModel, u, dt: float, method: str = "rk4") -> np.ndarray:
    if method == "rk4":
        k1 = flow_vec(bvec, model, u)
        k2 = flow_vec(bvec + 0.5 * dt * k1, model, u)
        k3 = flow_vec(bvec + 0.5 * dt * k2, model, u)
        k4 = flow_vec(bvec + dt * k3, model, u)
        return bvec + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if method == "euler":
        return bvec + dt * flow_vec(bvec, model, u)
    raise ValueError(f"unknown integration method {method!r}")


def hybrid_step(
    b: GaussianBelief,
    model: SystemModel,
    obs: ObservationModel | None,
    u,
    dt: float,
    z=None,
    method: str = "rk4",
) -> GaussianBelief:
    """Flow the belief for ``dt`` under constant ``u``, then apply ``z`` if given."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if b.n != model.n:
        raise DimensionError(f"belief has n={b.n}, model has n={model.n}")
    u = _check_input(model, u)
    bvec = integrate_flow(b.vec(), model, u, dt, method)
    out = GaussianBelief.from_vec(bvec, model.n, repair=True)
    if z is not None:
        if obs is None:
            raise ValueError("a measurement was given without an observation model")
        out = kalman_update(out, obs, z)
    return out


@dataclass
class MeasurementClock:
    """Fires on the first control-step boundary at or after each sensor period.

    The period is read at every query so region-dependent rates take effect
    from the last measurement onward.
    """

    last: float = 0.0
    tol: float = 1e-9

    def due(self, t: float, rate_hz: float) -> bool:
        return t - self.last >= 1.0 / rate_hz - self.tol

    def fire(self, t: float):
        self.last = t


@dataclass
class BeliefTracker:
    """Single-owner EKF session: current belief, time and measurement clock."""

    belief: GaussianBelief
    model: SystemModel
    t: float = 0.0
    method: str = "rk4"
    clock: MeasurementClock = field(default_factory=MeasurementClock)

    def predict(self, u, dt: float) -> GaussianBelief:
        self.belief = hybrid_step(self.belief, self.model, None, u, dt, method=self.method)
        self.t += dt
        return self.belief

    def update(self, obs: ObservationModel, z) -> GaussianBelief:
        self.belief = kalman_update(self.belief, obs, z)
        self.clock.fire(self.t)
        return self.belief
