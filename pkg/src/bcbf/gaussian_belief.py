"""Gaussian beliefs, their flat vector encoding and risk-aware half-spaces.

A belief over an ``n``-dimensional state is ``N(mean, cov)``.  It is encoded
as a flat vector of length ``n_b = (n**2 + 3n) / 2``: the mean followed by the
upper triangle of ``cov`` in row-major order.

A :class:`RiskHalfSpace` ``(alpha, beta, delta, gamma)`` turns the chance
constraint ``Pr[alpha^T x >= beta] >= 1 - delta`` into the deterministic
barrier

    h(b) = alpha^T mu - beta - erfinv(1 - 2 delta) * sqrt(2 alpha^T Sigma alpha) - gamma

which is the Value-at-Risk of ``alpha^T x - beta`` shifted by ``gamma``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import dual
from .errors import (
    BeliefError,
    ConfigurationError,
    DegenerateDirectionError,
    DimensionError,
    DomainError,
    SingularGradientError,
)

log = logging.getLogger(__name__)

SYM_TOL = 1e-9
PSD_TOL = 1e-9
EPS_SING = 1e-12

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


# ---------------------------------------------------------------------------
# special functions
# ---------------------------------------------------------------------------

def erf(x: float) -> float:
    return math.erf(x)


def _erfinv_initial(p: float) -> float:
    # Giles' single-precision rational approximation, ~1e-7 relative
    a = abs(p)
    w = -(math.log1p(-a) + math.log1p(a))
    if w < 5.0:
        w -= 2.5
        r = 2.81022636e-08
        r = 3.43273939e-07 + r * w
        r = -3.5233877e-06 + r * w
        r = -4.39150654e-06 + r * w
        r = 0.00021858087 + r * w
        r = -0.00125372503 + r * w
        r = -0.00417768164 + r * w
        r = 0.246640727 + r * w
        r = 1.50140941 + r * w
    else:
        w = math.sqrt(w) - 3.0
        r = -0.000200214257
        r = 0.000100950558 + r * w
        r = 0.00134934322 + r * w
        r = -0.00367342844 + r * w
        r = 0.00573950773 + r * w
        r = -0.0076224613 + r * w
        r = 0.00943887047 + r * w
        r = 1.00167406 + r * w
        r = 2.83297682 + r * w
    return r * p


def erfinv(p: float) -> float:
    """Inverse error function on (-1, 1).

    A rational first guess refined by Halley steps on ``erf`` (on ``erfc``
    in the tails); the result
    satisfies ``|erf(erfinv(p)) - p| <= 1e-12`` over the open interval.
    """
    p = float(p)
    if not -1.0 < p < 1.0:
        raise DomainError(f"erfinv is defined on (-1, 1), got {p!r}")
    if p == 0.0:
        return 0.0
    x = _erfinv_initial(p)
    # near |p| = 1 the residual is taken on the tail, where 1 - |p| is exact
    tail = abs(p) > 0.5
    q = 1.0 - abs(p)
    for _ in range(8):
        if tail:
            err = (q - math.erfc(abs(x))) * (1.0 if p > 0 else -1.0)
        else:
            err = math.erf(x) - p
        deriv = _TWO_OVER_SQRT_PI * math.exp(-x * x)
        if deriv == 0.0:
            break
        # Halley: f'' = -2x f'
        step = err / (deriv + x * err)
        x -= step
        if abs(step) <= 1e-16 * max(1.0, abs(x)):
            break
    return x


def risk_factor(delta: float) -> float:
    """``erfinv(1 - 2 delta)``: the standard-score multiplier of the VaR term."""
    return _risk_factor_cached(float(delta))


@lru_cache(maxsize=256)
def _risk_factor_cached(delta: float) -> float:
    return erfinv(1.0 - 2.0 * delta)


# ---------------------------------------------------------------------------
# vec encoding
# ---------------------------------------------------------------------------

def belief_dim(n: int) -> int:
    return (n * n + 3 * n) // 2


def state_dim(n_b: int) -> int:
    n = int(round((-3 + math.sqrt(9 + 8 * n_b)) / 2))
    if belief_dim(n) != n_b:
        raise DimensionError(f"{n_b} is not a valid belief-vector length")
    return n


@lru_cache(maxsize=None)
def _tri_indices(n: int):
    iu = np.triu_indices(n)
    # position of (i, j) inside the vec'd upper triangle, symmetric
    pos = np.empty((n, n), dtype=int)
    pos[iu] = np.arange(len(iu[0]))
    pos[(iu[1], iu[0])] = np.arange(len(iu[0]))
    iu[0].setflags(write=False)
    iu[1].setflags(write=False)
    pos.setflags(write=False)
    return iu, pos


def vec_sym(mat):
    """Upper triangle of a symmetric matrix, row-major. Works on Dual input."""
    n = mat.shape[0]
    iu, _ = _tri_indices(n)
    return mat[iu]


def unvec_sym(v, n: int):
    """Inverse of :func:`vec_sym`. Works on Dual input."""
    _, pos = _tri_indices(n)
    return v[pos]


def split_vector(b, n: int):
    """Return ``(mean, cov)`` views of a (possibly Dual) belief vector."""
    return b[:n], unvec_sym(b[n:], n)


def join_vector(mean, cov):
    n = len(mean)
    if dual.is_dual(mean) or dual.is_dual(cov):
        m = mean if dual.is_dual(mean) else None
        c = vec_sym(cov)
        if m is None:
            m = dual.Dual(mean, np.zeros((n, c.nderiv)))
        if not dual.is_dual(c):
            c = dual.Dual(c, np.zeros(c.shape + (m.nderiv,)))
        return dual.Dual(np.concatenate([m.val, c.val]), np.concatenate([m.der, c.der]))
    return np.concatenate([np.asarray(mean, dtype=float), vec_sym(np.asarray(cov, dtype=float))])


# ---------------------------------------------------------------------------
# belief
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Gaussian belief ``N(mean, cov)``.

    The covariance is symmetrised on construction.  A matrix with an
    eigenvalue below ``-1e-9`` is rejected unless ``repair=True``, in which
    case negative eigenvalues are clamped to zero.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __init__(self, mean, cov, *, repair: bool = False, check: bool = True):
        mean = np.array(mean, dtype=float).reshape(-1)
        cov = np.array(cov, dtype=float)
        n = mean.shape[0]
        if cov.ndim == 0 and n == 1:
            cov = cov.reshape(1, 1)
        if cov.shape != (n, n):
            raise DimensionError(f"covariance shape {cov.shape} does not match mean length {n}")
        cov = 0.5 * (cov + cov.T)
        if check or repair:
            w, v = np.linalg.eigh(cov)
            if w.size and w[0] < -PSD_TOL:
                if not repair:
                    raise BeliefError(f"covariance is not PSD (min eigenvalue {w[0]:.3e})")
                log.info("clamping covariance eigenvalues (min %.3e) to zero", w[0])
                cov = (v * np.maximum(w, 0.0)) @ v.T
                cov = 0.5 * (cov + cov.T)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n(self) -> int:
        return self.mean.shape[0]

    @property
    def n_b(self) -> int:
        return belief_dim(self.n)

    def vec(self) -> np.ndarray:
        return join_vector(self.mean, self.cov)

    @classmethod
    def from_vec(cls, b, n: int | None = None, **kwargs) -> "GaussianBelief":
        b = np.asarray(b, dtype=float).reshape(-1)
        if n is None:
            n = state_dim(b.shape[0])
        elif b.shape[0] != belief_dim(n):
            raise DimensionError(f"belief vector of length {b.shape[0]} does not fit n={n}")
        mean, cov = split_vector(b, n)
        return cls(mean, cov, **kwargs)

    def __repr__(self):
        return f"GaussianBelief(mean={self.mean.tolist()}, cov={self.cov.tolist()})"


# ---------------------------------------------------------------------------
# half-spaces
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RiskHalfSpace:
    """Chance constraint ``Pr[alpha^T x >= beta] >= 1 - delta`` shrunk by ``gamma``.

    ``delta`` must lie in ``(0, 0.5]``; ``delta = 0.5`` is the plain mean
    half-space ``alpha^T mu >= beta``.
    """

    alpha: np.ndarray
    beta: float
    delta: float
    gamma: float = 0.0

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        if not np.any(alpha):
            raise ConfigurationError("half-space direction alpha must be nonzero")
        if not 0.0 < self.delta <= 0.5:
            raise ConfigurationError(f"risk level delta must be in (0, 0.5], got {self.delta}")
        if self.gamma < 0.0:
            raise ConfigurationError(f"shrink margin gamma must be >= 0, got {self.gamma}")
        alpha.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", float(self.beta))
        object.__setattr__(self, "delta", float(self.delta))
        object.__setattr__(self, "gamma", float(self.gamma))

    def with_gamma(self, gamma: float) -> "RiskHalfSpace":
        return RiskHalfSpace(self.alpha, self.beta, self.delta, gamma)

    @property
    def risk(self) -> float:
        return risk_factor(self.delta)


def _check_dims(b: GaussianBelief, alpha):
    if alpha.shape[0] != b.n:
        raise DimensionError(f"alpha has length {alpha.shape[0]}, belief has n={b.n}")


def prob_halfspace(b: GaussianBelief, alpha, beta: float) -> float:
    """``Pr[alpha^T x >= beta]`` for ``x ~ b``."""
    alpha = np.asarray(alpha, dtype=float)
    _check_dims(b, alpha)
    var = float(alpha @ b.cov @ alpha)
    if var <= 0.0:
        raise DegenerateDirectionError("alpha^T Sigma alpha must be positive")
    return 0.5 * (1.0 + math.erf((float(alpha @ b.mean) - beta) / math.sqrt(2.0 * var)))


def var_value(b: GaussianBelief, hs: RiskHalfSpace) -> float:
    """Barrier value ``h(b)``; nonnegative iff the chance constraint holds (gamma = 0)."""
    _check_dims(b, hs.alpha)
    var = max(float(hs.alpha @ b.cov @ hs.alpha), 0.0)
    return float(hs.alpha @ b.mean) - hs.beta - hs.risk * math.sqrt(2.0 * var) - hs.gamma


def var_value_vec(bvec, n: int, alpha, beta: float, k: float, gamma: float = 0.0):
    """Barrier value on a raw (possibly Dual) belief vector."""
    mean, cov = split_vector(bvec, n)
    s = dual.dot(alpha, dual.matmul(cov, alpha))
    return dual.dot(alpha, mean) - beta - k * dual.sqrt(2.0 * s) - gamma


def var_gradient_vec(bvec, n: int, alpha, k: float, eps_sing: float = EPS_SING):
    """Gradient of the barrier w.r.t. the belief vector, alpha held fixed.

    Accepts a Dual belief vector so that the gradient itself can be
    differentiated (used for second-order Lie derivatives).
    """
    alpha = np.asarray(alpha, dtype=float)
    iu, _ = _tri_indices(n)
    weights = np.outer(alpha, alpha)[iu] * np.where(iu[0] == iu[1], 1.0, 2.0)
    if k == 0.0:
        return np.concatenate([alpha, np.zeros(len(weights))])
    _, cov = split_vector(bvec, n)
    s = dual.dot(alpha, dual.matmul(cov, alpha))
    if float(dual.value(s)) <= eps_sing:
        raise SingularGradientError(
            f"alpha^T Sigma alpha = {float(dual.value(s)):.3e} is below {eps_sing:.1e}"
        )
    scale = -k / dual.sqrt(2.0 * s)
    if dual.is_dual(scale):
        cov_part = scale * weights
        alpha_part = dual.Dual(alpha, np.zeros(alpha.shape + (scale.nderiv,)))
        return dual.Dual(
            np.concatenate([alpha_part.val, cov_part.val]),
            np.concatenate([alpha_part.der, cov_part.der]),
        )
    return np.concatenate([alpha, weights * scale])


def var_gradient(b: GaussianBelief, hs: RiskHalfSpace, eps_sing: float = EPS_SING) -> np.ndarray:
    """``dh/db`` in the vec ordering (mean block, then upper-triangle covariance block).

    Off-diagonal covariance entries appear once in the encoding but twice in
    the matrix, so their partials carry a factor of two.
    """
    _check_dims(b, hs.alpha)
    return var_gradient_vec(b.vec(), b.n, hs.alpha, hs.risk, eps_sing)
