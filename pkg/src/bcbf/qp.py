"""Small dense QP for safety filtering.

Solves

    minimise   1/2 ||u - u_ref||^2
    subject to a_i^T u >= b_i        (rows)
               lo <= u <= hi         (optional box)

with the Goldfarb-Idnani dual active-set method.  The identity Hessian makes
the method cheap: the unconstrained optimum ``u_ref`` is the starting point
and every iteration only solves a Gram system of the active normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InfeasibleQPError, QPConvergenceError

FEAS_TOL = 1e-10


@dataclass
class QPProblem:
    u_ref: np.ndarray
    rows: list = field(default_factory=list)  # (a, b) pairs meaning a @ u >= b
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    slack_weight: float | None = None

    def __post_init__(self):
        self.u_ref = np.asarray(self.u_ref, dtype=float).reshape(-1)
        m = self.u_ref.shape[0]
        if self.slack_weight is not None and self.slack_weight <= 0:
            raise ConfigurationError("slack_weight must be positive when given")
        for bound in ("lower", "upper"):
            val = getattr(self, bound)
            if val is not None:
                val = np.broadcast_to(np.asarray(val, dtype=float), (m,)).copy()
                setattr(self, bound, val)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise ConfigurationError("empty input box: lower > upper")

    @property
    def m(self) -> int:
        return self.u_ref.shape[0]

    def constraint_matrix(self):
        """All constraints stacked as ``N u >= c``; rows first, then box bounds."""
        m = self.m
        normals = [np.asarray(a, dtype=float).reshape(m) for a, _ in self.rows]
        rhs = [float(b) for _, b in self.rows]
        if self.lower is not None:
            for i in range(m):
                if np.isfinite(self.lower[i]):
                    normals.append(np.eye(m)[i])
                    rhs.append(self.lower[i])
        if self.upper is not None:
            for i in range(m):
                if np.isfinite(self.upper[i]):
                    normals.append(-np.eye(m)[i])
                    rhs.append(-self.upper[i])
        if not normals:
            return np.zeros((0, m)), np.zeros(0)
        return np.array(normals), np.array(rhs)


@dataclass
class QPResult:
    u: np.ndarray
    active_set: list
    multipliers: np.ndarray
    slack_used: bool = False
    slack: float = 0.0
    iterations: int = 0


def _dual_active_set(N, c, x0, max_iter):
    """Goldfarb-Idnani for min 1/2||x - x0||^2 s.t. N x >= c.

    Returns ``(x, active, lam, iterations)``; raises InfeasibleQPError.
    """
    x = x0.copy()
    active: list[int] = []
    lam = np.zeros(0)
    iters = 0
    if N.shape[0] == 0:
        return x, active, lam, iters
    scale = np.maximum(np.linalg.norm(N, axis=1), 1.0)
    while True:
        slack = (N @ x - c) / scale
        if active:
            slack[active] = np.inf
        p = int(np.argmin(slack))
        if slack[p] >= -FEAS_TOL:
            return x, active, lam, iters
        lam_p = 0.0
        n_p = N[p]
        while True:
            iters += 1
            if iters > max_iter:
                raise QPConvergenceError(f"active-set iteration cap {max_iter} reached")
            if active:
                Na = N[active]
                gram = Na @ Na.T
                r = np.linalg.solve(gram, Na @ n_p)
                z = n_p - Na.T @ r
            else:
                r = np.zeros(0)
                z = n_p
            # partial (dual) step: first active multiplier to hit zero
            t1, drop = math.inf, -1
            for j, rj in enumerate(r):
                if rj > 1e-14 and lam[j] / rj < t1:
                    t1, drop = lam[j] / rj, j
            zz = float(z @ n_p)
            if zz > 1e-14 * max(1.0, float(n_p @ n_p)):
                t2 = (c[p] - float(n_p @ x)) / zz
            else:
                t2 = math.inf
            if math.isinf(t1) and math.isinf(t2):
                raise InfeasibleQPError(
                    f"constraint {p} cannot be satisfied together with active set {active}",
                    row=p,
                    violation=float(c[p] - n_p @ x),
                )
            t = min(t1, t2)
            if not math.isinf(t2):
                x = x + t * z
            lam = lam - t * r
            lam_p += t
            if t2 <= t1:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            del active[drop]
            lam = np.delete(lam, drop)


def _kkt_check(problem: QPProblem, res: QPResult):
    N, c = problem.constraint_matrix()
    return kkt_residuals(problem.u_ref, N, c, res.u, res.active_set, res.multipliers)


def kkt_residuals(u_ref, N, c, u, active, lam):
    """Max-norm stationarity, primal and complementarity residuals."""
    grad = u - u_ref
    if active:
        grad = grad - N[active].T @ lam
    stationarity = float(np.max(np.abs(grad))) if grad.size else 0.0
    primal = float(max(0.0, np.max(c - N @ u))) if len(c) else 0.0
    comp = float(np.max(np.abs(lam * (N[active] @ u - c[active])))) if active else 0.0
    dual_feas = float(max(0.0, -np.min(lam))) if active else 0.0
    return {"stationarity": stationarity, "primal": primal, "complementarity": comp, "dual": dual_feas}


def solve_qp(problem: QPProblem, max_iter: int | None = None) -> QPResult:
    """Minimise ``||u - u_ref||^2`` over the rows and box of ``problem``.

    If the problem is infeasible and ``slack_weight`` is set, a single slack
    ``s >= 0`` relaxes every row (never the box) and ``slack_weight/2 * s^2``
    is added to the cost.
    """
    m = problem.m
    N, c = problem.constraint_matrix()
    if max_iter is None:
        max_iter = 100 * max(m, 1)
    try:
        x, active, lam, iters = _dual_active_set(N, c, problem.u_ref, max_iter)
        return QPResult(x, active, lam, iterations=iters)
    except InfeasibleQPError:
        if problem.slack_weight is None:
            raise

    # scaled slack sigma = sqrt(w) s keeps the Hessian the identity
    k = len(problem.rows)
    root_w = math.sqrt(problem.slack_weight)
    Ns = np.zeros((N.shape[0] + 1, m + 1))
    Ns[: N.shape[0], :m] = N
    Ns[:k, m] = 1.0 / root_w
    Ns[-1, m] = 1.0
    cs = np.append(c, 0.0)
    x0 = np.append(problem.u_ref, 0.0)
    x, active, lam, iters = _dual_active_set(Ns, cs, x0, max_iter + 100)
    slack = x[m] / root_w
    return QPResult(x[:m], active, lam, slack_used=slack > FEAS_TOL, slack=float(slack), iterations=iters)
