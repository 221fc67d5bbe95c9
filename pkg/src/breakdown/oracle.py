"""Ground truth independent of the dual solver.

``discrete_primal`` solves the finite-support primal projection directly in
the density variables q (augmented Lagrangian, interior Newton inner
steps). ``kl_uniform_dual`` is the closed-form KL dual for the mean of a
U[0, 1] complete-case distribution. Neither touches ``breakdown.dual``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, linprog

from .divergence import DivergenceSpec


@dataclass(frozen=True)
class DiscreteInstance:
    """Atoms with complete-case mass ``p1``, constraint rows ``h_values``
    (one per atom), and target ``c``: feasible q satisfy
    sum_j p1_j q_j h_values_j = c."""

    p1: np.ndarray
    h_values: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        p1 = np.asarray(self.p1, dtype=float).ravel()
        h = np.asarray(self.h_values, dtype=float).reshape(p1.shape[0], -1)
        c = np.asarray(self.c, dtype=float).ravel()
        if abs(p1.sum() - 1.0) > 1e-12 or np.any(p1 <= 0):
            raise ValueError("p1 must be strictly positive and sum to one")
        if h.shape[1] != c.shape[0]:
            raise ValueError("h_values and c disagree in dimension")
        object.__setattr__(self, "p1", p1)
        object.__setattr__(self, "h_values", h)
        object.__setattr__(self, "c", c)

    @property
    def A(self) -> np.ndarray:
        return (self.p1[:, None] * self.h_values).T


@dataclass
class PrimalSolution:
    value: float
    q: np.ndarray | None
    grid_value: float | None = None
    restarts_converged: int = 0
    spread: float = 0.0


def discretize_uniform(n_atoms: int) -> np.ndarray:
    """Midpoints of ``n_atoms`` equal-probability bins of U[0, 1]."""
    return (np.arange(n_atoms) + 0.5) / n_atoms


def mean_instance(y_atoms, p_d: float, b: float) -> DiscreteInstance:
    """Mean-model instance: h = (y - b, 1), c = (-p/(1-p) * (E_P1[y] - b), 1)."""
    y = np.asarray(y_atoms, dtype=float)
    p1 = np.full(y.shape[0], 1.0 / y.shape[0])
    h = np.column_stack([y - b, np.ones_like(y)])
    c = np.array([-p_d / (1 - p_d) * (y.mean() - b), 1.0])
    return DiscreteInstance(p1, h, c)


def _woodbury_solve(dvec, A, rho, rhs):
    # (diag(dvec) + rho A'A)^{-1} rhs
    dinv_rhs = rhs / dvec
    ad = A / dvec
    small = np.eye(A.shape[0]) / rho + ad @ A.T
    return dinv_rhs - (ad.T @ np.linalg.solve(small, A @ dinv_rhs))


def _al_solve(spec, p1, A, c, q0, max_outer=80, feas_tol=1e-11):
    q = q0.copy()
    mu = np.zeros(A.shape[0])
    rho = 10.0
    prev_viol = math.inf

    def lagr(q):
        res = A @ q - c
        return float(p1 @ spec.f(q)) + mu @ res + 0.5 * rho * res @ res

    for _ in range(max_outer):
        for _inner in range(200):
            res = A @ q - c
            grad = p1 * spec.f_d1(q) + A.T @ (mu + rho * res)
            dvec = p1 * spec.f_d2(q)
            step = -_woodbury_solve(dvec, A, rho, grad)
            dec = -float(grad @ step)
            l0 = lagr(q)
            # squared Newton decrement at rounding level: inner solve done
            if dec <= 1e-20 * (1.0 + abs(l0)):
                break
            neg = step < 0
            t = 1.0
            if np.any(neg):
                t = min(1.0, 0.99 * float(np.min(-q[neg] / step[neg])))
            while t > 1e-16:
                q_new = q + t * step
                if np.all(q_new > 0) and lagr(q_new) <= l0 - 1e-4 * t * dec:
                    break
                t *= 0.5
            else:
                break
            if t < 1e-6 and dec <= 1e-14 * (1.0 + abs(l0)):
                # rounding-limited backtracking: further steps buy nothing
                q = q_new
                break
            q = q_new
        viol = float(np.linalg.norm(A @ q - c))
        if viol <= feas_tol:
            return q, viol
        mu = mu + rho * (A @ q - c)
        if viol > 0.25 * prev_viol:
            rho *= 10.0
        prev_viol = viol
        if rho > 1e14:
            break
    return q, float(np.linalg.norm(A @ q - c))


def _grid_value(spec, inst, resolution=1e-4):
    """Exhaustive scan along the one-dimensional feasible line (J - m <= 1)."""
    A, c = inst.A, inst.c
    J, m = A.shape[1], A.shape[0]
    q_part, *_ = np.linalg.lstsq(A, c, rcond=None)
    if np.linalg.norm(A @ q_part - c) > 1e-10:
        return math.inf
    if J == m:
        return _objective(spec, inst.p1, q_part)
    _, _, vt = np.linalg.svd(A)
    v = vt[-1]
    v = v / np.max(np.abs(v))
    # q_part + s v >= 0
    lo, hi = -math.inf, math.inf
    for qj, vj in zip(q_part, v):
        if vj > 0:
            lo = max(lo, -qj / vj)
        elif vj < 0:
            hi = min(hi, -qj / vj)
    if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
        return math.inf
    s = np.arange(lo, hi + resolution, resolution)
    s = np.clip(s, lo, hi)
    qs = q_part[None, :] + s[:, None] * v[None, :]
    vals = (spec.f(np.maximum(qs, 0.0)) * inst.p1).sum(axis=1)
    return float(np.min(vals))


def _objective(spec, p1, q):
    vals = spec.f(q)
    return float(p1 @ vals) if np.all(np.isfinite(vals)) else math.inf


def _max_min_density(A, c) -> float:
    """max s s.t. A q = c, q >= s, s <= 1; -inf when no q >= 0 is feasible."""
    J = A.shape[1]
    obj = np.zeros(J + 1)
    obj[-1] = -1.0
    A_eq = np.hstack([A, np.zeros((A.shape[0], 1))])
    A_ub = np.hstack([-np.eye(J), np.ones((J, 1))])
    res = linprog(obj, A_ub=A_ub, b_ub=np.zeros(J), A_eq=A_eq, b_eq=c,
                  bounds=[(0, None)] * J + [(None, 1.0)], method="highs")
    return -res.fun if res.status == 0 else -math.inf


def discrete_primal(inst: DiscreteInstance, spec: DivergenceSpec, restarts: int = 20, seed: int = 0) -> PrimalSolution:
    """Minimise sum_j p1_j f(q_j) subject to the instance's linear constraints.

    A linear program first decides feasibility (with strictly positive q
    when f(0) is infinite); infeasible instances return +inf at once.
    """
    A, c = inst.A, inst.c
    J, m = A.shape[1], A.shape[0]
    if np.linalg.matrix_rank(A) < m:
        raise ValueError("constraint matrix is rank deficient")
    s_max = _max_min_density(A, c)
    if s_max < 0 or (s_max <= 1e-12 and not math.isfinite(float(spec.f(0.0)))):
        grid = _grid_value(spec, inst) if (J <= 3 and m <= 2 and J - m <= 1) else None
        return PrimalSolution(math.inf, None, grid, 0)
    rng = np.random.default_rng(seed)
    best = None
    values = []
    for k in range(restarts):
        q0 = np.ones(J) if k == 0 else np.exp(rng.normal(0.0, 0.5, size=J))
        q, viol = _al_solve(spec, inst.p1, A, c, q0)
        if viol > 1e-9 or np.any(q < 0):
            continue
        val = _objective(spec, inst.p1, q)
        values.append(val)
        if best is None or val < best[0]:
            best = (val, q)
    grid = _grid_value(spec, inst) if (J <= 3 and m <= 2 and J - m <= 1) else None
    if best is None:
        return PrimalSolution(math.inf, None, grid, 0)
    spread = max(values) - min(values)
    return PrimalSolution(best[0], best[1], grid, len(values), spread)


def _foc_lhs(lam1: float) -> float:
    """exp(l)/(exp(l) - 1) - 1/l, continuous through l = 0."""
    if abs(lam1) < 1e-4:
        return 0.5 + lam1 / 12.0 - lam1**3 / 720.0
    return -1.0 / math.expm1(-lam1) - 1.0 / lam1


def kl_uniform_dual(b: float, p_d: float, tol: float = 1e-12):
    """Closed-form KL dual for the mean of U[0, 1] complete cases.

    Returns ``(lambda1, lambda2, value)`` for b in (p_d/2, 1 - p_d/2).
    """
    if not 0.0 < p_d < 1.0:
        raise ValueError("p_d must lie in (0, 1)")
    if not p_d / 2 < b < 1 - p_d / 2:
        raise ValueError(f"b={b} outside the solvable range ({p_d / 2}, {1 - p_d / 2})")
    target = (2 * b - p_d) / (2 * (1 - p_d))
    if target == 0.5:
        return 0.0, 0.0, 0.0
    # the FOC left side is increasing in lambda1; widen until it brackets
    lo, hi = -1.0, 1.0
    while _foc_lhs(lo) > target:
        lo *= 2.0
    while _foc_lhs(hi) < target:
        hi *= 2.0
    lam1 = brentq(lambda l: _foc_lhs(l) - target, lo, hi, xtol=tol * max(1.0, abs(lo)), rtol=4 * np.finfo(float).eps)
    lam2 = math.log(lam1 / (math.exp(lam1 * (1 - b)) - math.exp(-lam1 * b)))
    c = np.array([-p_d / (1 - p_d) * (0.5 - b), 1.0])
    lam = np.array([lam1, lam2])
    b1 = np.array([1 - b, 1.0])
    b0 = np.array([-b, 1.0])
    value = float(lam @ c - (math.exp(lam @ b1) - math.exp(lam @ b0)) / lam1 + 1.0)
    return lam1, lam2, value


def kl_uniform_foc_residual(lam1: float, b: float, p_d: float) -> float:
    return abs(_foc_lhs(lam1) - (2 * b - p_d) / (2 * (1 - p_d)))
