"""Inner problem: the sample dual value nu_hat(b) by damped Newton ascent.

The sample dual objective at (b, lam, p) is

    (1/n) sum_i phi_i = lam' c_hat(b) (1 - p_hat)/(1 - p)
                        - (p_hat/p) * mean_{D=1} f*(lam' h_i)

which is the average of the per-row integrand over all rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .divergence import DivergenceSpec
from .moments import ConstraintSystem


class DualError(RuntimeError):
    """The inner maximisation failed at some b."""

    def __init__(self, msg, b=None):
        super().__init__(msg)
        self.b = None if b is None else np.asarray(b).tolist()


class DualMaxIterations(DualError):
    pass


class SingularHessian(DualError):
    pass


class UnboundedDual(DualError):
    """The dual is unbounded above: no density rationalises b (nu = +inf)."""


@dataclass(frozen=True)
class DualOptions:
    tol: float = 1e-9
    max_iter: int = 200
    boundary_fraction: float = 0.995
    value_ceiling: float = 1e6
    armijo: float = 1e-4


@dataclass
class DualState:
    b: np.ndarray
    lam: np.ndarray
    value: float
    grad_norm: float
    iters: int
    boundary_hits: int = 0
    # u* - max_i lam'h_i over complete rows (inf when u* is infinite)
    boundary_slack: float = math.inf
    trace: list = field(default_factory=list, repr=False)


class _Objective:
    """Dual objective at fixed b; caches h over complete rows and c_hat."""

    def __init__(self, cs: ConstraintSystem, spec: DivergenceSpec, b, p=None):
        self.cs = cs
        self.spec = spec
        self.b = np.asarray(b, dtype=float)
        # column-major H: the n x dim products below run ~1.5x faster
        self.H, self.c = cs.h_and_c(self.b)
        p_hat = cs.p_hat
        p = p_hat if p is None else p
        self.lin = (1.0 - p_hat) / (1.0 - p)
        self.scale = p_hat / p
        self.n1 = self.H.shape[0]

    def r(self, lam):
        return self.H @ lam

    def value(self, lam, r=None):
        r = self.r(lam) if r is None else r
        if np.max(r, initial=-math.inf) >= self.spec.upper_conj:
            return -math.inf
        fs = self.spec.conj(r)
        return self.lin * float(lam @ self.c) - self.scale * float(fs.mean())

    def grad(self, lam, r=None):
        r = self.r(lam) if r is None else r
        d1 = self.spec.conj_d1(r)
        return self.lin * self.c - self.scale * (self.H.T @ d1) / self.n1

    def hess(self, lam, r=None):
        r = self.r(lam) if r is None else r
        d2 = self.spec.conj_d2(r)
        return -self.scale * ((self.H * d2[:, None]).T @ self.H) / self.n1


def dual_objective(cs: ConstraintSystem, spec: DivergenceSpec, b, lam, p=None):
    """(value, gradient, Hessian) of the sample dual objective in lam.

    The value is ``-inf`` when some complete row has lam'h >= u*; the
    gradient and Hessian are then ``None``.
    """
    obj = _Objective(cs, spec, b, p)
    lam = np.asarray(lam, dtype=float)
    r = obj.r(lam)
    val = obj.value(lam, r)
    if not math.isfinite(val):
        return val, None, None
    return val, obj.grad(lam, r), obj.hess(lam, r)


def _newton_direction(neg_hess, grad, b):
    tau = 0.0
    m = neg_hess.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(neg_hess)))))
    for _ in range(30):
        try:
            cf = cho_factor(neg_hess + tau * scale * np.eye(m), lower=True, check_finite=True)
            return cho_solve(cf, grad)
        except (LinAlgError, ValueError):
            tau = 1e-10 if tau == 0.0 else tau * 10.0
    raise SingularHessian("dual Hessian could not be factorised", b)


def nu_hat(cs: ConstraintSystem, spec: DivergenceSpec, b, opts: DualOptions | None = None, lam0=None) -> DualState:
    """Maximise the sample dual objective over lam at parameter ``b``.

    Warm-startable through ``lam0``. A warm start outside dom f* is shrunk
    toward 0 first; one still scoring below lam = 0, or one that fails,
    falls back to the cold start. Raises UnboundedDual when
    the objective passes ``opts.value_ceiling``.
    """
    opts = opts or DualOptions()
    if lam0 is not None:
        try:
            return _ascend(cs, spec, b, opts, lam0)
        except UnboundedDual:
            raise
        except DualError:
            pass
    return _ascend(cs, spec, b, opts, None)


def _ascend(cs, spec, b, opts, lam0) -> DualState:
    obj = _Objective(cs, spec, b)
    u = spec.upper_conj
    sup = spec.divergence_sup
    lam = np.zeros(cs.dim) if lam0 is None else np.asarray(lam0, dtype=float).copy()
    r = obj.r(lam)
    val = obj.value(lam, r)
    if lam0 is not None and val == -math.inf and math.isfinite(u):
        # warm start past the pole after b moved: shrink toward 0 (u* > 0
        # since f*(0) = 0) so every row sits inside the boundary fraction
        lam = lam * (opts.boundary_fraction * u / float(r.max()))
        r = obj.r(lam)
        val = obj.value(lam, r)
    if not val >= 0.0:
        # lam = 0 scores exactly 0 and is always interior
        lam = np.zeros(cs.dim)
        r = obj.r(lam)
        val = obj.value(lam, r)
    hits = 0
    trace = [val]
    for it in range(opts.max_iter + 1):
        grad = obj.grad(lam, r)
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= opts.tol:
            slack = u - float(r.max()) if math.isfinite(u) else math.inf
            return DualState(obj.b, lam, val, gnorm, it, hits, slack, trace)
        if it == opts.max_iter:
            break
        if val > opts.value_ceiling:
            raise UnboundedDual(f"dual value exceeds {opts.value_ceiling:g}", b)
        if val >= sup:
            # weak duality: a feasible Q would have divergence >= val >= sup
            raise UnboundedDual(f"dual value {val:.6g} reaches the divergence bound {sup:g}", b)
        step = _newton_direction(-obj.hess(lam, r), grad, b)
        slope = float(grad @ step)
        if slope <= 1e-16 * (1.0 + abs(val)):
            # squared Newton decrement at rounding level: the gradient norm
            # can floor above tol on badly scaled h, the optimum cannot move
            slack = u - float(r.max()) if math.isfinite(u) else math.inf
            return DualState(obj.b, lam, val, gnorm, it, hits, slack, trace)
        dr = obj.H @ step
        t = 1.0
        if math.isfinite(u):
            up = dr > 0
            if np.any(up):
                t_max = float(np.min(opts.boundary_fraction * (u - r[up]) / dr[up]))
                if t_max < 1.0:
                    t = t_max
                    hits += 1
        while True:
            r_new = r + t * dr
            val_new = obj.value(lam + t * step, r_new)
            if val_new >= val + opts.armijo * t * slope:
                break
            t *= 0.5
            if t < 1e-14:
                break
        if t < 1e-14:
            # predicted gain below rounding: optimal to machine precision
            if slope <= 1e-12 * (1.0 + abs(val)):
                slack = u - float(r.max()) if math.isfinite(u) else math.inf
                return DualState(obj.b, lam, val, gnorm, it, hits, slack, trace)
            raise DualMaxIterations("line search stalled", b)
        if val_new <= val and slope <= 1e-12 * (1.0 + abs(val)):
            # accepted step cannot raise the value: rounding-limited on an
            # ill-conditioned Hessian, value within ~slope/2 of optimal
            slack = u - float(r.max()) if math.isfinite(u) else math.inf
            return DualState(obj.b, lam, val, gnorm, it, hits, slack, trace)
        lam = lam + t * step
        r, val = r_new, val_new
        trace.append(val)
    raise DualMaxIterations(f"no convergence in {opts.max_iter} Newton iterations", b)


def recovered_density(cs: ConstraintSystem, spec: DivergenceSpec, state: DualState) -> np.ndarray:
    """q_i = (f*)'(lam'h_i) on complete rows: the implied primal density."""
    return spec.conj_d1(cs.h_complete(state.b) @ state.lam)


def envelope_gradient(cs: ConstraintSystem, spec: DivergenceSpec, state: DualState) -> np.ndarray:
    """d nu_hat / d b at the converged multiplier (Danskin).

    Only the g block of h and c depends on b, so the derivative is
    -mean_{D=1} [(p/(1-p) + (f*)'(r_i)) * grad_b g_i' lam_g].
    """
    s = cs.sample
    model = cs.model
    lam_g = state.lam[: model.d_g]
    r = cs.h_complete(state.b) @ state.lam
    p = cs.p_hat
    w = (p / (1.0 - p) + spec.conj_d1(r)) / s.n1
    return -model.weighted_vjp(s.y1, s.x1, state.b, w, lam_g)
