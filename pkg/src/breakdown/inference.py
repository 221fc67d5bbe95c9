"""Outer minimisation of nu_hat over B n B0, sandwich variance, lower CI,
and convexity diagnostics.

Outer search is spectral projected gradient: Barzilai-Borwein trial steps,
projection onto the box plus null half-spaces, monotone Armijo backtracking
along the projected direction. Infeasible parameters (dual unbounded or
failed) evaluate to +inf and are backtracked away from.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.stats import norm

from .data import Sample, mcar_estimate
from .divergence import DivergenceSpec
from .dual import DualError, DualOptions, DualState, UnboundedDual, _Objective, envelope_gradient, nu_hat
from .moments import ConstraintSystem, EmptyRegionError, Hypothesis

# two starts are "distinct minimisers" when this far apart with values this close
_DISTINCT_B = 1e-3
_TIED_VALUE = 1e-6
_AUDIT_SLACK = 1e-7
# relative null relaxation below which continuation gives up on feasibility
_CONT_MIN_STEP = 1e-4
# outer iterations per intermediate continuation stage
_CONT_ROUGH_OUTER = 20


class EstimationError(RuntimeError):
    """Every outer start failed."""


class InferenceError(RuntimeError):
    """The Jacobian is too close to singular for the sandwich formula."""


@dataclass(frozen=True)
class EstimateOptions:
    n_starts: int = 2
    seed: int = 0
    n_audit: int = 50
    threads: int = 1
    pg_tol: float = 1e-7
    step_tol: float = 1e-12
    max_outer: int = 500
    armijo: float = 1e-4
    dual: DualOptions = field(default_factory=DualOptions)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("threads")  # must not leak into reports: output is thread-count invariant
        return out


@dataclass
class BreakdownResult:
    delta_hat: float
    b_star: np.ndarray
    lam: np.ndarray
    p_hat: float
    n: int
    sigma_hat: float | None = None
    ci_lower: float | None = None
    alpha: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def theta_hat(self):
        return (self.delta_hat, self.lam, self.p_hat)

    def to_dict(self) -> dict:
        finite = math.isfinite(self.delta_hat)
        return {
            # +inf (null not rationalisable) is encoded as null plus the flag
            "delta_hat": float(self.delta_hat) if finite else None,
            "delta_hat_infinite": not finite,
            "b_star": [float(v) for v in self.b_star],
            "lambda_hat": [float(v) for v in self.lam],
            "p_hat": float(self.p_hat),
            "n": int(self.n),
            "sigma_hat": None if self.sigma_hat is None else float(self.sigma_hat),
            "ci_lower": None if self.ci_lower is None else float(self.ci_lower),
            "alpha": self.alpha,
            "diagnostics": self.diagnostics,
        }


@dataclass
class _Start:
    origin: str
    b: np.ndarray
    value: float
    state: DualState | None
    iterations: int
    converged: bool
    evaluations: int
    message: str = ""
    failures: int = 0


class _Evaluator:
    """nu_hat with +inf for infeasible b and warm starts along one path."""

    def __init__(self, cs, spec, opts: DualOptions):
        self.cs, self.spec, self.opts = cs, spec, opts
        self.lam = None
        self.count = 0
        self.failures = 0  # dual errors other than certified unboundedness

    def __call__(self, b):
        self.count += 1
        try:
            st = nu_hat(self.cs, self.spec, b, self.opts, lam0=self.lam)
        except UnboundedDual:
            return math.inf, None
        except DualError:
            self.failures += 1
            return math.inf, None
        return st.value, st

    def accept(self, st: DualState):
        self.lam = st.lam


def _spg(ev: _Evaluator, hyp: Hypothesis, b0, opts: EstimateOptions, origin: str, anchor=None) -> _Start:
    b = hyp.project(b0)
    val, st = ev(b)
    if st is None and anchor is not None:
        # the finite-nu set is convex: pull the start toward a feasible anchor
        for _ in range(30):
            b = 0.5 * (b + anchor)
            val, st = ev(b)
            if st is not None:
                break
    if st is None:
        return _Start(origin, b, math.inf, None, 0, False, ev.count, "infeasible start")
    ev.accept(st)
    g = envelope_gradient(ev.cs, ev.spec, st)
    alpha = 1.0 / max(1.0, float(np.max(np.abs(g))))
    for it in range(1, opts.max_outer + 1):
        pg = hyp.project(b - g) - b
        if float(np.linalg.norm(pg)) < opts.pg_tol:
            return _Start(origin, b, val, st, it - 1, True, ev.count)
        d = hyp.project(b - alpha * g) - b
        slope = float(g @ d)
        if slope >= 0.0:
            # projection rounding leaves no descent direction
            return _Start(origin, b, val, st, it - 1, True, ev.count, "no descent direction")
        t = 1.0
        while True:
            b_new = b + t * d
            v_new, st_new = ev(b_new)
            if st_new is not None and v_new <= val + opts.armijo * t * slope:
                break
            t *= 0.5
            if t * float(np.linalg.norm(d)) < opts.step_tol:
                return _Start(origin, b, val, st, it, True, ev.count, "step below tolerance")
        ev.accept(st_new)
        g_new = envelope_gradient(ev.cs, ev.spec, st_new)
        s, y = b_new - b, g_new - g
        sy = float(s @ y)
        alpha = float(s @ s) / sy if sy > 0 else 1e10
        alpha = min(max(alpha, 1e-10), 1e10)
        b, val, st, g = b_new, v_new, st_new, g_new
    return _Start(origin, b, val, st, opts.max_outer, False, ev.count, "outer iteration limit")


def _run_start(cs, spec, hyp, b0, opts, origin, anchor=None):
    ev = _Evaluator(cs, spec, opts.dual)
    res = _spg(ev, hyp, b0, opts, origin, anchor)
    res.failures = ev.failures
    return res


def _continuation_start(cs, spec, hyp: Hypothesis, b_mcar, opts: EstimateOptions) -> _Start:
    """Start from the MCAR estimate and tighten the null half-spaces gradually.

    The finite-nu region can be a thin set that the plain projection of the
    MCAR point misses. Stage s minimises nu over B n {A b <= c + s * slack},
    slack measured at the MCAR point, and s is driven from 1 to 0 with the
    step halved whenever the projected warm start is infeasible.
    """
    ev = _Evaluator(cs, spec, opts.dual)
    b = np.clip(np.asarray(b_mcar, dtype=float), hyp.box[:, 0], hyp.box[:, 1])
    val, st = ev(b)
    if st is None:
        return _Start("mcar", b, math.inf, None, 0, False, ev.count, "infeasible MCAR point")
    ev.accept(st)
    slack = np.maximum(hyp.A @ b - hyp.c, 0.0)
    if not np.any(slack > 0):
        res = _spg(ev, hyp, b, opts, "mcar")
        res.failures = ev.failures
        return res
    rough = replace(opts, pg_tol=max(opts.pg_tol, 1e-4), max_outer=min(opts.max_outer, _CONT_ROUGH_OUTER))
    s, step, stages, iters = 1.0, 1.0, 0, 0
    while s > 0.0:
        s_try = max(0.0, s - step)
        stage_hyp = Hypothesis(hyp.box, hyp.A, hyp.c + s_try * slack)
        _, st_try = ev(stage_hyp.project(b))
        if st_try is None:
            step *= 0.5
            if step < _CONT_MIN_STEP:
                msg = f"continuation stalled at s={s:.6g}"
                return _Start("mcar", b, math.inf, None, iters, False, ev.count, msg, ev.failures)
            continue
        ev.accept(st_try)
        res = _spg(ev, stage_hyp, b, opts if s_try == 0.0 else rough, "mcar")
        stages += 1
        iters += res.iterations
        b, s = res.b, s_try
        step = min(2.0 * step, s) if s > 0 else step
    res.iterations = iters
    res.message = (res.message + f"; continuation stages={stages}").lstrip("; ")
    res.failures = ev.failures
    return res


def _cold_value(cs, spec, b, dual_opts):
    """(value, failed) for an audit point evaluated from lam = 0."""
    try:
        return nu_hat(cs, spec, b, dual_opts).value, 0
    except UnboundedDual:
        return math.inf, 0
    except DualError:
        return math.inf, 1


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _on_box_boundary(hyp: Hypothesis, b, tol=1e-9) -> bool:
    width = np.maximum(hyp.box[:, 1] - hyp.box[:, 0], 1.0)
    return bool(np.any(b - hyp.box[:, 0] <= tol * width) or np.any(hyp.box[:, 1] - b <= tol * width))


def estimate_breakdown(
    sample: Sample,
    model,
    cs: ConstraintSystem,
    spec: DivergenceSpec,
    hyp: Hypothesis,
    opts: EstimateOptions | None = None,
    b_mcar=None,
) -> BreakdownResult:
    """delta_hat = inf over B n B0 of nu_hat(b), by multi-start SPG.

    Starts: the MCAR estimate (moved into B0 by continuation), then
    ``opts.n_starts`` random points of B n B0, pulled toward the first
    start's solution when infeasible. The best start wins (lowest value, then
    lexicographically smallest b). ``opts.n_audit`` further random points
    are evaluated cold; an audit point beating the winner by more than 1e-7
    seeds one extra SPG run.
    """
    opts = opts or EstimateOptions()
    if hyp.d_b != model.d_b:
        raise ValueError(f"hypothesis has {hyp.d_b} coordinates, model has {model.d_b}")
    if hyp.is_empty():
        raise EmptyRegionError("B n B0 is empty")
    if b_mcar is None:
        b_mcar = mcar_estimate(sample, model)
    rng = np.random.default_rng(opts.seed)
    seeds = [("mcar", np.asarray(b_mcar, dtype=float))]
    for k, p in enumerate(hyp.random_points(rng, opts.n_starts)):
        seeds.append((f"random-{k}", p))
    audit_pts = hyp.random_points(rng, opts.n_audit)

    first = _continuation_start(cs, spec, hyp, b_mcar, opts)
    # without a feasible anchor, random starts only get their own point
    anchor = first.b if first.state is not None else None
    rest = _map(lambda s: _run_start(cs, spec, hyp, s[1], opts, s[0], anchor), seeds[1:], opts.threads)
    starts = [first] + rest
    audit_vals = _map(lambda b: _cold_value(cs, spec, b, opts.dual), list(audit_pts), opts.threads)

    ok = [s for s in starts if s.state is not None]
    best = min(ok, key=lambda s: (s.value, tuple(s.b))) if ok else None
    audit_min = min((v for v, _ in audit_vals), default=math.inf)
    audit_restart = False
    if audit_vals and math.isfinite(audit_min) and (best is None or audit_min < best.value - _AUDIT_SLACK):
        k = min(range(len(audit_vals)), key=lambda j: audit_vals[j][0])
        extra = _run_start(cs, spec, hyp, audit_pts[k], opts, "audit", anchor)
        starts.append(extra)
        audit_restart = True
        if extra.state is not None:
            ok.append(extra)
            best = min(ok, key=lambda s: (s.value, tuple(s.b)))
    failures = sum(s.failures for s in starts) + sum(f for _, f in audit_vals)
    if best is None and failures:
        raise EstimationError(f"no outer start reached a feasible parameter ({failures} dual failures)")

    start_rows = [
        {
            "origin": s.origin,
            "b": [float(v) for v in s.b],
            "value": float(s.value) if math.isfinite(s.value) else None,
            "iterations": s.iterations,
            "evaluations": s.evaluations,
            "converged": s.converged,
            "message": s.message,
        }
        for s in starts
    ]
    diagnostics = {
        "starts": start_rows,
        "b_mcar": [float(v) for v in b_mcar],
        "audit_points": len(audit_vals),
        "audit_min": float(audit_min) if math.isfinite(audit_min) else None,
        "audit_restart": audit_restart,
        "dual_failures": failures,
    }
    if best is None:
        # every start and audit point certified unbounded: nu = +inf on B n B0
        diagnostics.update({"winner": None, "non_unique": False, "warnings": ["null-not-rationalizable"]})
        return BreakdownResult(math.inf, first.b.copy(), np.zeros(0), sample.p_hat, sample.n,
                               diagnostics=diagnostics)

    non_unique = any(
        abs(s.value - best.value) <= _TIED_VALUE and np.linalg.norm(s.b - best.b) > _DISTINCT_B
        for s in ok
    )
    st = best.state
    warnings = []
    if _on_box_boundary(hyp, best.b):
        warnings.append("minimizer-on-box-boundary")
    if non_unique:
        warnings.append("non-unique-minimizer")
    if not best.converged:
        warnings.append("outer-not-converged")
    if audit_min < best.value - _AUDIT_SLACK:
        warnings.append("audit-point-below-estimate")
    diagnostics.update({
        "winner": best.origin,
        "outer_iterations": best.iterations,
        "dual_iterations": st.iters,
        "dual_grad_norm": float(st.grad_norm),
        "boundary_hits": st.boundary_hits,
        "boundary_slack": float(st.boundary_slack) if math.isfinite(st.boundary_slack) else None,
        "non_unique": non_unique,
        "warnings": warnings,
    })
    return BreakdownResult(
        delta_hat=float(st.value),
        b_star=best.b.copy(),
        lam=st.lam.copy(),
        p_hat=sample.p_hat,
        n=sample.n,
        diagnostics=diagnostics,
    )


# -- Z-estimator pieces ------------------------------------------------------


def phi_rows(cs: ConstraintSystem, spec: DivergenceSpec, b, lam, p=None):
    """Per-row phi, grad_lam phi, grad_p phi and grad_p grad_lam phi.

    Returns arrays of shape (n,), (n, dim), (n,), (n, dim).
    """
    s = cs.sample
    p = s.p_hat if p is None else p
    lam = np.asarray(lam, dtype=float)
    jh = cs.jh(b)
    d = s.d
    hc = cs.h_complete(b)
    rc = hc @ lam
    fs = np.zeros(s.n)
    fs[d] = spec.conj(rc)
    hq = np.zeros_like(jh)  # (f*)'(r) h on complete rows, zero elsewhere
    hq[d] = spec.conj_d1(rc)[:, None] * hc
    dd = d.astype(float)
    lin = jh @ lam
    phi = lin / (1 - p) - dd / p * fs
    g_lam = jh / (1 - p) - hq / p
    g_p = lin / (1 - p) ** 2 + dd / p**2 * fs
    g_plam = jh / (1 - p) ** 2 + hq / p**2
    return phi, g_lam, g_p, g_plam


def stacked_moments(cs, spec, b, theta):
    """Rows psi_i(theta) = (phi_i - v, grad_lam phi_i, D_i - p)."""
    v, lam, p = theta
    phi, g_lam, _, _ = phi_rows(cs, spec, b, lam, p)
    return np.column_stack([phi - v, g_lam, cs.sample.d.astype(float) - p])


def jacobian_phi_hat(cs: ConstraintSystem, spec: DivergenceSpec, b, theta) -> np.ndarray:
    """Sample Jacobian of the stacked moments in theta = (v, lam, p).

    The middle block is computed by the dual solver's own Hessian code so it
    equals the converged dual Hessian bit for bit.
    """
    _, lam, p = theta
    lam = np.asarray(lam, dtype=float)
    m = lam.shape[0]
    _, g_lam, g_p, g_plam = phi_rows(cs, spec, b, lam, p)
    obj = _Objective(cs, spec, b, p)
    out = np.zeros((m + 2, m + 2))
    out[0, 0] = -1.0
    out[0, 1 : m + 1] = g_lam.mean(axis=0)
    out[0, m + 1] = g_p.mean()
    out[1 : m + 1, 1 : m + 1] = obj.hess(lam)
    out[1 : m + 1, m + 1] = g_plam.mean(axis=0)
    out[m + 1, m + 1] = -1.0
    return out


def lower_ci(delta_hat: float, sigma_hat: float, n: int, alpha: float) -> float:
    return delta_hat - sigma_hat / math.sqrt(n) * float(norm.ppf(1.0 - alpha))


def attach_inference(
    result: BreakdownResult,
    cs: ConstraintSystem,
    spec: DivergenceSpec,
    alpha: float = 0.05,
    min_singular: float = 1e-10,
) -> BreakdownResult:
    """Fill sigma_hat and ci_lower from the sandwich formula at b_star.

    Refuses (InferenceError) when the smallest singular value of the
    Jacobian is below ``min_singular``; the point estimate is untouched.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    result.alpha = alpha
    if not math.isfinite(result.delta_hat):
        return result
    theta = result.theta_hat
    jac = jacobian_phi_hat(cs, spec, result.b_star, theta)
    smin = float(np.linalg.svd(jac, compute_uv=False)[-1])
    result.diagnostics["jacobian_min_singular"] = smin
    result.alpha = alpha
    if smin < min_singular:
        result.diagnostics.setdefault("warnings", []).append("singular-jacobian")
        raise InferenceError(f"Jacobian smallest singular value {smin:.3g} < {min_singular:g}")
    row1 = np.linalg.solve(jac.T, np.eye(jac.shape[0])[0])
    psi = stacked_moments(cs, spec, result.b_star, theta)
    infl = psi @ row1
    sigma = math.sqrt(float(np.mean(infl**2)))
    result.sigma_hat = sigma
    result.ci_lower = lower_ci(result.delta_hat, sigma, result.n, alpha)
    return result


# -- convexity diagnostics ---------------------------------------------------


@dataclass
class ConvexityReport:
    max_violation: float
    n_pairs: int
    n_grid: int
    evaluated: int
    skipped: int
    triples_checked: int
    segments: list

    def to_dict(self) -> dict:
        return asdict(self)


def convexity_scan(
    cs: ConstraintSystem,
    spec: DivergenceSpec,
    box,
    n_pairs: int = 10,
    n_grid: int = 50,
    seed: int = 0,
    dual_opts: DualOptions | None = None,
    threads: int = 1,
) -> ConvexityReport:
    """Midpoint-convexity check of nu_hat on random segments in ``box``.

    The violation at each interior grid point is
    nu(mid) - (nu(left) + nu(right)) / 2 over consecutive equally spaced
    points; triples with an infeasible (+inf) member are skipped.
    """
    if n_grid < 3:
        raise ValueError("n_grid must be at least 3")
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    dual_opts = dual_opts or DualOptions()
    rng = np.random.default_rng(seed)
    ends = rng.uniform(box[:, 0], box[:, 1], size=(n_pairs, 2, box.shape[0]))
    ts = np.linspace(0.0, 1.0, n_grid)

    def segment(pair):
        b0, b1 = pair
        ev = _Evaluator(cs, spec, dual_opts)
        vals = []
        for t in ts:
            v, st = ev(b0 + t * (b1 - b0))
            if st is not None:
                ev.accept(st)
            vals.append(v)
        return np.array(vals)

    all_vals = _map(segment, list(ends), threads)
    worst = -math.inf
    triples = 0
    segs = []
    for pair, v in zip(ends, all_vals):
        fin = np.isfinite(v)
        ok = fin[:-2] & fin[1:-1] & fin[2:]
        with np.errstate(invalid="ignore"):  # inf - inf on skipped triples
            viol = v[1:-1] - 0.5 * (v[:-2] + v[2:])
        seg_worst = float(np.max(viol[ok])) if np.any(ok) else None
        if seg_worst is not None:
            worst = max(worst, seg_worst)
        triples += int(ok.sum())
        segs.append(
            {
                "b0": pair[0].tolist(),
                "b1": pair[1].tolist(),
                "skipped": int((~fin).sum()),
                "max_violation": seg_worst,
            }
        )
    skipped = int(sum(s["skipped"] for s in segs))
    return ConvexityReport(
        max_violation=float(worst) if triples else 0.0,
        n_pairs=n_pairs,
        n_grid=n_grid,
        evaluated=n_pairs * n_grid - skipped,
        skipped=skipped,
        triples_checked=triples,
        segments=segs,
    )
