"""Cross-validation of the dual solver against the independent oracles.

Small random samples are solved twice: by ``dual.nu_hat`` on the sample and
by ``oracle.discrete_primal`` on the same finite instance (atoms = complete
rows, equal mass). Weak duality must hold on every instance; strong
duality and atomwise agreement of the recovered density are checked when
the oracle's solution is strictly interior.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .data import Sample, hellinger_from_joint
from .divergence import KL, REVERSE_KL, SQ_HELLINGER, DivergenceSpec, cressie_read, divergence_between
from .dual import DualError, UnboundedDual, nu_hat, recovered_density
from .moments import build_constraints, builtin_mean
from .oracle import (
    DiscreteInstance,
    discrete_primal,
    discretize_uniform,
    kl_uniform_dual,
    kl_uniform_foc_residual,
    mean_instance,
)

BATTERY_DIVERGENCES = (SQ_HELLINGER, KL, REVERSE_KL, cressie_read(0.5), cressie_read(2.0))
# oracle q below this counts as touching the boundary of dom(f)
INTERIOR_Q = 1e-3


def instance_from_constraints(cs, b) -> DiscreteInstance:
    """The finite primal seen by the dual: complete rows as equal-mass atoms."""
    h = cs.h_complete(b)
    return DiscreteInstance(np.full(h.shape[0], 1.0 / h.shape[0]), h, cs.c_hat(b))


def random_small_case(rng: np.random.Generator):
    """A tiny mean-model sample (x-empty or two X cells) and a parameter b.

    Returns ``(cs, b)``. Three times in four the implied Q-mean
    (b - p ybar) / (1 - p) is drawn inside the complete-case range, which
    keeps most x-empty instances feasible; otherwise b itself is drawn
    there, which often is not.
    """
    j = int(rng.integers(3, 9))
    m = int(rng.integers(1, 6))
    y1 = np.round(rng.uniform(0.0, 1.0, size=j), 3)
    if rng.random() < 0.5:
        d = np.r_[np.ones(j, bool), np.zeros(m, bool)]
        y = np.r_[y1, np.full(m, np.nan)]
        sample = Sample(d, y, np.zeros((j + m, 0)))
    else:
        m = max(m, 2)
        x1 = np.r_[0.0, 1.0, rng.integers(0, 2, size=j - 2).astype(float)]
        x0 = np.r_[0.0, 1.0, rng.integers(0, 2, size=m - 2).astype(float)]
        d = np.r_[np.ones(j, bool), np.zeros(m, bool)]
        y = np.r_[y1, np.full(m, np.nan)]
        sample = Sample(d, y, np.r_[x1, x0][:, None])
    cs = build_constraints(builtin_mean(), sample)
    lo, hi = float(y1.min()), float(y1.max())
    if rng.random() < 0.75:
        p = sample.p_hat
        b = np.array([p * y1.mean() + (1 - p) * rng.uniform(lo, hi)])
    else:
        b = np.array([rng.uniform(lo, hi)])
    return cs, b


@dataclass
class DualityRecord:
    spec: str
    dual: float
    primal: float
    weak_ok: bool
    interior: bool
    gap: float | None
    q_err: float | None


def duality_record(cs, b, spec: DivergenceSpec, restarts: int = 20, seed: int = 0) -> DualityRecord:
    """Solve one instance both ways and compare."""
    try:
        st = nu_hat(cs, spec, b)
        dual = st.value
    except UnboundedDual:
        st, dual = None, math.inf
    sol = discrete_primal(instance_from_constraints(cs, b), spec, restarts=restarts, seed=seed)
    primal = sol.value
    weak_ok = dual <= primal + 1e-8 or not math.isfinite(primal)
    interior = sol.q is not None and float(np.min(sol.q)) > INTERIOR_Q and st is not None
    gap = q_err = None
    if interior:
        gap = abs(primal - dual)
        q_err = float(np.max(np.abs(recovered_density(cs, spec, st) - sol.q)))
    return DualityRecord(spec.name, dual, primal, bool(weak_ok), bool(interior), gap, q_err)


def duality_sweep(n_instances: int, seed: int = 0, specs=BATTERY_DIVERGENCES, restarts: int = 20):
    """Weak/strong duality over random small instances, cycling divergences."""
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n_instances):
        cs, b = random_small_case(rng)
        spec = specs[k % len(specs)]
        try:
            out.append(duality_record(cs, b, spec, restarts=restarts, seed=k))
        except DualError as exc:
            out.append(DualityRecord(spec.name, math.nan, math.nan, False, False, None, repr(exc)))
    return out


@dataclass
class Check:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def to_dict(self):
        d = asdict(self)
        d["value"] = None if not math.isfinite(self.value) else self.value
        return d


def _check(name, value, tol, detail=""):
    return Check(name, float(value), tol, bool(value <= tol), detail)


def run_battery(seed: int = 0, n_instances: int = 60) -> list[Check]:
    """The shipped cross-check battery behind ``oracle-check``."""
    checks = []
    p = np.array([0.5, 0.5])
    checks.append(_check(
        "divergence_between two-atom sq-hellinger",
        abs(divergence_between(SQ_HELLINGER, [0.4, 1.6], p) - 0.0513167019494862), 1e-12,
    ))
    inst = mean_instance([0.0, 1.0], 0.5, 0.65)  # Q-mean 0.8 when p_D = 1/2
    sol = discrete_primal(inst, SQ_HELLINGER)
    checks.append(_check("two-atom primal density", float(np.max(np.abs(sol.q - [0.4, 1.6]))), 1e-6))
    checks.append(_check("two-atom grid vs augmented Lagrangian", abs(sol.grid_value - sol.value), 2e-4))

    lam1, _, kl_val = kl_uniform_dual(0.45, 0.7)
    checks.append(_check("kl closed form FOC residual", kl_uniform_foc_residual(lam1, 0.45, 0.7), 1e-11))
    inst = mean_instance(discretize_uniform(400), 0.7, 0.45)
    checks.append(_check(
        "kl closed form vs 400-atom primal", abs(discrete_primal(inst, KL, restarts=3).value - kl_val), 2e-3,
    ))

    recs = duality_sweep(n_instances, seed)
    weak_bad = sum(not r.weak_ok for r in recs)
    checks.append(_check("weak duality violations", weak_bad, 0, f"{len(recs)} instances"))
    inner = [r for r in recs if r.interior]
    gap = max((r.gap for r in inner), default=0.0)
    qerr = max((r.q_err for r in inner), default=0.0)
    checks.append(_check("strong duality gap (interior instances)", gap, 1e-6, f"{len(inner)} interior"))
    checks.append(_check("recovered density vs oracle", qerr, 1e-5, f"{len(inner)} interior"))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(200):
        joint = rng.dirichlet(np.ones(2 * int(rng.integers(2, 7))))
        a, b = hellinger_from_joint(joint)
        worst = max(worst, abs(a - b))
    checks.append(_check("hellinger variance identity", worst, 1e-12, "200 random joints"))
    return checks
