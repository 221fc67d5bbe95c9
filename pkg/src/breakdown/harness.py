"""Data-generating processes and Monte Carlo studies for the three
simulation designs (uniform mean, linear regression, logit).

Every draw comes from a Philox counter-based generator keyed by
``(seed, replication)``, so replication r produces the same sample no
matter which worker runs it or in what order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .data import Sample, mcar_estimate
from .divergence import SQ_HELLINGER, DivergenceSpec, parse_divergence
from .dual import DualError
from .inference import EstimateOptions, EstimationError, InferenceError, attach_inference, estimate_breakdown
from .moments import Hypothesis, MomentModel, build_constraints, builtin_linear_iv, builtin_logit, builtin_mean

LOGIT_YBAR = (-0.35, -0.25, 0.5)
LOGIT_BETA = (1.0, -1.0, 0.1)
LOGIT_OMEGA = ((1.0, 0.5, -0.1), (0.5, 1.0, 0.3), (-0.1, 0.3, 1.0))
LINEAR_BETA = (1.0, 1.0, 1.0, 0.5)
LINEAR_X2_PROBS = (0.4, 0.25, 0.35)


def rng_for(seed: int, replication: int | None = None) -> np.random.Generator:
    key = [int(seed)] if replication is None else [int(seed), int(replication)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def dgp_uniform_mean(n: int, seed: int, replication: int | None = None, p_d: float = 0.7) -> Sample:
    """D ~ Bernoulli(p_d) independent of Y ~ U[0, 1]; no X."""
    rng = rng_for(seed, replication)
    d = rng.random(n) < p_d
    y = rng.random(n)
    return Sample(d, np.where(d, y, np.nan), np.zeros((n, 0)))


def dgp_linear(n: int, seed: int, replication: int | None = None) -> Sample:
    """Wage-equation design: Y = (Y1, Y2) missing when D = 0, X = (X1, X2)."""
    rng = rng_for(seed, replication)
    x2 = rng.choice(3, size=n, p=LINEAR_X2_PROBS).astype(float)
    x1 = (rng.random(n) < (x2 + 1.0) / 4.0).astype(float)
    y2 = rng.beta(3.0 - x1, 3.0)
    eps = (x1 + 1.0) * rng.uniform(-1.0, 1.0, size=n)
    b0, b1, b2, b3 = LINEAR_BETA
    y1 = b0 + b1 * x1 + b2 * y2 + b3 * x2 + eps
    eta = rng.normal(-5.0, 15.0, size=n)
    d = eps * x1 + 10.0 * x1 + 5.0 * (x2 - 1.0) > eta
    y = np.column_stack([y1, y2])
    y[~d] = np.nan
    return Sample(d, y, np.column_stack([x1, x2]))


def dgp_logit(n: int, seed: int, replication: int | None = None) -> Sample:
    """Gaussian-copula regressors on [-1, 1]^3 (missing when D = 0), binary
    outcome X always observed."""
    rng = rng_for(seed, replication)
    chol = np.linalg.cholesky(np.array(LOGIT_OMEGA))
    y = 2.0 * (ndtr(rng.standard_normal((n, 3)) @ chol.T) - 0.5)
    index = y @ np.array(LOGIT_BETA)
    x = (rng.random(n) < 1.0 / (1.0 + np.exp(-index))).astype(float)
    p_obs = np.maximum(0.8 - x, y[:, 2] / 2.0 + 0.5)
    d = rng.random(n) < p_obs
    y[~d] = np.nan
    return Sample(d, y, x[:, None])


@dataclass(frozen=True)
class Design:
    name: str
    dgp: Callable[..., Sample]
    model: Callable[[], MomentModel]
    hypothesis: Callable[[np.ndarray], Hypothesis]
    mode: str
    divergence: DivergenceSpec = SQ_HELLINGER


def _box_around(center, half_width):
    c = np.asarray(center, dtype=float)
    return np.column_stack([c - half_width, c + half_width])


def _uniform_hyp(b_mcar):
    return Hypothesis([[0.0, 1.0]], [[1.0]], [0.4])


def _linear_hyp(b_mcar, half_width=2.0):
    return Hypothesis(_box_around(b_mcar, half_width), [[0.0, 1.0, 0.0, 0.0]], [0.0])


def _logit_hyp(b_mcar, half_width=2.0):
    return Hypothesis(_box_around(b_mcar, half_width), [list(LOGIT_YBAR)], [0.0])


DESIGNS = {
    "uniform-mean": Design("uniform-mean", dgp_uniform_mean, builtin_mean, _uniform_hyp, "x-empty"),
    "linear": Design(
        "linear", dgp_linear, lambda: builtin_linear_iv("y1", ["1", "x1", "y2", "x2"]), _linear_hyp, "full"
    ),
    "logit": Design("logit", dgp_logit, lambda: builtin_logit("x1", ["y1", "y2", "y3"]), _logit_hyp, "full"),
}

# delta_hat at n = 10^6, seed 20240601, from scripts/compute_truth.py
TRUTH_SEED = 20240601
TRUTH = {
    "uniform-mean": 0.20067936065238956,
    "linear": None,
    "logit": 0.1074268517047435,
}


def get_design(name: str) -> Design:
    try:
        return DESIGNS[name]
    except KeyError:
        raise ValueError(f"unknown design {name!r}; choose from {sorted(DESIGNS)}") from None


def draw(design: str, n: int, seed: int, replication: int | None = None) -> Sample:
    return get_design(design).dgp(n, seed, replication)


def estimate_design(sample: Sample, design: str, divergence: DivergenceSpec | None = None,
                    opts: EstimateOptions | None = None, alpha: float = 0.05):
    """Point estimate plus inference for a sample from one of the designs."""
    des = get_design(design)
    model = des.model()
    b_mcar = mcar_estimate(sample, model)
    hyp = des.hypothesis(b_mcar)
    cs = build_constraints(model, sample, des.mode)
    spec = divergence or des.divergence
    res = estimate_breakdown(sample, model, cs, spec, hyp, opts, b_mcar=b_mcar)
    try:
        attach_inference(res, cs, spec, alpha)
    except InferenceError:
        pass
    return res


@dataclass(frozen=True)
class StudyConfig:
    design: str
    n: int
    replications: int = 200
    alpha: float = 0.05
    seed: int = 0
    truth: float | None = None
    divergence: str = "sq-hellinger"
    n_starts: int = 2
    n_audit: int = 50
    threads: int = 1

    def __post_init__(self):
        get_design(self.design)
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if self.n < 50:
            raise ValueError("n must be at least 50")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def effective_truth(self) -> float:
        t = self.truth if self.truth is not None else TRUTH.get(self.design)
        if t is None:
            raise ValueError(f"no stored truth for design {self.design!r}; pass truth explicitly")
        return float(t)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("threads")
        out["truth"] = self.effective_truth
        return out


@dataclass
class StudySummary:
    mean_bias: float | None
    sd: float | None
    mean_ci_length: float | None
    coverage: float | None
    mean_delta_hat: float | None
    completed: int
    failed: int
    failures: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def run_replication(cfg: StudyConfig, rep: int) -> dict:
    """One replication; never raises for numerical failures."""
    sample = draw(cfg.design, cfg.n, cfg.seed, rep)
    opts = EstimateOptions(n_starts=cfg.n_starts, n_audit=cfg.n_audit, seed=rep)
    row = {"replication": rep, "delta_hat": None, "ci_lower": None, "sigma_hat": None, "error": None}
    try:
        res = estimate_design(sample, cfg.design, parse_divergence(cfg.divergence), opts, cfg.alpha)
    except (DualError, EstimationError, np.linalg.LinAlgError, ArithmeticError) as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
        return row
    row["delta_hat"] = res.delta_hat
    row["sigma_hat"] = res.sigma_hat
    row["ci_lower"] = res.ci_lower
    if res.ci_lower is None:
        row["error"] = "inference refused: singular Jacobian"
    return row


def _rep_worker(args):
    cfg, rep = args
    return run_replication(cfg, rep)


def summarize(rows, truth: float, config: dict | None = None) -> StudySummary:
    ok = [r for r in rows if r["error"] is None]
    failures = [{"replication": r["replication"], "error": r["error"]} for r in rows if r["error"] is not None]
    if not ok:
        return StudySummary(None, None, None, None, None, 0, len(failures), failures, config or {})
    est = np.array([r["delta_hat"] for r in ok])
    ci = np.array([r["ci_lower"] for r in ok])
    sd = float(np.std(est, ddof=1)) if est.size > 1 else 0.0
    return StudySummary(
        mean_bias=float(np.mean(est) - truth),
        sd=sd,
        mean_ci_length=float(np.mean(est - ci)),
        coverage=float(np.mean(ci <= truth)),
        mean_delta_hat=float(np.mean(est)),
        completed=len(ok),
        failed=len(failures),
        failures=failures,
        config=config or {},
    )


def run_study(cfg: StudyConfig, progress: Callable[[int, int], None] | None = None, rows_out: list | None = None) -> StudySummary:
    """Run ``cfg.replications`` independent replications and aggregate.

    Rows are reduced in replication order, so the summary is identical for
    any ``cfg.threads``. ``rows_out`` (if given) receives per-replication rows.
    """
    truth = cfg.effective_truth
    jobs = [(cfg, r) for r in range(cfg.replications)]
    if cfg.threads <= 1:
        rows = []
        for k, job in enumerate(jobs):
            rows.append(_rep_worker(job))
            if progress:
                progress(k + 1, len(jobs))
    else:
        with ProcessPoolExecutor(max_workers=cfg.threads) as pool:
            rows = list(pool.map(_rep_worker, jobs, chunksize=max(1, len(jobs) // (4 * cfg.threads))))
    if rows_out is not None:
        rows_out.extend(rows)
    return summarize(rows, truth, cfg.to_dict())


def logit_index_mcar(b_mcar) -> float:
    """Lambda(ybar' b) at the complete-case estimate."""
    t = float(np.dot(LOGIT_YBAR, b_mcar))
    return 1.0 / (1.0 + math.exp(-t))
