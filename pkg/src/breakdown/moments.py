"""GMM moment models, hypothesis regions, and the stacked constraint system.

Moment functions are vectorised: ``g(y, x, b)`` takes row arrays ``y`` of
shape (n, d_y) and ``x`` of shape (n, d_x) and returns (n, d_g);
``grad_b_g`` returns (n, d_g, d_b).

Columns are referenced by name: ``"y1"``, ``"x2"``, or ``"1"`` for a
constant.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .data import Sample, _match_rows, check_support

MODES = ("full", "conservative", "x-empty")


@dataclass(frozen=True)
class MomentModel:
    name: str
    d_b: int
    d_g: int
    g: Callable
    grad_b_g: Callable
    columns: tuple = ()
    # Sum_i w_i * grad_b g_i^T lam, shape (d_b,); avoids materialising the
    # full (n, d_g, d_b) Jacobian on large samples.
    vjp: Callable | None = field(default=None, compare=False)

    def weighted_vjp(self, y, x, b, w, lam):
        if self.vjp is not None:
            return self.vjp(y, x, b, w, lam)
        return np.einsum("i,ijk,j->k", w, self.grad_b_g(y, x, b), lam)

    def scaled(self, kappa: float) -> "MomentModel":
        """Same model with g multiplied by ``kappa``."""
        g, dg, vjp = self.g, self.grad_b_g, self.vjp
        return MomentModel(
            name=f"{self.name}*{kappa:g}",
            d_b=self.d_b,
            d_g=self.d_g,
            g=lambda y, x, b: kappa * g(y, x, b),
            grad_b_g=lambda y, x, b: kappa * dg(y, x, b),
            columns=self.columns,
            vjp=None if vjp is None else (lambda y, x, b, w, lam: kappa * vjp(y, x, b, w, lam)),
        )


def _column(y, x, ref: str) -> np.ndarray:
    if ref == "1":
        return np.ones(y.shape[0])
    kind, idx = ref[0], int(ref[1:]) - 1
    if kind == "y":
        return y[:, idx]
    if kind == "x":
        return x[:, idx]
    raise ValueError(f"bad column reference {ref!r}")


def _stack(y, x, refs) -> np.ndarray:
    return np.column_stack([_column(y, x, r) for r in refs])


class _LastStack:
    """Memo of the last (y, x) -> column stacks; the outer loop reuses one sample."""

    def __init__(self, build):
        self.build = build
        self.key = self.val = None

    def __call__(self, y, x):
        if self.key is None or self.key[0] is not y or self.key[1] is not x:
            # holding y and x keeps their ids from being recycled
            self.key, self.val = (y, x), self.build(y, x)
        return self.val


def _check_refs(refs):
    for r in refs:
        if r != "1" and not (len(r) > 1 and r[0] in "xy" and r[1:].isdigit() and int(r[1:]) >= 1):
            raise ValueError(f"bad column reference {r!r}")


def builtin_mean(column: str = "y1") -> MomentModel:
    """Mean of one column: g(y, b) = y - b."""
    _check_refs([column])

    def g(y, x, b):
        return (_column(y, x, column) - b[0])[:, None]

    def grad(y, x, b):
        return np.full((y.shape[0], 1, 1), -1.0)

    def vjp(y, x, b, w, lam):
        return np.array([-lam[0] * w.sum()])

    return MomentModel("mean", 1, 1, g, grad, (column,), vjp)


def builtin_linear_iv(outcome: str, regressors: Sequence[str], instruments: Sequence[str] | None = None) -> MomentModel:
    """Linear IV moments (y - x1'b) * x2; OLS when instruments == regressors."""
    regressors = tuple(regressors)
    instruments = regressors if instruments is None else tuple(instruments)
    _check_refs((outcome,) + regressors + instruments)
    if len(instruments) < len(regressors):
        raise ValueError("need at least as many instruments as regressors")

    parts = _LastStack(lambda y, x: (_column(y, x, outcome), _stack(y, x, regressors), _stack(y, x, instruments)))

    def g(y, x, b):
        yv, x1, x2 = parts(y, x)
        return (yv - x1 @ b)[:, None] * x2

    def grad(y, x, b):
        _, x1, x2 = parts(y, x)
        return -x2[:, :, None] * x1[:, None, :]

    def vjp(y, x, b, w, lam):
        _, x1, x2 = parts(y, x)
        return -(w * (x2 @ lam)) @ x1

    name = "ols" if instruments == regressors else "linear-iv"
    return MomentModel(name, len(regressors), len(instruments), g, grad, (outcome,) + regressors + instruments, vjp)


def builtin_logit(outcome: str, regressors: Sequence[str]) -> MomentModel:
    """Logit score moments (z1 - Lambda(w'b)) * w."""
    regressors = tuple(regressors)
    _check_refs((outcome,) + regressors)

    parts = _LastStack(lambda y, x: (_column(y, x, outcome), _stack(y, x, regressors)))

    def g(y, x, b):
        z1, w = parts(y, x)
        return (z1 - expit(w @ b))[:, None] * w

    def grad(y, x, b):
        w = parts(y, x)[1]
        lam = expit(w @ b)
        s = lam * (1.0 - lam)
        return -s[:, None, None] * w[:, :, None] * w[:, None, :]

    def vjp(y, x, b, wt, lam_g):
        w = parts(y, x)[1]
        lam = expit(w @ b)
        return -(wt * lam * (1.0 - lam) * (w @ lam_g)) @ w

    return MomentModel("logit", len(regressors), len(regressors), g, grad, (outcome,) + regressors, vjp)


def check_model_columns(model: MomentModel, sample: Sample) -> None:
    for ref in model.columns:
        if ref == "1":
            continue
        k = int(ref[1:])
        width = sample.d_y if ref[0] == "y" else sample.d_x
        if k > width:
            raise ValueError(f"model {model.name} references {ref} but the sample has {width} {ref[0]} column(s)")
        if ref[0] == "x" and sample.x_levels[k - 1] is not None:
            raise ValueError(f"{ref} is categorical and cannot enter the moment function")


# -- hypotheses -------------------------------------------------------------


class EmptyRegionError(ValueError):
    """The search region B intersected with the null region is empty."""


@dataclass(frozen=True)
class Hypothesis:
    """Box B = prod [lo_k, hi_k] and null region {b : A b <= c}."""

    box: np.ndarray
    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        box = np.asarray(self.box, dtype=float).reshape(-1, 2)
        A = np.asarray(self.A, dtype=float).reshape(-1, box.shape[0])
        c = np.asarray(self.c, dtype=float).ravel()
        if not np.all(np.isfinite(box)) or np.any(box[:, 0] > box[:, 1]):
            raise ValueError("box bounds must be finite with lo <= hi")
        if A.shape[0] != c.shape[0]:
            raise ValueError("null constraints: a and c disagree in count")
        object.__setattr__(self, "box", box)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @property
    def d_b(self) -> int:
        return self.box.shape[0]

    @classmethod
    def from_dict(cls, spec: dict, d_b: int | None = None) -> "Hypothesis":
        box = spec["box"]
        null = spec.get("null", [])
        A = [row["a"] for row in null]
        c = [row["c"] for row in null]
        d = len(box) if box is not None else d_b
        return cls(box, np.asarray(A, dtype=float).reshape(-1, d), c)

    def to_dict(self) -> dict:
        return {
            "box": self.box.tolist(),
            "null": [{"a": a.tolist(), "c": float(c)} for a, c in zip(self.A, self.c)],
        }

    def with_box(self, box) -> "Hypothesis":
        return Hypothesis(box, self.A, self.c)

    def contains(self, b, tol: float = 1e-12) -> bool:
        b = np.asarray(b, dtype=float)
        if b.shape != (self.d_b,):
            return False
        in_box = np.all(b >= self.box[:, 0] - tol) and np.all(b <= self.box[:, 1] + tol)
        return bool(in_box and np.all(self.A @ b <= self.c + tol))

    def is_empty(self) -> bool:
        if self.A.shape[0] == 0:
            return False
        res = linprog(
            np.zeros(self.d_b), A_ub=self.A, b_ub=self.c,
            bounds=[tuple(r) for r in self.box], method="highs",
        )
        return res.status != 0

    def project(self, b, tol: float = 1e-15, max_iter: int = 100_000) -> np.ndarray:
        """Euclidean projection onto B and the null half-spaces (cyclic Dykstra)."""
        x = np.asarray(b, dtype=float).copy()
        sets = 1 + self.A.shape[0]
        incs = np.zeros((sets, self.d_b))
        norms = np.einsum("ij,ij->i", self.A, self.A)
        for _ in range(max_iter):
            x_old = x.copy()
            for k in range(sets):
                z = x + incs[k]
                if k == 0:
                    x_new = np.clip(z, self.box[:, 0], self.box[:, 1])
                else:
                    a, c = self.A[k - 1], self.c[k - 1]
                    viol = a @ z - c
                    x_new = z - (viol / norms[k - 1]) * a if viol > 0 else z
                incs[k] = z - x_new
                x = x_new
            # x can sit still for whole cycles while the increments move,
            # so a stationary iterate only counts once it is feasible
            if np.max(np.abs(x - x_old)) <= tol and self.contains(x, tol=1e-12):
                break
        return x

    def random_points(self, rng: np.random.Generator, k: int) -> np.ndarray:
        """``k`` points drawn uniformly in B and projected onto B n B0."""
        raw = rng.uniform(self.box[:, 0], self.box[:, 1], size=(k, self.d_b))
        return np.array([self.project(p) for p in raw]).reshape(k, self.d_b)


def null_boundary_check(hyp: Hypothesis, b) -> bool:
    """True iff ``b`` lies in B n B0 up to 1e-12."""
    return hyp.contains(b, tol=1e-12)


# -- constraint system --------------------------------------------------------


class ConstraintSystem:
    """The stacked moments h(y, x, b) = (g; extra(x)) and their target c(b).

    ``extra`` depends on the mode: X-cell indicators (``full``), standardised
    X and a constant (``conservative``), or a constant (``x-empty``).
    """

    def __init__(self, model: MomentModel, sample: Sample, mode: str, support=None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        check_model_columns(model, sample)
        self.model = model
        self.sample = sample
        self.mode = mode
        self.p_hat = sample.p_hat
        if mode == "full":
            if sample.d_x == 0:
                raise ValueError("full-support mode needs X columns; use x-empty")
            if support is None:
                support = sample.support
            else:
                support = np.asarray(support, dtype=float).reshape(-1, sample.d_x) + 0.0
                if np.unique(support, axis=0).shape[0] != support.shape[0]:
                    raise ValueError("support contains duplicate cells")
            if support.shape[0] == 0:
                raise ValueError("empty support")
            check_support(sample)
            self.support = support
            self._x_mean = self._x_sd = None
        elif mode == "conservative":
            if sample.d_x == 0:
                raise ValueError("conservative mode needs X columns; use x-empty")
            self.support = None
            self._x_mean = sample.x1.mean(axis=0)
            sd = sample.x1.std(axis=0)
            self._x_sd = np.where(sd > 0, sd, 1.0)
        else:
            self.support = None
            self._x_mean = self._x_sd = None
        self.extra1 = self.extra(sample.x1)
        extra0 = self.extra(sample.x0)
        self.c_extra = extra0.mean(axis=0)
        self._extra0 = extra0

    @property
    def K(self) -> int:
        return self.support.shape[0] if self.mode == "full" else 0

    @property
    def n_extra(self) -> int:
        return self.extra1.shape[1]

    @property
    def dim(self) -> int:
        return self.model.d_g + self.n_extra

    def extra(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        n = x.shape[0]
        x = x.reshape(n, self.sample.d_x)
        if self.mode == "full":
            idx = _match_rows(self.support, x)
            out = np.zeros((n, self.support.shape[0]))
            ok = idx >= 0
            out[np.flatnonzero(ok), idx[ok]] = 1.0
            return out
        if self.mode == "conservative":
            return np.column_stack([(x - self._x_mean) / self._x_sd, np.ones(n)])
        return np.ones((n, 1))

    def h(self, y, x, b) -> np.ndarray:
        """h(y, x, b) for arbitrary rows."""
        y = np.asarray(y, dtype=float)
        y = y.reshape(y.shape[0], self.sample.d_y)
        x = np.asarray(x, dtype=float).reshape(y.shape[0], self.sample.d_x)
        return np.hstack([self.model.g(y, x, np.asarray(b, dtype=float)), self.extra(x)])

    def h_and_c(self, b) -> tuple[np.ndarray, np.ndarray]:
        """``(h_complete(b), c_hat(b))`` from one evaluation of g; h is column-major."""
        g = self.model.g(self.sample.y1, self.sample.x1, np.asarray(b, dtype=float))
        dg = self.model.d_g
        h = np.empty((g.shape[0], self.dim), order="F")
        h[:, :dg] = g
        h[:, dg:] = self.extra1
        p = self.p_hat
        return h, np.concatenate([-p / (1.0 - p) * g.mean(axis=0), self.c_extra])

    def h_complete(self, b) -> np.ndarray:
        return self.h_and_c(b)[0]

    def c_hat(self, b) -> np.ndarray:
        """Sample target: (-p/(1-p) * complete-case mean of g, mean of extra over D=0)."""
        return self.h_and_c(b)[1]

    def jh(self, b) -> np.ndarray:
        """Rows J(D_i) h(D_i Y_i, X_i, b), shape (n, dim), in sample order."""
        s = self.sample
        out = np.zeros((s.n, self.dim))
        dg = self.model.d_g
        out[s.d, :dg] = -self.model.g(s.y1, s.x1, np.asarray(b, dtype=float))
        out[~s.d, dg:] = self._extra0
        return out


def build_constraints(model: MomentModel, sample: Sample, mode: str | None = None, support=None) -> ConstraintSystem:
    """Wire h and c for ``sample``; mode defaults to full, or x-empty without X."""
    if mode is None:
        mode = "full" if sample.d_x > 0 else "x-empty"
    return ConstraintSystem(model, sample, mode, support)
