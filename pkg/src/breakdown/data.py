"""Samples with partially missing outcomes, CSV I/O, and identified bounds."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class DataError(ValueError):
    """Input data violates the CSV schema or the sampling assumptions."""


class SupportError(DataError):
    """An X support cell is observed in only one of the D groups."""


@dataclass(frozen=True, eq=False)
class Sample:
    """Observations ``(d_i, d_i y_i, x_i)``.

    ``y`` holds NaN on incomplete rows. Categorical X columns are stored as
    integer codes into ``x_levels[j]``; numeric columns have ``x_levels[j]``
    set to ``None``.
    """

    d: np.ndarray
    y: np.ndarray
    x: np.ndarray
    x_levels: tuple = field(default=())

    def __post_init__(self):
        d = np.asarray(self.d, dtype=bool).ravel()
        n = d.shape[0]
        y = np.asarray(self.y, dtype=float).reshape(n, -1)
        x = np.asarray(self.x, dtype=float).reshape(n, -1) + 0.0  # folds -0.0 into 0.0
        levels = tuple(self.x_levels) or (None,) * x.shape[1]
        if len(levels) != x.shape[1]:
            raise DataError("x_levels does not match the number of X columns")
        if n == 0:
            raise DataError("empty sample")
        n1 = int(d.sum())
        if n1 == 0 or n1 == n:
            raise DataError("need both complete and incomplete rows (0 < p_hat < 1)")
        if np.isnan(y[d]).any():
            raise DataError("complete row with missing y")
        if not np.isnan(y[~d]).all():
            raise DataError("incomplete row carries y data")
        if np.isnan(x).any():
            raise DataError("x must be observed on every row")
        for a in (d, y, x):
            a.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "x_levels", levels)

    @property
    def n(self) -> int:
        return self.d.shape[0]

    @property
    def d_y(self) -> int:
        return self.y.shape[1]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @cached_property
    def n1(self) -> int:
        return int(self.d.sum())

    @property
    def p_hat(self) -> float:
        return self.n1 / self.n

    @cached_property
    def y1(self) -> np.ndarray:
        return np.ascontiguousarray(self.y[self.d])

    @cached_property
    def x1(self) -> np.ndarray:
        return np.ascontiguousarray(self.x[self.d])

    @cached_property
    def x0(self) -> np.ndarray:
        return np.ascontiguousarray(self.x[~self.d])

    @cached_property
    def support(self) -> np.ndarray:
        """Distinct X rows, sorted lexicographically, shape (K, d_x)."""
        if self.d_x == 0:
            return np.empty((0, 0))
        return np.unique(self.x, axis=0)

    def cell_index(self, x: np.ndarray) -> np.ndarray:
        """Index of each row of ``x`` into ``support`` (-1 when absent)."""
        return _match_rows(self.support, x)

    def same(self, other: "Sample") -> bool:
        """Bit-level equality of the stored arrays and level labels."""
        return (
            self.x_levels == other.x_levels
            and np.array_equal(self.d, other.d)
            and self.y.shape == other.y.shape
            and self.y.tobytes() == other.y.tobytes()
            and self.x.shape == other.x.shape
            and self.x.tobytes() == other.x.tobytes()
        )


def _match_rows(support: np.ndarray, x: np.ndarray) -> np.ndarray:
    if support.shape[0] == 0:
        return np.full(x.shape[0], -1, dtype=np.int64)
    # exact bit-level comparison of the encoded rows
    key_s = np.ascontiguousarray(support).view(np.dtype((np.void, support.dtype.itemsize * support.shape[1]))).ravel()
    key_x = np.ascontiguousarray(x).view(np.dtype((np.void, x.dtype.itemsize * x.shape[1]))).ravel()
    order = np.argsort(key_s)
    pos = np.searchsorted(key_s[order], key_x)
    pos = np.clip(pos, 0, len(key_s) - 1)
    idx = order[pos]
    idx[key_s[idx] != key_x] = -1
    return idx


def check_support(sample: Sample) -> None:
    """Raise SupportError unless every X cell appears in both D groups."""
    if sample.d_x == 0:
        return
    cells = sample.cell_index(sample.x)
    K = sample.support.shape[0]
    in1 = np.bincount(cells[sample.d], minlength=K) > 0
    in0 = np.bincount(cells[~sample.d], minlength=K) > 0
    if not (in1.all() and in0.all()):
        bad = np.flatnonzero(~(in1 & in0))
        raise SupportError(
            f"{len(bad)} X support cell(s) observed in only one D group, e.g. {sample.support[bad[0]].tolist()}"
        )


# -- CSV ------------------------------------------------------------------


def _numbered(header, prefix):
    cols = sorted(
        (int(h[len(prefix):]), i) for i, h in enumerate(header)
        if h.startswith(prefix) and h[len(prefix):].isdigit()
    )
    if [k for k, _ in cols] != list(range(1, len(cols) + 1)):
        raise DataError(f"columns {prefix}1..{prefix}k must be contiguous")
    return [i for _, i in cols]


def load_csv(path, mode: str = "full") -> Sample:
    """Read a sample from CSV with columns ``d, y1..y{k}, x1..x{m}``.

    In ``full`` mode numeric X columns must be integer valued and every X
    cell must occur among both complete and incomplete rows.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError("empty file")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if "d" not in header:
        raise DataError("missing column 'd'")
    di = header.index("d")
    yi = _numbered(header, "y")
    xi = _numbered(header, "x")
    if not yi:
        raise DataError("need at least one y column")
    n = len(body)
    d = np.empty(n, dtype=bool)
    y = np.full((n, len(yi)), np.nan)
    raw_x = []
    for r, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DataError(f"line {r}: expected {len(header)} cells, got {len(row)}")
        cell = row[di].strip()
        if cell not in ("0", "1"):
            raise DataError(f"line {r}: d must be 0 or 1, got {cell!r}")
        d[r - 2] = cell == "1"
        for j, c in enumerate(yi):
            v = row[c].strip()
            if d[r - 2]:
                if v == "":
                    raise DataError(f"line {r}: complete row with missing y{j + 1}")
                try:
                    y[r - 2, j] = float(v)
                except ValueError:
                    raise DataError(f"line {r}: unparseable y{j + 1} cell {v!r}") from None
                if not math.isfinite(y[r - 2, j]):
                    raise DataError(f"line {r}: non-finite y{j + 1}")
            elif v != "":
                raise DataError(f"line {r}: incomplete row (d=0) has y{j + 1} data")
        xs = [row[c].strip() for c in xi]
        if any(v == "" for v in xs):
            raise DataError(f"line {r}: x cells are always required")
        raw_x.append(xs)

    x = np.empty((n, len(xi)))
    levels = []
    for j in range(len(xi)):
        col = [rx[j] for rx in raw_x]
        try:
            vals = np.array([float(v) for v in col])
        except ValueError:
            vals = None
        if vals is not None and np.isfinite(vals).all():
            if mode == "full" and not np.all(vals == np.round(vals)):
                raise DataError(f"x{j + 1}: non-integer numeric levels are not valid categories")
            x[:, j] = vals
            levels.append(None)
        else:
            labs = sorted(set(col))
            code = {s: k for k, s in enumerate(labs)}
            x[:, j] = [code[v] for v in col]
            levels.append(tuple(labs))
    sample = Sample(d, y, x, tuple(levels))
    if mode == "full":
        check_support(sample)
    return sample


def _fmt_x(v: float) -> str:
    return str(int(v)) if v == int(v) and abs(v) < 2**53 else repr(v)


def write_csv(sample: Sample, path) -> None:
    header = ["d"] + [f"y{j + 1}" for j in range(sample.d_y)] + [f"x{j + 1}" for j in range(sample.d_x)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(sample.n):
            row = ["1" if sample.d[i] else "0"]
            row += [repr(float(v)) if sample.d[i] else "" for v in sample.y[i]]
            for j, v in enumerate(sample.x[i]):
                labs = sample.x_levels[j]
                row.append(labs[int(v)] if labs is not None else _fmt_x(float(v)))
            w.writerow(row)


# -- estimation on the complete cases -----------------------------------------


class ConvergenceError(RuntimeError):
    pass


def mcar_estimate(sample: Sample, model, b0=None, tol: float = 1e-10, max_iter: int = 200) -> np.ndarray:
    """Complete-case GMM estimate: Newton root of the complete-case moments.

    Uses step halving on the moment norm.
    """
    if model.d_g != model.d_b:
        raise ValueError("complete-case estimate requires an exactly identified model")
    y1, x1 = sample.y1, sample.x1
    b = np.zeros(model.d_b) if b0 is None else np.asarray(b0, dtype=float).copy()

    def moments(b):
        return model.g(y1, x1, b).mean(axis=0)

    m = moments(b)
    for _ in range(max_iter):
        norm = np.linalg.norm(m)
        if norm <= tol:
            return b
        jac = model.grad_b_g(y1, x1, b).mean(axis=0)
        try:
            step = np.linalg.solve(jac, -m)
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"singular complete-case Jacobian at b={b.tolist()}") from None
        t = 1.0
        while t > 1e-12:
            b_new = b + t * step
            m_new = moments(b_new)
            if np.linalg.norm(m_new) < norm:
                break
            t *= 0.5
        else:
            if norm <= 100 * tol:
                return b
            raise ConvergenceError("line search failed in complete-case Newton")
        b, m = b_new, m_new
    if np.linalg.norm(m) <= tol:
        return b
    raise ConvergenceError(f"complete-case Newton did not converge in {max_iter} iterations")


# -- squared Hellinger ------------------------------------------------------


def x_marginals(sample: Sample):
    """Empirical P(X = x_k | D = 0) and P(X = x_k | D = 1) over the support."""
    cells = sample.cell_index(sample.x)
    K = sample.support.shape[0]
    p0 = np.bincount(cells[~sample.d], minlength=K) / (sample.n - sample.n1)
    p1 = np.bincount(cells[sample.d], minlength=K) / sample.n1
    return p0, p1


def one_group_cells(sample: Sample) -> int:
    """Number of X cells observed in exactly one of the two groups."""
    p0, p1 = x_marginals(sample)
    return int(np.sum((p0 > 0) != (p1 > 0)))


def hellinger_lower_bound(sample: Sample) -> float | None:
    """Plug-in H^2(P_0X, P_1X); ``None`` when the sample has no X columns.

    Cells empty in one group contribute zero to the Bhattacharyya sum;
    ``one_group_cells`` counts them.
    """
    if sample.d_x == 0:
        return None
    p0, p1 = x_marginals(sample)
    bc = float(np.sum(np.sqrt(p0 * p1)))
    return min(max(1.0 - bc, 0.0), 1.0)


def hellinger_from_joint(joint) -> tuple[float, float]:
    """Both sides of the variance identity for a finite joint of (Z, D).

    ``joint[k, d]`` is P(Z = z_k, D = d). Returns
    ``(H^2(P_0, P_1), 1 - E[sqrt(Var(D|Z))] / sqrt(Var(D)))``.
    """
    joint = np.asarray(joint, dtype=float)
    joint = joint.reshape(-1, 2)
    if abs(joint.sum() - 1.0) > 1e-12 or np.any(joint < 0):
        raise ValueError("joint must be a probability table")
    pz = joint.sum(axis=1)
    if np.any(pz <= 0):
        raise ValueError("every z must carry positive mass")
    p1 = joint[:, 1].sum()
    if not 0.0 < p1 < 1.0:
        raise ValueError("need 0 < P(D=1) < 1")
    direct = 1.0 - np.sum(np.sqrt(joint[:, 0] / (1 - p1) * joint[:, 1] / p1))
    pi = joint[:, 1] / pz
    via_var = 1.0 - np.sum(pz * np.sqrt(pi * (1 - pi))) / math.sqrt(p1 * (1 - p1))
    return float(direct), float(via_var)
