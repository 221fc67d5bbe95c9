"""f-divergences and the convex-conjugate calculus used by the dual problem.

Every function here is vectorised over numpy arrays. Values outside an
effective domain are returned as ``+inf`` (IEEE infinity is the extended
real), never as a finite sentinel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

KINDS = ("sq-hellinger", "kl", "reverse-kl", "cressie-read")


class DomainError(ValueError):
    """A conjugate derivative was requested outside (l*, u*)."""


@dataclass(frozen=True)
class DivergenceSpec:
    """An f-divergence identified by its kind (and gamma for Cressie-Read).

    Cressie-Read effective domains are derived per gamma: for gamma < 1 the
    conjugate argument is bounded above by 1/(1-gamma); for gamma > 1 the
    conjugate is finite everywhere but flat (constant -1/gamma) below
    -1/(gamma-1), so that point is reported as the lower end l*.
    """

    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown divergence kind {self.kind!r}")
        if self.kind == "cressie-read":
            if self.gamma is None or not math.isfinite(self.gamma):
                raise ValueError("cressie-read needs a finite gamma")
            if self.gamma in (0.0, 1.0):
                alt = "reverse-kl" if self.gamma == 0.0 else "kl"
                raise ValueError(
                    f"cressie-read gamma={self.gamma:g} is a removable singularity; use {alt!r}"
                )
        elif self.gamma is not None:
            raise ValueError(f"{self.kind} takes no gamma")

    @property
    def name(self) -> str:
        if self.kind == "cressie-read":
            return f"cressie-read:{self.gamma:g}"
        return self.kind

    @property
    def primal_domain(self) -> tuple[float, float]:
        """Interior (l, u) of dom(f)."""
        return (0.0, math.inf)

    @property
    def conjugate_domain(self) -> tuple[float, float]:
        """Open interval (l*, u*) on which f* is finite and strictly convex."""
        if self.kind == "sq-hellinger":
            return (-math.inf, 0.5)
        if self.kind == "kl":
            return (-math.inf, math.inf)
        if self.kind == "reverse-kl":
            return (-math.inf, 1.0)
        g = self.gamma
        if g < 1.0:
            return (-math.inf, 1.0 / (1.0 - g))
        return (-1.0 / (g - 1.0), math.inf)

    @property
    def upper_conj(self) -> float:
        return self.conjugate_domain[1]

    @property
    def divergence_sup(self) -> float:
        """f(0) + lim f(t)/t: no Q << P has d_f(Q || P) at or above this.

        Finite only for squared Hellinger (1) and Cressie-Read with
        0 < gamma < 1 (1/(gamma(1-gamma))).
        """
        if self.kind == "sq-hellinger":
            return 1.0
        if self.kind == "cressie-read" and 0.0 < self.gamma < 1.0:
            return 1.0 / (self.gamma * (1.0 - self.gamma))
        return math.inf

    # -- primal side ------------------------------------------------------

    def f(self, t):
        t = np.asarray(t, dtype=float)
        out = np.full(t.shape, np.inf)
        pos = t > 0
        tp = t[pos]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "sq-hellinger":
                out[pos] = 0.5 * (np.sqrt(tp) - 1.0) ** 2
                out[t == 0] = 0.5
            elif self.kind == "kl":
                out[pos] = tp * np.log(tp) - tp + 1.0
                out[t == 0] = 1.0
            elif self.kind == "reverse-kl":
                out[pos] = -np.log(tp) + tp - 1.0
            else:
                g = self.gamma
                out[pos] = (tp**g - g * tp + g - 1.0) / (g * (g - 1.0))
                out[t == 0] = 1.0 / g if g > 0 else np.inf
        return out[()] if out.ndim == 0 else out

    def f_d1(self, t):
        """f'(t) on the open domain t > 0."""
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "sq-hellinger":
                out = 0.5 * (1.0 - 1.0 / np.sqrt(t))
            elif self.kind == "kl":
                out = np.log(t)
            elif self.kind == "reverse-kl":
                out = 1.0 - 1.0 / t
            else:
                g = self.gamma
                out = (t ** (g - 1.0) - 1.0) / (g - 1.0)
        return out

    def f_d2(self, t):
        t = np.asarray(t, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            if self.kind == "sq-hellinger":
                out = 0.25 * t**-1.5
            elif self.kind == "kl":
                out = 1.0 / t
            elif self.kind == "reverse-kl":
                out = 1.0 / t**2
            else:
                out = t ** (self.gamma - 2.0)
        return out

    # -- conjugate side ---------------------------------------------------

    def conj(self, r):
        """f*(r); +inf at and beyond u*."""
        r = np.asarray(r, dtype=float)
        u = self.upper_conj
        inside = r < u
        out = np.full(r.shape, np.inf)
        ri = r[inside]
        with np.errstate(over="ignore"):
            if self.kind == "sq-hellinger":
                out[inside] = ri / (1.0 - 2.0 * ri)
            elif self.kind == "kl":
                out[inside] = np.expm1(ri)
            elif self.kind == "reverse-kl":
                out[inside] = -np.log1p(-ri)
            else:
                g = self.gamma
                s = (g - 1.0) * ri + 1.0
                val = np.full(ri.shape, -1.0 / g)
                live = s > 0
                val[live] = (s[live] ** (g / (g - 1.0)) - 1.0) / g
                out[inside] = val
        return out[()] if out.ndim == 0 else out

    def _check(self, r):
        r = np.asarray(r, dtype=float)
        lo, hi = self.conjugate_domain
        bad = r >= hi
        if self.kind != "cressie-read" or self.gamma < 1.0:
            bad |= r <= lo
        if np.any(bad) or np.any(np.isnan(r)):
            raise DomainError(f"{self.name}: dual argument outside ({lo}, {hi})")
        return r

    def conj_d1(self, r):
        """(f*)'(r), the primal density implied by dual argument r."""
        r = self._check(r)
        with np.errstate(over="ignore"):
            if self.kind == "sq-hellinger":
                return 1.0 / (1.0 - 2.0 * r) ** 2
            if self.kind == "kl":
                return np.exp(r)
            if self.kind == "reverse-kl":
                return 1.0 / (1.0 - r)
            g = self.gamma
            s = np.maximum((g - 1.0) * r + 1.0, 0.0)
            return s ** (1.0 / (g - 1.0))

    def conj_d2(self, r):
        r = self._check(r)
        with np.errstate(over="ignore"):
            if self.kind == "sq-hellinger":
                return 4.0 / (1.0 - 2.0 * r) ** 3
            if self.kind == "kl":
                return np.exp(r)
            if self.kind == "reverse-kl":
                return 1.0 / (1.0 - r) ** 2
            g = self.gamma
            s = (g - 1.0) * r + 1.0
            out = np.zeros_like(s)
            live = s > 0
            out[live] = s[live] ** ((2.0 - g) / (g - 1.0))
            return out


SQ_HELLINGER = DivergenceSpec("sq-hellinger")
KL = DivergenceSpec("kl")
REVERSE_KL = DivergenceSpec("reverse-kl")


def cressie_read(gamma: float) -> DivergenceSpec:
    return DivergenceSpec("cressie-read", float(gamma))


def parse_divergence(name: str) -> DivergenceSpec:
    """Parse ``sq-hellinger | kl | reverse-kl | cressie-read:<gamma>``."""
    if name.startswith("cressie-read:"):
        try:
            gamma = float(name.split(":", 1)[1])
        except ValueError:
            raise ValueError(f"bad cressie-read gamma in {name!r}") from None
        return cressie_read(gamma)
    if name in ("sq-hellinger", "kl", "reverse-kl"):
        return DivergenceSpec(name)
    raise ValueError(f"unknown divergence {name!r}")


def f_value(spec: DivergenceSpec, t):
    return spec.f(t)


def conj_value(spec: DivergenceSpec, r):
    return spec.conj(r)


def conj_d1(spec: DivergenceSpec, r):
    return spec.conj_d1(r)


def conj_d2(spec: DivergenceSpec, r):
    return spec.conj_d2(r)


def divergence_between(spec: DivergenceSpec, q, p, atol: float = 1e-10) -> float:
    """d_f(Q || P) for a density ``q`` of Q with respect to the finite P ``p``."""
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape != p.shape:
        raise ValueError("q and p must have the same shape")
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError("p must be a probability vector")
    if abs(float(np.dot(q, p)) - 1.0) > atol:
        raise ValueError("q does not integrate to one against p")
    live = p > 0
    vals = spec.f(q[live])
    if np.any(np.isinf(vals)):
        return math.inf
    return float(np.dot(p[live], vals))
