"""Moduli of continuity: Dini integrals, the partial mean-oscillation modulus, and the
geometric-series transform with its closed-form integral bound.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .grid import Ball, Field, GridError, ScalarField
from .reports import EstimateReport


class ModulusError(ValueError):
    pass


DEFAULT_RADII = np.logspace(-12, 0, 241)


@dataclass(frozen=True, eq=False)
class Modulus:
    """Nonnegative function r -> omega(r) on (0, 1], sampled at increasing radii.

    Between samples omega is linear in log r; below the first sample it decays
    linearly to 0; beyond the last sample it is held constant. When ``func`` is
    given it is the exact omega and the samples only serve tabulation.
    """

    radii: np.ndarray
    values: np.ndarray
    func: Callable[[np.ndarray], np.ndarray] | None = None
    _dini: dict = field(default_factory=dict, repr=False)  # memo of varpi(t) for analytic moduli

    def __post_init__(self):
        r = np.array(self.radii, dtype=float)
        v = np.array(self.values, dtype=float)
        if r.ndim != 1 or r.shape != v.shape or r.size < 1:
            raise ModulusError("radii and values must be 1-D of equal length")
        if np.any(np.diff(r) <= 0) or r[0] <= 0 or r[-1] > 1:
            raise ModulusError("radii must increase strictly within (0, 1]")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ModulusError("modulus values must be finite and nonnegative")
        r.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, func, radii: Sequence[float] | None = None) -> "Modulus":
        r = DEFAULT_RADII if radii is None else np.asarray(radii, dtype=float)
        return cls(r, np.asarray(func(r), dtype=float), func)

    @classmethod
    def zero(cls, radii: Sequence[float] | None = None) -> "Modulus":
        return cls.from_function(lambda r: np.zeros_like(np.asarray(r, dtype=float)), radii)

    @property
    def analytic(self) -> bool:
        return self.func is not None

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        if self.func is not None:
            return np.asarray(self.func(r), dtype=float) * np.ones_like(r)
        r1, rk = self.radii[0], self.radii[-1]
        x = np.log(np.clip(r, r1, rk))
        out = np.interp(x, np.log(self.radii), self.values)
        return np.where(r < r1, self.values[0] * r / r1, out)

    def sup(self) -> float:
        return float(max(self.values.max(), float(self(1.0))))

    def scaled(self, s: float) -> "Modulus":
        f = None if self.func is None else (lambda r, g=self.func: s * np.asarray(g(r)))
        return Modulus(self.radii, s * self.values, f)


def _check_t(t):
    if not t > 0:
        raise ModulusError(f"t must be positive, got {t}")
    if t > 1 + 1e-12:
        raise ModulusError(f"t must not exceed 1, got {t}")


def _sampled_integral(m: Modulus, lo: float, hi: float) -> float:
    """Exact integral of omega(s)/s over [lo, hi] for the sampled interpolant."""
    r1, rk = m.radii[0], m.radii[-1]
    total = 0.0
    if lo < r1:
        total += m.values[0] * (min(hi, r1) - lo) / r1
    a, b = max(lo, r1), min(hi, rk)
    if b > a:
        x = np.log(m.radii)
        inner = (x > math.log(a)) & (x < math.log(b))
        xs = np.concatenate(([math.log(a)], x[inner], [math.log(b)]))
        ys = np.interp(xs, x, m.values)
        # omega is linear in log s, so the trapezoid rule in log s is exact
        total += float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(xs)))
    if hi > rk:
        total += m.values[-1] * math.log(hi / max(lo, rk))
    return float(total)


def varpi_partial(m: Modulus, lo: float, hi: float) -> float:
    """Integral of omega(s)/s over [lo, hi], 0 <= lo <= hi <= 1."""
    if lo < 0 or hi < lo:
        raise ModulusError(f"need 0 <= lo <= hi, got [{lo}, {hi}]")
    if hi == lo:
        return 0.0
    if m.func is None:
        return _sampled_integral(m, lo, hi)
    if lo == 0 and hi in m._dini:
        return m._dini[hi]
    f = m.func
    g = lambda x: float(f(math.exp(x)))
    xlo = -math.inf if lo == 0 else math.log(lo)
    val, _ = integrate.quad(g, xlo, math.log(hi), limit=400, epsabs=1e-14, epsrel=1e-12)
    if lo == 0:
        m._dini[hi] = float(val)
    return float(val)


def varpi(m: Modulus, t: float) -> float:
    """Dini integral of omega(s)/s over (0, t]."""
    _check_t(t)
    return varpi_partial(m, 0.0, t)


def phi(m: Modulus, t: float) -> float:
    _check_t(t)
    return varpi(m, t) + float(m(t))


DINI, NON_DINI, INCONCLUSIVE = "dini", "non_dini", "inconclusive"


def dini_classify(m: Modulus, bins: int = 12) -> str:
    """Heuristic Dini test from the decay of Dini-integral increments over log-radius bins.

    Increments shrinking at a steady exponential rate in log r point to a
    convergent integral; a rate that is near zero, or collapsing towards zero,
    points to divergence. This is evidence from finitely many samples, never proof.
    """
    if m.radii.size < 8:
        raise ModulusError("dini_classify needs at least 8 sampled radii")
    x = np.log(m.radii)
    nb = min(bins, m.radii.size - 1)
    edges = np.linspace(x[-1], x[0], nb + 1)
    step = (x[-1] - x[0]) / nb
    inc = np.array([_sampled_integral(m, math.exp(edges[k + 1]), math.exp(edges[k])) if m.func is None
                    else varpi_partial(m, math.exp(edges[k + 1]), math.exp(edges[k]))
                    for k in range(nb)])
    if np.all(inc <= 1e-300):
        return DINI
    rates = []
    for k in range(nb - 1):
        if inc[k] <= 1e-300:
            continue
        rates.append(math.inf if inc[k + 1] <= 1e-300 else -math.log(inc[k + 1] / inc[k]) / step)
    rates = np.array(rates)
    if rates.size < 3:
        return INCONCLUSIVE
    third = max(rates.size // 3, 1)
    head = float(np.median(rates[:third]))
    tail = float(np.median(rates[-third:]))
    if tail >= 0.1 and tail >= 0.5 * head:
        return DINI
    if tail < 0.05 or (tail < 0.1 and tail < 0.5 * head):
        return NON_DINI
    return INCONCLUSIVE


@dataclass(frozen=True)
class TransformParams:
    a: float
    b: float
    terms: int | None = None

    def __post_init__(self):
        if not (0 < self.a < 1 < self.b):
            raise ModulusError(f"need 0 < a < 1 < b, got a={self.a}, b={self.b}")
        need = self.min_terms(self.a)
        if self.terms is None:
            object.__setattr__(self, "terms", need)
        elif self.terms < need:
            raise ModulusError(f"{self.terms} terms leave a tail above 1e-12; need {need}")

    @staticmethod
    def min_terms(a: float) -> int:
        return math.ceil(math.log(1e12) / math.log(1 / a))

    @property
    def gamma(self) -> float:
        return -math.log(self.a) / math.log(self.b)

    def i0(self, t: float) -> int:
        """Largest i with b^i t <= 1."""
        return math.floor(-math.log(t) / math.log(self.b) + 1e-12)


def _transform(m: Modulus, p: TransformParams, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    w1 = float(m(1.0))
    out = np.zeros_like(s)
    for i in range(p.terms):
        bs = p.b ** i * s
        inside = bs <= 1
        out += p.a ** i * np.where(inside, m(np.where(inside, bs, 1.0)), w1)
    return out


def transform_modulus(m: Modulus, p: TransformParams, t: float) -> float:
    """Truncated series sum_i a^i (omega(b^i t) [b^i t <= 1] + omega(1) [b^i t > 1])."""
    _check_t(t)
    return float(_transform(m, p, np.array([t]))[0])


def transform_tail_bound(m: Modulus, p: TransformParams) -> float:
    """Bound on the series terms dropped by truncation."""
    return p.a ** p.terms * m.sup() / (1 - p.a)


_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


def transform_integral(m: Modulus, p: TransformParams, t: float) -> tuple[float, float]:
    """Integral of the transformed modulus over (0, t] against ds/s, with an error bar.

    Gauss-Legendre in log s between the breakpoints of the series (and of the
    sampled interpolant); the part below t b^-I is integrated term by term.
    """
    _check_t(t)
    lb = math.log(p.b)
    xt = math.log(t)
    x_min = xt - p.terms * lb
    breaks = [-i * lb for i in range(p.terms + 1)]
    if m.func is None:
        knots = np.log(m.radii)
        breaks += list((knots[None, :] - lb * np.arange(p.terms + 1)[:, None]).ravel())
    pts = np.unique(np.clip(np.array(breaks + [x_min, xt]), x_min, xt))
    lo, hi = pts[:-1], pts[1:]
    keep = hi - lo > 1e-15
    lo, hi = lo[keep], hi[keep]
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    nodes = (mid[:, None] + half[:, None] * _GL_X[None, :]).ravel()
    weights = (half[:, None] * _GL_W[None, :]).ravel()
    body = float(np.sum(weights * _transform(m, p, np.exp(nodes))))
    s_min = math.exp(x_min)
    # below s_min every index i < I has b^i s <= 1
    head = sum(p.a ** i * varpi_partial(m, 0.0, min(p.b ** i * s_min, 1.0)) for i in range(p.terms))
    total = body + head
    w1, v1 = float(m(1.0)), varpi(m, 1.0)
    tail = sum(p.a ** i * (v1 + w1 * max(i * lb + xt, 0.0)) for i in range(p.terms, p.terms + 400))
    return total, tail + 1e-12 * abs(total)


def lemma21_rhs(m: Modulus, p: TransformParams, t: float) -> float:
    """(1/(1-a)) [varpi(t) + a varpi(1) + omega(1) t^gamma / gamma]."""
    g = p.gamma
    return (varpi(m, t) + p.a * varpi(m, 1.0) + float(m(1.0)) * t ** g / g) / (1 - p.a)


def lemma21_bound_check(m: Modulus, p: TransformParams, t: float) -> EstimateReport:
    lhs, err = transform_integral(m, p, t)
    rhs = lemma21_rhs(m, p, t)
    slack = err / rhs if rhs > 0 else 0.0
    rep = EstimateReport("transform_integral_bound", (t,), t, max(lhs, 0.0), rhs, slack,
                         {"a": p.a, "b": p.b, "gamma": p.gamma, "error_bar": err})
    if rhs == 0 and lhs <= err:
        rep.lhs = 0.0
    return rep


def estimate_pdmo_modulus(f: ScalarField, ball: Ball, radii: Sequence[float], stride: int = 1) -> Modulus:
    """Partial mean-oscillation modulus of ``f`` with respect to x' = (x_1, ..., x_{n-1}).

    For each r, the sup over centres x in ``ball`` (every ``stride``-th cell) of the
    average over B_r(x) of |f(y) - avg of f over {|z' - x'| < r} at height y_n|.
    """
    grid = f.grid
    n, h = grid.n, grid.h
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or radii.size == 0 or np.any(radii <= 0) or np.any(radii > 1):
        raise ModulusError("radii must lie in (0, 1]")
    if np.any(radii <= h):
        raise ModulusError(f"radius {radii.min():g} is below grid resolution h = {h:g}")
    if not grid.ball_interior(ball, margin=float(radii.max())):
        raise ModulusError("ball plus largest radius leaves the grid; margin violated")
    mask = grid.ball_mask(ball)
    if stride > 1:
        sub = np.zeros_like(mask)
        sub[tuple(slice(None, None, stride) for _ in range(n))] = True
        mask &= sub
    centers = np.argwhere(mask)
    if centers.size == 0:
        raise GridError("ball contains no cell centres")
    lo_c, hi_c = centers.min(axis=0), centers.max(axis=0)
    F = f.values
    values = []
    for r in radii:
        k = math.ceil(r / h) - 1
        while (k + 1) * h < r:
            k += 1
        if np.any(lo_c - k < 0) or np.any(hi_c + k >= np.array(grid.dims)):
            raise ModulusError(f"radius {r:g} reaches outside the grid from the sampled centres")
        rng = np.arange(-k, k + 1)
        offs = np.array(np.meshgrid(*([rng] * n), indexing="ij")).reshape(n, -1).T
        d2 = (offs ** 2).sum(axis=1) * h * h
        ball_offs = offs[d2 < r * r]
        slice_offs = np.unique(ball_offs[:, :-1], axis=0)
        slice_offs = slice_offs[(slice_offs ** 2).sum(axis=1) * h * h < r * r]
        # slice averages on the window of layers touched by the balls
        win = tuple(slice(lo_c[d], hi_c[d] + 1) for d in range(n - 1)) + (slice(lo_c[-1] - k, hi_c[-1] + k + 1),)
        base = F[win]
        acc = np.zeros_like(base)
        for so in slice_offs:
            sl = tuple(slice(lo_c[d] + so[d], hi_c[d] + 1 + so[d]) for d in range(n - 1)) + (win[-1],)
            acc += F[sl] - base
        S = base + acc / len(slice_offs)
        ci = tuple(centers[:, d] - lo_c[d] for d in range(n - 1))
        total = np.zeros(len(centers))
        for off in ball_offs:
            y = tuple(centers[:, d] + off[d] for d in range(n))
            s_idx = ci + (centers[:, -1] + off[-1] - (lo_c[-1] - k),)
            total += np.abs(F[y] - S[s_idx])
        values.append(float((total / len(ball_offs)).max()))
    return Modulus(radii, np.array(values))


def estimate_field_modulus(field: Field, ball: Ball, radii: Sequence[float], stride: int = 1) -> Modulus:
    """Entrywise maximum of the scalar moduli of a vector or matrix field."""
    vals = field.values
    comps = vals.reshape(field.grid.dims + (-1,))
    best = None
    for c in range(comps.shape[-1]):
        mod = estimate_pdmo_modulus(ScalarField(field.grid, comps[..., c]), ball, radii, stride)
        best = mod.values if best is None else np.maximum(best, mod.values)
    return Modulus(np.asarray(radii, dtype=float), best)


def holder_modulus_bound(C: float, alpha: float) -> Modulus:
    """The bound 2 C r^alpha for data Hoelder-continuous in x' with constant C."""
    return Modulus.from_function(lambda r: 2 * C * np.asarray(r, dtype=float) ** alpha)


def modulus_rows(m: Modulus) -> list[tuple[float, float, float, float]]:
    return [(float(r), float(w), varpi(m, float(r)), phi(m, float(r))) for r, w in zip(m.radii, m.values)]


def write_modulus_csv(path, m: Modulus) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("r", "omega", "varpi", "phi"))
        for row in modulus_rows(m):
            w.writerow([f"{v:.17g}" for v in row])


def read_modulus_csv(path) -> Modulus:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return Modulus(np.array([float(r["r"]) for r in rows]), np.array([float(r["omega"]) for r in rows]))
