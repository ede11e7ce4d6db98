"""Regime-conditional short-rate diffusions.

Three model kinds sit behind one interface: mean-reverting Gaussian
(Vasicek), its time-dependent Gaussian generalization (Hull-White with
piecewise-linear coefficient tables), and the square-root diffusion
(CIR).  Each exposes, per regime state i and start rate r0:

  * the transition law of r(t): mean, variance, a discrete quadrature,
    and exact sampling of one step;
  * the law of the integrated rate: mean/variance (Gaussian kinds) and
    the Laplace transform E[exp(-n * int_0^s r)] used as the no-switch
    building block of the renewal solvers;
  * the two-point product moment E[r(s) r(s+h)].

Every operation broadcasts over numpy arrays of start rates so the
lattice solvers can evaluate whole rate grids in one call.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as sp_stats

from .errors import NumericsError

VASICEK = "vasicek"
HULL_WHITE = "hull_white"
CIR = "cir"


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VasicekParams:
    """dr = a (b - r) dt + sigma dW."""

    a: float
    b: float
    sigma: float

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError("mean-reversion speed a must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")


@dataclass(frozen=True)
class CIRParams:
    """dr = (a - b r) dt + sigma sqrt(r) dW; b may be any real."""

    a: float
    b: float
    sigma: float

    def __post_init__(self):
        if self.a < 0 or self.sigma < 0:
            raise ValueError("a and sigma must be nonnegative")
        if self.sigma > 0 and self.feller_ratio < 1.0:
            warnings.warn(
                f"CIR params a={self.a}, sigma={self.sigma}: 2a/sigma^2 = "
                f"{self.feller_ratio:.3f} < 1, the origin is attainable",
                stacklevel=2,
            )

    @property
    def feller_ratio(self) -> float:
        return np.inf if self.sigma == 0 else 2.0 * self.a / self.sigma**2


_GL_ORDER = 24
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


def gl_cumulative(fn, knots, t):
    """int_0^t fn(u) du for each t, by panel-wise Gauss-Legendre.

    fn must be vectorized and smooth between consecutive knots; the
    panel boundaries are the union of the knots and the query times, so
    table kinks never cross a quadrature panel.  Returns floats/arrays
    matching the shape of t.
    """
    t_arr = np.asarray(t, dtype=float)
    flat = np.ravel(t_arr)
    if flat.size == 0:
        return np.zeros_like(t_arr)
    if np.any(flat < 0):
        raise ValueError("gl_cumulative expects nonnegative times")
    bounds = np.unique(np.concatenate([np.asarray(knots, dtype=float), flat, [0.0]]))
    bounds = bounds[(bounds >= 0.0) & (bounds <= flat.max(initial=0.0))]
    if bounds.size < 2:
        out = np.zeros_like(flat)
        return out.reshape(t_arr.shape) if t_arr.ndim else 0.0
    lo = bounds[:-1]
    width = np.diff(bounds)
    nodes = lo[:, None] + width[:, None] * _GL_X[None, :]
    panel = (fn(nodes) * _GL_W[None, :]).sum(axis=1) * width
    cum = np.concatenate([[0.0], np.cumsum(panel)])
    out = np.interp(flat, bounds, cum)  # query times are exact panel boundaries
    return out.reshape(t_arr.shape) if t_arr.ndim else float(out[0])


class PiecewiseLinear:
    """Piecewise-linear function on a knot table, constant beyond the ends,
    with an exact (piecewise quadratic) antiderivative."""

    def __init__(self, ts, vs):
        ts = np.asarray(ts, dtype=float)
        vs = np.asarray(vs, dtype=float)
        if ts.ndim != 1 or ts.shape != vs.shape or ts.size < 1:
            raise ValueError("knot table needs matching 1-d time/value arrays")
        if ts.size > 1 and np.any(np.diff(ts) <= 0):
            raise ValueError("knot times must be strictly increasing")
        if ts[0] != 0.0:
            raise ValueError("knot table must start at t = 0")
        self.ts = ts
        self.vs = vs
        if ts.size > 1:
            seg = 0.5 * (vs[:-1] + vs[1:]) * np.diff(ts)
            self._anti_knots = np.concatenate([[0.0], np.cumsum(seg)])
        else:
            self._anti_knots = np.zeros(1)

    @classmethod
    def constant(cls, value: float) -> "PiecewiseLinear":
        return cls([0.0], [value])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.interp(t, self.ts, self.vs)
        return out if out.ndim else float(out)

    def antiderivative(self, t):
        """Exact int_0^t of the table (constant extension outside)."""
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.ts[0], self.ts[-1])
        idx = np.clip(np.searchsorted(self.ts, tc, side="right") - 1, 0, max(self.ts.size - 2, 0))
        t0 = self.ts[idx]
        v0 = self.vs[idx]
        if self.ts.size > 1:
            slope = (self.vs[idx + 1] - self.vs[idx]) / (self.ts[idx + 1] - self.ts[idx])
        else:
            slope = np.zeros_like(tc)
        dt = tc - t0
        out = self._anti_knots[idx] + v0 * dt + 0.5 * slope * dt * dt
        # beyond the table the function is constant
        out = out + np.where(t > self.ts[-1], (t - self.ts[-1]) * self.vs[-1], 0.0)
        out = out + np.where(t < self.ts[0], (t - self.ts[0]) * self.vs[0], 0.0)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class HullWhiteParams:
    """dr = (alpha(t) - beta(t) r) dt + sigma(t) dW with tabled coefficients.

    Times inside the tables are regime-local: the clock restarts at 0
    whenever the switching process enters the state.
    """

    alpha: PiecewiseLinear
    beta: PiecewiseLinear
    sigma: PiecewiseLinear

    @classmethod
    def from_constants(cls, alpha: float, beta: float, sigma: float) -> "HullWhiteParams":
        return cls(
            PiecewiseLinear.constant(alpha),
            PiecewiseLinear.constant(beta),
            PiecewiseLinear.constant(sigma),
        )

    @property
    def knots(self) -> np.ndarray:
        return np.unique(np.concatenate([self.alpha.ts, self.beta.ts, self.sigma.ts]))

    def k(self, t):
        """Accumulated reversion int_0^t beta(u) du."""
        return self.beta.antiderivative(t)

    def drift_integral(self, t):
        """int_0^t exp(k(u)) alpha(u) du."""
        return gl_cumulative(lambda u: np.exp(self.k(u)) * self.alpha(u), self.knots, t)

    def variance_integral(self, t):
        """int_0^t exp(2 k(u)) sigma(u)^2 du."""
        return gl_cumulative(
            lambda u: np.exp(2.0 * self.k(u)) * self.sigma(u) ** 2, self.knots, t
        )

    def discount_integral(self, t):
        """int_0^t exp(-k(u)) du."""
        return gl_cumulative(lambda u: np.exp(-self.k(u)), self.knots, t)


# ---------------------------------------------------------------------------
# CIR closed forms
# ---------------------------------------------------------------------------

def cir_joint_laplace(params: CIRParams, lam: float, mu: float, t, r0):
    """E[exp(-lam r(t)) exp(-mu int_0^t r)] for the square-root diffusion.

    Evaluated as exp(-a*A(t) - r0*B(t)) with the closed-form exponents
    written in terms of exp(-gamma t), gamma = sqrt(b^2 + 2 sigma^2 mu),
    so large gamma*t never overflows.  The gamma = 0 case (b = 0 and
    mu = 0) uses the analytic limit.  Broadcasts over t and r0.
    """
    if lam < 0 or mu < 0:
        raise ValueError("lam and mu must be nonnegative")
    t = np.asarray(t, dtype=float)
    r0 = np.asarray(r0, dtype=float)
    if np.any(t < 0):
        raise ValueError("t must be nonnegative")
    a, b, sig = params.a, params.b, params.sigma

    if sig == 0.0:
        # deterministic rate: dr = (a - b r) dt
        if b != 0.0:
            e = np.exp(-b * t)
            r_t = a / b + (r0 - a / b) * e
            integral = (a / b) * t + (r0 - a / b) * (1.0 - e) / b
        else:
            r_t = r0 + a * t
            integral = r0 * t + 0.5 * a * t * t
        out = np.exp(-lam * r_t - mu * integral)
        return out if out.ndim else float(out)

    gamma = np.sqrt(b * b + 2.0 * sig * sig * mu)
    if gamma == 0.0:  # b = 0 and mu = 0
        z = 1.0 + 0.5 * sig * sig * lam * t
        exp_a = (2.0 / sig**2) * np.log(z)
        exp_r = lam / z
    else:
        e = np.exp(-gamma * t)
        denom = (sig * sig * lam + gamma + b) + (gamma - b - sig * sig * lam) * e
        exp_r = (lam * (gamma - b) + 2.0 * mu + (lam * (gamma + b) - 2.0 * mu) * e) / denom
        exp_a = -(2.0 / sig**2) * (
            np.log(2.0 * gamma) - 0.5 * t * (gamma - b) - np.log(denom)
        )
    out = np.exp(-a * exp_a - r0 * exp_r)
    # pin the empty integration interval exactly (the closed form only
    # reaches it to rounding)
    out = np.where(t == 0.0, np.exp(-lam * r0) * np.ones_like(out), out)
    if np.any(np.isnan(out)):
        raise NumericsError("CIR Laplace transform produced NaN")
    return out if out.ndim else float(out)


def cir_laplace_rate(params: CIRParams, lam: float, t, r0):
    """Marginal Laplace transform E[exp(-lam r(t))]."""
    return cir_joint_laplace(params, lam, 0.0, t, r0)


def cir_transition_constants(params: CIRParams, dt):
    """(scale c, degrees of freedom, noncentrality per unit r0).

    r(t+dt) | r(t)=r equals c * X with X noncentral chi-square of
    df = 4a/sigma^2 and noncentrality r * e^{-b dt} / c.
    """
    a, b, sig = params.a, params.b, params.sigma
    if sig == 0.0:
        raise ValueError("no chi-square transition for sigma = 0")
    dt = np.asarray(dt, dtype=float)
    if b != 0.0:
        c = sig * sig * -np.expm1(-b * dt) / (4.0 * b)
    else:
        c = sig * sig * dt / 4.0
    df = 4.0 * a / sig**2
    decay = np.exp(-b * dt)
    return c, df, decay


def cir_discounted_transition_constants(params: CIRParams, n: float, t: float):
    """Transition-law constants under the discount tilt exp(-n int_0^t r).

    The measure E[exp(-n I(t)); r(t) in dx] / E[exp(-n I(t))] is again a
    scaled noncentral chi-square with the same degrees of freedom:
    matching its joint Laplace transform in the rate argument gives
    scale ct = C/(2D) and noncentrality r0 * 2(AD - BC)/(C D), with
    A = (g+b)e^{-gt} + (g-b),  B = 2n(1 - e^{-gt}),
    C = s^2 (1 - e^{-gt}),     D = (g-b)e^{-gt} + (g+b),
    g = sqrt(b^2 + 2 s^2 n).  At n = 0 this reduces to the plain
    transition law.  Returns (scale, df, noncentrality per unit r0).
    """
    a, b, sig = params.a, params.b, params.sigma
    if sig == 0.0:
        raise ValueError("no chi-square transition for sigma = 0")
    gamma = np.sqrt(b * b + 2.0 * sig * sig * n)
    e = np.exp(-gamma * t)
    a_c = (gamma + b) * e + (gamma - b)
    b_c = 2.0 * n * (1.0 - e)
    c_c = sig * sig * (1.0 - e)
    d_c = (gamma - b) * e + (gamma + b)
    if t <= 0.0 or c_c == 0.0:
        raise ValueError("tilted constants need t > 0")
    scale = c_c / (2.0 * d_c)
    df = 4.0 * a / sig**2
    nc_coef = 2.0 * (a_c * d_c - b_c * c_c) / (d_c * c_c)
    return scale, df, nc_coef


# ---------------------------------------------------------------------------
# Quadrature of a transition law
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RateQuadrature:
    """Discrete stand-in for the transition law of r(t): sum w_q f(x_q)
    approximates E[f(r(t))].  ``flagged`` marks a degraded fallback rule."""

    nodes: np.ndarray
    weights: np.ndarray
    flagged: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < -1e-12):
            raise ValueError("quadrature weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("quadrature weights must sum to 1")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("quadrature nodes must be finite")

    def mean(self) -> float:
        return float(self.weights @ self.nodes)

    def variance(self) -> float:
        mu = self.mean()
        return float(self.weights @ (self.nodes - mu) ** 2)

    def laplace(self, lam: float) -> float:
        return float(self.weights @ np.exp(-lam * self.nodes))


def gauss_hermite_rule(order: int):
    """Probabilists' Gauss-Hermite rule: nodes/weights for N(0,1)."""
    x, w = np.polynomial.hermite.hermgauss(order)
    return x * np.sqrt(2.0), w / np.sqrt(np.pi)


def gaussian_quadrature_batch(means, stds, order: int):
    """Gauss-Hermite nodes/weights through mean/std arrays.

    means, stds broadcast; returns (nodes, weights) of shape
    broadcast_shape + (order,).  A zero std collapses to the mean with
    all mass on the first node.
    """
    g, w = gauss_hermite_rule(order)
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    nodes = means[..., None] + stds[..., None] * g
    weights = np.broadcast_to(w, nodes.shape).copy()
    zero = stds <= 0.0
    if np.any(zero):
        nodes[zero] = means[zero][..., None]
        weights[zero] = 0.0
        weights[zero, 0] = 1.0
    return nodes, weights


def ncx2_rule_batch(scale: float, df: float, nc, order: int):
    """Quadrature rules against scaled noncentral chi-square laws.

    Gauss-Legendre applied to each density on a wide bracket of its
    support, weights normalized to total mass 1; valid when the density
    is bounded (df >= 2).  nc is the per-row noncentrality; returns
    (nodes, weights) of shape (len(nc), order) in rate units.
    """
    nc = np.atleast_1d(np.asarray(nc, dtype=float))
    mean = scale * (df + nc)
    std = scale * np.sqrt(2.0 * df + 4.0 * nc)

    # bracket tight enough that the rule resolves the density bump:
    # Gauss-Legendre node spacing at mid-interval is ~pi*width/(2*order)
    lo = np.maximum(mean - 10.0 * std, 0.0)
    hi = mean + 12.0 * std
    x, w = np.polynomial.legendre.leggauss(order)
    half = 0.5 * (hi - lo)
    nodes = lo[:, None] + half[:, None] * (x + 1.0)
    with np.errstate(over="ignore"):
        dens = sp_stats.ncx2.pdf(nodes / scale, df, nc[:, None]) / scale
    weights = dens * (half[:, None] * w)
    total = weights.sum(axis=1)
    if np.any(total < 0.999) or np.any(~np.isfinite(total)):
        raise NumericsError(
            "noncentral chi-square quadrature lost probability mass "
            f"(min captured {np.nanmin(total):.6f}); widen the bracket or order"
        )
    weights /= total[:, None]
    return nodes, weights


def cir_quadrature_batch(params: CIRParams, r0, t: float, order: int):
    """Quadrature against the plain CIR transition law, one rule per r0."""
    r0 = np.atleast_1d(np.asarray(r0, dtype=float))
    c, df, decay = cir_transition_constants(params, t)
    return ncx2_rule_batch(float(c), df, r0 * decay / float(c), order)


def _cir_quantile_rule(params: CIRParams, r0: float, t: float, order: int):
    """Equal-probability stratification through the exact quantile
    function; robust when the density blows up at the origin."""
    c, df, decay = cir_transition_constants(params, t)
    c = float(c)
    nc = float(r0) * decay / c
    q = (np.arange(order) + 0.5) / order
    nodes = c * sp_stats.ncx2.ppf(q, df, nc)
    weights = np.full(order, 1.0 / order)
    return nodes, weights


# ---------------------------------------------------------------------------
# The model facade
# ---------------------------------------------------------------------------

class RegimeRateModel:
    """Per-state diffusion parameters plus the analytic operations the
    renewal solvers and the simulator need.  Immutable after construction."""

    def __init__(self, kind: str, params: list):
        if kind not in (VASICEK, HULL_WHITE, CIR):
            raise ValueError(f"unknown model kind {kind!r}")
        self.kind = kind
        self.params = list(params)
        expected = {VASICEK: VasicekParams, HULL_WHITE: HullWhiteParams, CIR: CIRParams}[kind]
        for p in self.params:
            if not isinstance(p, expected):
                raise ValueError(f"{kind} model needs {expected.__name__} entries")

    @classmethod
    def vasicek(cls, params) -> "RegimeRateModel":
        return cls(VASICEK, [p if isinstance(p, VasicekParams) else VasicekParams(**p) for p in params])

    @classmethod
    def hull_white(cls, params) -> "RegimeRateModel":
        return cls(HULL_WHITE, list(params))

    @classmethod
    def cir(cls, params) -> "RegimeRateModel":
        return cls(CIR, [p if isinstance(p, CIRParams) else CIRParams(**p) for p in params])

    @property
    def n_states(self) -> int:
        return len(self.params)

    @property
    def gaussian_transition(self) -> bool:
        return self.kind in (VASICEK, HULL_WHITE)

    @property
    def closed_form_bond_laplace(self) -> bool:
        return True

    def _p(self, i: int):
        return self.params[i]

    # -- transition law ---------------------------------------------------

    def mean(self, i: int, r0, t):
        """E[r(t) | r(0) = r0] in regime i; broadcasts over r0 and t."""
        p = self._p(i)
        r0 = np.asarray(r0, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == VASICEK:
            out = p.b + (r0 - p.b) * np.exp(-p.a * t)
        elif self.kind == CIR:
            if p.b != 0.0:
                e = np.exp(-p.b * t)
                out = p.a / p.b + (r0 - p.a / p.b) * e
            else:
                out = r0 + p.a * t
        else:
            k_t = p.k(t)
            out = np.exp(-k_t) * (r0 + p.drift_integral(t))
        return out if np.ndim(out) else float(out)

    def variance(self, i: int, r0, t):
        """Var[r(t) | r(0) = r0]; zero at t = 0."""
        p = self._p(i)
        t = np.asarray(t, dtype=float)
        if self.kind == VASICEK:
            out = p.sigma**2 / (2.0 * p.a) * -np.expm1(-2.0 * p.a * t)
            out = out * np.ones_like(np.asarray(r0, dtype=float) * np.ones_like(t))
        elif self.kind == CIR:
            r0 = np.asarray(r0, dtype=float)
            if p.b != 0.0:
                e = np.exp(-p.b * t)
                out = (
                    r0 * p.sigma**2 / p.b * (e - e * e)
                    + p.a * p.sigma**2 / (2.0 * p.b**2) * (1.0 - e) ** 2
                )
            else:
                out = r0 * p.sigma**2 * t + 0.5 * p.a * p.sigma**2 * t * t
        else:
            out = np.exp(-2.0 * p.k(t)) * p.variance_integral(t)
            out = out * np.ones_like(np.asarray(r0, dtype=float) * np.ones_like(t))
        return out if np.ndim(out) else float(out)

    def std(self, i: int, r0, t):
        return np.sqrt(self.variance(i, r0, t))

    def mean_decay(self, i: int, s, h):
        """Covariance decay factor: Cov[r(s), r(s+h)] = decay * Var[r(s)]."""
        p = self._p(i)
        s = np.asarray(s, dtype=float)
        h = np.asarray(h, dtype=float)
        if self.kind == VASICEK:
            out = np.exp(-p.a * h) * np.ones_like(s)
        elif self.kind == CIR:
            out = np.exp(-p.b * h) * np.ones_like(s)
        else:
            out = np.exp(-(p.k(s + h) - p.k(s)))
        return out if np.ndim(out) else float(out)

    def product_mean(self, i: int, r0, s, h):
        """E[r(s) r(s+h)] = m(s) m(s+h) + decay(s, h) Var(s).

        Exact for all three kinds: the conditional mean of r(s+h) given
        r(s) is affine with slope decay(s, h), so the tower property
        gives the covariance directly.
        """
        s = np.asarray(s, dtype=float)
        h = np.asarray(h, dtype=float)
        if np.any(s < 0) or np.any(h < 0):
            raise ValueError("s and h must be nonnegative")
        m_s = self.mean(i, r0, s)
        m_sh = self.mean(i, r0, s + h)
        return m_s * m_sh + self.mean_decay(i, s, h) * self.variance(i, r0, s)

    # -- integrated rate ----------------------------------------------------

    def integrated_mean(self, i: int, r0, s):
        """E[int_0^s r(u) du]."""
        p = self._p(i)
        s = np.asarray(s, dtype=float)
        r0 = np.asarray(r0, dtype=float)
        if self.kind == VASICEK:
            out = p.b * s + (r0 - p.b) / p.a * -np.expm1(-p.a * s)
        elif self.kind == CIR:
            raise NotImplementedError(
                "integrated-rate mean is not exposed for the CIR kind; "
                "bond_laplace carries the integrated law"
            )
        else:
            disc = p.discount_integral(s)
            drift = gl_cumulative(
                lambda u: np.exp(-p.k(u)) * p.drift_integral(u), p.knots, s
            )
            out = r0 * disc + drift
        return out if np.ndim(out) else float(out)

    def integrated_rate_cov(self, i: int, r0, t):
        """Cov[int_0^t r(u) du, r(t)] for the Gaussian kinds.

        This is the cross term of the joint normal law of the
        integrated and the terminal rate; the discount-tilted
        transition measure used by the moment solver shifts the
        terminal-rate mean by -n times this quantity.
        """
        p = self._p(i)
        t = np.asarray(t, dtype=float)
        if self.kind == VASICEK:
            x = -np.expm1(-p.a * t)
            out = p.sigma**2 * x * x / (2.0 * p.a**2)
        elif self.kind == CIR:
            raise NotImplementedError(
                "CIR handles the discount tilt through its own chi-square "
                "constants, not a Gaussian covariance"
            )
        else:
            cum = gl_cumulative(
                lambda u: np.exp(-p.k(u)) * p.variance_integral(u), p.knots, t
            )
            out = np.exp(-p.k(t)) * cum
        return out if np.ndim(out) else float(out)

    def integrated_variance(self, i: int, r0, s):
        """Var[int_0^s r(u) du]; independent of r0 for the Gaussian kinds."""
        p = self._p(i)
        s = np.asarray(s, dtype=float)
        if self.kind == VASICEK:
            x = -np.expm1(-p.a * s)
            out = (
                p.sigma**2 * s / p.a**2
                - p.sigma**2 / p.a**3 * x
                - p.sigma**2 / (2.0 * p.a**3) * x * x
            )
        elif self.kind == CIR:
            raise NotImplementedError(
                "integrated-rate variance is not exposed for the CIR kind"
            )
        else:
            # int_0^s e^{2k} sigma^2 (D(s) - D(u))^2 du expanded so every
            # piece is one cumulative integral queried at all maturities
            def base(u, power):
                return np.exp(2.0 * p.k(u)) * p.sigma(u) ** 2 \
                    * p.discount_integral(u) ** power

            d_s = p.discount_integral(s)
            a0 = gl_cumulative(lambda u: base(u, 0), p.knots, s)
            a1 = gl_cumulative(lambda u: base(u, 1), p.knots, s)
            a2 = gl_cumulative(lambda u: base(u, 2), p.knots, s)
            out = d_s * d_s * a0 - 2.0 * d_s * a1 + a2
        return out if np.ndim(out) else float(out)

    def bond_laplace(self, i: int, r0, n: int, s):
        """E[exp(-n int_0^s r(u) du)], the no-switch discount block.

        Gaussian kinds: the integrated rate is normal, so the value is
        exp(-n * mean + n^2/2 * variance) of the integral.  CIR: the
        joint Laplace transform at (lam=0, mu=n).
        """
        if n < 1 or int(n) != n:
            raise ValueError("moment order n must be a positive integer")
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("s must be nonnegative")
        if self.kind == CIR:
            return cir_joint_laplace(self._p(i), 0.0, float(n), s, r0)
        exponent = -n * self.integrated_mean(i, r0, s) + 0.5 * n * n * self.integrated_variance(i, r0, s)
        out = np.exp(exponent)
        if np.any(np.isnan(np.asarray(out))):
            raise NumericsError("bond Laplace transform produced NaN")
        return out

    # -- quadrature and sampling -------------------------------------------

    def quadrature(self, i: int, r0: float, t: float, order: int) -> RateQuadrature:
        """Discrete measure matching the transition law of r(t) from r0."""
        if order < 1:
            raise ValueError("order must be >= 1")
        if t < 0:
            raise ValueError("t must be nonnegative")
        p = self._p(i)
        if self.gaussian_transition:
            m = self.mean(i, r0, t)
            sd = float(np.sqrt(self.variance(i, r0, t)))
            nodes, weights = gaussian_quadrature_batch(np.array([m]), np.array([sd]), order)
            return RateQuadrature(nodes[0], weights[0])
        # CIR
        if p.sigma == 0.0 or t == 0.0:
            return RateQuadrature(
                np.full(order, self.mean(i, r0, t)),
                np.concatenate([[1.0], np.zeros(order - 1)]),
            )
        if p.feller_ratio >= 1.0 and order >= 32:
            try:
                nodes, weights = cir_quadrature_batch(p, np.array([r0]), t, order)
                return RateQuadrature(nodes[0], weights[0])
            except NumericsError:
                pass
        # quantile stratification: robust for low orders and for an
        # attainable origin, where the density rule cannot be trusted
        nodes, weights = _cir_quantile_rule(p, r0, t, order)
        return RateQuadrature(nodes, weights, flagged=p.feller_ratio < 1.0)

    def step(self, i: int, r, dt: float, rng: np.random.Generator, t0: float = 0.0):
        """Exact draw of r(t0+dt) given r(t0) = r; vectorized over r.

        t0 is the regime-local start time; it only matters for the
        time-dependent Hull-White coefficients.  Gaussian kinds draw
        from the normal transition law, CIR from the scaled noncentral
        chi-square, so composing steps is bias-free at any step size.
        """
        if dt < 0:
            raise ValueError("dt must be nonnegative")
        r = np.asarray(r, dtype=float)
        if dt == 0.0:
            return r.copy() if r.ndim else float(r)
        p = self._p(i)
        if self.kind == VASICEK:
            mean = p.b + (r - p.b) * np.exp(-p.a * dt)
            sd = np.sqrt(p.sigma**2 / (2.0 * p.a) * -np.expm1(-2.0 * p.a * dt))
            out = mean + sd * rng.standard_normal(r.shape if r.ndim else None)
        elif self.kind == HULL_WHITE:
            k0, k1 = p.k(t0), p.k(t0 + dt)
            mean = np.exp(-k1) * (
                np.exp(k0) * r + p.drift_integral(t0 + dt) - p.drift_integral(t0)
            )
            var = np.exp(-2.0 * k1) * (p.variance_integral(t0 + dt) - p.variance_integral(t0))
            out = mean + np.sqrt(max(var, 0.0)) * rng.standard_normal(r.shape if r.ndim else None)
        else:
            out = cir_exact_step(p, r, dt, rng)
        return out if np.ndim(out) else float(out)

    def long_run_mean(self, i: int) -> float | None:
        p = self._p(i)
        if self.kind == VASICEK:
            return p.b
        if self.kind == CIR:
            return p.a / p.b if p.b > 0 else None
        return None

    def long_run_std(self, i: int) -> float | None:
        p = self._p(i)
        if self.kind == VASICEK:
            return p.sigma / np.sqrt(2.0 * p.a)
        if self.kind == CIR:
            return np.sqrt(p.a * p.sigma**2 / (2.0 * p.b**2)) if p.b > 0 else None
        return None


def cir_exact_step(params: CIRParams, r, dt: float, rng: np.random.Generator):
    """One exact CIR transition draw; vectorized over r, never negative."""
    r = np.asarray(r, dtype=float)
    if params.sigma == 0.0:
        if params.b != 0.0:
            out = params.a / params.b + (r - params.a / params.b) * np.exp(-params.b * dt)
        else:
            out = r + params.a * dt
        return out
    c, df, decay = cir_transition_constants(params, dt)
    c = float(c)
    nc = r * decay / c
    if df > 0:
        draw = rng.noncentral_chisquare(df, np.maximum(nc, 0.0), size=r.shape if r.ndim else None)
    else:
        # df = 0: Poisson mixture of central chi-squares with mass at 0
        k = rng.poisson(np.maximum(nc, 0.0) / 2.0, size=r.shape if r.ndim else None)
        k = np.atleast_1d(k)
        draw = np.zeros(k.shape)
        pos = k > 0
        if pos.any():
            draw[pos] = rng.chisquare(2.0 * k[pos])
        if not r.ndim:
            draw = draw[0]
    return c * draw
