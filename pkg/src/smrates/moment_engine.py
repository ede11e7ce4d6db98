"""Forward-marched renewal solvers for the modulated-rate moments.

Three quantities satisfy Volterra equations of the second kind in the
time-to-maturity variable s, coupled across regime states and across a
lattice of start rates x:

  * the n-th moment of the discount factor exp(-n int_0^s delta);
  * the first moment of the rate delta(s) itself;
  * the lagged product moment E[delta(s) delta(s+h)].

Each is solved with zero initial age ("backward-zero") on a
(state, s-node, x-node) lattice by trapezoidal time marching.  The
unknown at the current node enters the quadrature endpoint at elapsed
time 0 with weight h/2, so every step solves one fixed m x m linear
system per rate node; the opposite endpoint is supplied analytically
from the known initial condition.  Inner integrals over the arriving
rate use the model's transition-law quadratures, scattered onto the
lattice as linear-interpolation weights ("transfer operators") that are
prebuilt per (state, elapsed time) and shared across quantities.

Evaluating at a positive initial age u is a single quadrature pass over
the stored backward-zero surface that mirrors the solver's
discretization term by term, so the u = 0 case reproduces lattice
values exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sp_stats

from .errors import DegenerateBackwardError, GridCoverageError, NumericsError
from .rate_models import (
    CIR,
    RegimeRateModel,
    cir_discounted_transition_constants,
    cir_transition_constants,
    gaussian_quadrature_batch,
    ncx2_rule_batch,
)
from .semi_markov import SemiMarkovKernel, TimeGrid

# floor on the Gauss-Legendre order for chi-square transition rules; below
# this the rule cannot resolve the density bump inside its bracket
_CIR_MIN_ORDER = 48

ZCB_MOMENT = "zcb_moment"
RATE_MEAN = "rate_mean"
PRODUCT_MOMENT = "product_moment"


# ---------------------------------------------------------------------------
# Configuration and result containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverConfig:
    """Discretization knobs shared by the three solvers.

    The rate lattice either uses explicit bounds or is sized
    automatically from the per-state transition moments (padded by
    ``grid_pad`` standard deviations) around ``reference_rate``, which
    must be covered because surfaces get evaluated there.
    ``coverage_tol`` bounds the transition-law mass allowed to leak off
    the lattice from its core nodes; ``mc_step`` is the path step used
    by Monte Carlo cross-checks driven from the same config.
    """

    step: float = 0.01
    horizon: float = 2.0
    rate_nodes: int = 81
    quad_order: int = 24
    reference_rate: float = 0.03
    rate_lo: float | None = None
    rate_hi: float | None = None
    grid_pad: float = 8.0
    coverage_tol: float = 1e-5
    mc_step: float = 0.01

    def __post_init__(self):
        if self.step <= 0 or self.horizon <= 0:
            raise ValueError("step and horizon must be positive")
        if self.rate_nodes < 2:
            raise ValueError("need at least two rate nodes")
        if self.quad_order < 1:
            raise ValueError("quad_order must be >= 1")
        TimeGrid(self.step, self.horizon)  # validates divisibility

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.step, self.horizon)


@dataclass
class MomentSurface:
    """Backward-zero solution on the (state, s-node, x-node) lattice.

    quantity is "zcb_moment" (with ``order`` n), "rate_mean", or
    "product_moment" (with ``lag`` h).  values[i, k, p] holds the
    quantity started in state i at rate x_nodes[p] for time-to-maturity
    s_nodes[k]; reads interpolate linearly in x and s and refuse to
    extrapolate.
    """

    quantity: str
    s_nodes: np.ndarray
    x_nodes: np.ndarray
    values: np.ndarray
    order: int | None = None
    lag: float | None = None
    meta: dict = field(default_factory=dict)
    workspace: "LatticeWorkspace | None" = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise NumericsError(f"{self.quantity} surface contains non-finite values")
        if self.values.shape != (self.values.shape[0], self.s_nodes.size, self.x_nodes.size):
            raise ValueError("surface value block does not match its grids")

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    @property
    def step(self) -> float:
        return float(self.s_nodes[1] - self.s_nodes[0])

    def check_rate(self, x: float):
        if x < self.x_nodes[0] - 1e-12 or x > self.x_nodes[-1] + 1e-12:
            raise GridCoverageError(
                f"rate {x} lies outside the lattice "
                f"[{self.x_nodes[0]:.6g}, {self.x_nodes[-1]:.6g}]; "
                "extrapolation is refused"
            )

    def value(self, i: int, s: float, x: float) -> float:
        """Bilinear lattice read at (state, maturity, start rate)."""
        self.check_rate(x)
        if s < -1e-12 or s > self.s_nodes[-1] + 1e-9:
            raise ValueError(f"maturity {s} outside the solved horizon")
        h = self.step
        k = min(max(int(np.floor(s / h)), 0), self.s_nodes.size - 2)
        w = (s - self.s_nodes[k]) / h
        lo = float(np.interp(x, self.x_nodes, self.values[i, k]))
        hi = float(np.interp(x, self.x_nodes, self.values[i, k + 1]))
        return (1.0 - w) * lo + w * hi


# ---------------------------------------------------------------------------
# Rate lattice and transition-law transfer operators
# ---------------------------------------------------------------------------

def _rate_envelope(model: RegimeRateModel, config: SolverConfig):
    """(lowest mean, highest mean, largest std) over states, probe times,
    long-run moments, and the reference rate."""
    ref = config.reference_rate
    probe_ts = np.linspace(0.0, config.horizon, 9)[1:]
    means = [ref]
    stds = [1e-6]
    for i in range(model.n_states):
        lrm, lrs = model.long_run_mean(i), model.long_run_std(i)
        if lrm is not None:
            means.append(float(lrm))
        if lrs is not None:
            stds.append(float(lrs))
        means.extend(np.atleast_1d(model.mean(i, ref, probe_ts)).tolist())
        stds.extend(
            np.sqrt(np.atleast_1d(model.variance(i, ref, probe_ts))).tolist()
        )
    return min(means), max(means), max(stds)


def build_rate_grid(model: RegimeRateModel, config: SolverConfig) -> np.ndarray:
    """Uniform rate lattice covering every regime's transition laws."""
    if config.rate_lo is not None and config.rate_hi is not None:
        lo, hi = float(config.rate_lo), float(config.rate_hi)
        if hi <= lo:
            raise ValueError("rate_hi must exceed rate_lo")
    else:
        mean_lo, mean_hi, std_max = _rate_envelope(model, config)
        pad = config.grid_pad * std_max
        lo = mean_lo - pad
        hi = mean_hi + pad
    if model.kind == CIR:
        lo = max(lo, 0.0)
    return np.linspace(lo, hi, config.rate_nodes)


def _law_nodes_weights(model: RegimeRateModel, i: int, r0, t: float, order: int,
                       tilt: int = 0):
    """Quadrature of the transition law r(t) | r(0)=r0, one rule per r0.

    ``tilt`` = n > 0 asks for the law under the discount change of
    measure exp(-n int_0^t r): for the Gaussian kinds the terminal-rate
    mean shifts by -n Cov[int r, r(t)] (variance unchanged); for CIR the
    tilted law is a noncentral chi-square with modified constants.  The
    discount-moment solver convolves against this measure so its kernel
    matches the joint law of the accumulated discount and the arriving
    rate; at tilt 0 this is the plain transition law.

    Returns (nodes, weights) of shape (len(r0), order): a point mass at
    the start rate when t = 0 and at the deterministic flow for a
    noise-free regime; Gauss-Hermite through mean/std for the Gaussian
    kinds; for CIR a Gauss-Legendre rule against the chi-square density
    (order floored at 48 so the rule resolves the density), or
    equal-probability quantile stratification when the origin is
    attainable and the density is unbounded.  The lattice solvers and
    the scalar evaluators both come through here, so their
    discretizations coincide.
    """
    r0 = np.atleast_1d(np.asarray(r0, dtype=float))
    n = r0.size
    if t <= 0.0:
        nodes = np.repeat(r0[:, None], order, axis=1)
        weights = np.zeros((n, order))
        weights[:, 0] = 1.0
        return nodes, weights
    if model.gaussian_transition:
        means = np.atleast_1d(model.mean(i, r0, t))
        if tilt:
            means = means - tilt * model.integrated_rate_cov(i, r0, t)
        stds = np.sqrt(np.atleast_1d(model.variance(i, r0, t)))
        return gaussian_quadrature_batch(means, stds, order)
    p = model.params[i]
    if p.sigma == 0.0:
        # deterministic regime: the discount tilt reweights a point mass
        flow = np.atleast_1d(model.mean(i, r0, t))
        nodes = np.repeat(flow[:, None], order, axis=1)
        weights = np.zeros((n, order))
        weights[:, 0] = 1.0
        return nodes, weights
    if tilt:
        c, df, nc_coef = cir_discounted_transition_constants(p, float(tilt), t)
        nc = r0 * nc_coef
    else:
        c, df, decay = cir_transition_constants(p, t)
        c = float(c)
        nc = r0 * decay / c
    if p.feller_ratio >= 1.0:
        return ncx2_rule_batch(float(c), df, nc, max(order, _CIR_MIN_ORDER))
    q = (np.arange(order) + 0.5) / order
    nodes = float(c) * sp_stats.ncx2.ppf(q[None, :], df, nc[:, None])
    weights = np.full((n, order), 1.0 / order)
    return nodes, weights


def _transfer_from_rule(x_nodes, nodes, weights, first_moment=False):
    """Scatter per-row quadrature rules into lattice interpolation weights.

    Row p applied to a vector of lattice values v gives
    sum_q w_q * vhat(y_q) (first_moment: sum_q w_q * y_q * vhat(y_q)),
    with vhat the piecewise-linear interpolant clamped at the lattice
    ends.  Also returns the quadrature mass falling off the lattice per
    row so callers can police grid coverage.
    """
    n_rows, _ = nodes.shape
    nx = x_nodes.size
    lo, hi = x_nodes[0], x_nodes[-1]
    slack = 1e-12 * max(1.0, hi - lo)
    escape = np.where((nodes < lo - slack) | (nodes > hi + slack), weights, 0.0).sum(axis=1)

    y = np.clip(nodes, lo, hi)
    idx = np.clip(np.searchsorted(x_nodes, y, side="right") - 1, 0, nx - 2)
    gap = x_nodes[idx + 1] - x_nodes[idx]
    frac = np.clip((y - x_nodes[idx]) / gap, 0.0, 1.0)
    w_eff = weights * nodes if first_moment else weights
    mat = np.zeros((n_rows, nx))
    rows = np.broadcast_to(np.arange(n_rows)[:, None], nodes.shape)
    np.add.at(mat, (rows, idx), w_eff * (1.0 - frac))
    np.add.at(mat, (rows, idx + 1), w_eff * frac)
    return mat, escape


class LatticeWorkspace:
    """Reusable per-(kernel, model, config) solver state: the rate
    lattice, kernel tables on the time grid, the factored implicit-step
    matrix, and the stacked transfer operators."""

    def __init__(self, kernel: SemiMarkovKernel, model: RegimeRateModel,
                 config: SolverConfig):
        if kernel.m != model.n_states:
            raise ValueError(
                f"kernel has {kernel.m} states but the model has {model.n_states}"
            )
        self.kernel = kernel
        self.model = model
        self.config = config
        self.grid = config.time_grid()
        self.x_nodes = build_rate_grid(model, config)
        self.thetas = self.grid.nodes
        self.qdot = kernel.density_matrix(self.thetas)          # (K+1, m, m)
        if not np.all(np.isfinite(self.qdot)):
            raise NumericsError(
                "kernel density is not finite on the grid; the trapezoidal "
                "march needs sojourn densities with finite values"
            )
        self.survival = kernel.survival_matrix(self.thetas)     # (K+1, m)
        self._a_inv = np.linalg.inv(
            np.eye(kernel.m) - 0.5 * config.step * self.qdot[0]
        )
        # rows whose transition laws must stay on the lattice: everything
        # realistically reachable from the reference scenarios
        mean_lo, mean_hi, std_max = _rate_envelope(model, config)
        self._core = (self.x_nodes >= mean_lo - 2.0 * std_max) & (
            self.x_nodes <= mean_hi + 2.0 * std_max
        )
        if not self._core.any():
            self._core = np.ones_like(self.x_nodes, dtype=bool)
        self._transfer = {}
        self._transfer_m1 = None
        self._packed_plain = None

    @property
    def m(self) -> int:
        return self.kernel.m

    def _check_coverage(self, escape: np.ndarray, where: str):
        worst = float(escape[self._core].max(initial=0.0))
        if worst > self.config.coverage_tol:
            raise GridCoverageError(
                f"transition law escapes the rate lattice with mass "
                f"{worst:.2e} (> {self.config.coverage_tol}) at {where}; "
                "widen the rate grid"
            )

    def transfer(self, tilt: int = 0) -> np.ndarray:
        """T[i, l] maps lattice values v to E[vhat(r(theta_l)) | r(0)=x],
        under the discount tilt exp(-tilt * int r) when tilt > 0."""
        if tilt not in self._transfer:
            self._transfer[tilt] = self._build(first_moment=False, tilt=tilt)
        return self._transfer[tilt]

    def transfer_first_moment(self) -> np.ndarray:
        """Same stack for E[r(theta_l) * vhat(r(theta_l)) | r(0)=x]."""
        if self._transfer_m1 is None:
            self._transfer_m1 = self._build(first_moment=True)
        return self._transfer_m1

    def packed_plain(self) -> np.ndarray:
        """Plain transition-law stack in the packed march layout."""
        if self._packed_plain is None:
            self._packed_plain = _pack_transfer(self.transfer())
        return self._packed_plain

    def _build(self, first_moment: bool, tilt: int = 0) -> np.ndarray:
        m, nx = self.m, self.x_nodes.size
        k_max = self.grid.n_steps
        order = self.config.quad_order
        out = np.empty((m, k_max + 1, nx, nx))
        for i in range(m):
            out[i, 0] = np.diag(self.x_nodes) if first_moment else np.eye(nx)
            for l in range(1, k_max + 1):
                nodes, weights = _law_nodes_weights(
                    self.model, i, self.x_nodes, float(self.thetas[l]), order,
                    tilt=tilt,
                )
                mat, escape = _transfer_from_rule(
                    self.x_nodes, nodes, weights, first_moment=first_moment
                )
                self._check_coverage(escape, f"state {i}, elapsed {self.thetas[l]:.4g}")
                out[i, l] = mat
        return out

    def meta(self) -> dict:
        return {
            "config": asdict(self.config),
            "model": self.model.kind,
            "rate_lo": float(self.x_nodes[0]),
            "rate_hi": float(self.x_nodes[-1]),
        }


# ---------------------------------------------------------------------------
# Backward-zero marches
# ---------------------------------------------------------------------------

def _pack_transfer(transfer: np.ndarray, weight=None) -> np.ndarray:
    """Flatten a (m, K+1, Nx, Nx) transfer stack into per-state matrices
    of shape (Nx, (K+1)*Nx) with elapsed-time-major columns, optionally
    folding a per-(state, elapsed, x) weight into the rows, so the whole
    interior convolution at one step is a single matrix-vector product.
    """
    m, kp1, nx, _ = transfer.shape
    out = np.empty((m, nx, kp1 * nx))
    for i in range(m):
        block = transfer[i]
        if weight is not None:
            block = block * weight[i][:, :, None]
        out[i] = np.ascontiguousarray(block.transpose(1, 0, 2)).reshape(nx, kp1 * nx)
    return out


def _march(ws: LatticeWorkspace, initial, free_term, endpoint_term,
           packed, extra_term=None) -> np.ndarray:
    """Shared trapezoidal forward march over the time lattice.

    initial          (m, Nx): values at s = 0.
    free_term(k)     (m, Nx): no-jump survival contribution at s_k.
    endpoint_term(k) (m, Nx): sum_j Qdot_ij(s_k) * (inner integral of
                     the initial condition), supplied analytically so
                     the known end of the convolution is never clamped.
    packed           per-state packed transfer stack (see
                     _pack_transfer), possibly weight-folded; its
                     elapsed-time-0 block must act as the identity times
                     a unit weight because the implicit step matrix
                     absorbs that endpoint.
    extra_term(k)    (m, Nx) additive known block (the product-moment
                     mid-window term), optional.
    """
    h = ws.config.step
    k_max = ws.grid.n_steps
    m = ws.m
    nx = ws.x_nodes.size
    qd = ws.qdot
    vals = np.empty((k_max + 1, m, nx))
    vals[0] = initial
    for k in range(1, k_max + 1):
        rhs = free_term(k) + 0.5 * h * endpoint_term(k)
        if extra_term is not None:
            rhs = rhs + extra_term(k)
        if k >= 2:
            for i in range(m):
                # state-mix the known history, then one matrix-vector
                # product against the packed operators for l = 1..k-1
                mixed = np.matmul(qd[1:k, i, None, :], vals[k - 1:0:-1])   # (k-1, 1, Nx)
                rhs[i] = rhs[i] + h * (packed[i][:, nx:k * nx] @ mixed.ravel())
        vals[k] = ws._a_inv @ rhs
    return vals


def solve_zcb_moment(n: int, kernel: SemiMarkovKernel, model: RegimeRateModel,
                     config: SolverConfig,
                     workspace: LatticeWorkspace | None = None) -> MomentSurface:
    """n-th moment of the discount factor, backward-zero, on the lattice.

    The no-switch part carries the regime's integrated-rate Laplace
    transform over the whole interval; a first switch at elapsed time
    theta contributes the transform up to theta times the surface
    restarted from the arriving rate and regime.  The accumulated
    discount over [0, theta] and the arriving rate r(theta) are
    dependent, so the restart is integrated against the discount-tilted
    transition law (for which all three model kinds stay closed form);
    with that pairing the single-regime case collapses to the plain
    integrated-rate Laplace transform identically.
    """
    if n < 1 or int(n) != n:
        raise ValueError("moment order n must be a positive integer")
    ws = workspace or LatticeWorkspace(kernel, model, config)
    x = ws.x_nodes
    m, k_max = ws.m, ws.grid.n_steps

    bond = np.empty((m, k_max + 1, x.size))
    for i in range(m):
        bond[i] = np.asarray(model.bond_laplace(i, x[:, None], n, ws.thetas)).T

    def free_term(k):
        return ws.survival[k][:, None] * bond[:, k, :]

    def endpoint_term(k):
        # initial condition is identically 1 and the tilted law has
        # mass 1, so the inner integral at the far endpoint is exactly 1
        return ws.qdot[k].sum(axis=1)[:, None] * bond[:, k, :]

    packed = _pack_transfer(ws.transfer(tilt=int(n)), weight=bond)
    vals = _march(ws, np.ones((m, x.size)), free_term, endpoint_term, packed)
    return MomentSurface(
        ZCB_MOMENT, ws.thetas.copy(), x.copy(), vals.transpose(1, 0, 2).copy(),
        order=int(n), meta=ws.meta(), workspace=ws,
    )


def solve_rate_mean(kernel: SemiMarkovKernel, model: RegimeRateModel,
                    config: SolverConfig,
                    workspace: LatticeWorkspace | None = None) -> MomentSurface:
    """First moment of the modulated rate, backward-zero, on the lattice."""
    ws = workspace or LatticeWorkspace(kernel, model, config)
    x = ws.x_nodes
    m, k_max = ws.m, ws.grid.n_steps

    mean_tab = np.empty((m, k_max + 1, x.size))
    for i in range(m):
        mean_tab[i] = np.asarray(model.mean(i, x[:, None], ws.thetas)).T

    def free_term(k):
        return ws.survival[k][:, None] * mean_tab[:, k, :]

    def endpoint_term(k):
        # inner integral of the initial condition R(0, y) = y is the
        # exact transition mean
        return ws.qdot[k].sum(axis=1)[:, None] * mean_tab[:, k, :]

    vals = _march(ws, np.broadcast_to(x, (m, x.size)).copy(), free_term,
                  endpoint_term, ws.packed_plain())
    return MomentSurface(
        RATE_MEAN, ws.thetas.copy(), x.copy(), vals.transpose(1, 0, 2).copy(),
        meta=ws.meta(), workspace=ws,
    )


def _lag_index(grid: TimeGrid, lag: float) -> int:
    idx = round(lag / grid.step)
    if idx < 0 or abs(idx * grid.step - lag) > 1e-9:
        raise ValueError(
            f"lag {lag} must be a nonnegative multiple of the solver step {grid.step}"
        )
    return idx


def _require_companion(surface: MomentSurface, quantity: str, ws: LatticeWorkspace):
    if surface is None:
        raise ValueError(f"this operation needs the {quantity} surface on matching grids")
    if surface.quantity != quantity:
        raise ValueError(f"companion surface is {surface.quantity}, expected {quantity}")
    if (surface.s_nodes.size != ws.grid.n_steps + 1
            or not np.allclose(surface.s_nodes, ws.thetas)
            or not np.allclose(surface.x_nodes, ws.x_nodes)):
        raise ValueError(f"{quantity} surface grids do not match the solver config")


def solve_product_moment(h_lag: float, kernel: SemiMarkovKernel,
                         model: RegimeRateModel, config: SolverConfig,
                         rate_mean_surface: MomentSurface,
                         workspace: LatticeWorkspace | None = None) -> MomentSurface:
    """Lagged product moment E[delta(s) delta(s+h)], backward-zero.

    Marched in s for one fixed lag; three blocks per step.  No switch
    before s+h: the regime's own two-point moment.  First switch inside
    (s, s+h]: couples the rate at s with the rate-mean surface
    restarted at the switch; evaluated with the exact two-stage
    quadrature E[r(s) * Rhat(arriving rate)] because the rate at s and
    the arriving rate are correlated (a factorized m(s) * E[Rhat] form
    drops that covariance, which Monte Carlo resolves at cross-check
    precision).  First switch before s: restarts the product moment
    itself, the recursive part handled by the shared march.
    """
    ws = workspace or LatticeWorkspace(kernel, model, config)
    lag_idx = _lag_index(ws.grid, h_lag)
    _require_companion(rate_mean_surface, RATE_MEAN, ws)
    x = ws.x_nodes
    m, k_max = ws.m, ws.grid.n_steps
    h = ws.config.step
    rate_vals = rate_mean_surface.values                   # (m, K+1, Nx)

    surv_lag = ws.kernel.survival_matrix(ws.thetas + h_lag)   # (K+1, m)
    rho = np.empty((m, k_max + 1, x.size))
    for i in range(m):
        rho[i] = np.asarray(model.product_mean(i, x[:, None], ws.thetas, h_lag)).T

    theta_ext = np.arange(k_max + lag_idx + 1) * h
    qd_ext = ws.kernel.density_matrix(theta_ext)           # (K+L+1, m, m)
    transfer = ws.transfer()
    transfer_m1 = ws.transfer_first_moment()

    # delta(0) is the lattice rate itself: Xi(0, lag) = x * R(lag, x)
    initial = x[None, :] * rate_vals[:, lag_idx, :]

    # window slices: index l' -> R at remaining time lag - theta_{l'}
    rate_window = rate_vals[:, lag_idx::-1, :]             # (m, L+1, Nx)

    if lag_idx == 0:
        extra_term = None
    else:
        win_w = np.ones(lag_idx + 1)
        win_w[0] = win_w[-1] = 0.5

        def extra_term(k):
            out = np.empty((m, x.size))
            for i in range(m):
                mixed = np.einsum(
                    "lj,jlx->lx", qd_ext[k:k + lag_idx + 1, i, :], rate_window
                )
                inner = np.matmul(
                    transfer[i, :lag_idx + 1], mixed[:, :, None]
                )[:, :, 0]
                out[i] = transfer_m1[i, k] @ (h * (win_w[:, None] * inner).sum(axis=0))
            return out

    def free_term(k):
        return surv_lag[k][:, None] * rho[:, k, :]

    def endpoint_term(k):
        # inner integral of Xi(0, y) = y * R(lag, y) through the
        # first-moment transfer at elapsed time s_k
        out = np.empty((m, x.size))
        for i in range(m):
            restart = np.einsum("j,jy->y", ws.qdot[k, i, :], rate_vals[:, lag_idx, :])
            out[i] = transfer_m1[i, k] @ restart
        return out

    vals = _march(ws, initial, free_term, endpoint_term, ws.packed_plain(),
                  extra_term=extra_term)
    return MomentSurface(
        PRODUCT_MOMENT, ws.thetas.copy(), x.copy(), vals.transpose(1, 0, 2).copy(),
        lag=float(h_lag), meta=ws.meta(), workspace=ws,
    )


# ---------------------------------------------------------------------------
# Evaluation with a positive initial age
# ---------------------------------------------------------------------------

def _workspace_for(surface: MomentSurface, kernel: SemiMarkovKernel,
                   model: RegimeRateModel) -> LatticeWorkspace:
    ws = surface.workspace
    if ws is not None and ws.kernel is kernel and ws.model is model:
        return ws
    cfg = surface.meta.get("config")
    if cfg is None:
        raise ValueError("surface carries neither a workspace nor a config snapshot")
    ws = LatticeWorkspace(kernel, model, SolverConfig(**cfg))
    surface.workspace = ws
    return ws


def _aged_front(kernel: SemiMarkovKernel, i: int, age: float) -> float:
    if age < 0:
        raise ValueError("age must be nonnegative")
    h_u = float(kernel.holding_cdf(i, age))
    if h_u >= 1.0 - 1e-12:
        raise DegenerateBackwardError(
            f"state {i} at age {age}: no surviving mass to condition on"
        )
    return 1.0 - h_u


def _law_rules_along(model: RegimeRateModel, i: int, r: float, ts: np.ndarray,
                     order: int, tilt: int = 0):
    """Transition-law rules from one start rate at many elapsed times
    (all positive); nodes/weights stacked over the times."""
    if model.gaussian_transition:
        means = np.atleast_1d(model.mean(i, r, ts))
        if tilt:
            means = means - tilt * np.atleast_1d(model.integrated_rate_cov(i, r, ts))
        stds = np.sqrt(np.atleast_1d(model.variance(i, r, ts)))
        return gaussian_quadrature_batch(means, stds, order)
    rules = [
        _law_nodes_weights(model, i, np.array([r]), float(t), order, tilt=tilt)
        for t in ts
    ]
    nodes = np.vstack([nd for nd, _ in rules])
    weights = np.vstack([wt for _, wt in rules])
    return nodes, weights


def _interp_rows(x_nodes: np.ndarray, table: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """np.interp of table row l at pts[l] for every l (clamped ends)."""
    out = np.empty(pts.shape)
    for l in range(pts.shape[0]):
        out[l] = np.interp(pts[l], x_nodes, table[l])
    return out


def _node_pair(surface: MomentSurface, s: float):
    """Bracketing grid indices and weights for maturity s (linear in s)."""
    if s < -1e-12 or s > surface.s_nodes[-1] + 1e-9:
        raise ValueError(f"maturity {s} outside the solved horizon")
    h = surface.step
    k = s / h
    if abs(k - round(k)) < 1e-9:
        return [(int(round(k)), 1.0)]
    k0 = min(int(np.floor(k)), surface.s_nodes.size - 2)
    w = k - k0
    return [(k0, 1.0 - w), (k0 + 1, w)]


def evaluate_zcb_moment(surface: MomentSurface, kernel: SemiMarkovKernel,
                        model: RegimeRateModel, i: int, u: float, r: float,
                        s: float) -> float:
    """Discount-factor moment for a start state already u years old.

    One aged front-end pass over the backward-zero surface: survival
    and switch densities are tilted by the age; everything under the
    integral comes from the stored lattice with the same quadratures
    the solver used, so u = 0 reproduces lattice values exactly.
    """
    if surface.quantity != ZCB_MOMENT:
        raise ValueError(f"need a {ZCB_MOMENT} surface, got {surface.quantity}")
    surface.check_rate(r)
    ws = _workspace_for(surface, kernel, model)
    return float(sum(
        w * _eval_zcb_node(surface, ws, i, u, r, k) for k, w in _node_pair(surface, s)
    ))


def _eval_zcb_node(surface, ws, i, u, r, k):
    if k == 0:
        return 1.0
    model, kernel = ws.model, ws.kernel
    n = surface.order
    h = ws.config.step
    thetas = ws.thetas[: k + 1]
    denom = _aged_front(kernel, i, u)
    qdu = kernel.density_matrix(thetas + u)[:, i, :]       # (k+1, m)
    bond_r = np.atleast_1d(model.bond_laplace(i, r, n, thetas))
    s_k = float(thetas[k])
    vals = surface.values                                  # (m, K+1, Nx)

    acc = (1.0 - float(kernel.holding_cdf(i, s_k + u))) / denom * bond_r[k]
    # elapsed time 0: the arriving-rate law is a point mass at r
    point = np.array([np.interp(r, surface.x_nodes, vals[j, k]) for j in range(ws.m)])
    acc += 0.5 * h / denom * bond_r[0] * float(qdu[0] @ point)
    # far endpoint: the initial condition is identically 1
    acc += 0.5 * h / denom * bond_r[k] * float(qdu[k].sum())
    if k >= 2:
        nodes, weights = _law_rules_along(
            model, i, r, thetas[1:k], ws.config.quad_order, tilt=int(n)
        )
        inner = np.zeros(k - 1)
        for j in range(ws.m):
            tab = vals[j, k - 1:0:-1]                      # row l-1 -> surface at k-l
            inner += qdu[1:k, j] * (
                weights * _interp_rows(surface.x_nodes, tab, nodes)
            ).sum(axis=1)
        acc += h / denom * float(bond_r[1:k] @ inner)
    return acc


def evaluate_rate_mean(surface: MomentSurface, kernel: SemiMarkovKernel,
                       model: RegimeRateModel, i: int, u: float, r: float,
                       s: float) -> float:
    """Mean of the modulated rate at s for a start state already u old."""
    if surface.quantity != RATE_MEAN:
        raise ValueError(f"need a {RATE_MEAN} surface, got {surface.quantity}")
    surface.check_rate(r)
    ws = _workspace_for(surface, kernel, model)
    return float(sum(
        w * _eval_rate_mean_node(surface, ws, i, u, r, k)
        for k, w in _node_pair(surface, s)
    ))


def _eval_rate_mean_node(surface, ws, i, u, r, k):
    if k == 0:
        return float(r)
    model, kernel = ws.model, ws.kernel
    h = ws.config.step
    thetas = ws.thetas[: k + 1]
    denom = _aged_front(kernel, i, u)
    qdu = kernel.density_matrix(thetas + u)[:, i, :]
    s_k = float(thetas[k])
    vals = surface.values

    acc = (1.0 - float(kernel.holding_cdf(i, s_k + u))) / denom * float(model.mean(i, r, s_k))
    point = np.array([np.interp(r, surface.x_nodes, vals[j, k]) for j in range(ws.m)])
    acc += 0.5 * h / denom * float(qdu[0] @ point)
    acc += 0.5 * h / denom * float(qdu[k].sum()) * float(model.mean(i, r, s_k))
    if k >= 2:
        nodes, weights = _law_rules_along(model, i, r, thetas[1:k], ws.config.quad_order)
        inner = np.zeros(k - 1)
        for j in range(ws.m):
            tab = vals[j, k - 1:0:-1]
            inner += qdu[1:k, j] * (
                weights * _interp_rows(surface.x_nodes, tab, nodes)
            ).sum(axis=1)
        acc += h / denom * float(inner.sum())
    return acc


def evaluate_product_moment(surface: MomentSurface, rate_mean_surface: MomentSurface,
                            kernel: SemiMarkovKernel, model: RegimeRateModel,
                            i: int, u: float, r: float, s: float) -> float:
    """Lagged product moment E[delta(s) delta(s+lag)] for an aged start."""
    if surface.quantity != PRODUCT_MOMENT:
        raise ValueError(f"need a {PRODUCT_MOMENT} surface, got {surface.quantity}")
    surface.check_rate(r)
    ws = _workspace_for(surface, kernel, model)
    _require_companion(rate_mean_surface, RATE_MEAN, ws)
    return float(sum(
        w * _eval_product_node(surface, rate_mean_surface, ws, i, u, r, k)
        for k, w in _node_pair(surface, s)
    ))


def _eval_product_node(surface, rate_mean_surface, ws, i, u, r, k):
    model, kernel = ws.model, ws.kernel
    h = ws.config.step
    lag = float(surface.lag)
    lag_idx = _lag_index(ws.grid, lag)
    order = ws.config.quad_order
    x_nodes = surface.x_nodes
    denom = _aged_front(kernel, i, u)
    s_k = float(ws.thetas[k])
    vals = surface.values
    rate_vals = rate_mean_surface.values

    if k == 0:
        # delta(0) = r is deterministic, so the product collapses to
        # r times the aged rate mean at the lag
        return float(r) * evaluate_rate_mean(rate_mean_surface, kernel, model, i, u, r, lag)

    acc = (1.0 - float(kernel.holding_cdf(i, s_k + lag + u))) / denom \
        * float(model.product_mean(i, r, s_k, lag))

    # rule of the law of r(s_k) from r; reused by the mid window and the
    # far endpoint (first-moment form: weights * nodes)
    nodes_s, weights_s = _law_rules_along(model, i, r, np.array([s_k]), order)
    first_moment_rule = weights_s[0] * nodes_s[0]

    if lag_idx >= 1:
        theta_win = s_k + np.arange(lag_idx + 1) * h
        qdu_win = kernel.density_matrix(theta_win + u)[:, i, :]   # (L+1, m)
        transfer = ws.transfer()
        win_w = np.ones(lag_idx + 1)
        win_w[0] = win_w[-1] = 0.5
        combined = np.zeros(x_nodes.size)
        for lp in range(lag_idx + 1):
            mixed = np.einsum("j,jy->y", qdu_win[lp], rate_vals[:, lag_idx - lp, :])
            combined += win_w[lp] * (transfer[i, lp] @ mixed)
        acc += h / denom * float(
            first_moment_rule @ np.interp(nodes_s[0], x_nodes, combined)
        )

    thetas = ws.thetas[: k + 1]
    qdu = kernel.density_matrix(thetas + u)[:, i, :]
    # recursive block, elapsed 0: point mass at r
    point = np.array([np.interp(r, x_nodes, vals[j, k]) for j in range(ws.m)])
    acc += 0.5 * h / denom * float(qdu[0] @ point)
    # far endpoint: initial condition y * R(lag, y) via the first-moment rule
    restart = np.einsum("j,jy->y", qdu[k], rate_vals[:, lag_idx, :])
    acc += 0.5 * h / denom * float(
        first_moment_rule @ np.interp(nodes_s[0], x_nodes, restart)
    )
    if k >= 2:
        nodes, weights = _law_rules_along(model, i, r, thetas[1:k], order)
        inner = np.zeros(k - 1)
        for j in range(ws.m):
            tab = vals[j, k - 1:0:-1]
            inner += qdu[1:k, j] * (
                weights * _interp_rows(x_nodes, tab, nodes)
            ).sum(axis=1)
        acc += h / denom * float(inner.sum())
    return acc


def covariance_surface(xi_surface: MomentSurface,
                       rate_mean_surface: MomentSurface) -> MomentSurface:
    """Backward-zero covariance lattice: Xi(s, lag) - R(s) R(s+lag),
    defined for maturities with s + lag still on the grid."""
    if xi_surface.quantity != PRODUCT_MOMENT:
        raise ValueError("first argument must be a product-moment surface")
    if rate_mean_surface.quantity != RATE_MEAN:
        raise ValueError("second argument must be a rate-mean surface")
    if (not np.allclose(xi_surface.s_nodes, rate_mean_surface.s_nodes)
            or not np.allclose(xi_surface.x_nodes, rate_mean_surface.x_nodes)):
        raise ValueError("surface grids do not match")
    lag_idx = round(float(xi_surface.lag) / xi_surface.step)
    k_top = xi_surface.s_nodes.size - lag_idx
    r_vals = rate_mean_surface.values
    vals = (xi_surface.values[:, :k_top, :]
            - r_vals[:, :k_top, :] * r_vals[:, lag_idx:lag_idx + k_top, :])
    return MomentSurface(
        "covariance", xi_surface.s_nodes[:k_top].copy(), xi_surface.x_nodes.copy(),
        vals, lag=xi_surface.lag, meta=dict(xi_surface.meta),
    )


def covariance(xi_surface: MomentSurface, rate_mean_surface: MomentSurface,
               kernel: SemiMarkovKernel, model: RegimeRateModel,
               i: int, u: float, r: float, s: float, h_lag: float) -> float:
    """Cov[delta(s), delta(s+h)] = Xi(s, h) - R(s) R(s+h), aged start."""
    if xi_surface.lag is None or abs(float(xi_surface.lag) - h_lag) > 1e-12:
        raise ValueError(
            f"product-moment surface solved at lag {xi_surface.lag}, asked for {h_lag}"
        )
    if s + h_lag > rate_mean_surface.s_nodes[-1] + 1e-9:
        raise ValueError("s + h exceeds the solved horizon of the rate-mean surface")
    product = evaluate_product_moment(
        xi_surface, rate_mean_surface, kernel, model, i, u, r, s
    )
    mean_s = evaluate_rate_mean(rate_mean_surface, kernel, model, i, u, r, s)
    mean_sh = evaluate_rate_mean(rate_mean_surface, kernel, model, i, u, r, s + h_lag)
    return product - mean_s * mean_sh
