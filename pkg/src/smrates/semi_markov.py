"""Markov renewal kernel and everything derived from it.

The kernel is factored as Q_ij(t) = p_ij * G_ij(t): an embedded jump
chain P plus a parametric holding-time law per edge.  On top of that
this module computes the interval transition probabilities phi_ij(t)
(time-marched Volterra equation of the second kind), their aged variant
for a process that entered its current state u years ago, and samples
(state, jump-time) paths, including the age-conditioned first sojourn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBackwardError, NumericsError
from .sojourn import SojournDistribution

_ROW_TOL = 1e-12
_ROWSUM_DRIFT_TOL = 1e-4


@dataclass(frozen=True)
class BackwardState:
    """Where the switching process sits now: current state plus its age.

    ``age`` is the time already spent in ``state`` (the initial backward
    value); age 0 means the process has just jumped.
    """

    state: int
    age: float = 0.0

    def __post_init__(self):
        if self.age < 0:
            raise ValueError("age must be nonnegative")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform time lattice t_k = k*step, k = 0..n_steps."""

    step: float
    horizon: float

    def __post_init__(self):
        if self.step <= 0 or self.horizon <= 0:
            raise ValueError("step and horizon must be positive")
        k = round(self.horizon / self.step)
        if abs(k * self.step - self.horizon) > 1e-12 * max(1.0, self.horizon):
            raise ValueError(
                f"horizon {self.horizon} is not a whole number of steps {self.step}"
            )

    @property
    def n_steps(self) -> int:
        return round(self.horizon / self.step)

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.step

    def index_of(self, t: float) -> int:
        """Grid index of t; raises if t is not (close to) a node."""
        k = round(t / self.step)
        if k < 0 or k > self.n_steps or abs(k * self.step - t) > 1e-9:
            raise ValueError(f"time {t} is not a node of the grid (step {self.step})")
        return k


class SemiMarkovKernel:
    """Renewal kernel Q_ij(t) = p_ij * G_ij(t) on m states.

    Rows of P must sum to 1; a row of zeros marks an absorbing state
    (the process never leaves it).  Self-transitions are excluded for
    m >= 2: regimes are meant to change at jumps, and a self-jump would
    silently reset the age process; the single-state kernel keeps
    p_00 = 1 so renewals remain possible.
    """

    def __init__(self, P, sojourns, states=None):
        P = np.asarray(P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("P must be a square matrix")
        m = P.shape[0]
        if np.any(P < -_ROW_TOL):
            raise ValueError("P entries must be nonnegative")
        row_sums = P.sum(axis=1)
        for i, s in enumerate(row_sums):
            if not (abs(s - 1.0) <= _ROW_TOL or abs(s) <= _ROW_TOL):
                raise ValueError(
                    f"row {i} of P sums to {s!r}; must be 1 (active) or 0 (absorbing)"
                )
        if m >= 2 and np.any(np.abs(np.diag(P)) > _ROW_TOL):
            raise ValueError("self-transitions p_ii must be 0")

        self.m = m
        self.P = P
        self.states = list(states) if states is not None else [str(i) for i in range(m)]
        if len(self.states) != m:
            raise ValueError("state-name list length must match P")

        self._G = [[None] * m for _ in range(m)]
        for i in range(m):
            for j in range(m):
                if P[i, j] > 0.0:
                    g = sojourns[i][j]
                    if g is None:
                        raise ValueError(f"edge ({i},{j}) has p>0 but no sojourn law")
                    if not isinstance(g, SojournDistribution):
                        g = SojournDistribution.from_dict(g)
                    self._G[i][j] = g

    # -- kernel entries ------------------------------------------------

    def sojourn(self, i: int, j: int) -> SojournDistribution | None:
        return self._G[i][j]

    def cdf(self, i: int, j: int, t):
        """Q_ij(t) = p_ij G_ij(t): probability of jumping to j within t."""
        self._check_index(i, j)
        if self.P[i, j] == 0.0:
            return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
        return self.P[i, j] * self._G[i][j].cdf(t)

    def density(self, i: int, j: int, t):
        """Time derivative of Q_ij; integrates to p_ij over (0, inf)."""
        self._check_index(i, j)
        if self.P[i, j] == 0.0:
            return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
        return self.P[i, j] * self._G[i][j].pdf(t)

    def holding_cdf(self, i: int, t):
        """H_i(t): probability of leaving state i within time t."""
        self._check_index(i)
        acc = np.zeros_like(np.asarray(t, dtype=float))
        for j in range(self.m):
            if self.P[i, j] > 0.0:
                acc = acc + self.P[i, j] * self._G[i][j].cdf(t)
        return acc if acc.ndim else float(acc)

    def holding_density(self, i: int, t):
        self._check_index(i)
        acc = np.zeros_like(np.asarray(t, dtype=float))
        for j in range(self.m):
            if self.P[i, j] > 0.0:
                acc = acc + self.P[i, j] * self._G[i][j].pdf(t)
        return acc if acc.ndim else float(acc)

    def density_matrix(self, ts) -> np.ndarray:
        """Stacked kernel derivative: shape (len(ts), m, m)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((ts.size, self.m, self.m))
        for i in range(self.m):
            for j in range(self.m):
                if self.P[i, j] > 0.0:
                    out[:, i, j] = self.P[i, j] * self._G[i][j].pdf(ts)
        return out

    def cdf_matrix(self, ts) -> np.ndarray:
        """Stacked kernel cdf Q_ij: shape (len(ts), m, m)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((ts.size, self.m, self.m))
        for i in range(self.m):
            for j in range(self.m):
                if self.P[i, j] > 0.0:
                    out[:, i, j] = self.P[i, j] * self._G[i][j].cdf(ts)
        return out

    def partial_mean_matrix(self, ts) -> np.ndarray:
        """Stacked truncated first moments p_ij E[W 1(W <= t)]:
        shape (len(ts), m, m)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.zeros((ts.size, self.m, self.m))
        for i in range(self.m):
            for j in range(self.m):
                if self.P[i, j] > 0.0:
                    out[:, i, j] = self.P[i, j] * self._G[i][j].partial_mean(ts)
        return out

    def survival_matrix(self, ts) -> np.ndarray:
        """1 - H_i at each time: shape (len(ts), m)."""
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        out = np.empty((ts.size, self.m))
        for i in range(self.m):
            out[:, i] = 1.0 - self.holding_cdf(i, ts)
        return out

    def is_absorbing(self, i: int) -> bool:
        return self.P[i].sum() <= _ROW_TOL

    def _check_index(self, *idx):
        for k in idx:
            if not (0 <= int(k) < self.m) or int(k) != k:
                raise ValueError(f"state index {k} out of range for m={self.m}")

    # -- aged first-sojourn law -----------------------------------------

    def aged_holding_cdf(self, i: int, age: float, w):
        """P(first jump within w | already age years in i) =
        (H_i(age+w) - H_i(age)) / (1 - H_i(age))."""
        denom = self._age_denominator(i, age)
        return (self.holding_cdf(i, age + np.maximum(w, 0.0)) - self.holding_cdf(i, age)) / denom

    def _age_denominator(self, i: int, age: float) -> float:
        h_u = float(self.holding_cdf(i, age))
        if h_u >= 1.0 - 1e-12:
            raise DegenerateBackwardError(
                f"state {i} with age {age}: H_i(age)={h_u} leaves no mass to condition on"
            )
        return 1.0 - h_u

    def sample_aged_first(self, i: int, age: float, u_wait, u_next):
        """Joint draw of the age-conditioned first sojourn and next state.

        u_wait, u_next are uniforms (arrays of equal shape).  The waiting
        time solves F(w) = u_wait by bracketed bisection on the exact
        conditional cdf; the next state is then drawn with probabilities
        proportional to the kernel derivative at age + w.
        Returns (w, next_state) arrays.
        """
        self._check_index(i)
        u_wait = np.atleast_1d(np.asarray(u_wait, dtype=float))
        u_next = np.atleast_1d(np.asarray(u_next, dtype=float))
        if self.is_absorbing(i):
            return np.full(u_wait.shape, np.inf), np.full(u_wait.shape, i, dtype=np.int64)
        denom = self._age_denominator(i, age)

        def cond_cdf(w):
            return (self.holding_cdf(i, age + w) - self.holding_cdf(i, age)) / denom

        lo = np.zeros_like(u_wait)
        hi = np.full_like(u_wait, 1.0)
        for _ in range(200):
            short = cond_cdf(hi) < u_wait
            if not short.any():
                break
            hi = np.where(short, hi * 2.0, hi)
            if hi.max() > 1e12:
                raise NumericsError(
                    f"aged sojourn inverse cdf: no bracket below 1e12 "
                    f"(state {i}, age {age}, max target {u_wait.max()})"
                )
        else:
            raise NumericsError("aged sojourn inverse cdf failed to bracket")
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = cond_cdf(mid) < u_wait
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.max(hi - lo) <= 1e-14 * max(1.0, float(hi.max())):
                break
        w = 0.5 * (lo + hi)

        weights = np.zeros((u_wait.size, self.m))
        for j in range(self.m):
            if self.P[i, j] > 0.0:
                weights[:, j] = self.P[i, j] * self._G[i][j].pdf(age + w)
        total = weights.sum(axis=1, keepdims=True)
        if np.any(total <= 0.0):
            raise NumericsError(
                f"aged next-state weights vanish at sampled waiting times (state {i})"
            )
        cum = np.cumsum(weights / total, axis=1)
        nxt = (u_next[:, None] > cum).sum(axis=1)
        return w, np.minimum(nxt, self.m - 1)

    def sample_next_unconditional(self, states, u_next, u_wait):
        """Vectorized (J_{n+1}, W) draw: next state from the embedded chain
        row, waiting time from the matching conditional law via its exact
        inverse cdf.  ``states`` selects the P row per path."""
        states = np.asarray(states)
        nxt = np.empty(states.shape, dtype=np.int64)
        w = np.empty(states.shape, dtype=float)
        for i in range(self.m):
            sel = states == i
            if not sel.any():
                continue
            if self.is_absorbing(i):
                nxt[sel] = i
                w[sel] = np.inf
                continue
            cum = np.cumsum(self.P[i])
            j_draw = np.searchsorted(cum, u_next[sel], side="right")
            j_draw = np.minimum(j_draw, self.m - 1)
            nxt[sel] = j_draw
            for j in range(self.m):
                pair = sel.copy()
                pair[sel] = j_draw == j
                if pair.any():
                    w[pair] = self._G[i][j].ppf(u_wait[pair])
        return nxt, w

    def to_dict(self) -> dict:
        soj = [
            [self._G[i][j].to_dict() if self._G[i][j] is not None else None for j in range(self.m)]
            for i in range(self.m)
        ]
        return {"states": self.states, "P": self.P.tolist(), "sojourns": soj}


def alternating_kernel(g12: SojournDistribution, g21: SojournDistribution,
                       states=("0", "1")) -> SemiMarkovKernel:
    """Two-state kernel that always switches: P = [[0,1],[1,0]]."""
    return SemiMarkovKernel(
        [[0.0, 1.0], [1.0, 0.0]], [[None, g12], [g21, None]], states=states
    )


# ---------------------------------------------------------------------------
# Interval transition probabilities
# ---------------------------------------------------------------------------

def _convolution_weights(kernel: SemiMarkovKernel, grid: TimeGrid, offset: float):
    """Product-trapezoidal weights for int Qdot(offset + s) f(t - s) ds.

    The kernel is integrated exactly (via its cdf and truncated first
    moment) against a piecewise-linear interpolant of f, so constants
    pass through with no quadrature error at all: summing the weights
    over a row reproduces H_i(offset + t) - H_i(offset) exactly, which
    pins the row sums of the transition probabilities to 1.

    Returns (full, boundary): ``full[l]`` multiplies f(t - s_l) for an
    interior convolution, and ``boundary[n]`` must be subtracted from
    the l = n term because the last node has no panel beyond it.
    """
    nodes = grid.nodes + offset
    h = grid.step
    q_cdf = kernel.cdf_matrix(nodes)                  # (K+1, m, m)
    q_pm = kernel.partial_mean_matrix(nodes)          # (K+1, m, m)
    m0 = q_cdf[1:] - q_cdf[:-1]                       # per-panel mass
    m1 = q_pm[1:] - q_pm[:-1] - offset * m0           # per-panel first moment (grid clock)
    theta_lo = grid.nodes[:-1, None, None]
    theta_hi = grid.nodes[1:, None, None]
    weight_lo = (m0 * theta_hi - m1) / h              # to f at the panel's near node
    weight_hi = (m1 - m0 * theta_lo) / h              # to f at the panel's far node

    k_max = grid.n_steps
    m = kernel.m
    full = np.zeros((k_max + 1, m, m))
    full[:-1] += weight_lo
    full[1:] += weight_hi
    boundary = np.zeros_like(full)
    boundary[:-1] = weight_lo
    return full, boundary


def transition_probabilities(kernel: SemiMarkovKernel, grid: TimeGrid) -> np.ndarray:
    """Solve phi_ij on the grid by product-trapezoidal forward marching.

    phi_ij(t) = delta_ij (1 - H_i(t)) + sum_k int_0^t Qdot_ik(s) phi_kj(t-s) ds.

    The convolution integrates the kernel exactly against a
    piecewise-linear interpolant of phi; the unknown at the current node
    appears in the first panel's weight, so each step solves one fixed
    m x m linear system.  Row sums stay at 1 up to roundoff by
    construction; a drift beyond 1e-4 still raises NumericsError as a
    corruption guard.  Returns an array of shape (n_steps + 1, m, m).
    """
    m = kernel.m
    k_max = grid.n_steps
    if not np.all(np.isfinite(kernel.density_matrix(grid.nodes))):
        raise NumericsError(
            "kernel density is not finite on the grid; use sojourn families "
            "with finite densities for the transition-probability march"
        )
    full, boundary = _convolution_weights(kernel, grid, 0.0)
    surv = kernel.survival_matrix(grid.nodes)

    a_inv = np.linalg.inv(np.eye(m) - full[0])
    phi = np.empty((k_max + 1, m, m))
    phi[0] = np.eye(m)
    for n in range(1, k_max + 1):
        rhs = np.diag(surv[n]).astype(float)
        rhs += np.einsum("lab,lbj->aj", full[1:n + 1], phi[n - 1::-1])
        rhs -= boundary[n]                      # last node has no far panel
        phi[n] = a_inv @ rhs

    drift = np.abs(phi.sum(axis=2) - 1.0).max()
    if drift > _ROWSUM_DRIFT_TOL:
        raise NumericsError(
            f"transition-probability rows drift from 1 by up to {drift:.3e}; "
            f"reduce the grid step (current {grid.step})"
        )
    return phi


def backward_transition_probabilities(
    kernel: SemiMarkovKernel, age: float, grid: TimeGrid, phi: np.ndarray
) -> np.ndarray:
    """Transition probabilities given the start state is already ``age`` old.

    One quadrature pass over the precomputed phi table with the same
    product-trapezoidal weights, age-shifted:
    bphi_ij(u; t) = [delta_ij (1 - H_i(u+t))
                     + sum_k int_0^t Qdot_ik(u+s) phi_kj(t-s) ds] / (1 - H_i(u)),
    so at age 0 it reproduces phi to roundoff.
    """
    if age < 0:
        raise ValueError("age must be nonnegative")
    m = kernel.m
    k_max = grid.n_steps
    if phi.shape != (k_max + 1, m, m):
        raise ValueError("phi table does not match the grid")

    denom = np.empty(m)
    for i in range(m):
        denom[i] = kernel._age_denominator(i, age)

    full, boundary = _convolution_weights(kernel, grid, age)
    surv_u = kernel.survival_matrix(grid.nodes + age)

    bphi = np.empty_like(phi)
    bphi[0] = np.eye(m)
    for n in range(1, k_max + 1):
        acc = np.diag(surv_u[n]).astype(float)
        acc += np.einsum("lab,lbj->aj", full[: n + 1], phi[n::-1])
        acc -= boundary[n]
        bphi[n] = acc / denom[:, None]

    drift = np.abs(bphi.sum(axis=2) - 1.0).max()
    if drift > _ROWSUM_DRIFT_TOL:
        raise NumericsError(
            f"aged transition-probability rows drift from 1 by up to {drift:.3e}"
        )
    return bphi


# ---------------------------------------------------------------------------
# Path sampling
# ---------------------------------------------------------------------------

@dataclass
class RenewalPath:
    """Jump skeleton of one trajectory: times[0] = 0 is the start record,
    later entries are actual jumps; states[k] holds from times[k] on."""

    times: np.ndarray
    states: np.ndarray

    def state_at(self, t: float) -> int:
        idx = int(np.searchsorted(self.times, t, side="right") - 1)
        return int(self.states[max(idx, 0)])


def sample_markov_renewal_path(
    kernel: SemiMarkovKernel,
    start: BackwardState,
    horizon: float,
    rng: np.random.Generator,
) -> RenewalPath:
    """Sample (J_n, T_n) until the first jump at or past the horizon.

    The first sojourn uses the age-conditioned law of ``start``; later
    sojourns are unconditional draws from the kernel.  An absorbing
    state ends the path early.
    """
    if horizon < 0:
        raise ValueError("horizon must be nonnegative")
    times = [0.0]
    states = [start.state]
    if horizon == 0:
        return RenewalPath(np.array(times), np.array(states, dtype=np.int64))

    t = 0.0
    state = start.state
    first = True
    while t < horizon:
        if kernel.is_absorbing(state):
            break
        if first:
            w, nxt = kernel.sample_aged_first(state, start.age, rng.random(1), rng.random(1))
            w, nxt = float(w[0]), int(nxt[0])
            first = False
        else:
            nxt_arr, w_arr = kernel.sample_next_unconditional(
                np.array([state]), rng.random(1), rng.random(1)
            )
            w, nxt = float(w_arr[0]), int(nxt_arr[0])
        t += w
        times.append(t)
        states.append(nxt)
        state = nxt
    return RenewalPath(np.asarray(times), np.asarray(states, dtype=np.int64))


def sample_states_at(
    kernel: SemiMarkovKernel,
    start: BackwardState,
    t: float,
    n_paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Occupied state at time t for n_paths independent trajectories
    (vectorized; the diffusion layer is not involved)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    cur = np.full(n_paths, start.state, dtype=np.int64)
    if t == 0:
        return cur
    w, nxt = kernel.sample_aged_first(
        start.state, start.age, rng.random(n_paths), rng.random(n_paths)
    )
    t_next = w.copy()
    state_next = nxt
    active = t_next <= t
    while active.any():
        cur[active] = state_next[active]
        nxt2, w2 = kernel.sample_next_unconditional(
            cur[active], rng.random(active.sum()), rng.random(active.sum())
        )
        t_next[active] = t_next[active] + w2
        state_next = state_next.copy()
        state_next[active] = nxt2
        active = active & (t_next <= t)
    return cur


def count_jumps_by(
    kernel: SemiMarkovKernel,
    start: BackwardState,
    t: float,
    n_paths: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Number of jumps in (0, t] per path (vectorized)."""
    counts = np.zeros(n_paths, dtype=np.int64)
    cur = np.full(n_paths, start.state, dtype=np.int64)
    w, nxt = kernel.sample_aged_first(
        start.state, start.age, rng.random(n_paths), rng.random(n_paths)
    )
    t_next = w.copy()
    state_next = nxt
    active = t_next <= t
    while active.any():
        counts[active] += 1
        cur[active] = state_next[active]
        nxt2, w2 = kernel.sample_next_unconditional(
            cur[active], rng.random(active.sum()), rng.random(active.sum())
        )
        t_next[active] = t_next[active] + w2
        state_next = state_next.copy()
        state_next[active] = nxt2
        active = active & (t_next <= t)
    return counts
