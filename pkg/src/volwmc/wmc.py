"""Weighted Monte Carlo: payoffs, entropy calibration, martingale windows.

Prices are weighted sums ``p @ G`` over a fixed path set; the calibrated
measure minimizes relative entropy against the uniform prior subject to
matching target prices, solved through the concave dual over Lagrange
multipliers.  Weights are always the standard Gibbs normalization
``p_i = exp(g_i . lambda) / sum_j exp(g_j . lambda)`` with max subtraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, rel_entr

from .market import SurfaceGrid
from .paths import PathSet, generate_brownian_paths

__all__ = [
    "DensityHistogram",
    "DualSolution",
    "MartingaleLossResult",
    "MartingaleWindow",
    "PayoffColumn",
    "PayoffMatrix",
    "WeightVector",
    "martingale_constraint_columns",
    "martingale_loss",
    "martingale_noise_floor",
    "martingale_windows",
    "mc_standard_error",
    "relative_entropy",
    "risk_neutral_density",
    "solve_lagrange_dual",
    "vanilla_payoffs",
    "weighted_price",
    "weights_from_lagrange",
]


def _as_weights(p) -> np.ndarray:
    return np.asarray(getattr(p, "p", p), dtype=float)


class WeightVector:
    """A probability vector over paths: non-negative, sums to one."""

    __slots__ = ("p",)

    def __init__(self, p, tol: float = 1e-9):
        p = np.asarray(p, dtype=float)
        if p.ndim != 1:
            raise ValueError("weights must be a 1-d vector")
        if np.any(p < 0.0) or not np.all(np.isfinite(p)):
            raise ValueError("weights must be finite and non-negative")
        total = float(p.sum())
        if abs(total - 1.0) > tol:
            raise ValueError(f"weights sum to {total}, not 1")
        self.p = p

    @classmethod
    def uniform(cls, nu: int) -> "WeightVector":
        return cls(np.full(nu, 1.0 / nu))

    def __array__(self, dtype=None, copy=None):
        return self.p.astype(dtype) if dtype is not None else self.p

    def __len__(self):
        return self.p.size


@dataclass(frozen=True)
class PayoffColumn:
    """What one payoff column pays: a vanilla or a martingale test."""

    kind: str  # "call" | "put" | "martingale"
    strike_offset: float | None = None
    expiry: float | None = None
    window: "MartingaleWindow | None" = None


@dataclass(frozen=True)
class PayoffMatrix:
    """``(nu, n_columns)`` payoffs with per-column metadata."""

    values: np.ndarray
    columns: tuple

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.columns):
            raise ValueError("payoff matrix and column metadata disagree")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def nu(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    def hstack(self, other: "PayoffMatrix") -> "PayoffMatrix":
        if other.nu != self.nu:
            raise ValueError("path counts differ")
        return PayoffMatrix(np.hstack([self.values, other.values]),
                            self.columns + other.columns)

    def select(self, kind: str) -> "PayoffMatrix":
        idx = [i for i, c in enumerate(self.columns) if c.kind == kind]
        return PayoffMatrix(self.values[:, idx],
                            tuple(self.columns[i] for i in idx))


def vanilla_payoffs(paths: PathSet, grid: SurfaceGrid,
                    flavors=("call", "put")) -> PayoffMatrix:
    """Payoff columns for every (flavor, expiry, strike offset) node.

    Expiries snap to the nearest path time within half a step; strikes are
    offsets from the forward (paths start at 0).  Column order is
    flavor-major, then expiry, then strike.
    """
    cols = []
    blocks = []
    for flavor in flavors:
        if flavor not in ("call", "put"):
            raise ValueError(f"unknown flavor {flavor!r}")
        sign = 1.0 if flavor == "call" else -1.0
        for t in grid.expiries:
            terminal = paths.terminal(t)
            for dk in grid.strike_offsets:
                blocks.append(np.maximum(sign * (terminal - dk), 0.0))
                cols.append(PayoffColumn(kind=flavor, strike_offset=dk, expiry=t))
    return PayoffMatrix(np.column_stack(blocks), tuple(cols))


def weighted_price(payoffs, weights):
    """``p @ G``: one price per payoff column."""
    g = getattr(payoffs, "values", payoffs)
    p = _as_weights(weights)
    if p.shape[0] != g.shape[0]:
        raise ValueError("weights and payoffs disagree on path count")
    out = p @ g
    return float(out) if np.ndim(out) == 0 else out


def mc_standard_error(payoffs, weights):
    """Delta-method standard error of a weighted price, per column.

    Reduces to the usual ``std / sqrt(nu)`` under uniform weights.
    """
    g = getattr(payoffs, "values", payoffs)
    p = _as_weights(weights)
    single = g.ndim == 1
    g2 = g[:, None] if single else g
    centred = g2 - p @ g2
    se = np.sqrt(np.sum((p[:, None] * centred) ** 2, axis=0))
    return float(se[0]) if single else se


def relative_entropy(p, q) -> float:
    """``D(p || q) = sum p_i ln(p_i / q_i)`` with the 0 ln 0 = 0 convention."""
    p = _as_weights(p)
    q = _as_weights(q)
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    terms = rel_entr(p, q)
    if np.any(np.isinf(terms)):
        raise ValueError("support violation: p puts mass where q has none")
    return float(terms.sum())


def weights_from_lagrange(payoffs, lam) -> WeightVector:
    """Gibbs weights ``p_i ~ exp(g_i . lambda)``, max-subtracted."""
    g = getattr(payoffs, "values", payoffs)
    lam = np.asarray(lam, dtype=float)
    scores = g @ lam
    scores -= scores.max()
    w = np.exp(scores)
    return WeightVector(w / w.sum())


@dataclass
class DualSolution:
    """Result of the entropy-dual calibration."""

    lam: np.ndarray
    weights: WeightVector
    prices: np.ndarray
    residuals: np.ndarray
    max_residual: float
    converged: bool
    iterations: int
    entropy: float


def solve_lagrange_dual(payoffs, targets, tol: float = 1e-8,
                        max_iter: int = 200, col_weights=None,
                        warm_start=None) -> DualSolution:
    """Calibrate Gibbs weights so that ``p @ G`` matches ``targets``.

    Damped Newton iteration on the convex dual
    ``f(lambda) = ln mean_i exp(g_i . lambda) - lambda . c`` whose gradient
    is (model prices - targets) and whose Hessian is the weighted payoff
    covariance.  Cholesky with an escalating ridge handles rank deficiency;
    an Armijo backtracking line search guarantees monotone descent.

    Targets outside the convex hull of the payoff columns make the dual
    unbounded; the solver then stops at ``max_iter`` and returns the best
    iterate flagged ``converged=False``.
    """
    g = getattr(payoffs, "values", payoffs)
    c = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("targets must be finite")
    nu, n_cols = g.shape
    if c.shape != (n_cols,):
        raise ValueError("one target per payoff column required")
    scale = np.ones(n_cols) if col_weights is None else np.asarray(col_weights, float)
    if np.any(scale <= 0.0):
        raise ValueError("col_weights must be positive")

    log_nu = math.log(nu)

    def dual_value(lam_vec):
        return float(logsumexp(g @ lam_vec) - log_nu - lam_vec @ c)

    lam = np.zeros(n_cols) if warm_start is None else np.asarray(warm_start, float).copy()
    f = dual_value(lam)
    best_lam, best_resid = lam.copy(), math.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        p = weights_from_lagrange(g, lam).p
        prices = p @ g
        grad = prices - c
        max_resid = float(np.max(np.abs(grad) / scale))
        if max_resid < best_resid:
            best_resid, best_lam = max_resid, lam.copy()
        if max_resid <= tol:
            converged = True
            break

        weighted = g * p[:, None]
        hess = g.T @ weighted - np.outer(prices, prices)
        diag_scale = float(np.trace(hess)) / n_cols or 1.0
        step = None
        for ridge in (0.0, 1e-12, 1e-9, 1e-6, 1e-3):
            try:
                chol = np.linalg.cholesky(hess + ridge * diag_scale * np.eye(n_cols))
                step = np.linalg.solve(chol.T, np.linalg.solve(chol, -grad))
                break
            except np.linalg.LinAlgError:
                continue
        slope = float(grad @ step) if step is not None else 0.0
        if step is None or slope >= 0.0:
            step = -grad
            slope = float(grad @ step)

        t = 1.0
        for _ in range(60):
            f_new = dual_value(lam + t * step)
            if f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
        lam = lam + t * step
        f = dual_value(lam)

    weights = weights_from_lagrange(g, best_lam if not converged else lam)
    lam_out = (best_lam if not converged else lam).copy()
    prices = weights.p @ g
    residuals = prices - c
    return DualSolution(
        lam=lam_out,
        weights=weights,
        prices=prices,
        residuals=residuals,
        max_residual=float(np.max(np.abs(residuals) / scale)),
        converged=converged,
        iterations=iterations,
        entropy=relative_entropy(weights.p, np.full(nu, 1.0 / nu)),
    )


# -- martingale diagnostics -----------------------------------------------------


@dataclass(frozen=True)
class MartingaleWindow:
    """A strike window at one expiry pair: paths inside the window at ``t1``
    should show no average drift to ``t2`` under a martingale measure."""

    t1: float
    t2: float
    center: float
    half_width: float

    def __post_init__(self):
        if not 0.0 <= self.t1 < self.t2:
            raise ValueError("need 0 <= t1 < t2")
        if self.half_width <= 0.0:
            raise ValueError("half_width must be positive")

    @property
    def low(self) -> float:
        return self.center - self.half_width

    @property
    def high(self) -> float:
        return self.center + self.half_width


def martingale_windows(expiries, n_positions: int = 20,
                       position_range=(-0.01, 0.01),
                       half_width: float = 0.001) -> list:
    """Windows for every consecutive expiry pair at equally spaced centers.

    The default 7 expiries and 20 positions give 6 * 20 = 120 windows.
    """
    expiries = sorted(float(t) for t in expiries)
    if len(expiries) < 2:
        raise ValueError("need at least two expiries")
    lo, hi = position_range
    if not lo < hi:
        raise ValueError("position_range must be increasing")
    centers = np.linspace(lo, hi, n_positions)
    out = []
    for t1, t2 in zip(expiries[:-1], expiries[1:]):
        for center in centers:
            out.append(MartingaleWindow(t1=t1, t2=t2, center=float(center),
                                        half_width=half_width))
    return out


@dataclass
class MartingaleLossResult:
    """Window residuals plus the aggregate relative loss."""

    residuals: np.ndarray          # NaN where skipped
    window_weights: np.ndarray
    skipped: int
    mean_relative_loss: float
    range_width: float


def _window_members(paths: PathSet, window: MartingaleWindow):
    s1 = paths.terminal(window.t1)
    mask = (s1 >= window.low) & (s1 <= window.high)
    return mask, s1


def martingale_loss(paths: PathSet, weights, windows,
                    min_effective: float = 10.0) -> MartingaleLossResult:
    """Weighted conditional drift inside each window, and its mean level.

    A window's residual is ``sum_W p_j (S_t2 - S_t1) / sum_W p_j``.  Windows
    holding less total weight than ``min_effective`` uniform-path
    equivalents are skipped.  The aggregate is the mean absolute residual
    over evaluated windows divided by the width of the position range.
    """
    p = _as_weights(weights)
    if p.shape[0] != paths.nu:
        raise ValueError("weights and paths disagree on path count")
    windows = list(windows)
    if not windows:
        raise ValueError("need at least one window")
    residuals = np.full(len(windows), np.nan)
    totals = np.zeros(len(windows))
    threshold = min_effective / paths.nu
    lo = min(w.low for w in windows)
    hi = max(w.high for w in windows)
    for idx, window in enumerate(windows):
        mask, s1 = _window_members(paths, window)
        total = float(p[mask].sum())
        totals[idx] = total
        if total < threshold:
            continue
        drift = paths.terminal(window.t2)[mask] - s1[mask]
        residuals[idx] = float((p[mask] * drift).sum() / total)
    evaluated = ~np.isnan(residuals)
    skipped = int(np.sum(~evaluated))
    range_width = hi - lo
    if not np.any(evaluated):
        raise ValueError("every window fell below the effective-path threshold")
    mean_rel = float(np.mean(np.abs(residuals[evaluated])) / range_width)
    return MartingaleLossResult(residuals=residuals, window_weights=totals,
                                skipped=skipped, mean_relative_loss=mean_rel,
                                range_width=range_width)


def martingale_noise_floor(nu: int, horizon: float, steps: int,
                           sigma_prior: float, windows,
                           n_regens: int = 50, seed: int = 0) -> np.ndarray:
    """Relative martingale loss of uniform weights over fresh path sets.

    Returns one loss per regeneration; the mean estimates the level below
    which a weighted loss is indistinguishable from sampling noise.
    """
    if n_regens < 1:
        raise ValueError("need at least one regeneration")
    windows = list(windows)
    uniform = WeightVector.uniform(nu)
    losses = np.empty(n_regens)
    for r in range(n_regens):
        paths = generate_brownian_paths(nu, horizon, steps, sigma_prior, seed + r)
        losses[r] = martingale_loss(paths, uniform, windows).mean_relative_loss
    return losses


def martingale_constraint_columns(paths: PathSet, windows) -> PayoffMatrix:
    """Payoff columns ``(S_t2 - S_t1) * 1{S_t1 in window}`` with target 0.

    Appending these to a calibration drives the windowed conditional drift
    to zero (the positive in-window normalization does not change the root).
    """
    windows = list(windows)
    blocks, cols = [], []
    for window in windows:
        mask, s1 = _window_members(paths, window)
        col = np.where(mask, paths.terminal(window.t2) - s1, 0.0)
        blocks.append(col)
        cols.append(PayoffColumn(kind="martingale", window=window))
    return PayoffMatrix(np.column_stack(blocks), tuple(cols))


@dataclass(frozen=True)
class DensityHistogram:
    """Weighted terminal distribution: bin edges plus bin masses (sum 1)."""

    expiry: float
    edges: np.ndarray
    mass: np.ndarray


def risk_neutral_density(paths: PathSet, weights, expiry: float,
                         bins=60) -> DensityHistogram:
    """Weighted histogram of the terminal values at ``expiry``."""
    p = _as_weights(weights)
    terminal = paths.terminal(expiry)
    mass, edges = np.histogram(terminal, bins=bins, weights=p)
    total = float(mass.sum())
    if total <= 0.0:
        raise ValueError("no weight falls inside the requested bins")
    return DensityHistogram(expiry=float(expiry), edges=edges,
                            mass=mass / total)
