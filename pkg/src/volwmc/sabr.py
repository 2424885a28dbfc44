"""Normal SABR (beta = 0) benchmark: smile formula, fitting, simulation.

The model is ``dS = sigma_t dW1``, ``dsigma = volvol * sigma dW2`` with
correlation ``rho`` and ``sigma_0 = alpha``.  The closed-form smile is the
standard asymptotic normal-vol expansion; its sign convention is pinned by
Monte Carlo in the test-suite (negative ``rho`` lowers vols at higher
strikes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares

from .paths import PathSet, path_normals

__all__ = [
    "SabrFit",
    "SabrParams",
    "fit_sabr_smile",
    "sabr_normal_vol",
    "simulate_sabr_paths",
]

_FIT_BOUNDS = ((1e-6, -0.999, 0.0), (0.1, 0.999, 5.0))  # (alpha, rho, volvol)


@dataclass(frozen=True)
class SabrParams:
    alpha: float
    rho: float
    volvol: float

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.volvol < 0.0:
            raise ValueError("volvol must be non-negative")


def _zeta_over_x(zeta, rho):
    """``zeta / x(zeta)`` with the series branch for small ``zeta``.

    ``x(zeta) = ln[(sqrt(1 - 2 rho zeta + zeta^2) + zeta - rho) / (1 - rho)]``.
    For |zeta| < 1e-4 the third-order series keeps full double accuracy and
    removes the 0/0 at ATM.
    """
    zeta = np.asarray(zeta, dtype=float)
    small = np.abs(zeta) < 1e-4
    z_safe = np.where(small, 1.0, zeta)
    root = np.sqrt(1.0 - 2.0 * rho * z_safe + z_safe * z_safe)
    x = np.log((root + z_safe - rho) / (1.0 - rho))
    direct = z_safe / x
    series = 1.0 - 0.5 * rho * zeta + (2.0 - 3.0 * rho * rho) / 12.0 * zeta * zeta
    return np.where(small, series, direct)


def sabr_normal_vol(params: SabrParams, s0, k, t):
    """Implied normal vol of the beta = 0 SABR smile.

    Vectorized over strikes.  ``volvol = 0`` returns exactly ``alpha``.
    The ATM limit is ``alpha * (1 + (2 - 3 rho^2) / 24 * volvol^2 * t)``.
    """
    t = float(t)
    if t <= 0.0:
        raise ValueError("expiry must be positive")
    k = np.asarray(k, dtype=float)
    alpha, rho, volvol = params.alpha, params.rho, params.volvol
    if volvol == 0.0:
        out = np.full_like(k, alpha, dtype=float)
        return float(out) if out.ndim == 0 else out
    # Sign convention: zeta grows as the strike falls below the forward, so
    # negative rho steepens the left wing (vols fall with strike).
    zeta = (volvol / alpha) * (np.asarray(s0, float) - k)
    term = 1.0 + (2.0 - 3.0 * rho * rho) / 24.0 * volvol * volvol * t
    out = alpha * _zeta_over_x(zeta, rho) * term
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SabrFit:
    params: SabrParams
    residuals: np.ndarray
    cost: float
    n_starts: int

    @property
    def max_abs_residual(self) -> float:
        return float(np.max(np.abs(self.residuals)))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.residuals))))


def fit_sabr_smile(strike_offsets, vols, t, s0: float = 0.0,
                   n_starts: int = 3) -> SabrFit:
    """Bounded least-squares fit of (alpha, rho, volvol) to one smile.

    Multi-start over three correlation guesses; the best solution by cost
    wins.  Needs at least as many points as parameters.
    """
    ks = np.asarray(strike_offsets, dtype=float)
    target = np.asarray(vols, dtype=float)
    if ks.ndim != 1 or ks.shape != target.shape:
        raise ValueError("strike_offsets and vols must be matching 1-d arrays")
    if ks.size < 3:
        raise ValueError("need at least 3 smile points to fit 3 parameters")
    if np.any(target <= 0.0):
        raise ValueError("vols must be positive")

    atm_guess = float(target[np.argmin(np.abs(ks - s0))])
    alpha0 = min(max(atm_guess, 2e-6), 0.099)
    rho_starts = (-0.5, 0.0, 0.5)[:max(n_starts, 1)]

    def residual_fn(theta):
        p = SabrParams(alpha=theta[0], rho=theta[1], volvol=theta[2])
        return sabr_normal_vol(p, s0, ks, t) - target

    best = None
    for rho0 in rho_starts:
        x0 = np.array([alpha0, rho0, 0.5])
        res = least_squares(residual_fn, x0, bounds=_FIT_BOUNDS, method="trf",
                            xtol=1e-15, ftol=1e-15, gtol=1e-15)
        if best is None or res.cost < best.cost:
            best = res
    params = SabrParams(alpha=float(best.x[0]), rho=float(best.x[1]),
                        volvol=float(best.x[2]))
    return SabrFit(params=params, residuals=best.fun.copy(),
                   cost=float(best.cost), n_starts=len(rho_starts))


def simulate_sabr_paths(params: SabrParams, nu: int, horizon: float,
                        steps: int, seed: int) -> PathSet:
    """Simulate SABR paths on the same grid/stream conventions as the prior.

    Euler step for the forward; the vol substep is exact lognormal
    (``sigma *= exp(-volvol^2 dt / 2 + volvol sqrt(dt) xi2)``), so ``sigma``
    stays positive for any step size.  Per-path Philox streams draw
    ``(steps, 2)`` normals each; increments are correlated via ``rho``.
    """
    if nu < 2:
        raise ValueError("need at least two paths")
    if steps < 1:
        raise ValueError("need at least one step")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    dt = horizon / steps
    sqrt_dt = math.sqrt(dt)
    rho = params.rho
    rho_bar = math.sqrt(1.0 - rho * rho)
    vol_drift = -0.5 * params.volvol ** 2 * dt

    values = np.empty((nu, steps + 1))
    values[:, 0] = 0.0
    for i in range(nu):
        z = path_normals(seed, i, (steps, 2))
        w1 = z[:, 0]
        w2 = rho * w1 + rho_bar * z[:, 1]
        # sigma_j is the start-of-step vol: sigma_0 = alpha, then exact
        # lognormal updates driven by w2.
        log_sigma = np.empty(steps)
        log_sigma[0] = math.log(params.alpha)
        np.cumsum(vol_drift + params.volvol * sqrt_dt * w2[:-1],
                  out=log_sigma[1:])
        log_sigma[1:] += log_sigma[0]
        sigma = np.exp(log_sigma)
        np.cumsum(sigma * sqrt_dt * w1, out=values[i, 1:])
    times = np.linspace(0.0, horizon, steps + 1)
    return PathSet(times=times, values=values, sigma_prior=params.alpha,
                   seed=seed, kind="sabr")
