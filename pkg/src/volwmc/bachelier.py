"""Normal-model (Bachelier) vanilla pricing and implied-vol inversion.

Prices are annuity-normalized unless an explicit ``annuity`` is passed, and
all rates/vols are decimals (0.0050 means 50 bp).  A payer option pays
``(S_T - K)+`` at expiry, a receiver pays ``(K - S_T)+``; in the
forward-centered convention used throughout the package the forward is 0 and
strikes are offsets from it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import ConvergenceError, NoSolutionError

__all__ = [
    "OptionQuote",
    "bachelier_price",
    "implied_normal_vol",
    "intrinsic_value",
    "parity_residual",
    "put_from_call",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

_PAYER_NAMES = frozenset({"payer", "call"})
_RECEIVER_NAMES = frozenset({"receiver", "put"})


def _norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def _flavor_sign(flavor: str) -> float:
    """+1 for payer/call, -1 for receiver/put."""
    if flavor in _PAYER_NAMES:
        return 1.0
    if flavor in _RECEIVER_NAMES:
        return -1.0
    raise ValueError(f"unknown option flavor {flavor!r}")


def intrinsic_value(s0, k, flavor="payer", annuity=1.0):
    """Undiscounted-forward intrinsic value, scaled by the annuity."""
    w = _flavor_sign(flavor)
    return annuity * np.maximum(w * (np.asarray(s0, float) - k), 0.0)


def bachelier_price(s0, k, sigma, t, flavor="payer", annuity=1.0):
    """Price of a payer or receiver option under a normal forward model.

    Parameters broadcast like numpy arrays.  ``sigma`` may be 0, in which
    case the intrinsic value is returned (the continuous limit).  The annuity
    multiplies the whole price.

    Returns a scalar when every input is scalar.
    """
    s0 = np.asarray(s0, float)
    k = np.asarray(k, float)
    sigma = np.asarray(sigma, float)
    t = np.asarray(t, float)
    if np.any(sigma < 0.0):
        raise ValueError("sigma must be non-negative")
    if np.any(t <= 0.0):
        raise ValueError("expiry must be positive")
    if np.any(np.asarray(annuity, float) <= 0.0):
        raise ValueError("annuity must be positive")

    w = _flavor_sign(flavor)
    m = w * (s0 - k)
    stddev = sigma * np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(stddev > 0.0, m / np.where(stddev > 0.0, stddev, 1.0), np.inf)
    live = m * ndtr(d) + stddev * _norm_pdf(d)
    price = annuity * np.where(stddev > 0.0, live, np.maximum(m, 0.0))
    if price.ndim == 0:
        return float(price)
    return price


def put_from_call(strike_offset: float, call_price):
    """Receiver price implied by the payer price at the same strike offset.

    Parity in the forward-centered convention (forward 0, unit annuity):
    ``receiver = strike_offset + payer``.
    """
    return strike_offset + call_price


def parity_residual(strike_offset: float, call_price, put_price):
    """``strike_offset + call - put``; zero when put/call satisfy parity."""
    return strike_offset + call_price - put_price


def implied_normal_vol(price, s0, k, t, flavor="payer", annuity=1.0,
                       max_iter=200):
    """Invert ``bachelier_price`` for the normal vol.

    Safeguarded Newton iteration on a maintained bracket with bisection
    fallback.  Converges to the tighter of 1e-12 absolute on price and 1e-12
    relative to the quote's time value, so deep out-of-the-money quotes are
    resolved to full floating-point accuracy.  For in-the-money quotes the
    achievable vol accuracy is limited by the representation of
    ``price - intrinsic`` in the input itself.

    Raises ``NoSolutionError`` when the price does not strictly exceed
    intrinsic or is not finite.
    """
    price = float(price)
    if not math.isfinite(price):
        raise NoSolutionError("price must be finite")
    if t <= 0.0:
        raise ValueError("expiry must be positive")
    if annuity <= 0.0:
        raise ValueError("annuity must be positive")

    w = _flavor_sign(flavor)
    m = w * (s0 - k)
    intrinsic = annuity * max(m, 0.0)
    time_value = price - intrinsic
    if time_value <= 0.0:
        raise NoSolutionError(
            f"price {price} is at or below intrinsic {intrinsic}; no normal vol exists"
        )

    sqrt_t = math.sqrt(t)
    tol = min(1e-12, max(time_value * 1e-12, 5e-324))

    def model(sig: float) -> float:
        return bachelier_price(s0, k, sig, t, flavor=flavor, annuity=annuity)

    # Bracket the root: the price is strictly increasing in sigma, f(0) < 0,
    # and the straddle-style bound |m|/sqrt(t) puts us near or above ATM scale.
    lo = 0.0
    hi = max(2.5066282746310002 * time_value / (annuity * sqrt_t),
             abs(m) / sqrt_t, 1e-8)
    doublings = 0
    while model(hi) - price < 0.0:
        hi *= 2.0
        doublings += 1
        if doublings > 200:
            raise NoSolutionError("could not bracket the implied vol")

    # Safeguarded Newton: keep the bracket, and force a bisection whenever the
    # Newton step leaves it or falls behind bisection's guaranteed halving
    # (deep out-of-the-money targets make plain Newton creep).
    sigma = min(0.5 * (lo + hi),
                max(price * _SQRT_2PI / (annuity * sqrt_t), 0.25 * hi))
    dx_old = hi - lo
    best_sigma, best_abs = sigma, math.inf
    for _ in range(max_iter):
        f = model(sigma) - price
        if abs(f) < best_abs:
            best_sigma, best_abs = sigma, abs(f)
        if abs(f) <= tol:
            return sigma
        if f > 0.0:
            hi = sigma
        else:
            lo = sigma
        if hi - lo <= max(1e-15 * hi, 5e-324):
            return best_sigma
        d = (w * (s0 - k)) / (sigma * sqrt_t) if sigma > 0.0 else math.inf
        vega = annuity * sqrt_t * float(_norm_pdf(d))
        candidate = sigma - f / vega if vega > 0.0 and math.isfinite(vega) else lo
        if not (lo < candidate < hi) or abs(2.0 * f) > abs(dx_old * vega):
            candidate = 0.5 * (lo + hi)
        dx_old = abs(candidate - sigma)
        sigma = candidate
    if best_abs <= max(tol, 1e-12):
        return best_sigma
    raise ConvergenceError(
        f"implied vol iteration exhausted {max_iter} steps; best residual {best_abs:g}"
    )


@dataclass(frozen=True)
class OptionQuote:
    """A vanilla quote in forward-centered coordinates."""

    flavor: str
    strike_offset: float
    expiry: float
    price: float

    def __post_init__(self):
        _flavor_sign(self.flavor)
        if self.expiry <= 0.0:
            raise ValueError("expiry must be positive")
        if not math.isfinite(self.price):
            raise ValueError("price must be finite")
        if self.price < intrinsic_value(0.0, self.strike_offset, self.flavor):
            raise ValueError("price below intrinsic")
