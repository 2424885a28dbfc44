"""Market data model: vol-surface grids, histories, curves and schedules.

Surfaces live on a fixed strike-offset by expiry grid in forward-centered
coordinates (offsets are absolute rate shifts from the forward, in
decimals).  The canonical grid is 7 x 7: offsets -50 .. +50 bp around ATM
and expiries 9 months to 5 years.
"""
from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass

import numpy as np

from .errors import CurveError, DataFormatError, GridError
from .sabr import SabrParams, sabr_normal_vol

__all__ = [
    "DEFAULT_GRID",
    "DiscountCurve",
    "MarketHistory",
    "RegimeConfig",
    "SurfaceGrid",
    "SwapSchedule",
    "VolSurface",
    "annuity_factor",
    "chronological_split",
    "forward_swap_rate",
    "load_history",
    "mrae",
    "mrae_arrays",
    "save_history",
    "sliding_window_std",
    "synthetic_history",
]


@dataclass(frozen=True)
class SurfaceGrid:
    """Strike offsets and expiries defining a surface's nodes."""

    strike_offsets: tuple
    expiries: tuple

    def __post_init__(self):
        offsets = tuple(float(x) for x in self.strike_offsets)
        expiries = tuple(float(x) for x in self.expiries)
        if len(offsets) < 1 or len(expiries) < 1:
            raise GridError("grid must have at least one strike and expiry")
        if any(b <= a for a, b in zip(offsets, offsets[1:])):
            raise GridError("strike offsets must be strictly increasing")
        if any(b <= a for a, b in zip(expiries, expiries[1:])):
            raise GridError("expiries must be strictly increasing")
        if 0.0 not in offsets:
            raise GridError("grid must contain the ATM offset 0.0")
        if expiries[0] <= 0.0:
            raise GridError("expiries must be positive")
        object.__setattr__(self, "strike_offsets", offsets)
        object.__setattr__(self, "expiries", expiries)

    @property
    def shape(self):
        return (len(self.expiries), len(self.strike_offsets))

    @property
    def size(self):
        return len(self.expiries) * len(self.strike_offsets)

    def nodes(self):
        """Flattened ``(strike_offsets, expiries)`` arrays, expiry-major."""
        ks = np.tile(self.strike_offsets, len(self.expiries))
        ts = np.repeat(self.expiries, len(self.strike_offsets))
        return ks, ts

    @property
    def atm_index(self):
        return self.strike_offsets.index(0.0)


DEFAULT_GRID = SurfaceGrid(
    strike_offsets=(-0.0050, -0.0025, -0.00125, 0.0, 0.00125, 0.0025, 0.0050),
    expiries=(0.75, 1.0, 1.5, 2.0, 3.0, 4.0, 5.0),
)


@dataclass(frozen=True, eq=False)
class VolSurface:
    """One day's implied normal vols on a grid; ``date`` may be None for
    synthetic or decoded surfaces."""

    date: dt.date | None
    grid: SurfaceGrid
    vols: np.ndarray  # shape (n_expiries, n_strikes)

    def __post_init__(self):
        vols = np.asarray(self.vols, dtype=float)
        if vols.shape != self.grid.shape:
            raise GridError(
                f"vol matrix shape {vols.shape} does not match grid {self.grid.shape}"
            )
        if not np.all(np.isfinite(vols)):
            raise ValueError("vols must be finite")
        if np.any(vols <= 0.0):
            raise ValueError("vols must be positive")
        vols = vols.copy()
        vols.setflags(write=False)
        object.__setattr__(self, "vols", vols)

    def flat(self):
        """Row-major (expiry-major) flattened vols, matching grid.nodes()."""
        return self.vols.ravel()

    def vol(self, strike_offset: float, expiry: float) -> float:
        try:
            i = self.grid.expiries.index(expiry)
            j = self.grid.strike_offsets.index(strike_offset)
        except ValueError:
            raise GridError(
                f"({strike_offset}, {expiry}) is not a grid node"
            ) from None
        return float(self.vols[i, j])

    def atm_vol(self, expiry: float) -> float:
        return self.vol(0.0, expiry)


class MarketHistory:
    """Chronologically ordered surfaces sharing one grid."""

    def __init__(self, surfaces):
        surfaces = list(surfaces)
        if not surfaces:
            raise ValueError("history must contain at least one surface")
        grid = surfaces[0].grid
        for s in surfaces:
            if s.date is None:
                raise ValueError("history surfaces need dates")
            if s.grid != grid:
                raise GridError("all surfaces in a history must share a grid")
        dates = [s.date for s in surfaces]
        if any(b <= a for a, b in zip(dates, dates[1:])):
            raise ValueError("dates must be strictly increasing")
        self.surfaces = surfaces
        self.grid = grid

    def __len__(self):
        return len(self.surfaces)

    def __iter__(self):
        return iter(self.surfaces)

    def __getitem__(self, idx):
        selected = self.surfaces[idx]
        if isinstance(idx, slice):
            return MarketHistory(selected)
        return selected

    @property
    def dates(self):
        return [s.date for s in self.surfaces]

    def vol_matrix(self):
        """(n_days, grid.size) matrix of flattened surfaces."""
        return np.stack([s.flat() for s in self.surfaces])


# -- onboarding ---------------------------------------------------------------

_CSV_HEADER = ["date", "expiry_years", "strike_offset", "normal_vol"]


def save_history(history: MarketHistory, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_HEADER)
        for surface in history:
            for i, t in enumerate(surface.grid.expiries):
                for j, k in enumerate(surface.grid.strike_offsets):
                    writer.writerow([surface.date.isoformat(), repr(t), repr(k),
                                     repr(float(surface.vols[i, j]))])


def load_history(path, expected_grid: SurfaceGrid | None = DEFAULT_GRID) -> MarketHistory:
    """Load a surface history from CSV.

    Each date must supply exactly one vol per grid node.  The grid is
    inferred from the file and, unless ``expected_grid`` is None, must match
    it. Errors carry the offending line number.
    """
    by_date: dict = {}
    offsets, expiries = set(), set()
    try:
        fh = open(path, "r", newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DataFormatError(f"file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != _CSV_HEADER:
            raise DataFormatError(f"{path}: expected header {_CSV_HEADER}, got {header}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise DataFormatError(f"{path} line {line_no}: expected 4 columns")
            try:
                day = dt.date.fromisoformat(row[0])
                t = float(row[1])
                k = float(row[2])
                vol = float(row[3])
            except ValueError as exc:
                raise DataFormatError(f"{path} line {line_no}: {exc}") from exc
            if vol <= 0.0 or not math.isfinite(vol):
                raise DataFormatError(
                    f"{path} line {line_no}: non-positive or non-finite vol {vol}"
                )
            node = (t, k)
            if node in by_date.setdefault(day, {}):
                raise DataFormatError(
                    f"{path} line {line_no}: duplicate node {node} for {day}"
                )
            by_date[day][node] = vol
            offsets.add(k)
            expiries.add(t)

    if not by_date:
        raise DataFormatError(f"{path}: no data rows")
    grid = SurfaceGrid(tuple(sorted(offsets)), tuple(sorted(expiries)))
    if expected_grid is not None and grid != expected_grid:
        raise GridError(f"{path}: grid does not match the expected grid")

    surfaces = []
    for day in sorted(by_date):
        nodes = by_date[day]
        vols = np.empty(grid.shape)
        for i, t in enumerate(grid.expiries):
            for j, k in enumerate(grid.strike_offsets):
                try:
                    vols[i, j] = nodes[(t, k)]
                except KeyError:
                    raise DataFormatError(
                        f"{path}: {day} is missing node (T={t}, dK={k})"
                    ) from None
        if len(nodes) != grid.size:
            raise DataFormatError(
                f"{path}: {day} has {len(nodes)} nodes, expected {grid.size}"
            )
        surfaces.append(VolSurface(date=day, grid=grid, vols=vols))
    return MarketHistory(surfaces)


# -- curves and schedules -------------------------------------------------------


class DiscountCurve:
    """Discount factors with log-linear interpolation between pillars.

    A pillar at t=0 with P=1 is implied.  Requests beyond the last pillar
    raise ``CurveError`` (no extrapolation).
    """

    def __init__(self, times, dfs):
        times = np.asarray(times, dtype=float)
        dfs = np.asarray(dfs, dtype=float)
        if times.ndim != 1 or times.shape != dfs.shape or times.size == 0:
            raise ValueError("times and dfs must be matching 1-d arrays")
        if np.any(np.diff(times) <= 0.0) or times[0] <= 0.0:
            raise ValueError("pillar times must be positive and strictly increasing")
        if np.any(dfs <= 0.0):
            raise ValueError("discount factors must be positive")
        self.times = np.concatenate([[0.0], times])
        self.log_dfs = np.concatenate([[0.0], np.log(dfs)])

    @classmethod
    def flat(cls, rate: float, horizon: float = 50.0):
        return cls([horizon], [math.exp(-rate * horizon)])

    def df(self, t):
        t = np.asarray(t, dtype=float)
        if np.any(t < 0.0):
            raise ValueError("time must be non-negative")
        if np.any(t > self.times[-1] + 1e-12):
            raise CurveError(
                f"time {float(np.max(t))} beyond last pillar {self.times[-1]}"
            )
        out = np.exp(np.interp(t, self.times, self.log_dfs))
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SwapSchedule:
    """Fixed-leg times ``(T_k, ..., T_k+m)``: a start plus payment dates."""

    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ValueError("schedule needs a start and at least one payment")
        if times[0] < 0.0 or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be non-negative and increasing")
        object.__setattr__(self, "times", times)

    @classmethod
    def annual(cls, start: float, tenor_years: int):
        return cls(tuple(start + i for i in range(tenor_years + 1)))


def annuity_factor(curve: DiscountCurve, schedule: SwapSchedule) -> float:
    """Fixed-leg annuity: sum of P(0, T_{n+1}) * (T_{n+1} - T_n)."""
    times = np.asarray(schedule.times)
    dfs = curve.df(times[1:])
    return float(np.sum(dfs * np.diff(times)))


def forward_swap_rate(curve: DiscountCurve, schedule: SwapSchedule) -> float:
    """Par rate (P(0, T_k) - P(0, T_k+m)) / annuity."""
    a = annuity_factor(curve, schedule)
    return float((curve.df(schedule.times[0]) - curve.df(schedule.times[-1])) / a)


# -- dataset mechanics ----------------------------------------------------------


def chronological_split(history: MarketHistory, train_fraction: float = 0.7,
                        n_validation: int = 100, seed: int = 0):
    """Split a history into train, validation and test sets.

    The first ``floor(train_fraction * n)`` days form the training block and
    the remainder the test block; ``n_validation`` days are drawn uniformly
    without replacement from the training block (seeded) and removed from it.
    The three sets partition the history.
    """
    n = len(history)
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n_train_block = int(math.floor(train_fraction * n))
    if n_train_block < 1 or n_train_block >= n:
        raise ValueError("history too short for the requested split")
    if n_validation < 0 or n_validation >= n_train_block:
        raise ValueError("n_validation must be smaller than the training block")
    rng = np.random.default_rng(seed)
    val_idx = set()
    if n_validation:
        val_idx = set(rng.choice(n_train_block, size=n_validation, replace=False).tolist())
    train = [history[i] for i in range(n_train_block) if i not in val_idx]
    val = [history[i] for i in sorted(val_idx)]
    test = [history[i] for i in range(n_train_block, n)]
    return (MarketHistory(train),
            MarketHistory(val) if val else None,
            MarketHistory(test))


def mrae_arrays(real, reconstructed) -> float:
    """Mean relative absolute error between two vol arrays."""
    real = np.asarray(real, dtype=float)
    reconstructed = np.asarray(reconstructed, dtype=float)
    if real.shape != reconstructed.shape:
        raise ValueError("shapes differ")
    if np.any(real <= 0.0):
        raise ValueError("reference vols must be positive")
    return float(np.mean(np.abs(real - reconstructed) / real))


def mrae(real: VolSurface, reconstructed: VolSurface) -> float:
    """MRAE between surfaces on the same grid."""
    if real.grid != reconstructed.grid:
        raise GridError("surfaces live on different grids")
    return mrae_arrays(real.vols, reconstructed.vols)


def sliding_window_std(history: MarketHistory, window: int = 5,
                       relative: bool = True) -> np.ndarray:
    """Per-date dispersion of surfaces within a trailing window.

    For each date with a full trailing window, computes the population std
    of each grid node over the window and averages across nodes; in
    ``relative`` mode each node's std is first divided by its windowed mean.
    The first ``window - 1`` entries are NaN.
    """
    if window < 2:
        raise ValueError("window must be at least 2")
    mat = history.vol_matrix()
    n = mat.shape[0]
    out = np.full(n, np.nan)
    for i in range(window - 1, n):
        block = mat[i - window + 1:i + 1]
        mean = block.mean(axis=0)
        std = block.std(axis=0)
        out[i] = float(np.mean(std / mean)) if relative else float(np.mean(std))
    return out


# -- synthetic history -----------------------------------------------------------


@dataclass(frozen=True)
class RegimeConfig:
    """Mean-reverting smile-parameter dynamics for the synthetic generator.

    Alpha and vol-of-vol follow log-space OU walks, correlation and the
    term-structure tilt linear OU walks; a crisis segment scales alpha up
    smoothly.  All parameters are clamped to keep every generated vol
    positive.
    """

    alpha_mean: float = 0.0060
    alpha_log_vol: float = 0.025
    alpha_reversion: float = 0.02
    rho_mean: float = -0.25
    rho_vol: float = 0.03
    rho_reversion: float = 0.02
    volvol_mean: float = 0.32
    volvol_log_vol: float = 0.004
    volvol_reversion: float = 0.02
    tilt_mean: float = 0.18
    tilt_vol: float = 0.025
    tilt_reversion: float = 0.02
    crisis_start: float = 0.78
    crisis_end: float = 0.93
    crisis_scale: float = 1.6
    start_date: dt.date = dt.date(2015, 9, 1)


def _crisis_bump(frac: float, cfg: RegimeConfig) -> float:
    if not cfg.crisis_start < cfg.crisis_end:
        return 0.0
    if frac <= cfg.crisis_start or frac >= cfg.crisis_end:
        return 0.0
    u = (frac - cfg.crisis_start) / (cfg.crisis_end - cfg.crisis_start)
    return 0.5 * (1.0 - math.cos(2.0 * math.pi * u))


def synthetic_history(n_days: int, seed: int,
                      config: RegimeConfig | None = None,
                      grid: SurfaceGrid = DEFAULT_GRID) -> MarketHistory:
    """Generate a business-day history of smile-consistent surfaces.

    Pure function of ``(n_days, seed, config, grid)``.  Each day's smile per
    expiry comes from a normal-SABR formula whose parameters random-walk with
    mean reversion; a multiplicative tilt makes longer expiries richer and a
    crisis window lifts the overall level.
    """
    if n_days < 1:
        raise ValueError("n_days must be positive")
    cfg = config or RegimeConfig()
    rng = np.random.default_rng(seed)
    dks = np.asarray(grid.strike_offsets)
    tilt_shape = (np.asarray(grid.expiries) - 2.0) / 3.0

    log_alpha = math.log(cfg.alpha_mean)
    rho = cfg.rho_mean
    log_volvol = math.log(cfg.volvol_mean)
    tilt = cfg.tilt_mean

    surfaces = []
    day = cfg.start_date
    for i in range(n_days):
        shocks = rng.standard_normal(4)
        log_alpha += (cfg.alpha_reversion * (math.log(cfg.alpha_mean) - log_alpha)
                      + cfg.alpha_log_vol * shocks[0])
        rho += cfg.rho_reversion * (cfg.rho_mean - rho) + cfg.rho_vol * shocks[1]
        rho = min(max(rho, -0.9), 0.9)
        log_volvol += (cfg.volvol_reversion * (math.log(cfg.volvol_mean) - log_volvol)
                       + cfg.volvol_log_vol * shocks[2])
        tilt += cfg.tilt_reversion * (cfg.tilt_mean - tilt) + cfg.tilt_vol * shocks[3]
        tilt = min(max(tilt, -0.5), 0.8)

        frac = i / max(n_days - 1, 1)
        level = math.exp(log_alpha) * (1.0 + (cfg.crisis_scale - 1.0) * _crisis_bump(frac, cfg))
        volvol = min(math.exp(log_volvol), 0.6)

        vols = np.empty(grid.shape)
        for row, t in enumerate(grid.expiries):
            alpha_t = max(level * (1.0 + tilt * tilt_shape[row]), 1e-5)
            params = SabrParams(alpha=alpha_t, rho=rho, volvol=volvol)
            vols[row] = sabr_normal_vol(params, 0.0, dks, t)
        if np.any(vols <= 0.0):
            raise RuntimeError("generator produced a non-positive vol")

        while day.weekday() >= 5:
            day += dt.timedelta(days=1)
        surfaces.append(VolSurface(date=day, grid=grid, vols=vols))
        day += dt.timedelta(days=1)
    return MarketHistory(surfaces)
