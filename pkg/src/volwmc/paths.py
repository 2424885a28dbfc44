"""Simulation grids and path sets for the weighted Monte Carlo engine.

Every path draws from its own counter-based stream (Philox keyed by
``(seed, path_index)``), so path ``i`` is bit-identical regardless of how
many paths are generated or in which order they are evaluated.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CurveError, DataFormatError, PathBindingError

__all__ = [
    "PathSet",
    "generate_brownian_paths",
    "load_paths",
    "load_weights",
    "path_normals",
    "save_paths",
    "save_weights",
]

_MAGIC = b"VOLWMC01"
_HEADER = struct.Struct("<8sIIQQQdd")  # magic, version, kind, nu, steps, seed, horizon, sigma_prior
_FORMAT_VERSION = 1
_KIND_CODES = {"brownian": 0, "weights": 1, "sabr": 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


def path_normals(seed: int, path_index: int, shape):
    """Standard normals for one path from its dedicated Philox stream."""
    key = np.array([seed, path_index], dtype=np.uint64)
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.standard_normal(shape)


@dataclass(frozen=True)
class PathSet:
    """Simulated forward paths on a uniform time grid, all starting at 0.

    ``values`` has shape ``(nu, steps + 1)`` with column 0 identically zero.
    ``sigma_prior`` records the generating vol scale (the initial vol for
    stochastic-vol paths) and, with ``seed`` and the shape, identifies the
    set for checkpoint binding.
    """

    times: np.ndarray
    values: np.ndarray
    sigma_prior: float
    seed: int
    kind: str = "brownian"

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if times.ndim != 1 or values.ndim != 2:
            raise ValueError("times must be 1-d and values 2-d")
        if values.shape[1] != times.shape[0]:
            raise ValueError("values and times disagree on step count")
        if times[0] != 0.0 or np.any(np.diff(times) <= 0.0):
            raise ValueError("times must start at 0 and strictly increase")
        if np.any(values[:, 0] != 0.0):
            raise ValueError("all paths must start at 0")
        if self.kind not in _KIND_CODES or self.kind == "weights":
            raise ValueError(f"invalid path kind {self.kind!r}")
        if self.sigma_prior <= 0.0:
            raise ValueError("sigma_prior must be positive")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @property
    def nu(self) -> int:
        return self.values.shape[0]

    @property
    def n_steps(self) -> int:
        return self.values.shape[1] - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    def identity(self) -> dict:
        return {
            "kind": self.kind,
            "seed": int(self.seed),
            "nu": self.nu,
            "steps": self.n_steps,
            "horizon": self.horizon,
            "sigma_prior": float(self.sigma_prior),
        }

    def time_index(self, t: float) -> int:
        """Grid index of the path time nearest ``t``, within half a step."""
        if t < 0.0:
            raise ValueError("time must be non-negative")
        idx = int(round(t / self.dt))
        if idx > self.n_steps:
            raise CurveError(
                f"time {t} lies beyond the path horizon {self.horizon}"
            )
        if abs(self.times[idx] - t) > 0.5 * self.dt + 1e-12:
            raise CurveError(f"time {t} is not within half a step of the grid")
        return idx

    def terminal(self, t: float) -> np.ndarray:
        return self.values[:, self.time_index(t)]


def generate_brownian_paths(nu: int, horizon: float, steps: int,
                            sigma_prior: float, seed: int) -> PathSet:
    """Arithmetic Brownian paths ``dS = sigma_prior * sqrt(dt) * xi``."""
    if nu < 2:
        raise ValueError("need at least two paths")
    if steps < 1:
        raise ValueError("need at least one step")
    if horizon <= 0.0:
        raise ValueError("horizon must be positive")
    if sigma_prior <= 0.0:
        raise ValueError("sigma_prior must be positive")
    if seed < 0:
        raise ValueError("seed must be a non-negative integer")
    dt = horizon / steps
    scale = sigma_prior * np.sqrt(dt)
    values = np.empty((nu, steps + 1))
    values[:, 0] = 0.0
    for i in range(nu):
        np.cumsum(scale * path_normals(seed, i, steps), out=values[i, 1:])
    times = np.linspace(0.0, horizon, steps + 1)
    return PathSet(times=times, values=values, sigma_prior=sigma_prior,
                   seed=seed, kind="brownian")


# -- binary round trips --------------------------------------------------------


def save_paths(path_set: PathSet, path):
    header = _HEADER.pack(_MAGIC, _FORMAT_VERSION, _KIND_CODES[path_set.kind],
                          path_set.nu, path_set.n_steps, path_set.seed,
                          path_set.horizon, path_set.sigma_prior)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(path_set.values, dtype="<f8").tobytes())


def _read_header(fh, path):
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, kind_code, nu, steps, seed, horizon, sigma_prior = _HEADER.unpack(raw)
    if magic != _MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != _FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    if kind_code not in _KIND_NAMES:
        raise DataFormatError(f"{path}: unknown payload kind {kind_code}")
    return _KIND_NAMES[kind_code], nu, steps, seed, horizon, sigma_prior


def _open_binary(path):
    try:
        return open(path, "rb")
    except FileNotFoundError:
        raise DataFormatError(f"file not found: {path}") from None


def load_paths(path) -> PathSet:
    with _open_binary(path) as fh:
        kind, nu, steps, seed, horizon, sigma_prior = _read_header(fh, path)
        if kind == "weights":
            raise DataFormatError(f"{path}: holds weights, not paths")
        data = np.frombuffer(fh.read(), dtype="<f8")
    expected = nu * (steps + 1)
    if data.size != expected:
        raise DataFormatError(
            f"{path}: expected {expected} doubles, found {data.size}"
        )
    values = data.reshape(nu, steps + 1).copy()
    times = np.linspace(0.0, horizon, steps + 1)
    return PathSet(times=times, values=values, sigma_prior=sigma_prior,
                   seed=seed, kind=kind)


def save_weights(weights, identity: dict, path):
    """Persist a weight vector together with the identity of its path set."""
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != identity["nu"]:
        raise PathBindingError("weight length does not match the path count")
    header = _HEADER.pack(_MAGIC, _FORMAT_VERSION, _KIND_CODES["weights"],
                          identity["nu"], identity["steps"],
                          identity["seed"], identity["horizon"],
                          identity["sigma_prior"])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())


def weights_match_paths(identity: dict, path_set: PathSet) -> bool:
    """True when a stored weight identity refers to this path set.

    The weight format does not retain the source path kind, so the match is
    over the remaining identity fields.
    """
    mine = {k: v for k, v in path_set.identity().items() if k != "kind"}
    return mine == identity


def load_weights(path):
    """Returns ``(weights, paths_identity)``; the source kind is not stored."""
    with _open_binary(path) as fh:
        kind, nu, steps, seed, horizon, sigma_prior = _read_header(fh, path)
        if kind != "weights":
            raise DataFormatError(f"{path}: holds {kind} paths, not weights")
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != nu:
        raise DataFormatError(f"{path}: expected {nu} weights, found {data.size}")
    identity = {"nu": int(nu), "steps": int(steps), "seed": int(seed),
                "horizon": float(horizon), "sigma_prior": float(sigma_prior)}
    return data.copy(), identity
