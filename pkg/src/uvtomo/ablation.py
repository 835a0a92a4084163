"""Parameter sweeps of feature quality against the closed-form features.

The model is fixed for a whole sweep. Repetition ``r`` draws its rotations and
noise from the same stream for every swept value, so differences along the axis
reflect the parameter rather than a fresh sample.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import accumulate_moments, default_t_grid, estimate_features, normalized_errors
from .forward import iter_simulated, sigma_for_snr
from .model import PointSourceModel, Rng
from .polar_ft import default_cutoff, make_polar_grid

AXES = ("L", "delta", "grid", "snr")


@dataclass
class SweepSettings:
    L: int = 2000
    M: int = 50
    delta: float = 0.01
    snr: float = math.inf
    N_k: int = 200
    N_phi: int = 200
    cutoff: float | None = None
    T: int = 256
    t_max: float = math.sqrt(3.0)
    debias: bool | None = None
    n_calibration: int = 256
    workers: int = 1


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    seed: int
    mu_error: float
    c_error: float


def _grid(s: SweepSettings, N_k: int, N_phi: int, delta: float):
    return make_polar_grid(N_k, N_phi, s.cutoff if s.cutoff is not None else default_cutoff(delta))


def _moments(model, L, M, delta, snr, rng: Rng, s: SweepSettings, start=0, sigma=None):
    if sigma is None:
        sigma = sigma_for_snr(model, M, delta, snr, s.n_calibration, rng.child("calibration"))
    chunks = iter_simulated(model, L, M, delta, sigma, rng, start=start)
    return accumulate_moments(chunks, workers=s.workers), sigma


def _errors(model, mom, grid, s: SweepSettings):
    fs = estimate_features(mom, grid, default_t_grid(s.T, s.t_max), s.debias)
    return normalized_errors(fs, model)


def run_sweep(
    model: PointSourceModel,
    axis: str,
    values: Sequence[float],
    settings: SweepSettings | None = None,
    seeds: int = 5,
    master_seed: int = 0,
) -> list[SweepRow]:
    """Feature errors for every ``(value, repetition)`` cell of a one-axis sweep.

    ``L`` values reuse nested prefixes of one simulated stream, and the ``grid``
    axis (``N_k = N_phi = value``) reuses one set of stack moments.
    """
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    if not values:
        raise ValueError("a sweep needs at least one value")
    s = settings or SweepSettings()
    rows: list[SweepRow] = []
    for rep in range(seeds):
        rng = Rng(master_seed).child("ablate", rep)
        if axis == "L":
            order = sorted(set(int(v) for v in values))
            if order[0] < 1:
                raise ValueError("L values must be positive")
            grid = _grid(s, s.N_k, s.N_phi, s.delta)
            mom, sigma, done, found = None, None, 0, {}
            for L in order:
                part, sigma = _moments(model, L - done, s.M, s.delta, s.snr, rng, s, start=done, sigma=sigma)
                mom = part if mom is None else mom + part
                done = L
                found[L] = _errors(model, mom, grid, s)
            for v in values:
                rows.append(SweepRow(axis, float(v), rep, *found[int(v)]))
        elif axis == "grid":
            mom, _ = _moments(model, s.L, s.M, s.delta, s.snr, rng, s)
            for v in values:
                rows.append(SweepRow(axis, float(v), rep, *_errors(model, mom, _grid(s, int(v), int(v), s.delta), s)))
        elif axis == "delta":
            half_fov = (s.M + 0.5) * s.delta
            for v in values:
                M = max(1, round(half_fov / v - 0.5))
                mom, _ = _moments(model, s.L, M, float(v), s.snr, rng, s)
                rows.append(SweepRow(axis, float(v), rep, *_errors(model, mom, _grid(s, s.N_k, s.N_phi, float(v)), s)))
        else:
            grid = _grid(s, s.N_k, s.N_phi, s.delta)
            for v in values:
                mom, _ = _moments(model, s.L, s.M, s.delta, float(v), rng, s)
                rows.append(SweepRow(axis, float(v), rep, *_errors(model, mom, grid, s)))
    return rows


def median_by_value(rows: Sequence[SweepRow]) -> dict[float, tuple[float, float]]:
    """Median ``(mu_error, c_error)`` for each swept value."""
    out = {}
    for v in dict.fromkeys(r.value for r in rows):
        sel = [r for r in rows if r.value == v]
        out[v] = (float(np.median([r.mu_error for r in sel])), float(np.median([r.c_error for r in sel])))
    return out
