"""Fourier transforms of projection images sampled on a polar grid.

The transform convention is

    s_hat(k, phi) = D^2 * sum_{u,v} s[u, v] * exp(-1j * k * D * (u cos(phi) + v sin(phi)))

with Gauss-Legendre radial nodes on ``(0, cutoff]`` and uniform angles.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numba
import numpy as np

from .forward import ProjectionImage

DIRECT_BELOW = 32  # images narrower than this use the direct sum under method="auto"
DEFAULT_TOL = 1e-15


@dataclass(frozen=True)
class PolarGrid:
    k_nodes: np.ndarray
    k_weights: np.ndarray
    angles: np.ndarray
    cutoff: float

    @property
    def N_k(self) -> int:
        return self.k_nodes.size

    @property
    def N_phi(self) -> int:
        return self.angles.size

    def key(self) -> tuple[int, int, float]:
        return (self.N_k, self.N_phi, float(self.cutoff))

    def to_dict(self) -> dict:
        return {"N_k": self.N_k, "N_phi": self.N_phi, "cutoff": float(self.cutoff)}


@lru_cache(maxsize=32)
def _cached_grid(N_k: int, N_phi: int, cutoff: float) -> PolarGrid:
    x, w = np.polynomial.legendre.leggauss(N_k)
    k = 0.5 * cutoff * (x + 1.0)
    w = 0.5 * cutoff * w
    phi = 2.0 * np.pi * np.arange(N_phi) / N_phi
    for a in (k, w, phi):
        a.setflags(write=False)
    return PolarGrid(k, w, phi, float(cutoff))


def make_polar_grid(N_k: int, N_phi: int, cutoff: float) -> PolarGrid:
    """Gauss-Legendre radial nodes and weights on ``[0, cutoff]`` and ``N_phi`` uniform angles."""
    if N_k < 2:
        raise ValueError("N_k must be at least 2")
    if N_phi < 4:
        raise ValueError("N_phi must be at least 4")
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    return _cached_grid(int(N_k), int(N_phi), float(cutoff))


def nyquist(delta: float) -> float:
    return math.pi / delta


def default_cutoff(delta: float) -> float:
    """Half the Nyquist frequency of the pixel grid."""
    return 0.5 * math.pi / delta


def check_nyquist(grid: PolarGrid, delta: float) -> None:
    if grid.cutoff > nyquist(delta) * (1 + 1e-12):
        raise ValueError(
            f"cutoff {grid.cutoff:.6g} exceeds the Nyquist frequency {nyquist(delta):.6g} for pixel width {delta}"
        )


@dataclass
class PolarSpectrum:
    values: np.ndarray  # (N_k, N_phi) complex
    grid: PolarGrid


def polar_dft_direct(pixels: np.ndarray, delta: float, grid: PolarGrid) -> np.ndarray:
    """Exact evaluation of the defining sum at every grid node."""
    pixels = np.asarray(pixels, dtype=float)
    M = (pixels.shape[0] - 1) // 2
    x = np.arange(-M, M + 1) * delta
    kx = np.multiply.outer(grid.k_nodes, np.cos(grid.angles))
    ky = np.multiply.outer(grid.k_nodes, np.sin(grid.angles))
    out = np.empty(kx.shape, dtype=complex)
    for i in range(grid.N_k):
        a = np.exp(-1j * np.multiply.outer(kx[i], x))  # (N_phi, n) along u
        b = np.exp(-1j * np.multiply.outer(ky[i], x))  # (N_phi, n) along v
        out[i] = np.sum((a @ pixels) * b, axis=1)
    return delta**2 * out


@numba.njit(cache=True)
def _radon_moments(pixels, cosv, sinv, M, B, order):
    # H[p, b, m] = sum over pixels in bin b of s[u, v] * d**m / m!
    n = 2 * M + 1
    nang = cosv.shape[0]
    H = np.zeros((nang, 2 * B + 1, order + 1))
    inv = np.empty(order + 1)
    inv[0] = 1.0
    for m in range(1, order + 1):
        inv[m] = inv[m - 1] / m
    for p in range(nang):
        c = cosv[p]
        s = sinv[p]
        Hp = H[p]
        for iu in range(n):
            uc = (iu - M) * c
            for iv in range(n):
                w = pixels[iu, iv]
                if w == 0.0:
                    continue
                t = uc + (iv - M) * s
                b = math.floor(t + 0.5)
                d = t - b
                row = Hp[int(b) + B]
                term = w
                row[0] += term
                for m in range(1, order + 1):
                    term *= d
                    row[m] += term * inv[m]
    return H


def taylor_order(max_phase: float, tol: float) -> int:
    """Smallest ``m`` with ``max_phase**(m+1) / (m+1)! <= tol``."""
    m = 0
    bound = max_phase
    while bound > tol and m < 60:
        m += 1
        bound *= max_phase / (m + 1)
    return m


@dataclass
class _FastPlan:
    M: int
    delta: float
    order: int
    B: int
    cosv: np.ndarray
    sinv: np.ndarray
    half: bool
    F_re: np.ndarray = field(repr=False)
    F_im: np.ndarray = field(repr=False)
    powers: np.ndarray = field(repr=False)


@lru_cache(maxsize=16)
def _plan(N_k: int, N_phi: int, cutoff: float, M: int, delta: float, tol: float) -> _FastPlan:
    grid = make_polar_grid(N_k, N_phi, cutoff)
    half = N_phi % 2 == 0
    ang = grid.angles[: N_phi // 2] if half else grid.angles
    cosv, sinv = np.cos(ang), np.sin(ang)
    B = int(math.ceil(M * (np.max(np.abs(cosv) + np.abs(sinv))) + 0.5))
    kd = grid.k_nodes * delta
    order = taylor_order(0.5 * float(kd.max()), tol)
    phase = np.multiply.outer(kd, np.arange(-B, B + 1))
    powers = (-1j * kd[:, None]) ** np.arange(order + 1)
    return _FastPlan(M, delta, order, B, cosv, sinv, half, np.cos(phase), -np.sin(phase), powers)


def polar_dft_fast(pixels: np.ndarray, delta: float, grid: PolarGrid, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Slice-theorem evaluation: per-angle Radon binning then a 1D transform over bins.

    Pixel centers are assigned to the nearest unit-width bin along each direction;
    the sub-bin offset ``d`` is restored with a Taylor series of ``exp(-i k D d)``,
    truncated where the remainder is below ``tol`` relative to ``D^2 sum |s|``.
    """
    pixels = np.ascontiguousarray(pixels, dtype=float)
    M = (pixels.shape[0] - 1) // 2
    plan = _plan(grid.N_k, grid.N_phi, grid.cutoff, M, float(delta), float(tol))
    H = _radon_moments(pixels, plan.cosv, plan.sinv, M, plan.B, plan.order)
    nang, nb, nm = H.shape
    Hf = H.transpose(1, 0, 2).reshape(nb, nang * nm)
    G = (plan.F_re @ Hf + 1j * (plan.F_im @ Hf)).reshape(grid.N_k, nang, nm)
    vals = np.einsum("ipm,im->ip", G, plan.powers)
    if plan.half:
        vals = np.concatenate([vals, vals.conj()], axis=1)
    return delta**2 * vals


def polar_dft(
    image: ProjectionImage,
    grid: PolarGrid,
    method: str = "auto",
    tol: float = DEFAULT_TOL,
) -> PolarSpectrum:
    """Polar Fourier transform of one projection image.

    ``method`` is ``"direct"``, ``"fast"`` or ``"auto"`` (direct below 32 pixels across).
    """
    check_nyquist(grid, image.delta)
    if method == "auto":
        method = "direct" if image.pixels.shape[0] < DIRECT_BELOW else "fast"
    if method == "direct":
        vals = polar_dft_direct(image.pixels, image.delta, grid)
    elif method == "fast":
        vals = polar_dft_fast(image.pixels, image.delta, grid, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    return PolarSpectrum(vals, grid)
