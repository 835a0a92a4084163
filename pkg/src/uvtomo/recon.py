"""Density reconstruction from binned radial and pairwise distance targets.

The voxel grid has ``(2 M_r + 1)^3`` voxels with centers ``o_i = index * voxel_size``.
Pair operators ``E_t`` only depend on the voxel offset, so products ``E_t phi`` and the
quadratic forms ``phi^T E_t phi`` are evaluated with FFT correlations over a lag table;
explicit sparse matrices are available for small grids.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
import scipy.sparse as sp
from scipy import ndimage

from .features import FeatureCurve
from .model import Rng, as_generator

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Every restart of the solver hit a non-finite objective."""


@dataclass(frozen=True)
class VoxelGrid:
    half_width: int
    voxel_size: float

    def __post_init__(self) -> None:
        if self.half_width < 1:
            raise ValueError("half_width must be at least 1")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")

    @property
    def n(self) -> int:
        return 2 * self.half_width + 1

    @property
    def N(self) -> int:
        return self.n**3

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n, self.n, self.n)

    def indices(self) -> np.ndarray:
        """Integer voxel offsets, shape ``(N, 3)``, in C order of the 3D array."""
        r = np.arange(-self.half_width, self.half_width + 1)
        return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)

    def centers(self) -> np.ndarray:
        return self.indices() * self.voxel_size


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


class DistanceOperators:
    """Radial indicators ``g_t`` and pair matrices ``E_t`` for binned distances.

    Voxel ``i`` belongs to radial bin ``round(|o_i| / delta_t)`` and the pair
    ``(i, j)`` to bin ``round(|o_i - o_j| / delta_t)``.
    """

    def __init__(self, grid: VoxelGrid, delta_t: float | None = None):
        self.grid = grid
        self.delta_t = float(grid.voxel_size if delta_t is None else delta_t)
        if not self.delta_t > 0:
            raise ValueError("delta_t must be positive")
        n, h = grid.n, grid.half_width
        self.radial_bin = _round_half_up(np.linalg.norm(grid.centers(), axis=1) / self.delta_t)
        lag = np.arange(-2 * h, 2 * h + 1)
        lx, ly, lz = np.meshgrid(lag, lag, lag, indexing="ij")
        dist = np.sqrt(lx**2 + ly**2 + lz**2) * grid.voxel_size
        self.lag_bin = _round_half_up(dist / self.delta_t)
        # number of ordered voxel pairs realizing each lag
        cnt1 = n - np.abs(lag)
        self.lag_count = cnt1[:, None, None] * cnt1[None, :, None] * cnt1[None, None, :]
        self.n_bins = int(self.lag_bin.max()) + 1
        self.n_radial_bins = int(self.radial_bin.max()) + 1
        self.pair_counts = np.bincount(self.lag_bin.ravel(), self.lag_count.ravel(), self.n_bins)
        self.radial_members = [np.flatnonzero(self.radial_bin == j) for j in range(self.n_radial_bins)]
        self._P = sfft.next_fast_len(2 * n - 1, real=True)
        self._check_partitions()

    def _check_partitions(self) -> None:
        N = self.grid.N
        if sum(m.size for m in self.radial_members) != N:
            raise AssertionError("radial bins do not partition the voxels")
        if int(round(self.pair_counts.sum())) != N * N:
            raise AssertionError("pair bins do not partition the ordered voxel pairs")

    @property
    def t_bins(self) -> np.ndarray:
        return np.arange(self.n_bins) * self.delta_t

    # explicit forms, meant for small grids and checks
    def g(self, j: int) -> np.ndarray:
        return (self.radial_bin == j).astype(float)

    def pair_bin_matrix(self) -> np.ndarray:
        idx = self.grid.indices()
        d = np.linalg.norm(idx[:, None, :] - idx[None, :, :], axis=-1) * self.grid.voxel_size
        return _round_half_up(d / self.delta_t)

    def E(self, j: int, bins: np.ndarray | None = None) -> sp.csr_matrix:
        bins = self.pair_bin_matrix() if bins is None else bins
        r, c = np.nonzero(bins == j)
        return sp.csr_matrix((np.ones(r.size), (r, c)), shape=(self.grid.N, self.grid.N))

    # fast forms
    def _fft(self, phi: np.ndarray) -> np.ndarray:
        return sfft.rfftn(phi.reshape(self.grid.shape), s=(self._P,) * 3)

    def _lag_slice(self, a: np.ndarray) -> np.ndarray:
        n, P = self.grid.n, self._P
        idx = np.r_[P - (n - 1): P, 0:n]
        return a[np.ix_(idx, idx, idx)]

    def quadratic_forms(self, phi: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
        """``phi^T E_t phi`` for every bin ``t``."""
        F = self._fft(phi) if F is None else F
        a = sfft.irfftn(F.real**2 + F.imag**2, s=(self._P,) * 3)
        return np.bincount(self.lag_bin.ravel(), self._lag_slice(a).ravel(), self.n_bins)

    def apply(self, coef: np.ndarray, phi: np.ndarray, F: np.ndarray | None = None) -> np.ndarray:
        """``sum_t coef[t] * E_t @ phi``."""
        n, P = self.grid.n, self._P
        F = self._fft(phi) if F is None else F
        kern = np.asarray(coef, dtype=float)[self.lag_bin]
        conv = sfft.irfftn(sfft.rfftn(kern, s=(P,) * 3) * F, s=(P,) * 3)
        s = slice(n - 1, 2 * n - 1)
        return conv[s, s, s].ravel()

    def radial_sums(self, phi: np.ndarray) -> np.ndarray:
        return np.bincount(self.radial_bin, phi, self.n_radial_bins)


def build_operators(grid: VoxelGrid, delta_t: float | None = None) -> DistanceOperators:
    return DistanceOperators(grid, delta_t)


# ---------------------------------------------------------------------------
# targets


def _bin_integrals(curve: FeatureCurve, n_bins: int, delta_t: float) -> np.ndarray:
    """Integral of the piecewise-linear curve over ``[(j - 1/2) dt, (j + 1/2) dt]``, clipped at 0."""
    t, f = curve.t_grid, curve.values
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(t))])

    def antider(x):
        x = np.clip(x, t[0], t[-1])
        k = np.clip(np.searchsorted(t, x, side="right") - 1, 0, t.size - 2)
        h = x - t[k]
        slope = (f[k + 1] - f[k]) / (t[k + 1] - t[k])
        return cum[k] + f[k] * h + 0.5 * slope * h * h

    edges = (np.arange(n_bins + 1) - 0.5) * delta_t
    edges[0] = 0.0
    return np.diff(antider(edges))


def discretize_targets(
    mu: FeatureCurve,
    c: FeatureCurve,
    ops: DistanceOperators,
    K: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Bin-integrated radial and pair targets, clamped and scaled to masses ``K`` and ``K^2``."""
    r = np.maximum(_bin_integrals(mu, ops.n_radial_bins, ops.delta_t), 0.0)
    C = np.maximum(_bin_integrals(c, ops.n_bins, ops.delta_t), 0.0)
    if r.sum() <= 0 or C.sum() <= 0:
        raise ValueError("feature curves carry no positive mass on the voxel grid")
    r *= K / math.fsum(r)
    C *= K * K / math.fsum(C)
    _absorb_residual(r, float(K))
    _absorb_residual(C, float(K * K))
    return r, C


def restrict_support(r_targets: np.ndarray, K: float, eps: float) -> np.ndarray:
    """Drop radial bins whose target is below ``eps * K / n_bins`` and rescale to ``K``."""
    r = np.where(r_targets < eps * K / r_targets.size, 0.0, r_targets)
    r *= K / math.fsum(r)
    _absorb_residual(r, float(K))
    return r


# ---------------------------------------------------------------------------
# constraint projection


def project_simplex(x: np.ndarray, mass: float) -> np.ndarray:
    """Euclidean projection onto ``{y >= 0, sum(y) = mass}`` by the sorted-threshold rule."""
    if mass <= 0:
        return np.zeros_like(x)
    u = np.sort(x)[::-1]
    css = np.cumsum(u) - mass
    ind = np.arange(1, x.size + 1)
    # the first entry always qualifies; rounding can hide that when mass << max(x)
    hits = np.flatnonzero(u - css / ind > 0)
    rho = hits[-1] if hits.size else 0
    theta = css[rho] / (rho + 1)
    y = np.maximum(x - theta, 0.0)
    _absorb_residual(y, mass)
    return y


def _absorb_residual(y: np.ndarray, mass: float) -> None:
    """Nudge entries in place so the exact sum of ``y`` is ``mass``.

    The residual is tiny and exactly representable; it goes to the largest entry that
    can take it without rounding and without turning negative.
    """
    for _ in range(4):
        res = math.fsum([mass, *(-y)])
        if res == 0:
            return
        top = np.argmax(y)
        if y[top] + res - y[top] == res:
            y[top] += res
            continue
        for i in np.argsort(-y, kind="stable"):
            if y[i] > 0 and y[i] + res >= 0 and (y[i] + res) - y[i] == res:
                y[i] += res
                break
        else:
            y[top] += res
            return


def project_constraints(phi: np.ndarray, r_targets: np.ndarray, ops: DistanceOperators) -> np.ndarray:
    """Project onto nonnegative densities with prescribed mass in every radial bin.

    The radial bins partition the voxels, so the projection splits into one scaled
    simplex projection per bin.
    """
    phi = np.asarray(phi, dtype=float)
    out = np.zeros_like(phi)
    for j, members in enumerate(ops.radial_members):
        target = r_targets[j] if j < r_targets.size else 0.0
        if members.size and target > 0:
            out[members] = project_simplex(phi[members], float(target))
    return out


# ---------------------------------------------------------------------------
# objective and solver


def objective(phi: np.ndarray, C_targets: np.ndarray, ops: DistanceOperators) -> float:
    q = ops.quadratic_forms(phi)
    return float(np.sum((C_targets - q) ** 2))


def objective_and_gradient(phi: np.ndarray, C_targets: np.ndarray, ops: DistanceOperators) -> tuple[float, np.ndarray]:
    F = ops._fft(phi)
    res = C_targets - ops.quadratic_forms(phi, F)
    return float(np.sum(res**2)), -4.0 * ops.apply(res, phi, F)


@dataclass
class SolverOptions:
    max_iters: int = 500
    step_size: float = 1.0
    backtrack: float = 0.5
    growth: float = 2.0
    min_step: float = 1e-8
    tolerance: float = 1e-10
    restarts: int = 10
    seed: int = 0
    power_iters: int = 200

    def __post_init__(self) -> None:
        if self.max_iters < 1 or self.restarts < 1 or self.power_iters < 1:
            raise ValueError("iteration and restart counts must be positive")
        if not (self.step_size > 0 and 0 < self.backtrack < 1 and self.growth >= 1 and self.min_step > 0):
            raise ValueError("invalid step-size schedule")
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")


@dataclass
class SolverTrace:
    objective: list[float] = field(default_factory=list)
    step: list[float] = field(default_factory=list)

    def rows(self):
        return zip(range(len(self.objective)), self.objective, self.step)


def spectral_init(
    C_targets: np.ndarray,
    ops: DistanceOperators,
    K: float,
    rng: Rng | np.random.Generator | int,
    r_targets: np.ndarray | None = None,
    iters: int = 200,
    return_rayleigh: bool = False,
):
    """Power iteration on ``A = sum_t C(t) E_t`` from a random start.

    The operator is shifted by a Gershgorin bound so the iteration runs on a positive
    semidefinite matrix. The absolute value of the final iterate is projected onto the
    radial constraints (or scaled to mass ``K`` when no radial targets are given).
    """
    gen = as_generator(rng)
    N = ops.grid.N
    shift = float(np.max(ops.apply(C_targets, np.ones(N))))
    v = gen.standard_normal(N)
    v /= np.linalg.norm(v)
    rq = []
    for _ in range(iters):
        w = ops.apply(C_targets, v) + shift * v
        rq.append(float(v @ w))
        v = w / np.linalg.norm(w)
    x = np.abs(v)
    if r_targets is not None:
        x = project_constraints(x, r_targets, ops)
    else:
        x *= K / x.sum()
    return (x, np.array(rq) - shift) if return_rayleigh else x


def pgd_solve(
    init: np.ndarray,
    C_targets: np.ndarray,
    r_targets: np.ndarray,
    ops: DistanceOperators,
    opts: SolverOptions | None = None,
) -> tuple[np.ndarray, SolverTrace]:
    """Projected gradient descent with backtracking on ``sum_t (C(t) - phi^T E_t phi)^2``.

    A trial step is accepted only if the projected point does not increase the
    objective; otherwise the step is halved down to ``min_step``.
    """
    opts = opts or SolverOptions()
    phi = project_constraints(init, r_targets, ops)
    f, g = objective_and_gradient(phi, C_targets, ops)
    if not math.isfinite(f):
        raise FloatingPointError("non-finite objective at the initial point")
    trace = SolverTrace([f], [0.0])
    step = opts.step_size
    for _ in range(opts.max_iters):
        accepted = False
        while step >= opts.min_step:
            cand = project_constraints(phi - step * g, r_targets, ops)
            fc, gc = objective_and_gradient(cand, C_targets, ops)
            if not math.isfinite(fc):
                raise FloatingPointError("non-finite objective during descent")
            if fc <= f:
                accepted = True
                break
            step *= opts.backtrack
        if not accepted:
            break
        rel = (f - fc) / max(f, 1e-300)
        phi, f, g = cand, fc, gc
        trace.objective.append(f)
        trace.step.append(step)
        step *= opts.growth
        if f == 0.0 or rel < opts.tolerance:
            break
    return phi, trace


@dataclass
class RestartResult:
    index: int
    objective: float
    phi: np.ndarray | None
    trace: SolverTrace | None
    error: str | None = None


@dataclass
class SolveResult:
    phi: np.ndarray
    objective: float
    best_restart: int
    trace: SolverTrace
    restarts: list[RestartResult]


def solve(
    C_targets: np.ndarray,
    r_targets: np.ndarray,
    ops: DistanceOperators,
    K: float,
    opts: SolverOptions | None = None,
) -> SolveResult:
    """Multi-restart reconstruction: spectral initialization then descent; keeps the best objective."""
    opts = opts or SolverOptions()
    root = Rng(opts.seed).child("solver")
    results: list[RestartResult] = []
    for r in range(opts.restarts):
        init = spectral_init(C_targets, ops, K, root.child("restart", r), r_targets, opts.power_iters)
        try:
            phi, trace = pgd_solve(init, C_targets, r_targets, ops, opts)
        except FloatingPointError as exc:
            log.warning("restart %d aborted: %s", r, exc)
            results.append(RestartResult(r, math.inf, None, None, str(exc)))
            continue
        results.append(RestartResult(r, trace.objective[-1], phi, trace))
    ok = [res for res in results if res.phi is not None]
    if not ok:
        raise SolverError("all restarts aborted: " + ", ".join(f"#{res.index}: {res.error}" for res in results))
    best = min(ok, key=lambda res: (res.objective, res.index))
    return SolveResult(best.phi, best.objective, best.index, best.trace, results)


# ---------------------------------------------------------------------------
# center extraction


def _weighted_two_means(x: np.ndarray, w: np.ndarray, iters: int = 50) -> np.ndarray:
    d = np.linalg.norm(x[:, None] - x[None], axis=-1)
    i, j = np.unravel_index(np.argmax(d), d.shape)
    cent = x[[i, j]].astype(float)
    lab = np.zeros(len(x), dtype=int)
    for _ in range(iters):
        new = np.argmin(np.linalg.norm(x[:, None] - cent[None], axis=-1), axis=1)
        if _ and np.array_equal(new, lab):
            break
        lab = new
        for c in range(2):
            m = lab == c
            if m.any():
                cent[c] = np.average(x[m], axis=0, weights=w[m])
    return lab


def extract_centers(phi: np.ndarray, grid: VoxelGrid, K: int, threshold: float = 0.2) -> np.ndarray:
    """Mass-weighted centroids of the ``K`` heaviest 26-connected blobs above ``threshold * max``.

    When fewer than ``K`` blobs exist, the heaviest one is split by weighted 2-means
    until ``K`` groups are available.
    """
    phi = np.asarray(phi, dtype=float)
    if phi.max() <= 0:
        raise ValueError("cannot extract centers from an all-zero density")
    vol = phi.reshape(grid.shape)
    mask = vol >= threshold * vol.max()
    labels, n = ndimage.label(mask, structure=np.ones((3, 3, 3)))
    flat = labels.ravel()
    coords = grid.centers()
    groups = []
    for c in range(1, n + 1):
        members = np.flatnonzero(flat == c)
        groups.append(members)
    while len(groups) < K:
        groups.sort(key=lambda m: (-phi[m].sum(), m.min()))
        heavy = groups[0]
        if heavy.size < 2:
            break
        lab = _weighted_two_means(coords[heavy], phi[heavy])
        groups = groups[1:] + [heavy[lab == 0], heavy[lab == 1]]
    groups.sort(key=lambda m: (-phi[m].sum(), m.min()))
    groups = groups[:K]
    return np.array([np.average(coords[m], axis=0, weights=phi[m]) for m in groups])
