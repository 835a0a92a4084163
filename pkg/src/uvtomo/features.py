"""Rotation-invariant mean and autocorrelation features.

The stack estimators average ``Re s_hat`` and ``|s_hat|^2`` over all images and all
polar-grid angles. Both averages are linear in sufficient statistics that do not
depend on the polar grid: the sum of the images and the sum of their discrete
autocorrelations. :class:`StackMoments` accumulates those once; the angular average
at each radial node is then evaluated exactly with separable exponentials, which
is identical to transforming each image and averaging.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np
import scipy.fft as sfft
from scipy.integrate import trapezoid

from .forward import ProjectionStack
from .model import PointSourceModel
from .polar_ft import PolarGrid, check_nyquist

CHUNK = 1024
DEFAULT_T = 256
DEFAULT_T_MAX = math.sqrt(3.0)
_FFT_BUDGET = 2**23  # complex entries per FFT sub-batch


class GridMismatchError(ValueError):
    """Two curves were compared on different sampling grids."""


@dataclass
class BCurve:
    kind: str  # "B1" or "B2"
    values: np.ndarray
    grid: PolarGrid
    n_images: int
    debiased: bool = False
    noise_bias: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("B1", "B2"):
            raise ValueError(f"unknown B-curve kind {self.kind!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("B-curve values must be finite")

    def __add__(self, other: "BCurve") -> "BCurve":
        return BCurve(self.kind, self.values + other.values, self.grid, self.n_images)

    def scaled(self, alpha: float) -> "BCurve":
        return BCurve(self.kind, alpha * self.values, self.grid, self.n_images, self.debiased, self.noise_bias)


@dataclass
class FeatureCurve:
    kind: str  # "mean" or "autocorrelation"
    t_grid: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t_grid, dtype=float)
        if t.ndim != 1 or np.any(t < 0) or np.any(np.diff(t) <= 0):
            raise ValueError("t_grid must be ascending and non-negative")
        v = np.asarray(self.values, dtype=float)
        if v.shape != t.shape or not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite and match the t-grid")
        self.t_grid, self.values = t, v

    @property
    def mass(self) -> float:
        return float(trapezoid(self.values, self.t_grid))

    def normalized(self, total: float) -> "FeatureCurve":
        """Rescale so the trapezoid integral over the t-grid equals ``total``."""
        m = self.mass
        if m == 0:
            return FeatureCurve(self.kind, self.t_grid, self.values.copy())
        return FeatureCurve(self.kind, self.t_grid, self.values * (total / m))


def default_t_grid(T: int = DEFAULT_T, t_max: float = DEFAULT_T_MAX) -> np.ndarray:
    return np.linspace(0.0, t_max, T)


# ---------------------------------------------------------------------------
# sufficient statistics


@dataclass
class StackMoments:
    """Image sum and autocorrelation sum of a projection stack.

    ``autocorr_sum[w + 2M]`` holds ``sum_l sum_x s_l(x) s_l(x - w)`` for lags
    ``w`` in ``[-2M, 2M]^2``.
    """

    M: int
    delta: float
    n_images: int
    image_sum: np.ndarray
    autocorr_sum: np.ndarray
    noise_sigma: float = 0.0

    def __add__(self, other: "StackMoments") -> "StackMoments":
        if (self.M, self.delta) != (other.M, other.delta):
            raise ValueError("cannot combine moments of different geometries")
        return StackMoments(
            self.M, self.delta, self.n_images + other.n_images,
            self.image_sum + other.image_sum, self.autocorr_sum + other.autocorr_sum, self.noise_sigma,
        )


def autocorrelations(images: np.ndarray, summed: bool = True) -> np.ndarray:
    """Full linear autocorrelations of a batch of ``n x n`` images, lag-centered.

    With ``summed`` the power spectra are added before the inverse transform.
    """
    images = np.asarray(images, dtype=float)
    n = images.shape[-1]
    P = sfft.next_fast_len(2 * n - 1, real=True)
    sub = max(1, _FFT_BUDGET // (P * (P // 2 + 1)))
    idx = np.r_[P - (n - 1): P, 0:n]
    out = None if summed else np.empty((images.shape[0], 2 * n - 1, 2 * n - 1))
    power = None
    for lo in range(0, images.shape[0], sub):
        F = sfft.rfftn(images[lo: lo + sub], s=(P, P), axes=(-2, -1))
        pw = F.real**2 + F.imag**2
        if summed:
            pw = pw.sum(axis=0)
            power = pw if power is None else power + pw
        else:
            a = sfft.irfftn(pw, s=(P, P), axes=(-2, -1))
            out[lo: lo + sub] = a[:, idx][:, :, idx]
    if summed:
        a = sfft.irfftn(power, s=(P, P))
        return a[np.ix_(idx, idx)]
    return out


def _block_moments(images: np.ndarray, M: int, delta: float, sigma: float) -> StackMoments:
    return StackMoments(M, delta, images.shape[0], images.sum(axis=0), autocorrelations(images), sigma)


def _blocks(stacks: Iterable[ProjectionStack], size: int) -> Iterator[tuple[np.ndarray, ProjectionStack]]:
    """Re-cut a stream of stacks into blocks of ``size`` images by global index."""
    buf: list[np.ndarray] = []
    count = 0
    ref = None
    for st in stacks:
        ref = ref or st
        imgs = st.images
        while imgs.shape[0]:
            take = min(size - count, imgs.shape[0])
            buf.append(imgs[:take])
            count += take
            imgs = imgs[take:]
            if count == size:
                yield np.concatenate(buf), ref
                buf, count = [], 0
    if count:
        yield np.concatenate(buf), ref


def _tree_sum(parts: list):
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def accumulate_moments(
    stack: ProjectionStack | Iterable[ProjectionStack],
    chunk: int = CHUNK,
    workers: int = 1,
) -> StackMoments:
    """Sufficient statistics of a stack (or a stream of stack pieces).

    Images are summed in fixed blocks of ``chunk`` consecutive images and the block
    sums are combined pairwise in index order, so the result does not depend on
    how the input was split or on ``workers``.
    """
    seen: list[ProjectionStack] = []

    def tap(src):
        for st in src:
            if not seen:
                seen.append(st)
            yield st

    blocks = _blocks(tap([stack] if isinstance(stack, ProjectionStack) else stack), chunk)

    def work(item):
        imgs, ref = item
        return _block_moments(imgs, ref.M, ref.delta, ref.noise_sigma)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(work, blocks))
    else:
        parts = [work(b) for b in blocks]
    if not parts:
        if not seen:
            raise ValueError("no projection stack given")
        return empty_moments(seen[0].M, seen[0].delta, seen[0].noise_sigma)
    return _tree_sum(parts)


def empty_moments(M: int, delta: float, noise_sigma: float = 0.0) -> StackMoments:
    """Moments of a stack with no images; every derived curve is zero."""
    n = 2 * M + 1
    return StackMoments(M, delta, 0, np.zeros((n, n)), np.zeros((2 * n - 1, 2 * n - 1)), noise_sigma)


# ---------------------------------------------------------------------------
# angular averages


def angular_average(arr: np.ndarray, delta: float, grid: PolarGrid) -> np.ndarray:
    """``(1/N_phi) sum_p Re sum_w arr[w] exp(-i k D w.e_p)`` at every radial node.

    ``arr`` is an odd-sided square array centered on offset zero; a leading batch
    axis is allowed.
    """
    arr = np.asarray(arr, dtype=float)
    batched = arr.ndim == 3
    A = arr if batched else arr[None]
    W = A.shape[-1]
    h = (W - 1) // 2
    w = np.arange(-h, h + 1) * delta
    # the real part is symmetric under phi -> phi + pi, so half the angles suffice
    half = grid.N_phi % 2 == 0
    ang = grid.angles[: grid.N_phi // 2] if half else grid.angles
    cos_a, sin_a = np.cos(ang), np.sin(ang)
    out = np.empty((A.shape[0], grid.N_k))
    kc = max(1, int(2**22 // (ang.size * W * max(1, A.shape[0]))))
    for lo in range(0, grid.N_k, kc):
        k = grid.k_nodes[lo: lo + kc]
        X = np.exp(-1j * (k[:, None, None] * cos_a[None, :, None]) * w)  # (kc, P, W) over the first axis
        Y = np.exp(-1j * (k[:, None, None] * sin_a[None, :, None]) * w)
        T = np.matmul(X[None], A[:, None])  # (B, kc, P, W)
        out[:, lo: lo + kc] = np.sum(T * Y[None], axis=-1).real.mean(axis=-1)
    return out if batched else out[0]


def noise_bias(sigma: float, M: int, delta: float) -> float:
    """Expected ``|s_hat|^2`` of white pixel noise under this transform normalization."""
    return sigma**2 * delta**4 * (2 * M + 1) ** 2


def b1_from_moments(mom: StackMoments, grid: PolarGrid) -> BCurve:
    check_nyquist(grid, mom.delta)
    vals = mom.delta**2 * angular_average(mom.image_sum, mom.delta, grid) / max(mom.n_images, 1)
    return BCurve("B1", vals, grid, mom.n_images)


def b2_from_moments(mom: StackMoments, grid: PolarGrid, debias: bool | None = None) -> BCurve:
    check_nyquist(grid, mom.delta)
    vals = mom.delta**4 * angular_average(mom.autocorr_sum, mom.delta, grid) / max(mom.n_images, 1)
    if debias is None:
        debias = mom.noise_sigma > 0
    # an empty stack has no noise power to remove
    bias = noise_bias(mom.noise_sigma, mom.M, mom.delta) if debias and mom.n_images else 0.0
    return BCurve("B2", vals - bias, grid, mom.n_images, bool(debias), bias)


def accumulate_b1(stack: ProjectionStack | Iterable[ProjectionStack], grid: PolarGrid, workers: int = 1) -> BCurve:
    """Average of ``Re s_hat_l(k_i, phi_p)`` over images and angles."""
    return b1_from_moments(accumulate_moments(stack, workers=workers), grid)


def accumulate_b2(
    stack: ProjectionStack | Iterable[ProjectionStack],
    grid: PolarGrid,
    debias: bool | None = None,
    workers: int = 1,
) -> BCurve:
    """Average of ``|s_hat_l(k_i, phi_p)|^2``, minus the white-noise bias when ``debias``.

    ``debias=None`` turns debiasing on exactly when the stack is noisy.
    """
    return b2_from_moments(accumulate_moments(stack, workers=workers), grid, debias)


def per_image_b_curves(stack: ProjectionStack, grid: PolarGrid, batch: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Per-image B1 and (biased) B2 values, shape ``(L, N_k)`` each."""
    check_nyquist(grid, stack.delta)
    d = stack.delta
    b1 = np.empty((stack.L, grid.N_k))
    b2 = np.empty((stack.L, grid.N_k))
    for lo in range(0, stack.L, batch):
        imgs = stack.images[lo: lo + batch]
        b1[lo: lo + batch] = d**2 * angular_average(imgs, d, grid)
        b2[lo: lo + batch] = d**4 * angular_average(autocorrelations(imgs, summed=False), d, grid)
    return b1, b2


# ---------------------------------------------------------------------------
# sine transform and analytic features


def sine_transform(b: BCurve, t_grid: np.ndarray) -> FeatureCurve:
    """``(2 t / pi) sum_i w_i k_i b(k_i) sin(k_i t)`` on ``t_grid``."""
    t = np.asarray(t_grid, dtype=float)
    g = b.grid
    vals = (2.0 * t / np.pi) * (np.sin(np.outer(t, g.k_nodes)) @ (g.k_weights * g.k_nodes * b.values))
    kind = "mean" if b.kind == "B1" else "autocorrelation"
    return FeatureCurve(kind, t, vals)


def shell(t: np.ndarray, r: float, s: float) -> np.ndarray:
    """Surface integral over the sphere of radius ``t`` of a unit-mass isotropic
    Gaussian with width ``s`` centered at distance ``r`` from the origin.

    This is the noncentral chi density with three degrees of freedom.
    """
    t = np.asarray(t, dtype=float)
    if r == 0:
        return math.sqrt(2 / math.pi) * t**2 / s**3 * np.exp(-0.5 * (t / s) ** 2)
    # exp(-(t-r)^2/2s^2) - exp(-(t+r)^2/2s^2) without cancellation
    diff = -np.exp(-0.5 * ((t - r) / s) ** 2) * np.expm1(-2.0 * t * r / s**2)
    return t / (r * s * math.sqrt(2 * math.pi)) * diff


def analytic_features(model: PointSourceModel, t_grid: np.ndarray) -> tuple[FeatureCurve, FeatureCurve]:
    """Closed-form mean and autocorrelation features of a Gaussian-source model."""
    t = np.asarray(t_grid, dtype=float)
    a = model.amplitudes
    s = model.kernel_sigma
    mu = np.zeros_like(t)
    for an, r in zip(a, np.linalg.norm(model.centers, axis=1)):
        mu += an * shell(t, float(r), s)
    C = np.zeros_like(t)
    diff = model.centers[:, None, :] - model.centers[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    for n in range(model.K):
        for m in range(model.K):
            C += a[n] * a[m] * shell(t, float(dist[n, m]), s * math.sqrt(2.0))
    return FeatureCurve("mean", t, mu), FeatureCurve("autocorrelation", t, C)


def analytic_b_curves(model: PointSourceModel, k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spherical averages of the model's Fourier transform and its squared modulus."""
    k = np.asarray(k, dtype=float)
    s2 = model.kernel_sigma**2
    a = model.amplitudes
    r = np.linalg.norm(model.centers, axis=1)
    d = np.linalg.norm(model.centers[:, None] - model.centers[None], axis=-1)
    b1 = np.exp(-0.5 * s2 * k**2) * (np.sinc(np.outer(k, r) / np.pi) @ a)
    b2 = np.exp(-s2 * k**2) * np.einsum("n,m,knm->k", a, a, np.sinc(k[:, None, None] * d / np.pi))
    return b1, b2


def feature_error(est: FeatureCurve, truth: FeatureCurve) -> float:
    """Relative l2 distance ``||est - truth|| / ||truth||`` on a shared t-grid."""
    if est.t_grid.shape != truth.t_grid.shape or not np.allclose(est.t_grid, truth.t_grid, rtol=0, atol=1e-12):
        raise GridMismatchError("feature curves are sampled on different t-grids")
    return float(np.linalg.norm(est.values - truth.values) / np.linalg.norm(truth.values))


@dataclass
class FeatureSet:
    b1: BCurve
    b2: BCurve
    mean: FeatureCurve
    autocorrelation: FeatureCurve


def estimate_features(
    mom: StackMoments,
    grid: PolarGrid,
    t_grid: np.ndarray,
    debias: bool | None = None,
) -> FeatureSet:
    b1 = b1_from_moments(mom, grid)
    b2 = b2_from_moments(mom, grid, debias)
    return FeatureSet(b1, b2, sine_transform(b1, t_grid), sine_transform(b2, t_grid))


def normalized_errors(fs: FeatureSet, model: PointSourceModel) -> tuple[float, float]:
    """Relative l2 errors of the mean and autocorrelation features against the closed forms.

    Estimates are first rescaled to the model's masses ``K`` and ``K^2``, which removes
    the pixel-area factors carried by the stack averages.
    """
    mu_true, c_true = analytic_features(model, fs.mean.t_grid)
    K = model.total_mass
    return (
        feature_error(fs.mean.normalized(K), mu_true),
        feature_error(fs.autocorrelation.normalized(K * K), c_true),
    )
