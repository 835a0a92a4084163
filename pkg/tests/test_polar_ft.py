from __future__ import annotations

import time

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from uvtomo.forward import ProjectionImage
from uvtomo.polar_ft import (
    check_nyquist,
    default_cutoff,
    make_polar_grid,
    nyquist,
    polar_dft,
    polar_dft_direct,
    polar_dft_fast,
)

seeds = st.integers(min_value=0, max_value=2**32)


def literal_sum(pixels, delta, grid):
    """Quadruple loop over nodes and pixels, straight from the defining formula."""
    M = (pixels.shape[0] - 1) // 2
    out = np.zeros((grid.N_k, grid.N_phi), dtype=complex)
    for i, k in enumerate(grid.k_nodes):
        for p, phi in enumerate(grid.angles):
            acc = 0j
            for u in range(-M, M + 1):
                for v in range(-M, M + 1):
                    acc += pixels[u + M, v + M] * np.exp(-1j * k * delta * (u * np.cos(phi) + v * np.sin(phi)))
            out[i, p] = acc
    return delta**2 * out


def test_two_point_rule():
    g = make_polar_grid(2, 4, 1.0)
    np.testing.assert_allclose(g.k_nodes, [0.5 * (1 - 1 / np.sqrt(3)), 0.5 * (1 + 1 / np.sqrt(3))], rtol=1e-15)
    np.testing.assert_allclose(g.k_weights, [0.5, 0.5], rtol=1e-15)
    assert np.sum(g.k_weights * g.k_nodes**3) == pytest.approx(0.25, abs=1e-16)


def test_grid_layout():
    g = make_polar_grid(400, 400, default_cutoff(0.005))
    assert g.N_k == 400 and g.N_phi == 400
    assert np.all(np.diff(g.k_nodes) > 0) and g.k_nodes[0] > 0 and g.k_nodes[-1] < g.cutoff
    assert np.all(g.k_weights > 0)
    np.testing.assert_allclose(g.angles, 2 * np.pi * np.arange(400) / 400)


def test_grid_validation():
    for args in [(1, 8, 1.0), (8, 3, 1.0), (8, 8, 0.0)]:
        with pytest.raises(ValueError):
            make_polar_grid(*args)


def test_nyquist_guard():
    g = make_polar_grid(4, 8, 1.01 * nyquist(0.1))
    with pytest.raises(ValueError):
        check_nyquist(g, 0.1)
    with pytest.raises(ValueError):
        polar_dft(ProjectionImage(np.zeros((5, 5)), 0.1), g)


@pytest.mark.parametrize("method", ["direct", "fast"])
def test_zero_and_impulse(method):
    g = make_polar_grid(6, 8, default_cutoff(0.1))
    z = polar_dft(ProjectionImage(np.zeros((7, 7)), 0.1), g, method)
    assert np.all(z.values == 0)
    img = np.zeros((7, 7))
    img[3, 3] = 1.0
    s = polar_dft(ProjectionImage(img, 0.1), g, method)
    np.testing.assert_allclose(s.values, 0.01, atol=1e-17)


@pytest.mark.parametrize("seed", range(3))
def test_fast_matches_literal_loop(seed):
    pix = np.random.default_rng(seed).standard_normal((9, 9))
    g = make_polar_grid(8, 8, default_cutoff(0.1))
    ref = literal_sum(pix, 0.1, g)
    assert np.max(np.abs(polar_dft_fast(pix, 0.1, g) - ref)) < 1e-10
    assert np.max(np.abs(polar_dft_direct(pix, 0.1, g) - ref)) < 1e-12


def test_fast_matches_direct_at_nyquist():
    pix = np.random.default_rng(4).standard_normal((41, 41))
    g = make_polar_grid(24, 30, nyquist(0.02))
    ref = polar_dft_direct(pix, 0.02, g)
    err = np.max(np.abs(polar_dft_fast(pix, 0.02, g) - ref)) / np.max(np.abs(ref))
    assert err < 1e-8


@given(seeds)
def test_hermitian_symmetry(seed):
    pix = np.random.default_rng(seed).standard_normal((11, 11))
    g = make_polar_grid(5, 12, default_cutoff(0.1))
    for method in ("direct", "fast"):
        v = polar_dft(ProjectionImage(pix, 0.1), g, method).values
        np.testing.assert_allclose(v[:, 6:], np.conj(v[:, :6]), atol=1e-10)


@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_linearity(seed, a, b):
    gen = np.random.default_rng(seed)
    A, B = gen.standard_normal((2, 9, 9))
    g = make_polar_grid(5, 8, default_cutoff(0.1))
    for f in (polar_dft_direct, polar_dft_fast):
        lhs = f(a * A + b * B, 0.1, g)
        rhs = a * f(A, 0.1, g) + b * f(B, 0.1, g)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@given(seeds)
def test_translation_law(seed):
    pix = np.zeros((13, 13))
    pix[2:11, 2:11] = np.random.default_rng(seed).standard_normal((9, 9))
    shifted = np.roll(pix, 1, axis=0)  # u -> u + 1, no wrap because the border is empty
    g = make_polar_grid(6, 10, default_cutoff(0.1))
    phase = np.exp(-1j * np.outer(g.k_nodes, np.cos(g.angles)) * 0.1)
    for f in (polar_dft_direct, polar_dft_fast):
        np.testing.assert_allclose(f(shifted, 0.1, g), phase * f(pix, 0.1, g), atol=1e-10)


def test_auto_method_selection():
    g = make_polar_grid(4, 8, default_cutoff(0.1))
    pix = np.random.default_rng(0).standard_normal((9, 9))
    np.testing.assert_array_equal(polar_dft(ProjectionImage(pix, 0.1), g).values, polar_dft_direct(pix, 0.1, g))


@pytest.mark.slow
def test_fast_path_runtime_target():
    g = make_polar_grid(400, 400, default_cutoff(0.005))
    pix = np.random.default_rng(0).random((201, 201))
    polar_dft_fast(pix, 0.005, g)
    t0 = time.perf_counter()
    polar_dft_fast(pix, 0.005, g)
    elapsed = time.perf_counter() - t0
    print(f"201x201 image on a 400x400 grid: {1e3 * elapsed:.1f} ms")
    assert elapsed < 0.05
