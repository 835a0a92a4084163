from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from uvtomo.model import (
    InfeasibleModelError,
    PointSourceModel,
    Rng,
    Rotation,
    quaternion_to_matrix,
    radial_and_pairwise_distances,
    random_model,
    sample_uniform_rotation,
    sample_uniform_rotations,
)

seeds = st.integers(min_value=0, max_value=2**63)


def test_identity_quaternion():
    np.testing.assert_array_equal(quaternion_to_matrix([1, 0, 0, 0]), np.eye(3))


@given(seeds)
def test_sampled_rotations_are_proper(seed):
    R = sample_uniform_rotation(Rng(seed)).matrix
    assert np.max(np.abs(R.T @ R - np.eye(3))) < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12


def test_haar_angle_distribution():
    R = sample_uniform_rotations(100_000, Rng(7))
    theta = np.arccos(np.clip((np.trace(R, axis1=1, axis2=2) - 1) / 2, -1, 1))
    # density (1 - cos t)/pi integrates to (t - sin t)/pi
    p = stats.kstest(theta, lambda t: (t - np.sin(t)) / np.pi).pvalue
    assert p > 0.01


def test_rng_streams_are_reproducible_and_distinct():
    a = Rng(5).child("noise", 3).generator().standard_normal(4)
    b = Rng(5).child("noise", 3).generator().standard_normal(4)
    c = Rng(5).child("noise", 4).generator().standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rotation_rejects_reflections():
    with pytest.raises(ValueError):
        Rotation(np.diag([1.0, 1.0, -1.0]))


def test_single_source_model():
    m = random_model(1, rng=Rng(0))
    assert m.K == 1 and np.all(np.abs(m.centers) <= 0.5)


def test_recorded_five_source_table():
    m = random_model(5, 0.15, 0.05, Rng(2024))
    expected = [
        [-0.22938706243526008, 0.1189835150824522, -0.461285626609091],
        [0.19073754008844024, 0.14726818829004895, -0.08201169897757143],
        [0.026264768433666652, 0.280497180721072, -0.46370217103283995],
        [-0.2707086748395081, 0.2889078226843924, 0.13264667300662125],
        [0.11046849428246608, 0.2348475300074655, 0.42299316241148877],
    ]
    np.testing.assert_array_equal(m.centers, expected)
    _, pair = radial_and_pairwise_distances(m)
    assert pair.min() >= 0.15


def test_infeasible_separation():
    with pytest.raises(InfeasibleModelError):
        random_model(2, 2.0, 0.05, Rng(0))


@given(seeds)
def test_random_model_is_reproducible(seed):
    a = random_model(4, 0.1, 0.03, Rng(seed))
    b = random_model(4, 0.1, 0.03, Rng(seed))
    np.testing.assert_array_equal(a.centers, b.centers)


def test_distance_lists_simple_cases():
    r, p = radial_and_pairwise_distances(PointSourceModel([[0, 0, 0]], 0.05))
    assert r.tolist() == [0.0] and p.size == 0
    r, p = radial_and_pairwise_distances(PointSourceModel([[0, 0, 0.2], [0, 0, -0.2]], 0.05))
    np.testing.assert_allclose(r, [0.2, 0.2])
    np.testing.assert_allclose(p, [0.4])


def test_distance_lists_match_double_loop():
    m = random_model(5, 0.1, 0.05, Rng(3))
    c = m.centers
    radial = sorted(float(np.sqrt(sum(x * x for x in ci))) for ci in c)
    pair = sorted(
        float(np.sqrt(sum((c[i][a] - c[j][a]) ** 2 for a in range(3))))
        for i in range(5) for j in range(i + 1, 5)
    )
    r, p = radial_and_pairwise_distances(m)
    assert r.tolist() == pytest.approx(radial, abs=1e-15)
    assert p.tolist() == pytest.approx(pair, abs=1e-15)


@given(seeds)
def test_distances_invariant_under_rotation(seed):
    m = random_model(4, 0.0, 0.05, Rng(seed), max_radius=0.5)
    R = sample_uniform_rotation(Rng(seed).child("rot"))
    r0, p0 = radial_and_pairwise_distances(m)
    r1, p1 = radial_and_pairwise_distances(m.rotated(R))
    np.testing.assert_allclose(r0, r1, atol=1e-14)
    np.testing.assert_allclose(p0, p1, atol=1e-14)


def test_model_json_round_trip(tmp_path):
    m = random_model(3, 0.2, 0.04, Rng(11))
    m.save(tmp_path / "m.json")
    back = PointSourceModel.load(tmp_path / "m.json")
    np.testing.assert_array_equal(back.centers, m.centers)
    assert back.kernel_sigma == m.kernel_sigma and back.seed == 11


def test_model_validation():
    with pytest.raises(ValueError):
        PointSourceModel([[0.6, 0, 0]], 0.05)
    with pytest.raises(ValueError):
        PointSourceModel([[0, 0, 0]], 0.0)
    with pytest.raises(ValueError):
        PointSourceModel([[0, 0, 0]], 0.05, amplitudes=[-1.0])
