import numpy as np
import pytest

from forceflow.common import InvalidArgumentError, InvalidSizeError
from forceflow.laplacian import (
    AnchorConstraint, build_path_laplacian, edit_path, kkt_residual, laplacian_coordinates, warp_free_space
)
from forceflow.se3 import Pose, rot_y


def _wavy_path(m: int = 20) -> np.ndarray:
    s = np.linspace(0.0, 1.0, m)
    return np.stack([s * 0.3, 0.02 * np.sin(6.0 * s), 0.1 + 0.05 * np.cos(4.0 * s)], axis=1)


def test_three_point_laplacian_closed_form():
    expected = np.array([
        [1.0, -1.0, 0.0],
        [-0.5, 1.0, -0.5],
        [0.0, -1.0, 1.0],
    ])
    np.testing.assert_array_equal(build_path_laplacian(3).L, expected)


def test_laplacian_rows_sum_to_zero():
    L = build_path_laplacian(12).L
    np.testing.assert_allclose(L.sum(axis=1), 0.0, atol=1e-15)


def test_laplacian_coordinates_translation_invariant():
    lap = build_path_laplacian(20)
    path = _wavy_path()
    np.testing.assert_allclose(laplacian_coordinates(lap, path + [1.0, -2.0, 0.5]),
                               laplacian_coordinates(lap, path), atol=1e-12)


def test_identity_edit():
    path = _wavy_path()
    anchors = [AnchorConstraint(i, path[i]) for i in (0, 1, 18, 19)]
    np.testing.assert_allclose(edit_path(path, anchors), path, atol=1e-9)


def test_translation_equivariance():
    path = _wavy_path()
    shift = np.array([0.05, -0.01, 0.03])
    anchors = [AnchorConstraint(i, path[i] + shift) for i in (0, 7, 19)]
    np.testing.assert_allclose(edit_path(path, anchors), path + shift, atol=1e-9)


def test_anchors_hold_exactly_and_kkt_residual_vanishes():
    rng = np.random.default_rng(11)
    path = _wavy_path(30)
    indices = [0, 1, 2, 27, 28, 29]
    anchors = [AnchorConstraint(i, path[i] + rng.normal(scale=0.05, size=3)) for i in indices]
    edited = edit_path(path, anchors)
    for a in anchors:
        np.testing.assert_array_equal(edited[a.index], a.target)
    assert kkt_residual(path, edited, indices) <= 1e-8


def test_edit_rejects_bad_input():
    path = _wavy_path(10)
    with pytest.raises(InvalidSizeError):
        edit_path(path[:2], [AnchorConstraint(0, path[0]), AnchorConstraint(1, path[1])])
    with pytest.raises(InvalidArgumentError):
        edit_path(path, [AnchorConstraint(0, path[0])])
    with pytest.raises(InvalidArgumentError):
        edit_path(path, [AnchorConstraint(3, path[3]), AnchorConstraint(3, path[3])])
    with pytest.raises(InvalidArgumentError):
        edit_path(path, [AnchorConstraint(0, path[0]), AnchorConstraint(10, path[0])])
    bad = path.copy()
    bad[4, 1] = np.nan
    with pytest.raises(InvalidArgumentError):
        edit_path(bad, [AnchorConstraint(0, path[0]), AnchorConstraint(9, path[9])])
    with pytest.raises(InvalidSizeError):
        build_path_laplacian(1)


def test_warp_free_space_hits_both_anchors():
    path = _wavy_path(25)
    segment = [Pose(p, rot_y(0.1)) for p in path]
    start = path[0] + np.array([0.02, 0.0, -0.01])
    end = path[-1] + np.array([-0.03, 0.0, 0.02])
    q_start, q_end = rot_y(0.0), rot_y(0.4)
    out = warp_free_space(segment, start, q_start, end, q_end, n_cs=4, n_ce=3)

    assert len(out) == len(segment)
    np.testing.assert_allclose(out[0].p, start, atol=1e-12)
    np.testing.assert_allclose(out[-1].p, end, atol=1e-12)
    for t in range(4):
        np.testing.assert_allclose(out[t].p - out[0].p, path[t] - path[0], atol=1e-12)
    for t in range(22, 25):
        np.testing.assert_allclose(out[t].p - out[-1].p, path[t] - path[-1], atol=1e-12)
    assert out[0].q.dot(q_start) > 1.0 - 1e-12
    assert out[-1].q.dot(q_end) > 1.0 - 1e-12


def test_warp_free_space_rejects_overlapping_bands():
    segment = [Pose(p) for p in _wavy_path(8)]
    with pytest.raises(InvalidArgumentError):
        warp_free_space(segment, np.zeros(3), rot_y(0.0), np.ones(3), rot_y(0.0), n_cs=4, n_ce=4)


def test_five_point_stretch_matches_dense_normal_equations():
    path = np.stack([np.arange(5.0), np.zeros(5), np.zeros(5)], axis=1)
    edited = edit_path(path, [AnchorConstraint(0, np.zeros(3)), AnchorConstraint(4, np.array([8.0, 0.0, 0.0]))])

    # independent dense solve on the x coordinate
    L = np.zeros((5, 5))
    for i in range(5):
        nbrs = [j for j in (i - 1, i + 1) if 0 <= j < 5]
        L[i, i] = 1.0
        L[i, nbrs] = -1.0 / len(nbrs)
    delta = L @ np.arange(5.0)
    A = L[:, 1:4]
    b = delta - L[:, 0] * 0.0 - L[:, 4] * 8.0
    expected = np.linalg.solve(A.T @ A, A.T @ b)

    np.testing.assert_allclose(edited[1:4, 0], expected, atol=1e-9)
    np.testing.assert_allclose(edited[:, 1:], 0.0, atol=1e-12)
    assert edited[0, 0] == 0.0 and edited[4, 0] == 8.0
