"""Laplacian editing of waypoint paths."""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
from scipy import linalg

from forceflow.common import InvalidArgumentError, InvalidSizeError
from forceflow.se3 import Pose, UnitQuaternion, slerp

logger = logging.getLogger(__name__)


@dataclass
class PathLaplacian:
    """Uniform-weight path-graph Laplacian: L_ii = 1, L_ij = -1/|N_i| for neighbors."""
    L: np.ndarray
    scheme: str = "path-uniform"

    @property
    def size(self) -> int:
        return self.L.shape[0]


@dataclass
class AnchorConstraint:
    """Hard equality r_new[index] = target."""
    index: int
    target: np.ndarray


def build_path_laplacian(m: int) -> PathLaplacian:
    """
    Build the Laplacian of a path with m waypoints.

    Neighbors are N_i = {i-1, i+1}; endpoints have a single neighbor.
    """
    if m < 2:
        raise InvalidSizeError(f"path Laplacian needs at least 2 waypoints, got {m}")
    L = np.eye(m)
    for i in range(m):
        neighbors = [j for j in (i - 1, i + 1) if 0 <= j < m]
        for j in neighbors:
            L[i, j] = -1.0 / len(neighbors)
    return PathLaplacian(L=L)


def laplacian_coordinates(lap: PathLaplacian, path: np.ndarray) -> np.ndarray:
    """Delta = L r for an (m, d) path."""
    r = np.asarray(path, dtype=np.float64)
    if r.ndim != 2 or r.shape[0] != lap.size:
        raise InvalidSizeError(f"path shape {r.shape} does not match Laplacian of size {lap.size}")
    return lap.L @ r


def edit_path(path: np.ndarray, anchors: Sequence[AnchorConstraint]) -> np.ndarray:
    """
    Deform a path while preserving its Laplacian coordinates.

    Minimizes ||L r_new - Delta||^2 over the unanchored waypoints with every
    anchor held exactly. Each spatial dimension is solved independently.

    Args:
        path: (m, d) original waypoints
        anchors: at least two constraints with distinct indices

    Returns:
        (m, d) edited waypoints
    """
    r = np.asarray(path, dtype=np.float64)
    if r.ndim != 2:
        raise InvalidSizeError(f"path must be (m, d), got {r.shape}")
    m, d = r.shape
    if m < 3:
        raise InvalidSizeError(f"editing needs at least 3 waypoints, got {m}")
    if not np.all(np.isfinite(r)):
        raise InvalidArgumentError("path contains non-finite waypoints")
    if len(anchors) < 2:
        raise InvalidArgumentError("edit_path needs at least 2 anchors")
    indices = [int(a.index) for a in anchors]
    if len(set(indices)) != len(indices):
        raise InvalidArgumentError("anchor indices must be distinct")
    if min(indices) < 0 or max(indices) >= m:
        raise InvalidArgumentError(f"anchor index out of range for path of {m} waypoints")

    lap = build_path_laplacian(m)
    delta = laplacian_coordinates(lap, r)

    anchored = np.zeros(m, dtype=bool)
    anchored[indices] = True
    free = np.flatnonzero(~anchored)

    r_new = np.empty_like(r)
    for a in anchors:
        target = np.asarray(a.target, dtype=np.float64).reshape(-1)
        if target.shape != (d,):
            raise InvalidSizeError(f"anchor target has shape {target.shape}, expected ({d},)")
        r_new[a.index] = target
    if free.size == 0:
        return r_new

    # Reduced system: L_f x_f = Delta - L_a r_a
    L_f = lap.L[:, free]
    rhs = delta - lap.L[:, anchored] @ r_new[anchored]
    solution, _, rank, _ = linalg.lstsq(L_f, rhs)
    assert rank == free.size, "reduced Laplacian system is singular"
    r_new[free] = solution
    return r_new


def kkt_residual(path: np.ndarray, edited: np.ndarray, anchor_indices: Sequence[int]) -> float:
    """Max-norm of the stationarity condition L_f^T (L r_new - Delta) of an edit."""
    r = np.asarray(path, dtype=np.float64)
    lap = build_path_laplacian(r.shape[0])
    residual = lap.L @ np.asarray(edited, dtype=np.float64) - laplacian_coordinates(lap, r)
    free = np.setdiff1d(np.arange(r.shape[0]), np.asarray(anchor_indices, dtype=int))
    if free.size == 0:
        return 0.0
    return float(np.max(np.abs(lap.L[:, free].T @ residual)))


def warp_free_space(
    segment: Sequence[Pose],
    p_ee_new: np.ndarray,
    q_ee_new: UnitQuaternion,
    p_obj_new: np.ndarray,
    q_obj_new: UnitQuaternion,
    n_cs: int = 5,
    n_ce: int = 5
) -> List[Pose]:
    """
    Warp a free-space segment onto a new start pose and a new contact-entry pose.

    The first n_cs samples keep their offsets to the demonstrated start, the
    last n_ce samples keep their offsets to the demonstrated end, and the
    interior follows from the Laplacian edit. Orientations are replaced by a
    SLERP from q_ee_new to q_obj_new over the segment length.
    """
    length = len(segment)
    if n_cs < 1 or n_ce < 1:
        raise InvalidArgumentError("anchor bands need at least one sample each")
    if n_cs + n_ce >= length:
        raise InvalidArgumentError(
            f"anchor bands overlap: n_cs={n_cs} + n_ce={n_ce} >= segment length {length}")

    positions = np.stack([pose.p for pose in segment])
    start = np.asarray(p_ee_new, dtype=np.float64)
    end = np.asarray(p_obj_new, dtype=np.float64)

    anchors = []
    for t in range(n_cs):
        anchors.append(AnchorConstraint(t, start + (positions[t] - positions[0])))
    for t in range(length - n_ce, length):
        anchors.append(AnchorConstraint(t, end + (positions[t] - positions[-1])))

    warped = edit_path(positions, anchors)
    logger.debug("warped free segment of %d samples (start shift %s, end shift %s)",
                 length, start - positions[0], end - positions[-1])

    out = []
    for t in range(length):
        s = t / (length - 1)
        out.append(Pose(warped[t], slerp(q_ee_new, q_obj_new, s)))
    return out
