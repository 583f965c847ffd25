"""Simulated depth scanning, sensor-noise injection and farthest point sampling."""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from forceflow.common import EmptyCloudError, InvalidArgumentError, InvalidSizeError
from forceflow.contact_sim import ContactWorld
from forceflow.se3 import Pose, planar_pose, rotate_vector

logger = logging.getLogger(__name__)


@dataclass
class ScannerConfig:
    """Fan scanner in the motion plane plus the workspace crop."""
    x: float = 0.20
    z: float = 0.30
    pitch_deg: float = 48.0
    fov_deg: float = 50.0
    n_rays: int = 300
    crop_min: Tuple[float, float, float] = (0.28, -0.05, -0.01)
    crop_max: Tuple[float, float, float] = (0.75, 0.05, 0.25)

    def pose(self) -> Pose:
        return planar_pose(self.x, self.z, math.radians(self.pitch_deg))

    @property
    def fov(self) -> float:
        return math.radians(self.fov_deg)

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.asarray(self.crop_min, dtype=np.float64), np.asarray(self.crop_max, dtype=np.float64)


@dataclass
class NoiseConfig:
    """Depth-sensor artifacts: jitter, flying pixels at depth jumps, occlusion shadows."""
    sigma: float = 0.001
    jump_threshold: float = 0.02
    n_fly: int = 4
    p_occ: float = 0.2
    occ_min_frac: float = 0.03
    occ_max_frac: float = 0.12

    @classmethod
    def noiseless(cls) -> 'NoiseConfig':
        return cls(sigma=0.0, jump_threshold=math.inf, n_fly=0, p_occ=0.0)

    def validate(self):
        if self.sigma < 0 or self.n_fly < 0 or not 0.0 <= self.p_occ <= 1.0:
            raise InvalidArgumentError("noise parameters out of range")
        if not 0.0 <= self.occ_min_frac <= self.occ_max_frac <= 1.0:
            raise InvalidArgumentError("occlusion window fractions must satisfy 0 <= min <= max <= 1")


@dataclass
class Box2D:
    cx: float
    cz: float
    half_width: float
    half_height: float
    theta: float = 0.0


@dataclass
class Disc2D:
    cx: float
    cz: float
    radius: float


@dataclass
class Scene:
    """Solid silhouettes in the x-z plane."""
    boxes: List[Box2D] = field(default_factory=list)
    discs: List[Disc2D] = field(default_factory=list)

    @classmethod
    def from_world(cls, world: ContactWorld, table_extent: Tuple[float, float] = (-1.0, 2.0)) -> 'Scene':
        table_top = world.config.table_height
        lo, hi = table_extent
        boxes = [Box2D((lo + hi) / 2.0, table_top - 0.05, (hi - lo) / 2.0, 0.05)]
        b = world.block
        boxes.append(Box2D(b.x, b.z, b.half_width, b.half_height, b.theta))
        if world.stop is not None:
            s = world.stop
            boxes.append(Box2D(s.x + s.thickness / 2.0, table_top + s.height / 2.0,
                               s.thickness / 2.0, s.height / 2.0))
        discs = [Disc2D(world.ee.x, world.ee.z, world.ee.radius)]
        return cls(boxes=boxes, discs=discs)

    def contains(self, x: float, z: float) -> bool:
        for box in self.boxes:
            c, s = math.cos(box.theta), math.sin(box.theta)
            dx, dz = x - box.cx, z - box.cz
            lx, lz = c * dx - s * dz, s * dx + c * dz
            if abs(lx) < box.half_width and abs(lz) < box.half_height:
                return True
        return any(math.hypot(x - d.cx, z - d.cz) < d.radius for d in self.discs)


@dataclass
class RayScan:
    """Ray-ordered hit points; ray_index is fractional for interpolated points."""
    points: np.ndarray
    ray_index: np.ndarray
    origin: np.ndarray
    n_rays: int

    def __len__(self):
        return self.points.shape[0]

    def depths(self) -> np.ndarray:
        return np.linalg.norm(self.points - self.origin, axis=1)


def ray_box_distance(origin: np.ndarray, dirs: np.ndarray, box: Box2D) -> np.ndarray:
    """Slab-method entry distance along each ray (inf when missed)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    rot_t = np.array([[c, -s], [s, c]])
    o = rot_t @ (origin - np.array([box.cx, box.cz]))
    d = dirs @ rot_t.T
    halves = (box.half_width, box.half_height)
    t_near = np.full(d.shape[0], -np.inf)
    t_far = np.full(d.shape[0], np.inf)
    for axis in range(2):
        h = halves[axis]
        da = d[:, axis]
        parallel = np.abs(da) < 1e-15
        with np.errstate(divide='ignore', invalid='ignore'):
            t1 = (-h - o[axis]) / da
            t2 = (h - o[axis]) / da
        lo = np.where(parallel, np.where(abs(o[axis]) <= h, -np.inf, np.inf), np.minimum(t1, t2))
        hi = np.where(parallel, np.where(abs(o[axis]) <= h, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = np.maximum(t_near, lo)
        t_far = np.minimum(t_far, hi)
    hit = (t_far >= t_near) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def ray_disc_distance(origin: np.ndarray, dirs: np.ndarray, disc: Disc2D) -> np.ndarray:
    oc = origin - np.array([disc.cx, disc.cz])
    b = dirs @ oc
    cc = float(oc @ oc) - disc.radius ** 2
    disc_term = b * b - cc
    with np.errstate(invalid='ignore'):
        t = -b - np.sqrt(disc_term)
    return np.where((disc_term >= 0.0) & (t > 0.0), t, np.inf)


def fan_directions(scanner_pose: Pose, n_raw: int, fov: float) -> np.ndarray:
    """Unit (x, z) directions of a fan centered on the scanner's +x axis."""
    forward = rotate_vector(scanner_pose.q, (1.0, 0.0, 0.0))
    center = math.atan2(forward[2], forward[0])
    if n_raw == 1:
        angles = np.array([center])
    else:
        angles = center + np.linspace(fov / 2.0, -fov / 2.0, n_raw)
    return np.stack([np.cos(angles), np.sin(angles)], axis=1)


def synth_pointcloud(scene: Scene, scanner_pose: Pose, n_raw: int, fov: float = math.radians(50.0)) -> RayScan:
    """
    Cast a fan of n_raw rays and keep the first hit of each.

    Returns the visible surface points in ray order.
    """
    if n_raw < 1:
        raise InvalidSizeError("scanner needs at least one ray")
    origin = np.array([scanner_pose.p[0], scanner_pose.p[2]])
    if scene.contains(origin[0], origin[1]):
        raise InvalidArgumentError("scanner lies inside a solid")
    dirs = fan_directions(scanner_pose, n_raw, fov)

    best = np.full(n_raw, np.inf)
    for box in scene.boxes:
        best = np.minimum(best, ray_box_distance(origin, dirs, box))
    for disc in scene.discs:
        best = np.minimum(best, ray_disc_distance(origin, dirs, disc))

    hit = np.flatnonzero(np.isfinite(best))
    xz = origin + dirs[hit] * best[hit, None]
    points = np.stack([xz[:, 0], np.full(hit.size, scanner_pose.p[1]), xz[:, 1]], axis=1)
    return RayScan(points=points, ray_index=hit.astype(np.float64),
                   origin=np.asarray(scanner_pose.p, dtype=np.float64).copy(), n_rays=n_raw)


def inject_cloud_noise(scan: RayScan, rng_seed: int, params: NoiseConfig) -> RayScan:
    """
    Add depth-sensor artifacts to a ray-ordered scan.

    Flying pixels are interpolated across adjacent-ray depth jumps, then every
    point is jittered, then an angular window may be dropped as a shadow.
    """
    params.validate()
    rng = np.random.default_rng(rng_seed)
    points = scan.points
    index = scan.ray_index

    if params.n_fly > 0 and len(scan) > 1 and math.isfinite(params.jump_threshold):
        depths = scan.depths()
        out_pts, out_idx = [], []
        for i in range(len(scan)):
            out_pts.append(points[i])
            out_idx.append(index[i])
            if i + 1 < len(scan) and index[i + 1] - index[i] == 1.0 \
                    and abs(depths[i + 1] - depths[i]) > params.jump_threshold:
                for j in range(1, params.n_fly + 1):
                    a = j / (params.n_fly + 1)
                    out_pts.append(points[i] + a * (points[i + 1] - points[i]))
                    out_idx.append(index[i] + a)
        points = np.array(out_pts).reshape(-1, 3)
        index = np.array(out_idx, dtype=np.float64)

    if params.sigma > 0.0:
        points = points + rng.normal(0.0, params.sigma, size=points.shape)

    if params.p_occ > 0.0 and rng.random() < params.p_occ and index.size > 0:
        width = rng.uniform(params.occ_min_frac, params.occ_max_frac) * scan.n_rays
        start = rng.uniform(-width, scan.n_rays)
        keep = (index < start) | (index > start + width)
        points, index = points[keep], index[keep]

    return RayScan(points=np.array(points, dtype=np.float64), ray_index=index,
                   origin=scan.origin.copy(), n_rays=scan.n_rays)


def crop_points(points: np.ndarray, bounds: Tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    lo, hi = bounds
    mask = np.all((points >= lo) & (points <= hi), axis=1)
    return points[mask]


def fps_downsample(
    points: np.ndarray,
    n: int,
    start_index: int = 0,
    bounds: Optional[Tuple[Sequence[float], Sequence[float]]] = None
) -> np.ndarray:
    """
    Farthest point sampling to exactly n points.

    Points are first cropped to the axis-aligned workspace bounds when given.
    Clouds smaller than n are padded by repeating the last selected point.
    """
    if n < 1:
        raise InvalidSizeError("fps needs n >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if bounds is not None:
        pts = crop_points(pts, (np.asarray(bounds[0], dtype=np.float64), np.asarray(bounds[1], dtype=np.float64)))
    m = pts.shape[0]
    if m == 0:
        raise EmptyCloudError("no points left to sample")
    if not 0 <= start_index < m:
        raise InvalidArgumentError(f"start index {start_index} out of range for {m} points")

    count = min(n, m)
    selected = [start_index]
    dist = np.sum((pts - pts[start_index]) ** 2, axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        selected.append(nxt)
        dist = np.minimum(dist, np.sum((pts - pts[nxt]) ** 2, axis=1))
    out = pts[selected]
    if count < n:
        out = np.concatenate([out, np.repeat(out[-1:], n - count, axis=0)])
    return out
