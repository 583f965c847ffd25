"""Observation synthesis: scan the simulated scene and normalize the force reading."""

import logging
from typing import Optional, Sequence

import numpy as np

from forceflow.common import InvalidArgumentError
from forceflow.contact_sim import ContactWorld
from forceflow.flow_policy import Observation
from forceflow.pointcloud import (
    NoiseConfig, ScannerConfig, Scene, fps_downsample, inject_cloud_noise, synth_pointcloud
)

logger = logging.getLogger(__name__)


def normalize_force(force: Sequence[float], f_max: float) -> np.ndarray:
    """F / F_max, clipped componentwise to [-1, 1]."""
    if f_max <= 0.0:
        raise InvalidArgumentError(f"force normalization needs F_max > 0, got {f_max}")
    f = getattr(force, 'f', force)
    return np.clip(np.asarray(f, dtype=np.float64) / f_max, -1.0, 1.0)


def scan_world(world: ContactWorld, scanner: ScannerConfig, noise: NoiseConfig,
               n_points: int, rng_seed: int) -> np.ndarray:
    """Noisy, cropped and FPS-downsampled cloud of the current scene."""
    scan = synth_pointcloud(Scene.from_world(world), scanner.pose(), scanner.n_rays, scanner.fov)
    scan = inject_cloud_noise(scan, rng_seed, noise)
    return fps_downsample(scan.points, n_points, start_index=0, bounds=scanner.bounds())


def observe_world(
    world: ContactWorld,
    scanner: ScannerConfig,
    noise: NoiseConfig,
    n_points: int,
    rng_seed: int,
    applied_force: Optional[Sequence[float]] = None,
    f_max: float = 5.0
) -> Observation:
    """
    Build the policy observation of a world.

    Args:
        applied_force: force the ee applies to the environment (negated
            sensor reading); defaults to the last step's reading
    """
    if applied_force is None:
        applied_force = -world.last_info.ee_contact_force.f
    cloud = scan_world(world, scanner, noise, n_points, rng_seed)
    return Observation(cloud=cloud, ee=world.ee_pose(), force=normalize_force(applied_force, f_max))
