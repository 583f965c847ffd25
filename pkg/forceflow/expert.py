"""Scripted demonstrator for the block flip."""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from forceflow.common import ExpertFailedError, InvalidArgumentError
from forceflow.contact_sim import (
    ContactWorld, SimConfig, TaskConfig, classical_impedance_command, disc_block_query, task_success
)
from forceflow.demo_warp import DemoStep, Demonstration, Scenario
from forceflow.se3 import ForceVec, Pose

logger = logging.getLogger(__name__)


@dataclass
class ExpertConfig:
    approach_speed: float = 0.06
    final_approach_speed: float = 0.02
    standoff: float = 0.02
    contact_depth: float = 0.005
    push_height_ratio: float = 0.9
    force_setpoint: float = 2.0
    force_gain: float = 0.5
    stiffness: float = 400.0
    damping: float = 40.0
    push_damping: float = 40.0
    pitch_approach: float = 0.25
    retract_distance: float = 0.03
    timeout: float = 12.0

    def validate(self):
        if self.approach_speed <= 0.0 or self.final_approach_speed <= 0.0:
            raise InvalidArgumentError("approach speeds must be positive")
        if self.retract_distance < 0.0:
            raise InvalidArgumentError("retract_distance must be >= 0")
        if not 0.0 < self.push_height_ratio < 1.0:
            raise InvalidArgumentError("push_height_ratio must lie in (0, 1)")
        if self.force_setpoint <= 0.0 or self.timeout <= 0.0:
            raise InvalidArgumentError("force setpoint and timeout must be positive")


class ApproachPath:
    """Piecewise-linear setpoint moving at a fixed speed per leg, then holding."""

    def __init__(self, waypoints: List[np.ndarray], speeds: List[float]):
        self.waypoints = [np.asarray(w, dtype=np.float64) for w in waypoints]
        self.speeds = speeds
        self.durations = [float(np.linalg.norm(b - a)) / v
                          for a, b, v in zip(self.waypoints[:-1], self.waypoints[1:], speeds)]

    @property
    def duration(self) -> float:
        return sum(self.durations)

    def at(self, t: float) -> np.ndarray:
        for a, b, dur in zip(self.waypoints[:-1], self.waypoints[1:], self.durations):
            if t < dur:
                return a + (b - a) * (t / dur)
            t -= dur
        return self.waypoints[-1].copy()


def approach_path(world: ContactWorld, config: ExpertConfig) -> ApproachPath:
    """Start, a standoff point level with the push height, then just inside the -x face."""
    b, e = world.block, world.ee
    face_x = b.x - b.half_width
    z_push = world.config.table_height + config.push_height_ratio * 2.0 * b.half_height
    start = e.position()
    pre = np.array([face_x - e.radius - config.standoff, 0.0, z_push])
    inside = np.array([face_x - e.radius + config.contact_depth, 0.0, z_push])
    return ApproachPath([start, pre, inside], [config.approach_speed, config.final_approach_speed])


def scripted_expert_demo(
    config: ExpertConfig,
    scenario: Scenario,
    sim: Optional[SimConfig] = None,
    task: Optional[TaskConfig] = None
) -> Demonstration:
    """
    Record a flip demonstration at the control rate.

    The ee approaches under impedance control along a straight path to the
    block face. Once contact is sensed it pushes along the inward contact
    normal with a proportional force loop around the setpoint, following
    the face as the block pivots over the stop. Once the block reaches the
    success angle the push stops and the ee backs off along the contact
    normal, so the block settles untouched until the task succeeds.
    Each sample holds the state before that tick's command.
    """
    config.validate()
    sim = sim or SimConfig()
    task = task or TaskConfig()
    world = ContactWorld.for_task(sim, task, scenario.obj_pose0, scenario.ee_pose0,
                                  scenario.mass, scenario.friction)
    path = approach_path(world, config)
    dt = sim.dt_control
    max_ticks = int(round(config.timeout / dt))

    steps: List[DemoStep] = []
    flags: List[bool] = []
    commands: List[np.ndarray] = []
    info = world.last_info
    pushing = False
    retract: Optional[Pose] = None

    for tick in range(max_ticks):
        applied = -info.ee_contact_force.f
        steps.append(DemoStep(tick * dt, world.ee_pose(), ForceVec(applied), world.block_pose()))
        flags.append(bool(info.ee_block_contact))

        if not pushing and info.ee_block_contact:
            pushing = True
            logger.debug("expert contact at tick %d (t=%.2fs)", tick, tick * dt)

        ee = world.ee
        if pushing and retract is None and world.block.theta >= world.criteria.angle:
            query = disc_block_query(world.block, ee)
            away = np.array([query.normal[0], 0.0, query.normal[1]])
            retract = Pose(ee.position() + config.retract_distance * away)
            logger.debug("expert released at tick %d (theta=%.1f deg)", tick, math.degrees(world.block.theta))

        if retract is not None:
            cmd = classical_impedance_command(retract, config.stiffness, config.damping, ee).f
        elif pushing:
            query = disc_block_query(world.block, ee)
            n_in = -np.array([query.normal[0], 0.0, query.normal[1]])
            f_meas = float(np.linalg.norm(applied))
            f_set = config.force_setpoint
            f_push = min(max(f_set + config.force_gain * (f_set - f_meas), 0.0), 2.0 * f_set)
            cmd = f_push * n_in - config.push_damping * ee.velocity()
            world.set_pitch_target(config.pitch_approach + world.block.theta)
        else:
            setpoint = Pose(path.at(tick * dt))
            cmd = classical_impedance_command(setpoint, config.stiffness, config.damping, ee).f
            world.set_pitch_target(config.pitch_approach)
        cmd = np.array(cmd, dtype=np.float64)
        cmd[1] = 0.0
        commands.append(cmd)

        info = world.step_control(cmd)
        if task_success(world):
            logger.info("expert flipped the block in %.2fs (%d samples)", (tick + 1) * dt, len(steps))
            return Demonstration(steps, dt, flags, np.stack(commands))

    logger.error("expert timed out after %.1fs (theta=%.1f deg)", config.timeout, math.degrees(world.block.theta))
    raise ExpertFailedError(f"scripted expert did not flip the block within {config.timeout}s")
