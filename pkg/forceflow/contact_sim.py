"""
Planar rigid-body simulator for the block-flipping task.

Motion is in the x-z plane with rotation theta about +y. Positive theta is
clockwise when viewed with x to the right and z up, so a block pushed on its
-x face tips over its +x bottom edge. Contacts are penalty springs with
regularized Coulomb friction.
"""

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from forceflow.common import InvalidArgumentError, SimulationDivergedError, write_csv_frame
from forceflow.se3 import ForceVec, Pose, planar_pose

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    't', 'block_x', 'block_z', 'block_theta', 'block_vx', 'block_vz', 'block_omega',
    'ee_x', 'ee_z', 'ee_pitch', 'ee_vx', 'ee_vz',
    'contact_fx', 'contact_fy', 'contact_fz', 'cmd_fx', 'cmd_fy', 'cmd_fz',
]


@dataclass
class SimConfig:
    """Physics constants."""
    dt_physics: float = 0.001
    gravity: float = 9.81
    contact_stiffness: float = 5000.0
    contact_damping: float = 50.0
    table_height: float = 0.0
    stiction_velocity: float = 0.001
    ee_table_friction: float = 0.3
    control_hz: float = 100.0
    pitch_gain: float = 10.0
    contacts_enabled: bool = True

    def validate(self):
        if not 0.0 < self.dt_physics <= 0.002:
            raise InvalidArgumentError(f"dt_physics must lie in (0, 2 ms], got {self.dt_physics}")
        if self.contact_stiffness <= 0.0:
            raise InvalidArgumentError("contact stiffness must be positive")
        if self.contact_damping < 0.0 or self.stiction_velocity <= 0.0:
            raise InvalidArgumentError("contact damping must be >= 0 and stiction velocity > 0")
        if self.control_hz <= 0.0:
            raise InvalidArgumentError("control rate must be positive")

    @property
    def substeps(self) -> int:
        """Physics steps per control tick."""
        return max(1, int(round(1.0 / (self.control_hz * self.dt_physics))))

    @property
    def dt_control(self) -> float:
        return self.substeps * self.dt_physics


@dataclass
class TaskConfig:
    """Block-flipping scene: nominal geometry, start poses and success rule."""
    block_half_width: float = 0.02
    block_half_height: float = 0.025
    block_mass: float = 0.3
    friction: float = 0.6
    block_scale: float = 1.0
    ee_radius: float = 0.01
    ee_mass: float = 1.0
    nominal_obj_x: float = 0.45
    nominal_ee_x: float = 0.28
    nominal_ee_z: float = 0.10
    nominal_ee_pitch: float = 0.0
    use_stop: bool = True
    stop_height: float = 0.004
    stop_thickness: float = 0.01
    success_angle_deg: float = 85.0
    success_hold_s: float = 1.0
    success_rate_limit: float = 0.05

    def validate(self):
        if self.block_half_width <= 0 or self.block_half_height <= 0 or self.block_scale <= 0:
            raise InvalidArgumentError("block extents must be positive")
        if self.ee_radius <= 0 or self.ee_mass <= 0 or self.block_mass <= 0:
            raise InvalidArgumentError("ee radius, ee mass and block mass must be positive")

    @property
    def half_width(self) -> float:
        return self.block_half_width * self.block_scale

    @property
    def half_height(self) -> float:
        return self.block_half_height * self.block_scale


@dataclass
class BlockState:
    x: float
    z: float
    theta: float
    vx: float = 0.0
    vz: float = 0.0
    omega: float = 0.0
    half_width: float = 0.02
    half_height: float = 0.025
    mass: float = 0.3
    friction: float = 0.6

    def validate(self):
        if self.mass <= 0.0 or self.half_width <= 0.0 or self.half_height <= 0.0:
            raise InvalidArgumentError("block mass and half-extents must be positive")
        if not 0.0 <= self.friction <= 2.0:
            raise InvalidArgumentError(f"friction must lie in [0, 2], got {self.friction}")

    @property
    def inertia(self) -> float:
        return self.mass * (self.half_width ** 2 + self.half_height ** 2) / 3.0

    def pose(self) -> Pose:
        return planar_pose(self.x, self.z, self.theta)

    def corners_local(self) -> List[Tuple[float, float]]:
        w, h = self.half_width, self.half_height
        return [(-w, -h), (w, -h), (w, h), (-w, h)]

    def to_world(self, bx: float, bz: float) -> Tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return self.x + c * bx + s * bz, self.z - s * bx + c * bz

    def to_local(self, px: float, pz: float) -> Tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dz = px - self.x, pz - self.z
        return c * dx - s * dz, s * dx + c * dz


@dataclass
class EEState:
    """End-effector disc driven by a task-space force (gravity compensated)."""
    x: float
    z: float
    vx: float = 0.0
    vz: float = 0.0
    radius: float = 0.01
    mass: float = 1.0
    pitch: float = 0.0

    def validate(self):
        if self.radius <= 0.0 or self.mass <= 0.0:
            raise InvalidArgumentError("ee radius and mass must be positive")

    def position(self) -> np.ndarray:
        return np.array([self.x, 0.0, self.z])

    def velocity(self) -> np.ndarray:
        return np.array([self.vx, 0.0, self.vz])

    def pose(self) -> Pose:
        return planar_pose(self.x, self.z, self.pitch)


@dataclass
class PivotStop:
    """Thin lip on the table that catches the block's leading bottom corner."""
    x: float
    height: float = 0.004
    thickness: float = 0.01


@dataclass
class GroundContact:
    corner: int
    surface: str
    point: Tuple[float, float]
    force: Tuple[float, float]


@dataclass
class ContactInfo:
    ee_contact_force: ForceVec
    in_contact: bool
    ground_contacts: List[GroundContact] = field(default_factory=list)
    block_force_from_ee: np.ndarray = field(default_factory=lambda: np.zeros(3))
    ee_block_contact: bool = False


@dataclass
class DiscContact:
    """Closest-feature query between the ee disc and the block."""
    normal: Tuple[float, float]
    depth: float
    point: Tuple[float, float]


def regularized_friction(mu: float, f_normal: float, v_tangent: float, v_stiction: float) -> float:
    """Coulomb friction, viscous below the stiction velocity."""
    return -mu * f_normal * v_tangent / max(abs(v_tangent), v_stiction)


def disc_block_query(block: BlockState, ee: EEState) -> DiscContact:
    """
    Normal (block -> ee, world frame), signed penetration depth and block
    surface point closest to the disc center. Depth is negative when apart.
    """
    w, h = block.half_width, block.half_height
    lx, lz = block.to_local(ee.x, ee.z)
    if abs(lx) < w and abs(lz) < h:
        sx = 1.0 if lx >= 0.0 else -1.0
        sz = 1.0 if lz >= 0.0 else -1.0
        pen_x, pen_z = w - abs(lx), h - abs(lz)
        if pen_x < pen_z:
            nl, cl, depth = (sx, 0.0), (sx * w, lz), pen_x + ee.radius
        else:
            nl, cl, depth = (0.0, sz), (lx, sz * h), pen_z + ee.radius
    else:
        cx = min(max(lx, -w), w)
        cz = min(max(lz, -h), h)
        ddx, ddz = lx - cx, lz - cz
        dist = math.hypot(ddx, ddz)
        if dist < 1e-12:
            # center exactly on the surface
            nl = (1.0 if lx >= 0.0 else -1.0, 0.0) if abs(lx) >= w else (0.0, 1.0 if lz >= 0.0 else -1.0)
        else:
            nl = (ddx / dist, ddz / dist)
        cl, depth = (cx, cz), ee.radius - dist
    c, s = math.cos(block.theta), math.sin(block.theta)
    normal = (c * nl[0] + s * nl[1], -s * nl[0] + c * nl[1])
    point = block.to_world(cl[0], cl[1])
    return DiscContact(normal=normal, depth=depth, point=point)


@dataclass
class SuccessCriteria:
    angle: float = math.radians(85.0)
    hold_s: float = 1.0
    rate_limit: float = 0.05


class ContactWorld:
    """One simulator instance: a block, an ee disc and the table."""

    def __init__(
        self,
        config: SimConfig,
        block: BlockState,
        ee: EEState,
        stop: Optional[PivotStop] = None,
        criteria: Optional[SuccessCriteria] = None,
        record: bool = False
    ):
        config.validate()
        block.validate()
        ee.validate()
        self.config = config
        self.block = block
        self.ee = ee
        self.stop = stop
        self.criteria = criteria or SuccessCriteria()
        self.time = 0.0
        self.steps = 0
        self.upright_time = 0.0
        self.pitch_target = ee.pitch
        self.last_info = ContactInfo(ForceVec.zero(), False)
        self.record = record
        self._trace: List[List[float]] = []

    @classmethod
    def for_task(
        cls,
        sim: SimConfig,
        task: TaskConfig,
        obj_pose: Pose,
        ee_pose: Pose,
        mass: float,
        friction: float,
        record: bool = False
    ) -> 'ContactWorld':
        """
        Build the flip scene with the block settled on the table at obj_pose
        (x only; the block starts flat) and the ee disc at rest at ee_pose.
        """
        task.validate()
        w, h = task.half_width, task.half_height
        sag = mass * sim.gravity / (2.0 * sim.contact_stiffness) if sim.contacts_enabled else 0.0
        block = BlockState(
            x=float(obj_pose.p[0]), z=sim.table_height + h - sag, theta=0.0,
            half_width=w, half_height=h, mass=mass, friction=friction
        )
        ee = EEState(
            x=float(ee_pose.p[0]), z=float(ee_pose.p[2]),
            radius=task.ee_radius, mass=task.ee_mass, pitch=ee_pose.q.pitch()
        )
        stop = None
        if task.use_stop:
            stop = PivotStop(x=block.x + w, height=task.stop_height, thickness=task.stop_thickness)
        criteria = SuccessCriteria(
            angle=math.radians(task.success_angle_deg),
            hold_s=task.success_hold_s,
            rate_limit=task.success_rate_limit
        )
        return cls(sim, block, ee, stop=stop, criteria=criteria, record=record)

    def copy(self) -> 'ContactWorld':
        return copy.deepcopy(self)

    def block_pose(self) -> Pose:
        return self.block.pose()

    def ee_pose(self) -> Pose:
        return self.ee.pose()

    def set_pitch_target(self, pitch: float):
        self.pitch_target = float(pitch)

    def step(self, ee_command_force: Union[ForceVec, Sequence[float]], dt: Optional[float] = None) -> ContactInfo:
        """Advance one physics step under a commanded ee force."""
        cfg = self.config
        if dt is not None and abs(dt - cfg.dt_physics) > 1e-15:
            raise InvalidArgumentError(f"step dt {dt} must equal dt_physics {cfg.dt_physics}")
        dt = cfg.dt_physics
        cmd = ee_command_force.f if isinstance(ee_command_force, ForceVec) else np.asarray(ee_command_force, dtype=np.float64)

        b, e = self.block, self.ee
        k, c_d, v_s = cfg.contact_stiffness, cfg.contact_damping, cfg.stiction_velocity
        table = cfg.table_height

        fbx, fbz, tau = 0.0, -b.mass * cfg.gravity, 0.0
        ee_fx, ee_fz = 0.0, 0.0
        block_from_ee = (0.0, 0.0)
        ground: List[GroundContact] = []
        ee_block = False

        if cfg.contacts_enabled:
            cos_t, sin_t = math.cos(b.theta), math.sin(b.theta)
            for idx, (bx, bz) in enumerate(b.corners_local()):
                rx = cos_t * bx + sin_t * bz
                rz = -sin_t * bx + cos_t * bz
                px, pz = b.x + rx, b.z + rz
                vx = b.vx + b.omega * rz
                vz = b.vz - b.omega * rx

                pen = table - pz
                if pen > 0.0:
                    fn = k * pen - c_d * vz
                    if fn > 0.0:
                        ft = regularized_friction(b.friction, fn, vx, v_s)
                        fbx += ft
                        fbz += fn
                        tau += rz * ft - rx * fn
                        ground.append(GroundContact(idx, 'table', (px, pz), (ft, fn)))

                stop = self.stop
                if (stop is not None and stop.x < px < stop.x + stop.thickness
                        and table - stop.thickness < pz < table + stop.height):
                    pen = px - stop.x
                    fn = k * pen + c_d * vx
                    if fn > 0.0:
                        ft = regularized_friction(b.friction, fn, vz, v_s)
                        fbx -= fn
                        fbz += ft
                        tau += rz * (-fn) - rx * ft
                        ground.append(GroundContact(idx, 'stop', (px, pz), (-fn, ft)))

            query = disc_block_query(b, e)
            if query.depth > 0.0:
                nx, nz = query.normal
                rx, rz = query.point[0] - b.x, query.point[1] - b.z
                rel_vx = e.vx - (b.vx + b.omega * rz)
                rel_vz = e.vz - (b.vz - b.omega * rx)
                fn = k * query.depth - c_d * (rel_vx * nx + rel_vz * nz)
                if fn > 0.0:
                    tx, tz = nz, -nx
                    ft = regularized_friction(b.friction, fn, rel_vx * tx + rel_vz * tz, v_s)
                    fx = fn * nx + ft * tx
                    fz = fn * nz + ft * tz
                    ee_fx += fx
                    ee_fz += fz
                    # reaction on the block at the contact point
                    fbx -= fx
                    fbz -= fz
                    tau += rz * (-fx) - rx * (-fz)
                    block_from_ee = (-fx, -fz)
                    ee_block = True

            pen = table + e.radius - e.z
            if pen > 0.0:
                fn = k * pen - c_d * e.vz
                if fn > 0.0:
                    ee_fx += regularized_friction(cfg.ee_table_friction, fn, e.vx, v_s)
                    ee_fz += fn

        # semi-implicit Euler
        b.vx += fbx / b.mass * dt
        b.vz += fbz / b.mass * dt
        b.omega += tau / b.inertia * dt
        b.x += b.vx * dt
        b.z += b.vz * dt
        b.theta += b.omega * dt

        e.vx += (float(cmd[0]) + ee_fx) / e.mass * dt
        e.vz += (float(cmd[2]) + ee_fz) / e.mass * dt
        e.x += e.vx * dt
        e.z += e.vz * dt
        e.pitch += cfg.pitch_gain * (self.pitch_target - e.pitch) * dt

        state = (b.x, b.z, b.theta, b.vx, b.vz, b.omega, e.x, e.z, e.vx, e.vz)
        if not all(math.isfinite(v) for v in state):
            logger.error("simulation diverged at t=%.4f", self.time)
            raise SimulationDivergedError(f"non-finite simulator state at t={self.time:.4f}s")

        self.time += dt
        self.steps += 1
        crit = self.criteria
        if b.theta >= crit.angle and abs(b.omega) < crit.rate_limit:
            self.upright_time += dt
        else:
            self.upright_time = 0.0

        sensed = ForceVec(np.array([ee_fx, 0.0, ee_fz]))
        info = ContactInfo(
            ee_contact_force=sensed,
            in_contact=sensed.norm() > 0.0,
            ground_contacts=ground,
            block_force_from_ee=np.array([block_from_ee[0], 0.0, block_from_ee[1]]),
            ee_block_contact=ee_block
        )
        self.last_info = info
        if self.record:
            self._trace.append([
                self.time, b.x, b.z, b.theta, b.vx, b.vz, b.omega,
                e.x, e.z, e.pitch, e.vx, e.vz,
                ee_fx, 0.0, ee_fz, float(cmd[0]), 0.0, float(cmd[2]),
            ])
        return info

    def step_control(self, ee_command_force: Union[ForceVec, Sequence[float]]) -> ContactInfo:
        """Hold a command for one control tick (zero-order hold)."""
        info = self.last_info
        for _ in range(self.config.substeps):
            info = self.step(ee_command_force)
        return info

    def mechanical_energy(self) -> float:
        """Kinetic plus gravitational energy of the block."""
        b = self.block
        kinetic = 0.5 * b.mass * (b.vx ** 2 + b.vz ** 2) + 0.5 * b.inertia * b.omega ** 2
        return kinetic + b.mass * self.config.gravity * (b.z - self.config.table_height)

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._trace, columns=TRACE_COLUMNS)

    def save_trace(self, path: str, config_digest: str = ''):
        """Per-physics-step record; needs record=True."""
        write_csv_frame(self.trace_frame(), path, config_digest)


def task_success(world: ContactWorld) -> bool:
    """True once theta >= 85 deg has been held with |theta_dot| < 0.05 for 1 s."""
    return world.upright_time >= world.criteria.hold_s - 1e-9


def classical_impedance_command(x_des: Pose, K: float, D_lin: float, state: EEState) -> ForceVec:
    """F = K (p_des - p) - D_lin * xdot in the motion plane."""
    if K < 0.0 or D_lin < 0.0:
        raise InvalidArgumentError("impedance gains must be non-negative")
    f = K * (x_des.p - state.position()) - D_lin * state.velocity()
    f[1] = 0.0
    return ForceVec(f)


def replay_commands(world: ContactWorld, commands: Sequence[np.ndarray]) -> bool:
    """Replay control-rate commands open loop; returns task success."""
    for command in commands:
        world.step_control(command)
        if task_success(world):
            return True
    return task_success(world)
