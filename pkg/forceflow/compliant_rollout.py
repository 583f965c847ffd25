"""
Passive velocity-field execution of action chunks.

Each control tick turns (reference, virtual target, d) into a unit direction
u = (d n + t) / |d n + t|, a desired velocity f(x) = k u and the passive force
F = -D(x) (xdot - f(x)) with the damping eigenbasis aligned to u.
"""

import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.integrate import trapezoid

from forceflow.common import InvalidArgumentError, ZeroDirectionError, derive_seed, write_csv_frame
from forceflow.contact_sim import (
    ContactWorld, EEState, classical_impedance_command, task_success
)
from forceflow.flow_policy import ActionChunk, Observation, PolicyParams, infer_action
from forceflow.pointcloud import NoiseConfig, ScannerConfig
from forceflow.se3 import ForceVec, Pose
from forceflow.sensing import observe_world

logger = logging.getLogger(__name__)

TRACE_COLUMNS = [
    't', 'cmd_fx', 'cmd_fy', 'cmd_fz', 'vel_x', 'vel_y', 'vel_z',
    'force_x', 'force_y', 'force_z', 'u_x', 'u_y', 'u_z',
    'd', 'stiffness', 'power', 'in_contact', 'theta',
]


@dataclass
class ComplianceSchedule:
    """Force-scheduled compliance gain; forces in normalized units."""
    d_up: float = 4.0
    d_down: float = 0.2
    f_up: float = 0.6
    f_down: float = 0.1
    force_max: float = 5.0

    def validate(self):
        if not self.d_up >= self.d_down > 0.0:
            raise InvalidArgumentError("schedule needs d_up >= d_down > 0")
        if not self.f_up > self.f_down >= 0.0:
            raise InvalidArgumentError("schedule needs f_up > f_down >= 0")
        if self.force_max <= 0.0:
            raise InvalidArgumentError("force_max must be positive")

    @property
    def d_range(self) -> Tuple[float, float]:
        return self.d_down, self.d_up


def compliance_gain_schedule(force_mag: float, sched: ComplianceSchedule) -> float:
    """d_up below f_down, d_down above f_up, linear in between."""
    if force_mag < 0.0:
        raise InvalidArgumentError(f"force magnitude must be >= 0, got {force_mag}")
    if force_mag <= sched.f_down:
        return sched.d_up
    if force_mag >= sched.f_up:
        return sched.d_down
    frac = (force_mag - sched.f_down) / (sched.f_up - sched.f_down)
    return sched.d_up - (sched.d_up - sched.d_down) * frac


def blend_direction(t_hat_raw: Sequence[float], n_hat_raw: Sequence[float], d: float,
                    eps: float = 1e-9) -> np.ndarray:
    """
    Unit blend of the reference tangent and the virtual-target direction.

    Both inputs are normalized first; inputs shorter than eps count as zero.
    Falls back to the tangent when d n + t cancels.
    """
    t_raw = np.asarray(t_hat_raw, dtype=np.float64)
    n_raw = np.asarray(n_hat_raw, dtype=np.float64)
    t_norm = float(np.linalg.norm(t_raw))
    n_norm = float(np.linalg.norm(n_raw))
    if t_norm < eps and n_norm < eps:
        raise ZeroDirectionError("both tangent and virtual-target direction vanish")
    t_hat = t_raw / t_norm if t_norm >= eps else np.zeros(3)
    n_hat = n_raw / n_norm if n_norm >= eps else np.zeros(3)
    s = d * n_hat + t_hat
    s_norm = float(np.linalg.norm(s))
    if s_norm < 1e-9:
        if t_norm < eps:
            raise ZeroDirectionError("direction cancels and the tangent is undefined")
        return t_hat
    return s / s_norm


def desired_velocity(u_hat: Sequence[float], k: float) -> np.ndarray:
    """f(x) = k u."""
    return k * np.asarray(u_hat, dtype=np.float64)


@dataclass
class DampingSpec:
    eigenvalues: Tuple[float, float, float] = (40.0, 40.0, 40.0)
    v1: Tuple[float, float, float] = (1.0, 0.0, 0.0)

    def validate(self):
        if len(self.eigenvalues) != 3 or min(self.eigenvalues) <= 0.0:
            raise InvalidArgumentError("damping eigenvalues must be three positive values")
        if abs(np.linalg.norm(self.v1) - 1.0) > 1e-9:
            raise InvalidArgumentError("primary damping direction must be a unit vector")


def damping_matrix(spec: DampingSpec) -> np.ndarray:
    """D = V diag(lambda) V^T with V = [v1, v2, v3]."""
    spec.validate()
    v1 = np.asarray(spec.v1, dtype=np.float64)
    # complete against the coordinate axis least aligned with v1
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(v1)))] = 1.0
    v2 = axis - np.dot(axis, v1) * v1
    v2 /= np.linalg.norm(v2)
    v3 = np.cross(v1, v2)
    V = np.stack([v1, v2, v3], axis=1)
    D = V @ np.diag(spec.eigenvalues) @ V.T
    return 0.5 * (D + D.T)


def passive_command(xdot: Sequence[float], f_x: Sequence[float], D: np.ndarray, simple: bool = False) -> ForceVec:
    """F = -D (xdot - f(x)); the simple form keeps only D f(x)."""
    xdot = np.asarray(xdot, dtype=np.float64)
    f_x = np.asarray(f_x, dtype=np.float64)
    if simple:
        return ForceVec(D @ f_x)
    return ForceVec(-D @ (xdot - f_x))


@dataclass
class RolloutConfig:
    speed: float = 0.1
    damping: Tuple[float, float, float] = (40.0, 40.0, 40.0)
    tangent_deadband: float = 1e-4
    simple_passive: bool = False
    controller: str = 'passive'
    k_min: float = 100.0
    k_max: float = 600.0
    n_exec: int = 8
    delta: float = 0.1
    max_time: float = 15.0
    max_recoveries: int = 3
    recovery_high_deg: float = 45.0
    recovery_low_deg: float = 10.0

    def validate(self):
        if self.speed < 0.0 or self.tangent_deadband < 0.0:
            raise InvalidArgumentError("speed and tangent dead-band must be >= 0")
        if self.controller not in ('passive', 'classical'):
            raise InvalidArgumentError(f"unknown controller '{self.controller}'")
        if self.n_exec < 1 or self.max_time <= 0.0 or self.max_recoveries < 0:
            raise InvalidArgumentError("n_exec >= 1, max_time > 0 and max_recoveries >= 0 required")
        if not 0.0 <= self.k_min <= self.k_max:
            raise InvalidArgumentError("classical stiffness range must satisfy 0 <= k_min <= k_max")


@dataclass
class ControlOutput:
    force: ForceVec
    u_hat: np.ndarray
    stiffness: float = 0.0


class Controller(ABC):
    """Maps the current reference, virtual target and gain to an ee force."""

    name = "controller"

    @abstractmethod
    def command(self, state: EEState, ref_now: Pose, ref_next: Pose, virtual: Pose, d: float) -> ControlOutput:
        pass


class PassiveFieldController(Controller):
    """State-velocity field with directional damping."""

    name = "passive"

    def __init__(self, speed: float = 0.1, damping: Sequence[float] = (40.0, 40.0, 40.0),
                 tangent_deadband: float = 1e-4, simple: bool = False):
        self.speed = speed
        self.damping = tuple(float(v) for v in damping)
        self.tangent_deadband = tangent_deadband
        self.simple = simple

    def direction(self, position: np.ndarray, ref_now: Pose, ref_next: Pose, virtual: Pose, d: float) -> np.ndarray:
        t_raw = ref_next.p - ref_now.p
        t_raw[1] = 0.0
        if np.linalg.norm(t_raw) < self.tangent_deadband:
            t_raw = np.zeros(3)
        n_raw = virtual.p - position
        n_raw[1] = 0.0
        try:
            return blend_direction(t_raw, n_raw, d)
        except ZeroDirectionError:
            return np.zeros(3)

    def command(self, state, ref_now, ref_next, virtual, d):
        u = self.direction(state.position(), ref_now, ref_next, virtual, d)
        f_x = desired_velocity(u, self.speed)
        v1 = u if np.linalg.norm(u) > 0.5 else np.array([1.0, 0.0, 0.0])
        D = damping_matrix(DampingSpec(self.damping, tuple(v1)))
        force = passive_command(state.velocity(), f_x, D, simple=self.simple)
        f = force.f.copy()
        f[1] = 0.0
        return ControlOutput(ForceVec(f), u)


class ClassicalImpedanceController(Controller):
    """Position-based impedance on the virtual target with d-scheduled stiffness."""

    name = "classical"

    def __init__(self, k_min: float = 100.0, k_max: float = 600.0, d_range: Tuple[float, float] = (0.2, 4.0)):
        self.k_min = k_min
        self.k_max = k_max
        self.d_range = d_range

    def stiffness(self, d: float) -> float:
        lo, hi = self.d_range
        frac = 1.0 if hi <= lo else min(max((d - lo) / (hi - lo), 0.0), 1.0)
        return self.k_min + (self.k_max - self.k_min) * frac

    def command(self, state, ref_now, ref_next, virtual, d):
        K = self.stiffness(d)
        D_lin = 2.0 * math.sqrt(K * state.mass)
        force = classical_impedance_command(virtual, K, D_lin, state)
        err = virtual.p - state.position()
        norm = np.linalg.norm(err)
        u = err / norm if norm > 1e-12 else np.zeros(3)
        return ControlOutput(force, u, K)


def make_controller(config: RolloutConfig, sched: ComplianceSchedule) -> Controller:
    if config.controller == 'classical':
        return ClassicalImpedanceController(config.k_min, config.k_max, sched.d_range)
    return PassiveFieldController(config.speed, config.damping, config.tangent_deadband, config.simple_passive)


class RolloutTrace:
    """Per-control-tick record of a rollout."""

    def __init__(self):
        self.rows: List[List[float]] = []
        self.recoveries = 0

    def append(self, t: float, cmd: np.ndarray, vel: np.ndarray, force: np.ndarray, u_hat: np.ndarray,
               d: float, stiffness: float, in_contact: bool, theta: float):
        power = float(np.dot(cmd, vel))
        self.rows.append([t, *cmd, *vel, *force, *u_hat, d, stiffness, power, float(in_contact), theta])

    def __len__(self):
        return len(self.rows)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> 'RolloutTrace':
        missing = [c for c in TRACE_COLUMNS if c not in df.columns]
        if missing:
            raise InvalidArgumentError(f"trace is missing columns {missing}")
        trace = cls()
        trace.rows = df[TRACE_COLUMNS].astype(float).values.tolist()
        return trace

    def save_csv(self, path: str, config_digest: str = ''):
        write_csv_frame(self.to_frame(), path, config_digest)

    @classmethod
    def load_csv(cls, path: str) -> 'RolloutTrace':
        return cls.from_frame(pd.read_csv(path, comment='#'))

    def column(self, name: str) -> np.ndarray:
        return np.array([row[TRACE_COLUMNS.index(name)] for row in self.rows], dtype=np.float64)


def contact_window(trace: RolloutTrace) -> Optional[Tuple[float, float]]:
    """Time span from the first to the last in-contact tick."""
    contact = trace.column('in_contact') > 0.5
    if not contact.any():
        return None
    t = trace.column('t')
    idx = np.flatnonzero(contact)
    return float(t[idx[0]]), float(t[idx[-1]])


def energy_injected(trace: RolloutTrace, window: Optional[Tuple[float, float]] = None, signed: bool = False) -> float:
    """
    Integral of commanded mechanical power over a time window (trapezoid rule).

    Only positive power counts unless signed is set. The default window is
    the contact interval.
    """
    if window is None:
        window = contact_window(trace)
        if window is None:
            raise InvalidArgumentError("trace has no contact interval")
    t = trace.column('t')
    power = trace.column('power')
    mask = (t >= window[0] - 1e-12) & (t <= window[1] + 1e-12)
    if mask.sum() < 2:
        raise InvalidArgumentError(f"energy window {window} covers fewer than two samples")
    p = power[mask] if signed else np.maximum(power[mask], 0.0)
    return float(trapezoid(p, t[mask]))


class ChunkSource(ABC):
    """Supplies action chunks at re-plan ticks."""

    n_points: Optional[int] = None

    @abstractmethod
    def plan(self, obs: Optional[Observation], tick: int) -> ActionChunk:
        pass


class PolicySource(ChunkSource):
    """Flow-policy inference with a per-query noise seed."""

    def __init__(self, params: PolicyParams, delta: float = 0.1, seed: int = 0):
        self.params = params
        self.delta = delta
        self.seed = seed
        self.n_points = params.arch.n_points

    def plan(self, obs, tick):
        return infer_action(obs, self.params, self.delta, rng_seed=derive_seed(self.seed, tick, 'infer'))


class ReplaySource(ChunkSource):
    """Replays recorded raw actions (T, 15) from the current tick onward."""

    def __init__(self, actions: np.ndarray, horizon: int = 16, d_range: Tuple[float, float] = (0.2, 4.0)):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.horizon = horizon
        self.d_range = d_range

    def plan(self, obs, tick):
        idx = np.minimum(np.arange(tick, tick + self.horizon), self.actions.shape[0] - 1)
        return ActionChunk.from_raw(self.actions[idx], self.d_range)


def rollout_policy(
    params: Union[PolicyParams, ChunkSource],
    world: ContactWorld,
    sched: ComplianceSchedule,
    config: RolloutConfig,
    scanner: Optional[ScannerConfig] = None,
    noise: Optional[NoiseConfig] = None,
    seed: int = 0,
    zero_force: bool = False
) -> Tuple[RolloutTrace, bool]:
    """
    Closed-loop execution of a policy in a world.

    Re-plans every n_exec control ticks, advances the chunk index every tick
    and holds each command over the physics substeps. Stops on task success,
    the time budget or more than max_recoveries self-recoveries.

    Returns:
        (trace, success); trace.recoveries holds the recovery count
    """
    config.validate()
    sched.validate()
    scanner = scanner or ScannerConfig()
    noise = noise or NoiseConfig()
    source = params if isinstance(params, ChunkSource) else PolicySource(params, config.delta, seed)
    controller = make_controller(config, sched)

    trace = RolloutTrace()
    dt = world.config.dt_control
    max_ticks = int(round(config.max_time / dt))
    high, low = math.radians(config.recovery_high_deg), math.radians(config.recovery_low_deg)
    armed = False
    success = False
    applied = np.zeros(3)
    chunk: Optional[ActionChunk] = None
    chunk_start = 0

    for tick in range(max_ticks):
        if chunk is None or tick - chunk_start >= config.n_exec:
            obs = None
            if source.n_points is not None:
                obs = observe_world(world, scanner, noise, source.n_points,
                                    derive_seed(seed, tick, 'scan'), applied, sched.force_max)
                if zero_force:
                    obs.force = np.zeros(3)
            chunk = source.plan(obs, tick)
            chunk_start = tick
        i = min(tick - chunk_start, chunk.horizon - 1)
        ref_now = chunk.ref_pose(i)
        ref_next = chunk.ref_pose(min(i + 1, chunk.horizon - 1))
        virtual = chunk.virtual_pose(i)
        d = float(chunk.d_gains[i])

        state = world.ee
        vel = state.velocity()
        out = controller.command(state, ref_now, ref_next, virtual, d)
        world.set_pitch_target(ref_now.q.pitch())
        info = world.step_control(out.force)
        applied = -info.ee_contact_force.f
        trace.append(world.time, out.force.f, vel, applied, out.u_hat, d, out.stiffness,
                     info.ee_block_contact, world.block.theta)

        theta = world.block.theta
        if theta > high:
            armed = True
        elif armed and theta < low:
            armed = False
            trace.recoveries += 1
            logger.debug("self-recovery %d at t=%.2fs", trace.recoveries, world.time)
            if trace.recoveries > config.max_recoveries:
                break
        if task_success(world):
            success = True
            break

    logger.debug("rollout finished after %d ticks (success=%s, recoveries=%d)",
                 len(trace), success, trace.recoveries)
    return trace, success
