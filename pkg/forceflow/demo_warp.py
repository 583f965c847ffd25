"""
Turn one seed demonstration into a randomized, force-informed dataset.

The demonstration is split at first contact. The free-space part is
Laplacian-edited onto each new start pose, the contact part is re-expressed
relative to the new object and offset along the demonstrated force to form
virtual targets, and the result is executed in the simulator with the
passive field controller while observations and actions are recorded.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from forceflow.common import (
    DegenerateDemoError, EmptyCloudError, InvalidArgumentError, NoContactError, SimulationDivergedError,
    derive_seed
)
from forceflow.compliant_rollout import (
    ComplianceSchedule, PassiveFieldController, RolloutConfig, compliance_gain_schedule
)
from forceflow.contact_sim import ContactWorld, SimConfig, TaskConfig, task_success
from forceflow.laplacian import warp_free_space
from forceflow.pointcloud import NoiseConfig, ScannerConfig
from forceflow.se3 import (
    ForceVec, Pose, UnitQuaternion, compose, inverse, planar_pose, rot_z, rotate_vector
)
from forceflow.sensing import normalize_force, scan_world

logger = logging.getLogger(__name__)

__all__ = [
    'DemoStep', 'Demonstration', 'SegmentedDemo', 'Scenario', 'RandomizationRanges', 'Episode',
    'WarpConfig', 'GenerationContext', 'ScenarioOutcome', 'GenerationResult',
    'split_demo', 'warp_in_contact', 'warp_pose', 'add_virtual_targets', 'randomize_scenario',
    'generate_episode', 'generate_dataset', 'normalize_force', 'contact_tilt_profile', 'next_phase_index',
]

ABLATIONS = ('none', 'no-virtual-target', 'no-laplacian')


@dataclass
class DemoStep:
    t: float
    ee: Pose
    force: ForceVec
    obj: Pose


@dataclass
class Demonstration:
    """
    Timestamped (ee pose, applied force, object pose) samples at a uniform rate.

    contact_flags and commands are filled by the scripted expert: the
    simulator's ee-block contact flag and the ee force command of each step.
    """
    steps: List[DemoStep]
    dt: float
    contact_flags: Optional[List[bool]] = None
    commands: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.steps)

    def validate(self):
        if not self.steps:
            raise InvalidArgumentError("demonstration is empty")
        if self.dt <= 0.0:
            raise InvalidArgumentError("demonstration dt must be positive")
        t = self.times()
        if len(t) > 1:
            gaps = np.diff(t)
            if np.any(gaps <= 0.0) or np.max(np.abs(gaps - self.dt)) > 1e-6:
                raise InvalidArgumentError("demonstration timestamps must increase uniformly by dt")

    def slice(self, start: int, stop: Optional[int] = None) -> 'Demonstration':
        flags = self.contact_flags[start:stop] if self.contact_flags is not None else None
        commands = self.commands[start:stop] if self.commands is not None else None
        return Demonstration(self.steps[start:stop], self.dt, flags, commands)

    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.steps], dtype=np.float64)

    def ee_array(self) -> np.ndarray:
        return np.stack([s.ee.to_array() for s in self.steps])

    def force_array(self) -> np.ndarray:
        return np.stack([s.force.f for s in self.steps])

    def obj_array(self) -> np.ndarray:
        return np.stack([s.obj.to_array() for s in self.steps])

    @classmethod
    def from_arrays(cls, t: np.ndarray, ee: np.ndarray, force: np.ndarray, obj: np.ndarray, dt: float,
                    contact_flags: Optional[Sequence[bool]] = None,
                    commands: Optional[np.ndarray] = None) -> 'Demonstration':
        steps = [DemoStep(float(t[i]), Pose.from_array(ee[i]), ForceVec(force[i]), Pose.from_array(obj[i]))
                 for i in range(len(t))]
        flags = [bool(f) for f in contact_flags] if contact_flags is not None else None
        return cls(steps, float(dt), flags, None if commands is None else np.asarray(commands, dtype=np.float64))


@dataclass
class SegmentedDemo:
    free: Demonstration
    contact: Demonstration

    @property
    def T_f(self) -> int:
        """Number of free-space samples."""
        return len(self.free)

    @property
    def T_c(self) -> int:
        return len(self.contact)


@dataclass
class Scenario:
    obj_pose0: Pose
    ee_pose0: Pose
    mass: float
    friction: float
    seed: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'obj_pose0': [float(v) for v in self.obj_pose0.to_array()],
            'ee_pose0': [float(v) for v in self.ee_pose0.to_array()],
            'mass': float(self.mass), 'friction': float(self.friction), 'seed': int(self.seed),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Scenario':
        return cls(Pose.from_array(data['obj_pose0']), Pose.from_array(data['ee_pose0']),
                   float(data['mass']), float(data['friction']), int(data['seed']))


@dataclass
class RandomizationRanges:
    """Symmetric offsets around the nominal poses plus parameter intervals."""
    ee_offset: Tuple[float, float, float] = (0.15, 0.05, 0.03)
    obj_offset: Tuple[float, float, float] = (0.15, 0.05, 0.0)
    obj_yaw_deg: float = 0.0
    mass: Tuple[float, float] = (0.1, 0.8)
    friction: Tuple[float, float] = (0.2, 1.0)

    @classmethod
    def planar(cls) -> 'RandomizationRanges':
        """Desk-scale ranges for the x-z simulator (no y axis)."""
        return cls(ee_offset=(0.06, 0.0, 0.03), obj_offset=(0.06, 0.0, 0.0), obj_yaw_deg=0.0,
                   mass=(0.1, 0.8), friction=(0.2, 1.0))

    @classmethod
    def collapsed(cls, mass: float, friction: float) -> 'RandomizationRanges':
        return cls(ee_offset=(0.0, 0.0, 0.0), obj_offset=(0.0, 0.0, 0.0), obj_yaw_deg=0.0,
                   mass=(mass, mass), friction=(friction, friction))

    def validate(self):
        offsets = tuple(self.ee_offset) + tuple(self.obj_offset) + (self.obj_yaw_deg,)
        if any(v < 0.0 for v in offsets):
            raise InvalidArgumentError("inverted range: offsets must be >= 0")
        for name, (lo, hi) in (('mass', self.mass), ('friction', self.friction)):
            if lo > hi:
                raise InvalidArgumentError(f"inverted {name} range [{lo}, {hi}]")
        if self.mass[0] <= 0.0:
            raise InvalidArgumentError("mass range must be positive")


@dataclass
class Episode:
    """
    One generated rollout.

    actions holds (ref pose | virtual pose | d) for every control tick;
    observations are kept at obs_steps. ref_index names the seed demo
    sample each reference was warped from; it is not stored on disk.
    """
    scenario: Scenario
    success: bool
    clouds: np.ndarray
    ee: np.ndarray
    force: np.ndarray
    obs_steps: np.ndarray
    actions: np.ndarray
    measured_force: np.ndarray
    ref_index: Optional[np.ndarray] = None

    @property
    def n_steps(self) -> int:
        return self.actions.shape[0]

    @property
    def d_labels(self) -> np.ndarray:
        return self.actions[:, 14]


@dataclass
class WarpConfig:
    eps_force: float = 0.1
    k_f: float = 0.005
    n_cs: int = 5
    n_ce: int = 5
    obs_stride: int = 5
    hold_s: float = 4.0
    phase_tolerance_deg: float = 5.0
    ablation: str = 'none'

    def validate(self):
        if self.eps_force < 0.0 or self.k_f < 0.0 or self.hold_s < 0.0 or self.phase_tolerance_deg < 0.0:
            raise InvalidArgumentError("eps_force, k_f, hold_s and phase_tolerance_deg must be >= 0")
        if self.n_cs < 1 or self.n_ce < 1 or self.obs_stride < 1:
            raise InvalidArgumentError("n_cs, n_ce and obs_stride must be >= 1")
        if self.ablation not in ABLATIONS:
            raise InvalidArgumentError(f"unknown ablation '{self.ablation}', expected one of {ABLATIONS}")


@dataclass
class GenerationContext:
    """Everything a worker needs to generate one episode."""
    sim: SimConfig = field(default_factory=SimConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    warp: WarpConfig = field(default_factory=WarpConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    schedule: ComplianceSchedule = field(default_factory=ComplianceSchedule)
    scanner: ScannerConfig = field(default_factory=ScannerConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    n_points: int = 256


@dataclass
class ScenarioOutcome:
    index: int
    success: bool
    n_steps: int
    mass: float
    friction: float
    obj_x: float
    ee_x: float
    ee_z: float
    max_theta_deg: float
    peak_force: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'index': self.index, 'success': self.success, 'n_steps': self.n_steps,
            'mass': self.mass, 'friction': self.friction, 'obj_x': self.obj_x,
            'ee_x': self.ee_x, 'ee_z': self.ee_z,
            'max_theta_deg': self.max_theta_deg, 'peak_force': self.peak_force,
        }


@dataclass
class GenerationResult:
    episodes: List[Episode]
    success_rate: float
    outcomes: List[ScenarioOutcome]


def split_demo(demo: Demonstration, eps_force: float = 0.1) -> SegmentedDemo:
    """Split at the first step whose force norm exceeds eps_force."""
    if len(demo) == 0:
        raise InvalidArgumentError("demonstration is empty")
    norms = np.linalg.norm(demo.force_array(), axis=1)
    hits = np.flatnonzero(norms > eps_force)
    if hits.size == 0:
        raise NoContactError(f"no step exceeds the contact threshold {eps_force} N")
    boundary = int(hits[0])
    if boundary < 2:
        raise DegenerateDemoError(f"contact begins at step {boundary}; need at least 2 free-space steps")
    return SegmentedDemo(free=demo.slice(0, boundary), contact=demo.slice(boundary))


def warp_pose(pose: Pose, obj_demo: Pose, obj_new: Pose) -> Pose:
    """Keep the pose's offset in the object frame while moving the object."""
    rel = obj_new.q * obj_demo.q.conjugate()
    p = obj_new.p + rotate_vector(rel, pose.p - obj_demo.p)
    return Pose(p, rel * pose.q)


def warp_in_contact(contact: Demonstration, obj_new: Pose) -> Tuple[List[Pose], List[ForceVec]]:
    """
    Object-centric warp of the contact segment.

    Positions and orientations keep their relative pose in the per-step demo
    object frame; forces are rotated by the same relative rotation.
    """
    if len(contact) == 0:
        raise InvalidArgumentError("contact segment is empty")
    poses, forces = [], []
    for step in contact.steps:
        rel = obj_new.q * step.obj.q.conjugate()
        poses.append(warp_pose(step.ee, step.obj, obj_new))
        forces.append(ForceVec(rotate_vector(rel, step.force.f)))
    return poses, forces


def add_virtual_targets(poses: Sequence[Pose], forces: Sequence[ForceVec], k_f: float) -> List[Pose]:
    """Offset each reference position by k_f * F; orientation unchanged."""
    if len(poses) != len(forces):
        raise InvalidArgumentError(f"{len(poses)} poses but {len(forces)} forces")
    return [Pose(pose.p + k_f * force.f, pose.q) for pose, force in zip(poses, forces)]


def randomize_scenario(rng_seed: int, ranges: RandomizationRanges,
                       task: Optional[TaskConfig] = None) -> Scenario:
    """Uniform draw of start poses, mass and friction around the task's nominal scene."""
    ranges.validate()
    task = task or TaskConfig()
    rng = np.random.default_rng(rng_seed)

    def sym(half: float) -> float:
        return float(rng.uniform(-half, half)) if half > 0.0 else 0.0

    def interval(bounds: Tuple[float, float]) -> float:
        lo, hi = bounds
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    ee_d = [sym(h) for h in ranges.ee_offset]
    obj_d = [sym(h) for h in ranges.obj_offset]
    yaw = math.radians(sym(ranges.obj_yaw_deg))
    mass = interval(ranges.mass)
    friction = interval(ranges.friction)

    obj_z = task.half_height + obj_d[2]
    obj_pose = Pose(np.array([task.nominal_obj_x + obj_d[0], obj_d[1], obj_z]),
                    rot_z(yaw) if yaw != 0.0 else UnitQuaternion.identity())
    ee_nominal = planar_pose(task.nominal_ee_x, task.nominal_ee_z, task.nominal_ee_pitch)
    ee_pose = Pose(ee_nominal.p + np.array(ee_d), ee_nominal.q)
    return Scenario(obj_pose, ee_pose, mass, friction, seed=int(rng_seed))


def _free_references(seg: SegmentedDemo, ee_start: Pose, end_anchor: Pose, warp: WarpConfig) -> List[Pose]:
    demo_poses = [s.ee for s in seg.free.steps]
    if warp.ablation == 'no-laplacian':
        shift = ee_start.p - demo_poses[0].p
        return [Pose(pose.p + shift, pose.q) for pose in demo_poses]
    # the end band is anchored on the warped boundary sample
    return warp_free_space(demo_poses, ee_start.p, ee_start.q, end_anchor.p, end_anchor.q,
                           n_cs=warp.n_cs, n_ce=warp.n_ce)


def _outcome(index: int, scenario: Scenario, success: bool, n_steps: int,
             max_theta: float, peak_force: float) -> ScenarioOutcome:
    return ScenarioOutcome(
        index=index, success=success, n_steps=n_steps, mass=scenario.mass, friction=scenario.friction,
        obj_x=float(scenario.obj_pose0.p[0]), ee_x=float(scenario.ee_pose0.p[0]),
        ee_z=float(scenario.ee_pose0.p[2]), max_theta_deg=math.degrees(max_theta), peak_force=peak_force,
    )


def generate_episode(seg: SegmentedDemo, scenario: Scenario, ctx: GenerationContext,
                     index: int = 0) -> Tuple[Episode, ScenarioOutcome]:
    """
    Warp the seed demo onto one scenario and execute it in simulation.

    The free segment is tracked in the world frame. Contact references and
    virtual targets are replayed relative to the live object pose, and the
    replay index is gated on the object's tilt: it waits while the live
    object lags the demonstrated tilt and skips ahead while it leads. The
    final relative targets are held until the tick budget runs out.
    """
    warp = ctx.warp
    world = ContactWorld.for_task(ctx.sim, ctx.task, scenario.obj_pose0, scenario.ee_pose0,
                                  scenario.mass, scenario.friction)
    obj_new = world.block_pose()
    ee_start = world.ee_pose()

    contact_refs, contact_forces = warp_in_contact(seg.contact, obj_new)
    k_f = 0.0 if warp.ablation == 'no-virtual-target' else warp.k_f
    contact_virtual = add_virtual_targets(contact_refs, contact_forces, k_f)
    boundary = seg.free.steps[-1]
    end_anchor = warp_pose(boundary.ee, boundary.obj, obj_new)
    free_refs = _free_references(seg, ee_start, end_anchor, warp)
    demo_tilt = contact_tilt_profile(seg)
    tol = math.radians(warp.phase_tolerance_deg)

    controller = PassiveFieldController(ctx.rollout.speed, ctx.rollout.damping, ctx.rollout.tangent_deadband)
    sched = ctx.schedule
    n_free, n_contact = len(free_refs), len(contact_refs)
    hold_ticks = int(round(warp.hold_s / ctx.sim.dt_control))
    total = n_free + n_contact + hold_ticks
    obj_new_inv = inverse(obj_new)

    actions, measured, clouds, ee_obs, force_obs, obs_steps, ref_index = [], [], [], [], [], [], []
    applied = np.zeros(3)
    success = False
    max_theta = 0.0
    peak = 0.0
    j = 0

    for tick in range(total):
        if tick < n_free:
            ref = free_refs[tick]
            ref_next = free_refs[tick + 1] if tick + 1 < n_free else _live(world, obj_new_inv, contact_refs[0])
            virtual = ref
            ref_index.append(tick)
        else:
            if tick > n_free:
                j = next_phase_index(j, demo_tilt, _tilt(obj_new.q, world.block_pose().q), tol)
            ref = _live(world, obj_new_inv, contact_refs[j])
            ref_next = _live(world, obj_new_inv, contact_refs[min(j + 1, n_contact - 1)])
            virtual = _live(world, obj_new_inv, contact_virtual[j])
            ref_index.append(n_free + j)

        f_norm = normalize_force(applied, sched.force_max)
        d = compliance_gain_schedule(float(np.linalg.norm(f_norm)), sched)
        try:
            if tick % warp.obs_stride == 0:
                cloud = scan_world(world, ctx.scanner, ctx.noise, ctx.n_points,
                                   derive_seed(scenario.seed, tick, 'scan'))
                clouds.append(cloud)
                ee_obs.append(world.ee_pose().to_array())
                force_obs.append(f_norm)
                obs_steps.append(tick)
            actions.append(np.concatenate([ref.to_array(), virtual.to_array(), [d]]))
            measured.append(f_norm)

            out = controller.command(world.ee, ref, ref_next, virtual, d)
            world.set_pitch_target(ref.q.pitch())
            info = world.step_control(out.force)
        except (SimulationDivergedError, EmptyCloudError) as e:
            logger.warning("scenario %d aborted at tick %d: %s", index, tick, e)
            break
        applied = -info.ee_contact_force.f
        peak = max(peak, float(np.linalg.norm(applied)))
        max_theta = max(max_theta, world.block.theta)
        if task_success(world):
            success = True
            break

    episode = Episode(
        scenario=scenario,
        success=success,
        clouds=np.asarray(clouds, dtype=np.float32),
        ee=np.asarray(ee_obs, dtype=np.float32),
        force=np.asarray(force_obs, dtype=np.float32),
        obs_steps=np.asarray(obs_steps, dtype=np.int32),
        actions=np.asarray(actions, dtype=np.float32),
        measured_force=np.asarray(measured, dtype=np.float32),
        ref_index=np.asarray(ref_index[:len(actions)], dtype=np.int32),
    )
    return episode, _outcome(index, scenario, success, len(actions), max_theta, peak)


def _tilt(q0: UnitQuaternion, q: UnitQuaternion) -> float:
    """Rotation angle of q relative to q0, in [0, pi]."""
    rel = q0.conjugate() * q
    return 2.0 * math.atan2(math.sqrt(rel.x ** 2 + rel.y ** 2 + rel.z ** 2), abs(rel.w))


def contact_tilt_profile(seg: SegmentedDemo) -> np.ndarray:
    """Running maximum of the demo object's tilt from its initial pose, per contact sample."""
    q0 = seg.free.steps[0].obj.q
    return np.maximum.accumulate(np.array([_tilt(q0, s.obj.q) for s in seg.contact.steps]))


def next_phase_index(j: int, demo_tilt: np.ndarray, live_tilt: float, tol: float) -> int:
    """
    Advance the contact replay by one sample unless the live object lags the
    demonstrated tilt by more than tol; jump forward to the first sample
    within tol when it leads.
    """
    last = len(demo_tilt) - 1
    if j < last and demo_tilt[j + 1] <= live_tilt + tol:
        j += 1
    lead = int(np.searchsorted(demo_tilt, live_tilt - tol, side='left'))
    return min(max(j, lead), last)


def _live(world: ContactWorld, obj_new_inv: Pose, pose: Pose) -> Pose:
    """Re-anchor a pose given relative to the initial object onto the live object."""
    return compose(world.block_pose(), compose(obj_new_inv, pose))


def _run_scenario(job: Tuple[SegmentedDemo, Scenario, GenerationContext, int]) -> Tuple[Episode, ScenarioOutcome]:
    seg, scenario, ctx, index = job
    return generate_episode(seg, scenario, ctx, index)


def generate_dataset(
    seed_demo: Demonstration,
    n: int,
    ranges: RandomizationRanges,
    ctx: Optional[GenerationContext] = None,
    master_seed: int = 0,
    workers: int = 1
) -> GenerationResult:
    """
    Generate n randomized episodes from one seed demonstration.

    Scenario i draws its parameters from derive_seed(master_seed, i), so
    results do not depend on worker count or scheduling. Failed episodes
    are counted in success_rate but left out of the returned episodes.
    """
    if n < 1:
        raise InvalidArgumentError("need at least one scenario")
    ctx = ctx or GenerationContext()
    ctx.warp.validate()
    ctx.schedule.validate()
    seg = split_demo(seed_demo, ctx.warp.eps_force)
    logger.info("seed demo split: T_f=%d free, T_c=%d contact samples", seg.T_f, seg.T_c)

    jobs = [(seg, randomize_scenario(derive_seed(master_seed, i, 'scenario'), ranges, ctx.task), ctx, i)
            for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(_run_scenario, jobs))
    else:
        results = [_run_scenario(job) for job in jobs]

    for _, outcome in results:
        logger.info("scenario %d: %s after %d ticks (mass=%.3f, mu=%.2f, peak |F|=%.2f N)",
                    outcome.index, "success" if outcome.success else "FAILED", outcome.n_steps,
                    outcome.mass, outcome.friction, outcome.peak_force)

    episodes = [episode for episode, outcome in results if outcome.success]
    success_rate = len(episodes) / n
    logger.info("generated %d/%d successful episodes (ablation=%s)", len(episodes), n, ctx.warp.ablation)
    return GenerationResult(episodes, success_rate, [outcome for _, outcome in results])
