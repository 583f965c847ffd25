"""Trial generator for policy evaluation."""

import dataclasses
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np

from forceflow.common import InvalidArgumentError, derive_seed
from forceflow.contact_sim import TaskConfig
from forceflow.demo_warp import RandomizationRanges, Scenario
from forceflow.se3 import Pose, UnitQuaternion, planar_pose


class ControllerVariant(Enum):
    """How the predicted action chunk is tracked."""
    PASSIVE = "passive"
    CLASSICAL = "classical"


class Ablation(Enum):
    """Observation ablations applied at evaluation time."""
    NONE = "none"
    NO_FORCE = "no-force"


class Trial:
    """One evaluation rollout: a grid cell, a seed and a variant."""

    def __init__(self, index: int, cell: Tuple[int, int], seed_index: int, seed: int,
                 scenario: Scenario, controller: ControllerVariant, ablation: Ablation):
        self.index = index
        self.cell = cell
        self.seed_index = seed_index
        self.seed = seed
        self.scenario = scenario
        self.controller = controller
        self.ablation = ablation

    @property
    def variant(self) -> str:
        if self.ablation == Ablation.NONE:
            return self.controller.value
        return f"{self.controller.value}+{self.ablation.value}"

    def __repr__(self):
        return (f"Trial({self.index}, cell={self.cell}, seed={self.seed_index}, "
                f"variant={self.variant})")


class TrialGenerator:
    """Builds the object x ee position grid used for spatial evaluation."""

    def __init__(self, seed: int = 0, task: Optional[TaskConfig] = None,
                 ranges: Optional[RandomizationRanges] = None):
        self.seed = seed
        self.task = task or TaskConfig()
        self.ranges = ranges or RandomizationRanges.planar()

    @staticmethod
    def grid_offsets(step: float) -> List[float]:
        """Offsets -step, 0, +step."""
        if step < 0.0:
            raise InvalidArgumentError(f"grid step must be >= 0, got {step}")
        return [-step, 0.0, step]

    def scenario_for(self, obj_dx: float, ee_dx: float, seed: int) -> Scenario:
        """
        Place the block and the ee at the given x offsets from nominal and
        draw mass and friction from the configured ranges.

        Args:
            obj_dx: object x offset in metres
            ee_dx: end-effector x offset in metres
            seed: trial seed; the same seed always yields the same parameters

        Returns:
            Scenario
        """
        rng = np.random.default_rng(seed)
        lo, hi = self.ranges.mass
        mass = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        lo, hi = self.ranges.friction
        friction = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        task = self.task
        obj = Pose(np.array([task.nominal_obj_x + obj_dx, 0.0, task.half_height]), UnitQuaternion.identity())
        ee = planar_pose(task.nominal_ee_x + ee_dx, task.nominal_ee_z, task.nominal_ee_pitch)
        return Scenario(obj, ee, mass, friction, seed=seed)

    def generate_grid(
        self,
        grid_step: float,
        n_seeds: int,
        controller: ControllerVariant = ControllerVariant.PASSIVE,
        ablation: Ablation = Ablation.NONE
    ) -> List[Trial]:
        """
        Generate 3 x 3 x n_seeds trials.

        Trial seeds depend only on the cell and seed index, so every variant
        is evaluated on identical scenarios.
        """
        if n_seeds < 1:
            raise InvalidArgumentError(f"need at least one seed per cell, got {n_seeds}")
        offsets = self.grid_offsets(grid_step)
        trials = []
        for oi, obj_dx in enumerate(offsets):
            for ei, ee_dx in enumerate(offsets):
                for s in range(n_seeds):
                    index = len(trials)
                    seed = derive_seed(self.seed, index, 'trial')
                    scenario = self.scenario_for(obj_dx, ee_dx, seed)
                    trials.append(Trial(index, (oi, ei), s, seed, scenario, controller, ablation))
        return trials

    def with_block_scale(self, scale: float) -> 'TrialGenerator':
        """Same grid on a block with half-extents multiplied by scale."""
        return TrialGenerator(self.seed, dataclasses.replace(self.task, block_scale=scale), self.ranges)
