#!/usr/bin/env python3
"""
Quick example demonstrating the forceflow pipeline in-process.
"""

from forceflow.compliant_rollout import (
    ComplianceSchedule, RolloutConfig, contact_window, energy_injected, rollout_policy
)
from forceflow.contact_sim import ContactWorld, SimConfig, TaskConfig
from forceflow.demo_warp import (
    GenerationContext, RandomizationRanges, generate_dataset, randomize_scenario, split_demo
)
from forceflow.expert import ExpertConfig, scripted_expert_demo
from forceflow.flow_policy import PolicyArch, TrainConfig, TrainingSet, infer_action, train
from forceflow.pointcloud import NoiseConfig, ScannerConfig
from forceflow.sensing import observe_world

# Small enough to train in about a minute
ARCH = PolicyArch(horizon=8, n_points=64, point_widths=(16, 32), feature_dim=16, mlp_hidden=32,
                  time_dim=16, down_dims=(32, 64), kernel_size=3, n_groups=8)


def main():
    print("="*60)
    print("forceflow Quick Example")
    print("="*60)

    task = TaskConfig()
    schedule = ComplianceSchedule()

    print("\n1. Recording the scripted seed demonstration...")
    nominal = randomize_scenario(0, RandomizationRanges.collapsed(task.block_mass, task.friction), task)
    demo = scripted_expert_demo(ExpertConfig(), nominal)
    seg = split_demo(demo)
    print(f"   {len(demo)} samples: T_f = {seg.T_f}, T_c = {seg.T_c}")

    print("\n2. Generating 10 randomized scenarios...")
    result = generate_dataset(demo, 10, RandomizationRanges.planar(), GenerationContext(n_points=ARCH.n_points))
    print(f"   success_rate = {result.success_rate:.2f} ({len(result.episodes)} episodes kept)")

    print("\n3. Training the flow policy...")
    data = TrainingSet.from_episodes(result.episodes, ARCH.horizon)
    trained = train(data, TrainConfig(epochs=20, batch_size=32), seed=0, arch=ARCH, d_range=schedule.d_range)
    print(f"   loss {trained.losses[0]:.4f} -> {trained.losses[-1]:.4f}")

    print("\n4. Sampling one action chunk at a new scene...")
    scenario = randomize_scenario(99, RandomizationRanges.planar(), task)
    world = ContactWorld.for_task(SimConfig(), task, scenario.obj_pose0, scenario.ee_pose0,
                                  scenario.mass, scenario.friction)
    obs = observe_world(world, ScannerConfig(), NoiseConfig(), ARCH.n_points, rng_seed=0, f_max=schedule.force_max)
    chunk = infer_action(obs, trained.params)
    print(f"   first reference position: {chunk.ref_pose(0).p.round(3)}, d = {chunk.d_gains[0]:.2f}")

    print("\n5. Passive rollout...")
    trace, success = rollout_policy(trained.params, world, schedule, RolloutConfig(max_time=5.0))
    print(f"   success = {success}, ticks = {len(trace)}")
    if contact_window(trace) is not None:
        print(f"   energy injected = {energy_injected(trace):.4f} J")

    print("\n" + "="*60)
    print("Example complete!")
    print("="*60)


if __name__ == "__main__":
    main()
