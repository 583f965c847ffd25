"""
Tests for the flow-matching policy: encoders, loss gradients, training and inference.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from forceflow.common import InvalidArgumentError, InvalidSizeError
from forceflow.flow_policy import (
    ACTION_DIM, QUAT_DIMS, STD_FLOOR, ActionChunk, ActionNormalizer, FlowBatch,
    Observation, PolicyArch, TrainConfig, TrainingSet, cfm_loss, encode_force,
    encode_observation, encode_pointcloud, encode_pose, infer_action,
    init_policy_params, integrate_flow, policy_network, train, vector_field
)
from forceflow.se3 import Pose, rot_y

TINY = PolicyArch(horizon=4, n_points=16, point_widths=(8, 16), feature_dim=8, mlp_hidden=8,
                  time_dim=8, down_dims=(8, 16), kernel_size=3, n_groups=4)


def _batch(arch, n, seed=0):
    rng = np.random.default_rng(seed)
    return FlowBatch(
        clouds=rng.uniform(-0.1, 0.1, (n, arch.n_points, 3)),
        ee=rng.standard_normal((n, 7)),
        force=rng.uniform(-1.0, 1.0, (n, 3)),
        actions=rng.standard_normal((n, arch.horizon, arch.action_dim)),
    )


def _episode(n_steps, n_obs, arch, seed=0):
    rng = np.random.default_rng(seed)
    actions = rng.standard_normal((n_steps, arch.action_dim))
    return SimpleNamespace(
        clouds=rng.uniform(-0.1, 0.1, (n_obs, arch.n_points, 3)),
        ee=rng.standard_normal((n_obs, 7)),
        force=rng.uniform(-1.0, 1.0, (n_obs, 3)),
        obs_steps=np.arange(n_obs) * (n_steps // n_obs),
        actions=actions,
    )


def _observation(arch, seed=0):
    rng = np.random.default_rng(seed)
    return Observation(cloud=rng.uniform(-0.1, 0.1, (arch.n_points, 3)),
                       ee=Pose(np.array([0.3, 0.0, 0.1]), rot_y(0.2)),
                       force=np.array([0.4, 0.0, -0.2]))


def test_arch_validation():
    with pytest.raises(InvalidArgumentError):
        PolicyArch(horizon=5, down_dims=(64, 128)).validate()
    with pytest.raises(InvalidArgumentError):
        PolicyArch(kernel_size=4).validate()
    with pytest.raises(InvalidArgumentError):
        PolicyArch(down_dims=(60, 128)).validate()
    TINY.validate()
    assert PolicyArch().cond_dim == 192


def test_arch_dict_round_trip():
    assert PolicyArch.from_dict(TINY.to_dict()) == TINY


def test_normalizer_passes_quaternions_through():
    rng = np.random.default_rng(1)
    actions = rng.standard_normal((50, ACTION_DIM)) * 3.0 + 1.0
    actions[:, 14] = 2.0
    norm = ActionNormalizer.fit(actions)
    for i in QUAT_DIMS:
        assert norm.mean[i] == 0.0 and norm.std[i] == 1.0
    assert norm.std[14] == STD_FLOOR
    np.testing.assert_allclose(norm.denormalize(norm.normalize(actions)), actions, atol=1e-12)
    assert norm.matches(ActionNormalizer.from_dict(norm.to_dict()))
    assert not norm.matches(ActionNormalizer.identity(ACTION_DIM))


def test_normalizer_rejects_empty():
    with pytest.raises(InvalidSizeError):
        ActionNormalizer.fit(np.zeros((0, ACTION_DIM)))


def test_action_chunk_renormalizes_and_clips():
    raw = np.zeros((3, ACTION_DIM))
    raw[:, 3:7] = [-2.0, 0.0, 0.0, 0.0]
    raw[:, 10:14] = [0.0, 0.0, 0.0, 0.0]
    raw[:, 14] = [-1.0, 1.0, 9.0]
    chunk = ActionChunk.from_raw(raw, (0.2, 4.0))
    np.testing.assert_allclose(chunk.ref_poses[:, 3:7], [[1, 0, 0, 0]] * 3)
    np.testing.assert_allclose(chunk.virtual_poses[:, 3:7], [[1, 0, 0, 0]] * 3)
    np.testing.assert_allclose(chunk.d_gains, [0.2, 1.0, 4.0])
    assert chunk.horizon == 3
    assert chunk.to_raw().shape == (3, ACTION_DIM)


def test_training_set_pads_with_final_action():
    ep = _episode(n_steps=10, n_obs=5, arch=TINY)
    data = TrainingSet.from_episodes([ep], horizon=4)
    assert len(data) == 5
    assert data.horizon == 4 and data.action_dim == ACTION_DIM
    expected = data.normalizer.normalize(ep.actions)
    # observation at step 8 covers actions 8, 9, 9, 9
    np.testing.assert_allclose(data.chunks[4], expected[[8, 9, 9, 9]])


def test_training_set_rejects_empty():
    with pytest.raises(InvalidSizeError):
        TrainingSet.from_episodes([], horizon=4)


def test_encoders_shapes():
    params = init_policy_params(TINY, seed=0)
    obs = _observation(TINY)
    assert encode_pointcloud(params, obs.cloud).shape == (8,)
    assert encode_force(params, obs.force).shape == (8,)
    assert encode_pose(params, obs.ee).shape == (8,)
    cond = encode_observation(params, obs)
    assert cond.shape == (TINY.cond_dim,)
    np.testing.assert_allclose(cond[8:16], encode_force(params, obs.force))


def test_pointcloud_encoder_is_permutation_invariant():
    params = init_policy_params(TINY, seed=0)
    cloud = np.random.default_rng(3).uniform(-0.1, 0.1, (TINY.n_points, 3))
    perm = np.random.default_rng(4).permutation(TINY.n_points)
    np.testing.assert_allclose(encode_pointcloud(params, cloud), encode_pointcloud(params, cloud[perm]),
                               atol=1e-12)


def test_force_encoder_jacobian():
    params = init_policy_params(TINY, seed=2)
    mlp = policy_network(TINY).encoder.force_mlp
    f = np.array([[0.3, -0.1, 0.5]])
    _, cache = mlp.forward(params.tensors, f)
    eye = np.eye(TINY.feature_dim)
    jacobian = np.stack([mlp.backward(params.tensors, eye[i:i + 1], cache, {})[0]
                         for i in range(TINY.feature_dim)])
    eps = 1e-4
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = eps
        central = (encode_force(params, f[0] + step) - encode_force(params, f[0] - step)) / (2 * eps)
        assert np.max(np.abs(central - jacobian[:, axis])) < 1e-5


def test_vector_field_shapes():
    params = init_policy_params(TINY, seed=0)
    cond = encode_observation(params, _observation(TINY))
    z = np.zeros((TINY.horizon, ACTION_DIM))
    assert vector_field(z, 0.3, cond, params).shape == z.shape
    zb = np.zeros((2, TINY.horizon, ACTION_DIM))
    assert vector_field(zb, 0.3, np.stack([cond, cond]), params).shape == zb.shape
    with pytest.raises(InvalidSizeError):
        vector_field(np.zeros((3, ACTION_DIM)), 0.3, cond, params)


def test_cfm_loss_gradients_match_finite_differences():
    params = init_policy_params(TINY, seed=5)
    batch = _batch(TINY, 2, seed=6)
    rng = np.random.default_rng(7)
    z0 = rng.standard_normal(batch.actions.shape)
    t = rng.uniform(0.0, 1.0, size=2)
    _, grads = cfm_loss(params, batch, z0=z0, t=t)

    names = sorted(params.tensors)
    pick_rng = np.random.default_rng(8)
    picked = pick_rng.choice(len(names), size=24, replace=False)
    eps = 1e-6
    checked = 0
    for k in picked:
        name = names[k]
        flat = params.tensors[name].reshape(-1)
        i = int(pick_rng.integers(flat.size))
        old = flat[i]
        flat[i] = old + eps
        up, _ = cfm_loss(params, batch, z0=z0, t=t)
        flat[i] = old - eps
        down, _ = cfm_loss(params, batch, z0=z0, t=t)
        flat[i] = old
        numeric = (up - down) / (2 * eps)
        analytic = grads[name].reshape(-1)[i]
        assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-4), name
        checked += 1
    assert checked >= 10


def test_cfm_loss_needs_rng_or_draws():
    params = init_policy_params(TINY, seed=0)
    with pytest.raises(InvalidArgumentError):
        cfm_loss(params, _batch(TINY, 2))


def test_integrate_flow_rejects_bad_delta():
    params = init_policy_params(TINY, seed=0)
    cond = np.zeros(TINY.cond_dim)
    with pytest.raises(InvalidArgumentError):
        integrate_flow(params, np.zeros((TINY.horizon, ACTION_DIM)), cond, delta=0.3)
    with pytest.raises(InvalidArgumentError):
        integrate_flow(params, np.zeros((TINY.horizon, ACTION_DIM)), cond, delta=0.0)


def test_infer_action_is_deterministic_and_well_formed():
    params = init_policy_params(TINY, seed=0)
    obs = _observation(TINY)
    a = infer_action(obs, params, rng_seed=11)
    b = infer_action(obs, params, rng_seed=11)
    np.testing.assert_array_equal(a.to_raw(), b.to_raw())
    assert a.horizon == TINY.horizon
    np.testing.assert_allclose(np.linalg.norm(a.ref_poses[:, 3:7], axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(a.virtual_poses[:, 3:7], axis=1), 1.0, atol=1e-12)
    assert np.all((a.d_gains >= 0.2) & (a.d_gains <= 4.0))


def test_infer_action_validates_observation():
    params = init_policy_params(TINY, seed=0)
    obs = _observation(TINY)
    obs.force = np.array([1.5, 0.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        infer_action(obs, params)
    obs = _observation(TINY)
    obs.cloud = obs.cloud[:5]
    with pytest.raises(InvalidSizeError):
        infer_action(obs, params)


def _tiny_training_set():
    episodes = [_episode(12, 4, TINY, seed=s) for s in range(2)]
    return TrainingSet.from_episodes(episodes, TINY.horizon)


def test_train_is_deterministic():
    data = _tiny_training_set()
    config = TrainConfig(epochs=2, batch_size=4, steps_per_epoch=2)
    a = train(data, config, seed=3, arch=TINY)
    b = train(data, config, seed=3, arch=TINY)
    assert a.losses == b.losses
    for name in a.params.tensors:
        np.testing.assert_array_equal(a.params.tensors[name], b.params.tensors[name])
    assert a.epoch == 2 and len(a.losses) == 2
    assert a.best_loss == min(a.losses)


def test_sharded_gradients_independent_of_workers():
    data = _tiny_training_set()
    config = TrainConfig(epochs=1, batch_size=6, steps_per_epoch=2, grad_shards=3)
    serial = train(data, config, seed=4, arch=TINY, workers=1)
    threaded = train(data, config, seed=4, arch=TINY, workers=3)
    assert serial.losses == threaded.losses
    for name in serial.last_params.tensors:
        np.testing.assert_array_equal(serial.last_params.tensors[name], threaded.last_params.tensors[name])


def test_resume_continues_the_same_run():
    data = _tiny_training_set()
    full = train(data, TrainConfig(epochs=3, batch_size=4, steps_per_epoch=2), seed=9, arch=TINY)
    first = train(data, TrainConfig(epochs=2, batch_size=4, steps_per_epoch=2), seed=9, arch=TINY)
    resumed = train(data, TrainConfig(epochs=1, batch_size=4, steps_per_epoch=2), seed=9, arch=TINY,
                    resume=first)
    assert resumed.epoch == 3
    assert resumed.losses == full.losses
    for name in full.last_params.tensors:
        np.testing.assert_array_equal(full.last_params.tensors[name], resumed.last_params.tensors[name])


def test_train_rejects_mismatched_arch():
    data = _tiny_training_set()
    with pytest.raises(InvalidSizeError):
        train(data, TrainConfig(epochs=1), seed=0, arch=PolicyArch(horizon=8, n_points=16))


DIRAC_ARCH = PolicyArch(horizon=4, action_dim=2, n_points=8, point_widths=(8, 8), feature_dim=8,
                        mlp_hidden=16, time_dim=16, down_dims=(32, 32), kernel_size=3, n_groups=4)


def _dirac_setup():
    target = np.array([0.7, -0.4])
    n = 64
    ep = SimpleNamespace(
        clouds=np.zeros((n, DIRAC_ARCH.n_points, 3)),
        ee=np.tile(Pose.identity().to_array(), (n, 1)),
        force=np.zeros((n, 3)),
        obs_steps=np.zeros(n, dtype=int),
        actions=np.tile(target, (n, 1)),
    )
    data = TrainingSet.from_episodes([ep], DIRAC_ARCH.horizon)
    config = TrainConfig(epochs=300, batch_size=64, steps_per_epoch=10, lr=2e-3)
    result = train(data, config, seed=0, arch=DIRAC_ARCH)
    return data, result


@pytest.mark.slow
def test_dirac_target_field_and_transport():
    data, result = _dirac_setup()
    params = result.params
    obs_cond = encode_observation(params, Observation(
        np.zeros((DIRAC_ARCH.n_points, 3)), Pose.identity(), np.zeros(3)))
    z1 = data.chunks[0]

    rng = np.random.default_rng(100)
    errors = []
    for t in np.linspace(0.0, 0.9, 10):
        z0 = rng.standard_normal(z1.shape)
        zt = t * z1 + (1.0 - t) * z0
        v = vector_field(zt, t, obs_cond, params)
        errors.append(np.mean((v - (z1 - zt) / (1.0 - t)) ** 2))
    assert np.sqrt(np.mean(errors)) < 0.1

    hits = 0
    for seed in range(200):
        z0 = np.random.default_rng(seed).standard_normal(z1.shape)
        landed = integrate_flow(params, z0, obs_cond, delta=0.1)
        hits += np.linalg.norm(landed - z1) < 0.15
    assert hits >= 190
