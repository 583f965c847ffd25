import json
import os

import numpy as np
import pytest

from forceflow.common import ContainerError
from forceflow.containers import (
    CHECKPOINT_KIND, MANIFEST, Container, dataset_normalizer, load_checkpoint, load_dataset,
    load_demo, read_container, read_manifest, save_checkpoint, save_dataset, save_demo,
    write_container
)
from forceflow.demo_warp import Episode, RandomizationRanges, randomize_scenario
from forceflow.flow_policy import ActionNormalizer, PolicyArch, TrainConfig, TrainingSet, train

TINY = PolicyArch(horizon=4, n_points=8, point_widths=(8, 8), feature_dim=8, mlp_hidden=8,
                  time_dim=8, down_dims=(8, 16), kernel_size=3, n_groups=4)
CONFIG = {'seeds': {'master': 0}}


def _read_tree(path):
    return {name: open(os.path.join(path, name), 'rb').read() for name in sorted(os.listdir(path))}


def _episode(seed, n_steps=12, n_obs=3):
    rng = np.random.default_rng(seed)
    return Episode(
        scenario=randomize_scenario(seed, RandomizationRanges.planar()),
        success=True,
        clouds=rng.uniform(-0.1, 0.1, (n_obs, TINY.n_points, 3)).astype(np.float32),
        ee=rng.standard_normal((n_obs, 7)).astype(np.float32),
        force=rng.uniform(-1, 1, (n_obs, 3)).astype(np.float32),
        obs_steps=(np.arange(n_obs) * 4).astype(np.int32),
        actions=rng.standard_normal((n_steps, 15)).astype(np.float32),
        measured_force=rng.uniform(-1, 1, (n_steps, 3)).astype(np.float32),
    )


def test_container_round_trip(tmp_path):
    path = str(tmp_path / 'c')
    blocks = {'a': np.arange(6, dtype=np.float64).reshape(2, 3), 'b': np.array([1, 2], dtype=np.int32)}
    write_container(path, Container('test', {'x': 1}, blocks, config_hash='abc', config=CONFIG))
    c = read_container(path, 'test')
    assert c.meta == {'x': 1} and c.config_hash == 'abc' and c.config == CONFIG
    np.testing.assert_array_equal(c.blocks['a'], blocks['a'])
    assert c.blocks['b'].dtype == np.int32
    assert not os.path.exists(path + '.tmp')


def test_tampered_block_detected(tmp_path):
    path = str(tmp_path / 'c')
    write_container(path, Container('test', {}, {'a': np.ones(4)}))
    block = os.path.join(path, '00000.bin')
    data = bytearray(open(block, 'rb').read())
    data[0] ^= 0xFF
    with open(block, 'wb') as f:
        f.write(bytes(data))
    with pytest.raises(ContainerError, match='checksum'):
        read_container(path)


def test_missing_block_and_manifest(tmp_path):
    path = str(tmp_path / 'c')
    write_container(path, Container('test', {}, {'a': np.ones(4)}))
    os.remove(os.path.join(path, '00000.bin'))
    with pytest.raises(ContainerError, match='missing block'):
        read_container(path)
    with pytest.raises(ContainerError, match='not a container'):
        read_container(str(tmp_path / 'nothing'))


def test_manifest_checks(tmp_path):
    path = str(tmp_path / 'c')
    write_container(path, Container('test', {}, {}))
    with pytest.raises(ContainerError, match='expected'):
        read_manifest(path, CHECKPOINT_KIND)
    manifest_path = os.path.join(path, MANIFEST)
    manifest = json.load(open(manifest_path))
    manifest['format'] = 99
    with open(manifest_path, 'w') as f:
        json.dump(manifest, f)
    with pytest.raises(ContainerError, match='unsupported'):
        read_manifest(path)
    with open(manifest_path, 'w') as f:
        f.write('{not json')
    with pytest.raises(ContainerError, match='malformed'):
        read_manifest(path)


def test_overwrite_replaces_container(tmp_path):
    path = str(tmp_path / 'c')
    write_container(path, Container('test', {}, {'a': np.ones(4), 'b': np.ones(2)}))
    write_container(path, Container('test', {}, {'a': np.zeros(3)}))
    assert sorted(os.listdir(path)) == ['00000.bin', MANIFEST]
    np.testing.assert_array_equal(read_container(path).blocks['a'], np.zeros(3))


def test_demo_round_trip(tmp_path, seed_demo, nominal_scenario):
    path = str(tmp_path / 'demo')
    save_demo(path, seed_demo, nominal_scenario, (40, 60), CONFIG, 'hash')
    demo, c = load_demo(path)
    assert len(demo) == len(seed_demo)
    np.testing.assert_allclose(demo.ee_array(), seed_demo.ee_array(), rtol=0, atol=1e-12)
    np.testing.assert_allclose(demo.force_array(), seed_demo.force_array(), rtol=0, atol=1e-12)
    assert demo.contact_flags == seed_demo.contact_flags
    np.testing.assert_array_equal(demo.commands, seed_demo.commands)
    assert (c.meta['T_f'], c.meta['T_c']) == (40, 60)


def test_dataset_round_trip(tmp_path):
    episodes = [_episode(s) for s in range(3)]
    normalizer = ActionNormalizer.fit(np.concatenate([ep.actions for ep in episodes]))
    path = str(tmp_path / 'dataset')
    save_dataset(path, episodes, normalizer, {'n_requested': 3}, CONFIG, 'hash')
    loaded, loaded_norm, c = load_dataset(path)
    assert len(loaded) == 3 and c.meta['n_episodes'] == 3
    assert loaded_norm.matches(normalizer)
    assert dataset_normalizer(path).matches(normalizer)
    for a, b in zip(episodes, loaded):
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.obs_steps, b.obs_steps)
        assert a.scenario.to_dict() == b.scenario.to_dict()


def _trained(seed=0):
    episodes = [_episode(s) for s in range(2)]
    data = TrainingSet.from_episodes(episodes, TINY.horizon)
    return train(data, TrainConfig(epochs=2, batch_size=4, steps_per_epoch=2), seed=seed, arch=TINY)


def test_checkpoint_reload_is_byte_identical(tmp_path):
    result = _trained()
    first = str(tmp_path / 'ckpt1')
    second = str(tmp_path / 'ckpt2')
    save_checkpoint(first, result, 0, CONFIG, 'hash')
    loaded, c = load_checkpoint(first)
    assert c.meta['arch'] == TINY.to_dict()
    assert loaded.params.arch == TINY
    assert loaded.epoch == 2 and loaded.losses == result.losses
    save_checkpoint(second, loaded, 0, CONFIG, 'hash')
    assert _read_tree(first) == _read_tree(second)


def test_checkpoint_is_reproducible(tmp_path):
    a, b = str(tmp_path / 'a'), str(tmp_path / 'b')
    save_checkpoint(a, _trained(seed=5), 5, CONFIG, 'hash')
    save_checkpoint(b, _trained(seed=5), 5, CONFIG, 'hash')
    assert _read_tree(a) == _read_tree(b)


def test_checkpoint_kind_enforced(tmp_path):
    path = str(tmp_path / 'dataset')
    episodes = [_episode(0)]
    save_dataset(path, episodes, ActionNormalizer.fit(episodes[0].actions), {}, CONFIG, 'hash')
    with pytest.raises(ContainerError):
        load_checkpoint(path)


def test_resume_from_saved_checkpoint_matches_uninterrupted_run(tmp_path):
    data = TrainingSet.from_episodes([_episode(s) for s in range(2)], TINY.horizon)

    def run(epochs, resume=None):
        return train(data, TrainConfig(epochs=epochs, batch_size=4, steps_per_epoch=2), seed=7, arch=TINY,
                     resume=resume)

    full = run(3)
    halfway = str(tmp_path / 'halfway')
    save_checkpoint(halfway, run(2), 7, CONFIG, 'hash')
    loaded, c = load_checkpoint(halfway)
    assert c.blocks[next(k for k in c.blocks if k.startswith('last/'))].dtype == np.float64
    resumed = run(1, resume=loaded)
    assert resumed.epoch == 3
    assert resumed.losses == full.losses
    for name in full.last_params.tensors:
        np.testing.assert_array_equal(full.last_params.tensors[name], resumed.last_params.tensors[name])
    a, b = str(tmp_path / 'full'), str(tmp_path / 'resumed')
    save_checkpoint(a, full, 7, CONFIG, 'hash')
    save_checkpoint(b, resumed, 7, CONFIG, 'hash')
    assert _read_tree(a) == _read_tree(b)
