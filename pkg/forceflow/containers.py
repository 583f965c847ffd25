"""
On-disk containers: a directory holding manifest.json plus raw binary blocks.

The manifest lists every block with its dtype, shape and SHA-256, and embeds
the version string, config hash and resolved config of the run that wrote
it. Nothing time-dependent is stored, so re-running a command with the same
seed reproduces the container byte-for-byte.
"""

import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from forceflow.common import ContainerError, canonical_json, describe_version
from forceflow.demo_warp import Demonstration, Episode, Scenario
from forceflow.flow_policy import ActionNormalizer, PolicyArch, PolicyParams, TrainResult

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
FORMAT_VERSION = 1

DEMO_KIND = 'demonstration'
DATASET_KIND = 'dataset'
CHECKPOINT_KIND = 'checkpoint'


@dataclass
class Container:
    """In-memory view of a container."""
    kind: str
    meta: Dict[str, Any]
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)
    version: str = ''
    config_hash: str = ''
    config: Dict[str, Any] = field(default_factory=dict)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_container(path: str, container: Container):
    """
    Write atomically: blocks and manifest go to a sibling temp directory
    that replaces `path` only once complete.
    """
    tmp = path.rstrip(os.sep) + '.tmp'
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    entries = []
    for index, name in enumerate(container.blocks):
        array = container.blocks[name]
        little = array.dtype.newbyteorder("<")
        data = np.ascontiguousarray(array).astype(little, copy=False).tobytes()
        filename = f"{index:05d}.bin"
        with open(os.path.join(tmp, filename), 'wb') as f:
            f.write(data)
        entries.append({
            'name': name,
            'file': filename,
            'dtype': little.str,
            'shape': list(array.shape),
            'sha256': _sha256(data),
        })
    manifest = {
        'format': FORMAT_VERSION,
        'kind': container.kind,
        'version': container.version or describe_version(),
        'config_hash': container.config_hash,
        'config': container.config,
        'meta': container.meta,
        'blocks': entries,
    }
    with open(os.path.join(tmp, MANIFEST), 'w') as f:
        f.write(canonical_json(manifest))
        f.write('\n')
    if os.path.exists(path):
        shutil.rmtree(path)
    os.rename(tmp, path)
    logger.debug("wrote %s container %s (%d blocks)", container.kind, path, len(entries))


def read_manifest(path: str, kind: Optional[str] = None) -> Dict[str, Any]:
    """Parse and check manifest.json without touching the blocks."""
    manifest_path = os.path.join(path, MANIFEST)
    if not os.path.isfile(manifest_path):
        raise ContainerError(f"{path} is not a container (missing {MANIFEST})")
    try:
        with open(manifest_path, 'r') as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise ContainerError(f"malformed manifest in {path}: {e}") from e
    if manifest.get('format') != FORMAT_VERSION:
        raise ContainerError(f"unsupported container format {manifest.get('format')!r}")
    if kind is not None and manifest.get('kind') != kind:
        raise ContainerError(f"{path} holds a {manifest.get('kind')!r}, expected {kind!r}")
    return manifest


def read_container(path: str, kind: Optional[str] = None) -> Container:
    """Load and verify every block checksum."""
    manifest = read_manifest(path, kind)
    blocks = {}
    for entry in manifest['blocks']:
        block_path = os.path.join(path, entry['file'])
        if not os.path.isfile(block_path):
            raise ContainerError(f"missing block file {entry['file']} in {path}")
        with open(block_path, 'rb') as f:
            data = f.read()
        if _sha256(data) != entry['sha256']:
            raise ContainerError(f"checksum mismatch for block '{entry['name']}' in {path}")
        dtype = np.dtype(entry['dtype'])
        shape = tuple(entry['shape'])
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(data) != expected:
            raise ContainerError(f"block '{entry['name']}' has {len(data)} bytes, expected {expected}")
        blocks[entry['name']] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    return Container(
        kind=manifest['kind'], meta=manifest['meta'], blocks=blocks, version=manifest['version'],
        config_hash=manifest['config_hash'], config=manifest['config'],
    )


# Demonstrations

def save_demo(path: str, demo: Demonstration, scenario: Scenario, segments: Tuple[int, int],
              config: Dict[str, Any], config_digest: str):
    blocks = {
        't': demo.times(),
        'ee': demo.ee_array(),
        'force': demo.force_array(),
        'obj': demo.obj_array(),
    }
    if demo.contact_flags is not None:
        blocks['contact_flags'] = np.asarray(demo.contact_flags, dtype=np.uint8)
    if demo.commands is not None:
        blocks['commands'] = np.asarray(demo.commands, dtype=np.float64)
    meta = {'dt': demo.dt, 'n_steps': len(demo), 'scenario': scenario.to_dict(),
            'T_f': segments[0], 'T_c': segments[1]}
    write_container(path, Container(DEMO_KIND, meta, blocks, config_hash=config_digest, config=config))


def load_demo(path: str) -> Tuple[Demonstration, Container]:
    c = read_container(path, DEMO_KIND)
    b = c.blocks
    flags = b['contact_flags'].astype(bool).tolist() if 'contact_flags' in b else None
    demo = Demonstration.from_arrays(b['t'], b['ee'], b['force'], b['obj'], c.meta['dt'],
                                     contact_flags=flags, commands=b.get('commands'))
    return demo, c


# Datasets

EPISODE_BLOCKS = ('clouds', 'ee', 'force', 'obs_steps', 'actions', 'measured_force')


def save_dataset(path: str, episodes: List[Episode], normalizer: ActionNormalizer, meta: Dict[str, Any],
                 config: Dict[str, Any], config_digest: str):
    blocks = {}
    for i, ep in enumerate(episodes):
        for name in EPISODE_BLOCKS:
            array = getattr(ep, name)
            dtype = np.int32 if name == 'obs_steps' else np.float32
            blocks[f"episode{i:05d}/{name}"] = np.asarray(array, dtype=dtype)
    full_meta = dict(meta)
    full_meta.update({
        'n_episodes': len(episodes),
        'normalization': normalizer.to_dict(),
        'scenarios': [ep.scenario.to_dict() for ep in episodes],
    })
    write_container(path, Container(DATASET_KIND, full_meta, blocks, config_hash=config_digest, config=config))


def load_dataset(path: str) -> Tuple[List[Episode], ActionNormalizer, Container]:
    c = read_container(path, DATASET_KIND)
    episodes = []
    for i, scenario in enumerate(c.meta['scenarios']):
        arrays = {name: c.blocks[f"episode{i:05d}/{name}"] for name in EPISODE_BLOCKS}
        episodes.append(Episode(scenario=Scenario.from_dict(scenario), success=True, **arrays))
    return episodes, ActionNormalizer.from_dict(c.meta['normalization']), c


def dataset_normalizer(path: str) -> ActionNormalizer:
    """Normalization stats of a dataset, read from its manifest only."""
    return ActionNormalizer.from_dict(read_manifest(path, DATASET_KIND)['meta']['normalization'])


# Checkpoints

def save_checkpoint(path: str, result: TrainResult, seed: int, config: Dict[str, Any], config_digest: str):
    blocks = {}
    for name in sorted(result.params.tensors):
        blocks[f"params/{name}"] = np.asarray(result.params.tensors[name], dtype=np.float32)
    # resume state is kept at full precision
    for name in sorted(result.last_params.tensors):
        blocks[f"last/{name}"] = np.asarray(result.last_params.tensors[name], dtype=np.float64)
    for key in sorted(result.optimizer_state):
        blocks[f"optimizer/{key}"] = np.asarray(result.optimizer_state[key], dtype=np.float64)
    params = result.params
    meta = {
        'arch': params.arch.to_dict(),
        'normalization': params.normalizer.to_dict(),
        'd_range': [float(params.d_range[0]), float(params.d_range[1])],
        'epoch': result.epoch,
        'best_epoch': result.best_epoch,
        'best_loss': float(result.best_loss),
        'losses': [float(v) for v in result.losses],
        'optimizer': result.optimizer,
        'seed': int(seed),
    }
    write_container(path, Container(CHECKPOINT_KIND, meta, blocks, config_hash=config_digest, config=config))


def load_checkpoint(path: str) -> Tuple[TrainResult, Container]:
    c = read_container(path, CHECKPOINT_KIND)
    meta = c.meta
    arch = PolicyArch.from_dict(meta['arch'])
    normalizer = ActionNormalizer.from_dict(meta['normalization'])
    d_range = (float(meta['d_range'][0]), float(meta['d_range'][1]))

    def group(prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v.astype(np.float64) for k, v in c.blocks.items() if k.startswith(prefix)}

    params = PolicyParams(arch, group('params/'), normalizer, d_range)
    params.check_finite()
    result = TrainResult(
        params=params,
        last_params=PolicyParams(arch, group('last/'), normalizer, d_range),
        losses=list(meta['losses']),
        best_epoch=int(meta['best_epoch']),
        best_loss=float(meta['best_loss']),
        epoch=int(meta['epoch']),
        optimizer=meta['optimizer'],
        optimizer_state=group('optimizer/'),
    )
    return result, c
