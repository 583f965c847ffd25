"""
Conditional flow-matching policy.

Observations (point cloud, ee pose, normalized force) are encoded into a
192-D condition vector. A 1-D temporal U-Net predicts the velocity of the
straight-line flow from Gaussian noise to normalized action chunks, and
inference Euler-integrates that field from t=0 to t=1.
"""

import copy
import functools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from forceflow.common import (
    InvalidArgumentError, InvalidSizeError, TrainingDivergedError, derive_seed
)
from forceflow.nn import (
    Conv1d, GroupNorm, LayerNorm, Linear, MaxPool, Mish, Params, Grads, Sequential,
    SiLU, Upsample, accumulate, make_optimizer, sinusoidal_embedding
)
from forceflow.se3 import Pose

logger = logging.getLogger(__name__)

# Action layout: reference pose (7) | virtual pose (7) | compliance gain d (1)
ACTION_DIM = 15
REF_SLICE = slice(0, 7)
VIRTUAL_SLICE = slice(7, 14)
GAIN_INDEX = 14
QUAT_DIMS = (3, 4, 5, 6, 10, 11, 12, 13)
STD_FLOOR = 1e-4


@dataclass(frozen=True)
class PolicyArch:
    """Architecture descriptor stored alongside every checkpoint."""
    horizon: int = 16
    action_dim: int = ACTION_DIM
    n_points: int = 256
    point_widths: Tuple[int, int] = (64, 128)
    feature_dim: int = 64
    mlp_hidden: int = 64
    time_dim: int = 64
    down_dims: Tuple[int, ...] = (64, 128)
    kernel_size: int = 5
    n_groups: int = 8
    time_scale: float = 100.0

    def validate(self):
        if self.horizon < 1 or self.action_dim < 1 or self.n_points < 1:
            raise InvalidArgumentError("horizon, action_dim and n_points must be positive")
        if len(self.point_widths) != 2:
            raise InvalidArgumentError("point_widths needs exactly two entries")
        if not self.down_dims:
            raise InvalidArgumentError("down_dims must not be empty")
        factor = 2 ** (len(self.down_dims) - 1)
        if self.horizon % factor:
            raise InvalidArgumentError(
                f"horizon {self.horizon} must be divisible by {factor} for {len(self.down_dims)} U-Net levels")
        for width in self.down_dims:
            if width % self.n_groups:
                raise InvalidArgumentError(f"U-Net width {width} not divisible by {self.n_groups} groups")
        if self.kernel_size % 2 == 0:
            raise InvalidArgumentError("kernel_size must be odd")
        if self.time_dim % 2:
            raise InvalidArgumentError("time_dim must be even")

    @property
    def cond_dim(self) -> int:
        return 3 * self.feature_dim

    def to_dict(self) -> Dict[str, Any]:
        return {
            'horizon': self.horizon, 'action_dim': self.action_dim, 'n_points': self.n_points,
            'point_widths': list(self.point_widths), 'feature_dim': self.feature_dim,
            'mlp_hidden': self.mlp_hidden, 'time_dim': self.time_dim,
            'down_dims': list(self.down_dims), 'kernel_size': self.kernel_size,
            'n_groups': self.n_groups, 'time_scale': self.time_scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'PolicyArch':
        values = dict(data)
        values['point_widths'] = tuple(values.get('point_widths', (64, 128)))
        values['down_dims'] = tuple(values.get('down_dims', (64, 128)))
        return cls(**values)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = 'adam'
    steps_per_epoch: int = 20
    grad_shards: int = 1

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1 or self.steps_per_epoch < 1 or self.grad_shards < 1:
            raise InvalidArgumentError("epochs, batch_size, steps_per_epoch and grad_shards must be >= 1")
        if self.lr <= 0.0:
            raise InvalidArgumentError("learning rate must be positive")
        if self.optimizer not in ('adam', 'sgd'):
            raise InvalidArgumentError(f"unknown optimizer '{self.optimizer}'")


@dataclass
class ActionNormalizer:
    """Per-dimension z-score; quaternion dimensions pass through unscaled."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> 'ActionNormalizer':
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, actions: np.ndarray) -> 'ActionNormalizer':
        a = np.asarray(actions, dtype=np.float64).reshape(-1, actions.shape[-1])
        if a.shape[0] == 0:
            raise InvalidSizeError("cannot fit normalization on zero actions")
        mean = a.mean(axis=0)
        std = np.maximum(a.std(axis=0), STD_FLOOR)
        if a.shape[1] == ACTION_DIM:
            for i in QUAT_DIMS:
                mean[i], std[i] = 0.0, 1.0
        return cls(mean, std)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (np.asarray(actions, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def matches(self, other: 'ActionNormalizer', rtol: float = 1e-9) -> bool:
        return (self.mean.shape == other.mean.shape
                and np.allclose(self.mean, other.mean, rtol=rtol, atol=1e-12)
                and np.allclose(self.std, other.std, rtol=rtol, atol=1e-12))

    def to_dict(self) -> Dict[str, List[float]]:
        return {'mean': [float(v) for v in self.mean], 'std': [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> 'ActionNormalizer':
        return cls(np.asarray(data['mean'], dtype=np.float64), np.asarray(data['std'], dtype=np.float64))


@dataclass
class PolicyParams:
    """Learnable tensors plus everything needed to run them."""
    arch: PolicyArch
    tensors: Dict[str, np.ndarray]
    normalizer: ActionNormalizer
    d_range: Tuple[float, float] = (0.2, 4.0)

    def copy(self) -> 'PolicyParams':
        return PolicyParams(self.arch, {k: v.copy() for k, v in self.tensors.items()},
                            copy.deepcopy(self.normalizer), tuple(self.d_range))

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def check_finite(self):
        for name in sorted(self.tensors):
            if not np.all(np.isfinite(self.tensors[name])):
                raise InvalidArgumentError(f"parameter tensor '{name}' is not finite")


@dataclass
class Observation:
    cloud: np.ndarray
    ee: Pose
    force: np.ndarray

    def validate(self, n_points: int):
        if self.cloud.shape != (n_points, 3):
            raise InvalidSizeError(f"cloud shape {self.cloud.shape}, expected ({n_points}, 3)")
        f = np.asarray(self.force, dtype=np.float64)
        if f.shape != (3,) or np.any(np.abs(f) > 1.0 + 1e-12):
            raise InvalidArgumentError("normalized force must be a 3-vector in [-1, 1]")


@dataclass
class ActionChunk:
    ref_poses: np.ndarray
    virtual_poses: np.ndarray
    d_gains: np.ndarray

    @property
    def horizon(self) -> int:
        return self.ref_poses.shape[0]

    @classmethod
    def from_raw(cls, raw: np.ndarray, d_range: Tuple[float, float]) -> 'ActionChunk':
        """Split a denormalized (H, 15) array; renormalize quaternions and clip d."""
        raw = np.asarray(raw, dtype=np.float64)
        ref = _renormalize_poses(raw[:, REF_SLICE])
        virtual = _renormalize_poses(raw[:, VIRTUAL_SLICE])
        d = np.clip(raw[:, GAIN_INDEX], d_range[0], d_range[1])
        return cls(ref, virtual, d)

    def to_raw(self) -> np.ndarray:
        return np.concatenate([self.ref_poses, self.virtual_poses, self.d_gains[:, None]], axis=1)

    def ref_pose(self, i: int) -> Pose:
        return Pose.from_array(self.ref_poses[i])

    def virtual_pose(self, i: int) -> Pose:
        return Pose.from_array(self.virtual_poses[i])


def _renormalize_poses(poses: np.ndarray) -> np.ndarray:
    out = np.array(poses, dtype=np.float64)
    q = out[:, 3:7]
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    q = np.where(norm > 1e-12, q / np.maximum(norm, 1e-12), np.array([1.0, 0.0, 0.0, 0.0]))
    q[q[:, 0] < 0.0] *= -1.0
    out[:, 3:7] = q
    return out


@dataclass
class FlowBatch:
    clouds: np.ndarray
    ee: np.ndarray
    force: np.ndarray
    actions: np.ndarray

    def __len__(self):
        return self.actions.shape[0]

    def subset(self, idx: np.ndarray) -> 'FlowBatch':
        return FlowBatch(self.clouds[idx], self.ee[idx], self.force[idx], self.actions[idx])


class TrainingSet:
    """
    Observation / normalized action-chunk pairs.

    Sample s pairs the observation recorded at control step k_s with the
    actions k_s .. k_s+H-1, padded with the episode's final action.
    """

    def __init__(self, clouds: np.ndarray, ee: np.ndarray, force: np.ndarray,
                 chunks: np.ndarray, normalizer: ActionNormalizer):
        if not (clouds.shape[0] == ee.shape[0] == force.shape[0] == chunks.shape[0]):
            raise InvalidSizeError("observation and chunk counts differ")
        if chunks.shape[0] == 0:
            raise InvalidSizeError("training set is empty")
        self.clouds = np.asarray(clouds, dtype=np.float64)
        self.ee = np.asarray(ee, dtype=np.float64)
        self.force = np.asarray(force, dtype=np.float64)
        self.chunks = np.asarray(chunks, dtype=np.float64)
        self.normalizer = normalizer

    @classmethod
    def from_episodes(cls, episodes: Sequence[Any], horizon: int) -> 'TrainingSet':
        """Build from episodes exposing clouds, ee, force, obs_steps and actions arrays."""
        if not episodes:
            raise InvalidSizeError("no episodes to train on")
        normalizer = ActionNormalizer.fit(np.concatenate([ep.actions for ep in episodes]))
        clouds, ee, force, chunks = [], [], [], []
        for ep in episodes:
            actions = normalizer.normalize(ep.actions)
            last = actions.shape[0] - 1
            for j, k in enumerate(ep.obs_steps):
                idx = np.minimum(np.arange(int(k), int(k) + horizon), last)
                chunks.append(actions[idx])
                clouds.append(ep.clouds[j])
                ee.append(ep.ee[j])
                force.append(ep.force[j])
        return cls(np.stack(clouds), np.stack(ee), np.stack(force), np.stack(chunks), normalizer)

    def __len__(self):
        return self.chunks.shape[0]

    @property
    def horizon(self) -> int:
        return self.chunks.shape[1]

    @property
    def action_dim(self) -> int:
        return self.chunks.shape[2]

    def sample(self, rng: np.random.Generator, batch_size: int) -> FlowBatch:
        idx = rng.integers(0, len(self), size=batch_size)
        return FlowBatch(self.clouds[idx], self.ee[idx], self.force[idx], self.chunks[idx])


def _mlp(name: str, n_in: int, hidden: int, n_out: int) -> Sequential:
    return Sequential([
        Linear(f"{name}.fc0", n_in, hidden), SiLU(),
        Linear(f"{name}.fc1", hidden, hidden), SiLU(),
        Linear(f"{name}.fc2", hidden, n_out),
    ])


class ObservationEncoder:
    """Point-cloud, force and pose encoders concatenated into the condition vector."""

    def __init__(self, arch: PolicyArch):
        w0, w1 = arch.point_widths
        f = arch.feature_dim
        self.point_mlp = Sequential([
            Linear('point.fc0', 3, w0), LayerNorm('point.norm0', w0), SiLU(),
            Linear('point.fc1', w0, w1), LayerNorm('point.norm1', w1), SiLU(),
        ])
        self.pool = MaxPool()
        self.point_proj = Sequential([Linear('point.proj', w1, f), LayerNorm('point.proj_norm', f)])
        self.force_mlp = _mlp('force', 3, arch.mlp_hidden, f)
        self.pose_mlp = _mlp('pose', 7, arch.mlp_hidden, f)

    def init(self, params: Params, rng: np.random.Generator):
        for part in (self.point_mlp, self.point_proj, self.force_mlp, self.pose_mlp):
            part.init(params, rng)

    def encode_points(self, params: Params, clouds: np.ndarray) -> Tuple[np.ndarray, Any]:
        h, c_mlp = self.point_mlp.forward(params, clouds)
        pooled, c_pool = self.pool.forward(params, h)
        feat, c_proj = self.point_proj.forward(params, pooled)
        return feat, (c_mlp, c_pool, c_proj)

    def encode_points_backward(self, params: Params, dfeat: np.ndarray, cache: Any, grads: Grads):
        c_mlp, c_pool, c_proj = cache
        dpooled = self.point_proj.backward(params, dfeat, c_proj, grads)
        dh = self.pool.backward(params, dpooled, c_pool, grads)
        self.point_mlp.backward(params, dh, c_mlp, grads)

    def forward(self, params: Params, clouds: np.ndarray, ee: np.ndarray, force: np.ndarray):
        fp, cp = self.encode_points(params, clouds)
        ff, cf = self.force_mlp.forward(params, force)
        fe, ce = self.pose_mlp.forward(params, ee)
        return np.concatenate([fp, ff, fe], axis=1), (cp, cf, ce, fp.shape[1])

    def backward(self, params: Params, dcond: np.ndarray, cache: Any, grads: Grads):
        cp, cf, ce, f = cache
        self.encode_points_backward(params, dcond[:, :f], cp, grads)
        self.force_mlp.backward(params, dcond[:, f:2 * f], cf, grads)
        self.pose_mlp.backward(params, dcond[:, 2 * f:], ce, grads)


class ResidualBlock:
    """Two conv blocks with FiLM conditioning in between and a residual path."""

    def __init__(self, name: str, c_in: int, c_out: int, g_dim: int, kernel: int, groups: int):
        pad = kernel // 2
        self.c_out = c_out
        self.block0 = Sequential([Conv1d(f"{name}.conv0", c_in, c_out, kernel, padding=pad),
                                  GroupNorm(f"{name}.norm0", c_out, groups), Mish()])
        self.block1 = Sequential([Conv1d(f"{name}.conv1", c_out, c_out, kernel, padding=pad),
                                  GroupNorm(f"{name}.norm1", c_out, groups), Mish()])
        self.film_act = Mish()
        self.film = Linear(f"{name}.film", g_dim, 2 * c_out)
        self.residual = Conv1d(f"{name}.res", c_in, c_out, 1) if c_in != c_out else None

    def init(self, params: Params, rng: np.random.Generator):
        self.block0.init(params, rng)
        self.block1.init(params, rng)
        self.film.init(params, rng)
        if self.residual is not None:
            self.residual.init(params, rng)

    def forward(self, params: Params, x: np.ndarray, g: np.ndarray):
        h, c0 = self.block0.forward(params, x)
        gm, cm = self.film_act.forward(params, g)
        film, cf = self.film.forward(params, gm)
        scale = film[:, :self.c_out, None]
        bias = film[:, self.c_out:, None]
        out, c1 = self.block1.forward(params, scale * h + bias)
        if self.residual is not None:
            res, cr = self.residual.forward(params, x)
        else:
            res, cr = x, None
        return out + res, (h, scale, c0, cm, cf, c1, cr)

    def backward(self, params: Params, dy: np.ndarray, cache: Any, grads: Grads):
        h, scale, c0, cm, cf, c1, cr = cache
        dmod = self.block1.backward(params, dy, c1, grads)
        dfilm = np.concatenate([(dmod * h).sum(axis=2), dmod.sum(axis=2)], axis=1)
        dg = self.film_act.backward(params, self.film.backward(params, dfilm, cf, grads), cm, grads)
        dx = self.block0.backward(params, dmod * scale, c0, grads)
        if self.residual is not None:
            dx = dx + self.residual.backward(params, dy, cr, grads)
        else:
            dx = dx + dy
        return dx, dg


class TemporalUnet:
    """Conditional 1-D U-Net over the action horizon."""

    def __init__(self, arch: PolicyArch):
        self.arch = arch
        dims = (arch.action_dim,) + tuple(arch.down_dims)
        in_out = list(zip(dims[:-1], dims[1:]))
        td = arch.time_dim
        g_dim = td + arch.cond_dim
        k, groups = arch.kernel_size, arch.n_groups
        self.levels = len(in_out)

        self.time_mlp = Sequential([Linear('unet.time.fc0', td, 2 * td), Mish(),
                                    Linear('unet.time.fc1', 2 * td, td)])
        self.downs = []
        for i, (c_in, c_out) in enumerate(in_out):
            sample = None
            if i < len(in_out) - 1:
                sample = Conv1d(f"unet.down{i}.sample", c_out, c_out, 3, stride=2, padding=1)
            self.downs.append((
                ResidualBlock(f"unet.down{i}.res0", c_in, c_out, g_dim, k, groups),
                ResidualBlock(f"unet.down{i}.res1", c_out, c_out, g_dim, k, groups),
                sample,
            ))
        mid = dims[-1]
        self.mids = [ResidualBlock(f"unet.mid{i}", mid, mid, g_dim, k, groups) for i in range(2)]
        self.ups = []
        for j, (c_in, c_out) in enumerate(reversed(in_out[1:])):
            self.ups.append((
                ResidualBlock(f"unet.up{j}.res0", 2 * c_out, c_in, g_dim, k, groups),
                ResidualBlock(f"unet.up{j}.res1", c_in, c_in, g_dim, k, groups),
                Sequential([Upsample(), Conv1d(f"unet.up{j}.sample", c_in, c_in, 3, padding=1)]),
            ))
        self.final = Sequential([
            Conv1d('unet.final.conv0', dims[1], dims[1], k, padding=k // 2),
            GroupNorm('unet.final.norm0', dims[1], groups), Mish(),
            Conv1d('unet.final.out', dims[1], arch.action_dim, 1),
        ])

    def init(self, params: Params, rng: np.random.Generator):
        self.time_mlp.init(params, rng)
        for r0, r1, sample in self.downs:
            r0.init(params, rng)
            r1.init(params, rng)
            if sample is not None:
                sample.init(params, rng)
        for block in self.mids:
            block.init(params, rng)
        for r0, r1, sample in self.ups:
            r0.init(params, rng)
            r1.init(params, rng)
            sample.init(params, rng)
        self.final.init(params, rng)

    def forward(self, params: Params, z: np.ndarray, t: np.ndarray, cond: np.ndarray):
        arch = self.arch
        if z.ndim != 3 or z.shape[2] != arch.action_dim:
            raise InvalidSizeError(f"flow state shape {z.shape} does not end in action_dim {arch.action_dim}")
        factor = 2 ** (self.levels - 1)
        if z.shape[1] % factor:
            raise InvalidSizeError(f"horizon {z.shape[1]} not divisible by {factor}")
        if cond.shape != (z.shape[0], arch.cond_dim):
            raise InvalidSizeError(f"condition shape {cond.shape}, expected ({z.shape[0]}, {arch.cond_dim})")

        temb = sinusoidal_embedding(np.broadcast_to(t, (z.shape[0],)), arch.time_dim, arch.time_scale)
        tfeat, c_time = self.time_mlp.forward(params, temb)
        g = np.concatenate([tfeat, cond], axis=1)

        x = z.transpose(0, 2, 1)
        skips, down_c = [], []
        for r0, r1, sample in self.downs:
            x, c0 = r0.forward(params, x, g)
            x, c1 = r1.forward(params, x, g)
            skips.append(x)
            cs = None
            if sample is not None:
                x, cs = sample.forward(params, x)
            down_c.append((c0, c1, cs))
        mid_c = []
        for block in self.mids:
            x, c = block.forward(params, x, g)
            mid_c.append(c)
        up_c = []
        for j, (r0, r1, sample) in enumerate(self.ups):
            width = x.shape[1]
            x = np.concatenate([x, skips[self.levels - 1 - j]], axis=1)
            x, c0 = r0.forward(params, x, g)
            x, c1 = r1.forward(params, x, g)
            x, cs = sample.forward(params, x)
            up_c.append((width, c0, c1, cs))
        x, c_final = self.final.forward(params, x)
        return x.transpose(0, 2, 1), (c_time, down_c, mid_c, up_c, c_final, g.shape)

    def backward(self, params: Params, dv: np.ndarray, cache: Any, grads: Grads):
        """Returns (dz, dcond)."""
        c_time, down_c, mid_c, up_c, c_final, g_shape = cache
        dx = self.final.backward(params, dv.transpose(0, 2, 1), c_final, grads)
        dg = np.zeros(g_shape)
        dskips = {}
        for j in reversed(range(len(self.ups))):
            r0, r1, sample = self.ups[j]
            width, c0, c1, cs = up_c[j]
            dx = sample.backward(params, dx, cs, grads)
            dx, g1 = r1.backward(params, dx, c1, grads)
            dx, g0 = r0.backward(params, dx, c0, grads)
            dg += g0 + g1
            dskips[self.levels - 1 - j] = dx[:, width:]
            dx = dx[:, :width]
        for block, c in zip(reversed(self.mids), reversed(mid_c)):
            dx, gm = block.backward(params, dx, c, grads)
            dg += gm
        for i in reversed(range(self.levels)):
            r0, r1, sample = self.downs[i]
            c0, c1, cs = down_c[i]
            if sample is not None:
                dx = sample.backward(params, dx, cs, grads)
            if i in dskips:
                dx = dx + dskips[i]
            dx, g1 = r1.backward(params, dx, c1, grads)
            dx, g0 = r0.backward(params, dx, c0, grads)
            dg += g0 + g1
        td = self.arch.time_dim
        self.time_mlp.backward(params, dg[:, :td], c_time, grads)
        return dx.transpose(0, 2, 1), dg[:, td:]


class FlowPolicy:
    """Encoder plus vector field for one architecture."""

    def __init__(self, arch: PolicyArch):
        arch.validate()
        self.arch = arch
        self.encoder = ObservationEncoder(arch)
        self.unet = TemporalUnet(arch)

    def init_params(self, seed: int) -> Params:
        rng = np.random.default_rng(seed)
        params: Params = {}
        self.encoder.init(params, rng)
        self.unet.init(params, rng)
        return params

    def loss_and_grads(
        self,
        params: Params,
        batch: FlowBatch,
        z0: np.ndarray,
        t: np.ndarray,
        denominator: Optional[float] = None
    ) -> Tuple[float, Grads]:
        """
        Squared-error flow-matching loss with its parameter gradients.

        The loss is summed over the batch and divided by `denominator`
        (default: the element count of this batch).
        """
        z1 = batch.actions
        tb = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1)
        zt = tb * z1 + (1.0 - tb) * z0
        target = z1 - z0
        cond, c_enc = self.encoder.forward(params, batch.clouds, batch.ee, batch.force)
        v, c_unet = self.unet.forward(params, zt, tb[:, 0, 0], cond)
        diff = v - target
        denom = float(diff.size if denominator is None else denominator)
        loss = float(np.sum(diff * diff)) / denom
        grads: Grads = {}
        _, dcond = self.unet.backward(params, 2.0 * diff / denom, c_unet, grads)
        self.encoder.backward(params, dcond, c_enc, grads)
        return loss, grads


@functools.lru_cache(maxsize=8)
def policy_network(arch: PolicyArch) -> FlowPolicy:
    return FlowPolicy(arch)


def init_policy_params(arch: PolicyArch, seed: int, normalizer: Optional[ActionNormalizer] = None,
                       d_range: Tuple[float, float] = (0.2, 4.0)) -> PolicyParams:
    tensors = policy_network(arch).init_params(seed)
    return PolicyParams(arch, tensors, normalizer or ActionNormalizer.identity(arch.action_dim), tuple(d_range))


def _batched(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == ndim:
        return a[None], True
    return a, False


def encode_pointcloud(params: PolicyParams, cloud: np.ndarray) -> np.ndarray:
    """64-D permutation-invariant feature of an (N, 3) cloud (or a (B, N, 3) batch)."""
    clouds, single = _batched(cloud, 2)
    feat, _ = policy_network(params.arch).encoder.encode_points(params.tensors, clouds)
    return feat[0] if single else feat


def encode_force(params: PolicyParams, force: np.ndarray) -> np.ndarray:
    f, single = _batched(force, 1)
    out, _ = policy_network(params.arch).encoder.force_mlp.forward(params.tensors, f)
    return out[0] if single else out


def encode_pose(params: PolicyParams, ee: Any) -> np.ndarray:
    values = ee.to_array() if isinstance(ee, Pose) else ee
    e, single = _batched(values, 1)
    out, _ = policy_network(params.arch).encoder.pose_mlp.forward(params.tensors, e)
    return out[0] if single else out


def encode_observation(params: PolicyParams, obs: Observation) -> np.ndarray:
    """192-D condition vector [points | force | pose]."""
    net = policy_network(params.arch)
    cond, _ = net.encoder.forward(params.tensors, np.asarray(obs.cloud, dtype=np.float64)[None],
                                  obs.ee.to_array()[None], np.asarray(obs.force, dtype=np.float64)[None])
    return cond[0]


def vector_field(z: np.ndarray, t: Any, cond: np.ndarray, params: PolicyParams) -> np.ndarray:
    """Velocity v(z_t, t | cond) with the same shape as z ((H, A) or (B, H, A))."""
    zb, single = _batched(z, 2)
    cb = np.asarray(cond, dtype=np.float64).reshape(zb.shape[0], -1)
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (zb.shape[0],))
    v, _ = policy_network(params.arch).unet.forward(params.tensors, zb, tb, cb)
    return v[0] if single else v


def cfm_loss(
    params: PolicyParams,
    batch: FlowBatch,
    rng: Optional[np.random.Generator] = None,
    z0: Optional[np.ndarray] = None,
    t: Optional[np.ndarray] = None
) -> Tuple[float, Grads]:
    """
    Conditional flow-matching loss and gradients on a normalized batch.

    z0 ~ N(0, I) and t ~ U(0, 1) are drawn from rng unless given.
    """
    if len(batch) == 0:
        raise InvalidSizeError("empty batch")
    if z0 is None or t is None:
        if rng is None:
            raise InvalidArgumentError("cfm_loss needs an rng when z0 or t is not given")
        if z0 is None:
            z0 = rng.standard_normal(batch.actions.shape)
        if t is None:
            t = rng.uniform(0.0, 1.0, size=len(batch))
    return policy_network(params.arch).loss_and_grads(params.tensors, batch, z0, t)


@dataclass
class TrainResult:
    params: PolicyParams
    last_params: PolicyParams
    losses: List[float]
    best_epoch: int
    best_loss: float
    epoch: int
    optimizer: str
    optimizer_state: Dict[str, np.ndarray] = field(default_factory=dict)


def _sharded_step(net: FlowPolicy, tensors: Params, batch: FlowBatch, z0: np.ndarray, t: np.ndarray,
                  shards: int, pool: Optional[ThreadPoolExecutor]) -> Tuple[float, Grads]:
    if shards <= 1:
        return net.loss_and_grads(tensors, batch, z0, t)
    denom = float(z0.size)
    parts = [p for p in np.array_split(np.arange(len(batch)), shards) if p.size]

    def run(idx):
        return net.loss_and_grads(tensors, batch.subset(idx), z0[idx], t[idx], denominator=denom)

    results = list(pool.map(run, parts)) if pool is not None else [run(p) for p in parts]
    loss = 0.0
    grads: Grads = {}
    # summed in shard order
    for part_loss, part_grads in results:
        loss += part_loss
        for key in sorted(part_grads):
            accumulate(grads, key, part_grads[key])
    return loss, grads


def train(
    dataset: TrainingSet,
    config: TrainConfig,
    seed: int,
    arch: Optional[PolicyArch] = None,
    d_range: Tuple[float, float] = (0.2, 4.0),
    resume: Optional[TrainResult] = None,
    workers: int = 1,
    on_epoch: Optional[Callable[[int, float, float], None]] = None
) -> TrainResult:
    """
    Minibatch training of the flow policy.

    Each epoch draws steps_per_epoch minibatches with replacement from an rng
    derived from (seed, epoch), so a resumed run continues the same stream.

    Args:
        dataset: normalized training pairs
        config: optimizer and schedule settings
        seed: master seed
        arch: network descriptor (default: sized to the dataset)
        d_range: clip range stored with the parameters for inference
        resume: previous result whose last parameters and optimizer state continue
        workers: threads used for gradient shards
        on_epoch: callback(epoch, loss, seconds)

    Returns:
        TrainResult with best-loss parameters
    """
    config.validate()
    arch = arch or PolicyArch(horizon=dataset.horizon, action_dim=dataset.action_dim)
    if (arch.horizon, arch.action_dim) != (dataset.horizon, dataset.action_dim):
        raise InvalidSizeError(
            f"architecture (H={arch.horizon}, A={arch.action_dim}) does not match dataset "
            f"(H={dataset.horizon}, A={dataset.action_dim})")
    net = policy_network(arch)
    optimizer = make_optimizer(config.optimizer, config.lr)

    if resume is not None:
        tensors = {k: np.array(v, dtype=np.float64) for k, v in resume.last_params.tensors.items()}
        if resume.optimizer == config.optimizer:
            optimizer.load_state_dict(resume.optimizer_state)
        start = resume.epoch
        losses = list(resume.losses)
        best = resume.params.copy()
        best_loss, best_epoch = resume.best_loss, resume.best_epoch
    else:
        tensors = net.init_params(derive_seed(seed, 0, 'init'))
        start = 0
        losses = []
        best, best_loss, best_epoch = None, math.inf, 0

    logger.info("training %d parameters on %d samples for %d epochs (%s, lr=%g)",
                sum(v.size for v in tensors.values()), len(dataset), config.epochs,
                config.optimizer, config.lr)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 and config.grad_shards > 1 else None
    try:
        for epoch in range(start + 1, start + config.epochs + 1):
            started = time.perf_counter()
            rng = np.random.default_rng(derive_seed(seed, epoch, 'epoch'))
            total = 0.0
            for _ in range(config.steps_per_epoch):
                batch = dataset.sample(rng, config.batch_size)
                z0 = rng.standard_normal(batch.actions.shape)
                t = rng.uniform(0.0, 1.0, size=len(batch))
                loss, grads = _sharded_step(net, tensors, batch, z0, t, config.grad_shards, pool)
                if not math.isfinite(loss):
                    logger.error("non-finite loss at epoch %d", epoch)
                    raise TrainingDivergedError(epoch, loss)
                optimizer.step(tensors, grads)
                total += loss
            epoch_loss = total / config.steps_per_epoch
            losses.append(epoch_loss)
            elapsed = time.perf_counter() - started
            if epoch_loss < best_loss:
                best_loss, best_epoch = epoch_loss, epoch
                best = PolicyParams(arch, {k: v.copy() for k, v in tensors.items()},
                                    dataset.normalizer, tuple(d_range))
            logger.info("epoch %d/%d loss=%.6f (%.2fs)", epoch, start + config.epochs, epoch_loss, elapsed)
            if on_epoch is not None:
                on_epoch(epoch, epoch_loss, elapsed)
    finally:
        if pool is not None:
            pool.shutdown()

    last = PolicyParams(arch, tensors, dataset.normalizer, tuple(d_range))
    return TrainResult(
        params=best if best is not None else last.copy(),
        last_params=last,
        losses=losses,
        best_epoch=best_epoch,
        best_loss=best_loss,
        epoch=start + config.epochs,
        optimizer=config.optimizer,
        optimizer_state=optimizer.state_dict(),
    )


def _flow_steps(delta: float) -> int:
    if not 0.0 < delta <= 1.0:
        raise InvalidArgumentError(f"step delta must lie in (0, 1], got {delta}")
    n = int(round(1.0 / delta))
    if abs(n * delta - 1.0) > 1e-9:
        raise InvalidArgumentError(f"step delta {delta} does not divide 1")
    return n


def integrate_flow(params: PolicyParams, z0: np.ndarray, cond: np.ndarray, delta: float = 0.1) -> np.ndarray:
    """Euler transport of normalized noise z0 ((H, A) or (B, H, A)) to t = 1."""
    n = _flow_steps(delta)
    z = np.array(z0, dtype=np.float64)
    for k in range(n):
        z = z + delta * vector_field(z, k * delta, cond, params)
    return z


def infer_action(obs: Observation, params: PolicyParams, delta: float = 0.1, rng_seed: int = 0) -> ActionChunk:
    """Sample an action chunk for one observation."""
    obs.validate(params.arch.n_points)
    rng = np.random.default_rng(rng_seed)
    z0 = rng.standard_normal((params.arch.horizon, params.arch.action_dim))
    cond = encode_observation(params, obs)
    z1 = integrate_flow(params, z0, cond, delta)
    return ActionChunk.from_raw(params.normalizer.denormalize(z1), params.d_range)
