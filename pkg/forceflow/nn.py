"""
Numpy neural-network layers with hand-derived reverse-mode gradients.

Parameters live in a flat name -> array dict shared by all modules. Every
module's forward returns (output, cache) and its backward takes the upstream
gradient plus that cache, accumulates parameter gradients into a grads dict
and returns the gradient with respect to its input.
"""

import math
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from forceflow.common import InvalidArgumentError, InvalidSizeError

Params = Dict[str, np.ndarray]
Grads = Dict[str, np.ndarray]


def accumulate(grads: Grads, name: str, value: np.ndarray):
    if name in grads:
        grads[name] += value
    else:
        grads[name] = np.array(value, dtype=np.float64)


class Module:
    """Base class for layers."""

    name: str = ""

    def init(self, params: Params, rng: np.random.Generator):
        pass

    def forward(self, params: Params, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, params: Params, dy: np.ndarray, cache: Any, grads: Grads) -> np.ndarray:
        raise NotImplementedError


class Linear(Module):
    """y = x W + b over the last axis."""

    def __init__(self, name: str, n_in: int, n_out: int, bias: bool = True):
        self.name = name
        self.n_in = n_in
        self.n_out = n_out
        self.bias = bias

    def init(self, params, rng):
        bound = 1.0 / math.sqrt(self.n_in)
        params[f"{self.name}.weight"] = rng.uniform(-bound, bound, (self.n_in, self.n_out))
        if self.bias:
            params[f"{self.name}.bias"] = rng.uniform(-bound, bound, (self.n_out,))

    def forward(self, params, x):
        y = x @ params[f"{self.name}.weight"]
        if self.bias:
            y = y + params[f"{self.name}.bias"]
        return y, x

    def backward(self, params, dy, cache, grads):
        x = cache
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        accumulate(grads, f"{self.name}.weight", x2.T @ dy2)
        if self.bias:
            accumulate(grads, f"{self.name}.bias", dy2.sum(axis=0))
        return dy @ params[f"{self.name}.weight"].T


class SiLU(Module):

    def forward(self, params, x):
        s = 1.0 / (1.0 + np.exp(-x))
        return x * s, (x, s)

    def backward(self, params, dy, cache, grads):
        x, s = cache
        return dy * s * (1.0 + x * (1.0 - s))


class Mish(Module):

    def forward(self, params, x):
        sp = np.logaddexp(0.0, x)
        tsp = np.tanh(sp)
        return x * tsp, (x, tsp)

    def backward(self, params, dy, cache, grads):
        x, tsp = cache
        sig = 1.0 / (1.0 + np.exp(-x))
        return dy * (tsp + x * (1.0 - tsp * tsp) * sig)


def _normalize_backward(dxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    # normalization axis is the last one
    n = xhat.shape[-1]
    sum_d = dxhat.sum(axis=-1, keepdims=True)
    sum_dx = (dxhat * xhat).sum(axis=-1, keepdims=True)
    return inv_std / n * (n * dxhat - sum_d - xhat * sum_dx)


class LayerNorm(Module):

    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.name = name
        self.dim = dim
        self.eps = eps

    def init(self, params, rng):
        params[f"{self.name}.gain"] = np.ones(self.dim)
        params[f"{self.name}.bias"] = np.zeros(self.dim)

    def forward(self, params, x):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv_std
        y = xhat * params[f"{self.name}.gain"] + params[f"{self.name}.bias"]
        return y, (xhat, inv_std)

    def backward(self, params, dy, cache, grads):
        xhat, inv_std = cache
        axes = tuple(range(dy.ndim - 1))
        accumulate(grads, f"{self.name}.gain", (dy * xhat).sum(axis=axes))
        accumulate(grads, f"{self.name}.bias", dy.sum(axis=axes))
        return _normalize_backward(dy * params[f"{self.name}.gain"], xhat, inv_std)


class GroupNorm(Module):
    """Group normalization for (B, C, T) tensors."""

    def __init__(self, name: str, channels: int, groups: int, eps: float = 1e-5):
        if channels % groups:
            raise InvalidSizeError(f"{channels} channels do not split into {groups} groups")
        self.name = name
        self.channels = channels
        self.groups = groups
        self.eps = eps

    def init(self, params, rng):
        params[f"{self.name}.gain"] = np.ones(self.channels)
        params[f"{self.name}.bias"] = np.zeros(self.channels)

    def forward(self, params, x):
        b, c, t = x.shape
        xg = x.reshape(b, self.groups, -1)
        mu = xg.mean(axis=-1, keepdims=True)
        var = ((xg - mu) ** 2).mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (xg - mu) * inv_std
        y = (xhat.reshape(b, c, t) * params[f"{self.name}.gain"][None, :, None]
             + params[f"{self.name}.bias"][None, :, None])
        return y, (xhat, inv_std, x.shape)

    def backward(self, params, dy, cache, grads):
        xhat, inv_std, shape = cache
        b, c, t = shape
        accumulate(grads, f"{self.name}.gain", (dy * xhat.reshape(shape)).sum(axis=(0, 2)))
        accumulate(grads, f"{self.name}.bias", dy.sum(axis=(0, 2)))
        dxhat = (dy * params[f"{self.name}.gain"][None, :, None]).reshape(b, self.groups, -1)
        return _normalize_backward(dxhat, xhat, inv_std).reshape(shape)


class Conv1d(Module):
    """1-D convolution over (B, C, T) via im2col."""

    def __init__(self, name: str, c_in: int, c_out: int, kernel: int, stride: int = 1, padding: int = 0):
        self.name = name
        self.c_in = c_in
        self.c_out = c_out
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def init(self, params, rng):
        bound = 1.0 / math.sqrt(self.c_in * self.kernel)
        params[f"{self.name}.weight"] = rng.uniform(-bound, bound, (self.c_out, self.c_in, self.kernel))
        params[f"{self.name}.bias"] = rng.uniform(-bound, bound, (self.c_out,))

    def _windows(self, t_in: int) -> np.ndarray:
        t_out = (t_in + 2 * self.padding - self.kernel) // self.stride + 1
        return self.stride * np.arange(t_out)[:, None] + np.arange(self.kernel)[None, :]

    def forward(self, params, x):
        b, c, t = x.shape
        if c != self.c_in:
            raise InvalidSizeError(f"{self.name}: expected {self.c_in} channels, got {c}")
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding)))
        idx = self._windows(t)
        cols = xp[:, :, idx].transpose(0, 2, 1, 3).reshape(b, idx.shape[0], -1)
        w2 = params[f"{self.name}.weight"].reshape(self.c_out, -1)
        y = (cols @ w2.T).transpose(0, 2, 1) + params[f"{self.name}.bias"][None, :, None]
        return y, (cols, idx, x.shape)

    def backward(self, params, dy, cache, grads):
        cols, idx, shape = cache
        b, c, t = shape
        w2 = params[f"{self.name}.weight"].reshape(self.c_out, -1)
        dyt = dy.transpose(0, 2, 1)
        dw = np.einsum('btc,btk->ck', dyt, cols)
        accumulate(grads, f"{self.name}.weight", dw.reshape(self.c_out, self.c_in, self.kernel))
        accumulate(grads, f"{self.name}.bias", dy.sum(axis=(0, 2)))
        dcols = (dyt @ w2).reshape(b, idx.shape[0], c, self.kernel).transpose(0, 2, 1, 3)
        dxp = np.zeros((b, c, t + 2 * self.padding))
        for k in range(self.kernel):
            dxp[:, :, idx[:, k]] += dcols[:, :, :, k]
        return dxp[:, :, self.padding:self.padding + t]


class Upsample(Module):
    """Nearest-neighbor x2 along T."""

    def forward(self, params, x):
        return np.repeat(x, 2, axis=2), None

    def backward(self, params, dy, cache, grads):
        b, c, t = dy.shape
        return dy.reshape(b, c, t // 2, 2).sum(axis=3)


class MaxPool(Module):
    """Max over the point axis of (B, N, C) features."""

    def forward(self, params, x):
        idx = np.argmax(x, axis=1)
        y = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return y, (idx, x.shape)

    def backward(self, params, dy, cache, grads):
        idx, shape = cache
        dx = np.zeros(shape)
        np.put_along_axis(dx, idx[:, None, :], dy[:, None, :], axis=1)
        return dx


class Sequential(Module):

    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def init(self, params, rng):
        for layer in self.layers:
            layer.init(params, rng)

    def forward(self, params, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params, dy, cache, grads):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(params, dy, c, grads)
        return dy


def sinusoidal_embedding(t: np.ndarray, dim: int, scale: float = 100.0) -> np.ndarray:
    """Sin/cos features of flow time t, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = (np.asarray(t, dtype=np.float64) * scale)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class SGD:
    """Momentum-free gradient descent."""

    def __init__(self, lr: float = 1e-3):
        self.lr = lr
        self.t = 0

    def step(self, params: Params, grads: Grads):
        self.t += 1
        for key in sorted(grads):
            params[key] -= self.lr * grads[key]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {'step': np.array([self.t], dtype=np.float64)}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.t = int(state.get('step', np.zeros(1))[0])


class Adam:
    """Adaptive-moment optimizer."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Params, grads: Grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in sorted(grads):
            g = grads[key]
            m = self.m.setdefault(key, np.zeros_like(g))
            v = self.v.setdefault(key, np.zeros_like(g))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[key] -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {'step': np.array([self.t], dtype=np.float64)}
        for key in sorted(self.m):
            state[f"m/{key}"] = self.m[key]
            state[f"v/{key}"] = self.v[key]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        self.t = int(state.get('step', np.zeros(1))[0])
        self.m = {k[2:]: np.array(v, dtype=np.float64) for k, v in state.items() if k.startswith('m/')}
        self.v = {k[2:]: np.array(v, dtype=np.float64) for k, v in state.items() if k.startswith('v/')}


def make_optimizer(kind: str, lr: float):
    if kind == 'adam':
        return Adam(lr=lr)
    if kind == 'sgd':
        return SGD(lr=lr)
    raise InvalidArgumentError(f"unknown optimizer '{kind}'")
