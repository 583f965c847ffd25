"""
Gradient checks for the numpy layers against central finite differences.
"""

import numpy as np
import pytest

from forceflow.common import EXIT_VALIDATION, InvalidArgumentError, InvalidSizeError
from forceflow.nn import (
    Adam, Conv1d, GroupNorm, LayerNorm, Linear, MaxPool, Mish, SGD, Sequential,
    SiLU, Upsample, make_optimizer, sinusoidal_embedding
)

EPS = 1e-6
RTOL = 1e-4


def _close(analytic: float, numeric: float) -> bool:
    return abs(analytic - numeric) <= RTOL * max(abs(analytic), abs(numeric), 1e-3)


def _objective(module, params, x, w):
    y, _ = module.forward(params, x)
    return float(np.sum(y * w))


def _check_module(module, x_shape, seed=0, n_checks=12):
    rng = np.random.default_rng(seed)
    params = {}
    module.init(params, rng)
    # move norm gains/biases off their trivial init
    for key in params:
        params[key] = params[key] + 0.1 * rng.standard_normal(params[key].shape)
    x = rng.standard_normal(x_shape)
    y, cache = module.forward(params, x)
    w = rng.standard_normal(y.shape)
    grads = {}
    dx = module.backward(params, w, cache, grads)

    flat = x.reshape(-1)
    for i in rng.choice(flat.size, size=min(n_checks, flat.size), replace=False):
        old = flat[i]
        flat[i] = old + EPS
        up = _objective(module, params, x, w)
        flat[i] = old - EPS
        down = _objective(module, params, x, w)
        flat[i] = old
        assert _close(dx.reshape(-1)[i], (up - down) / (2 * EPS))

    for key in sorted(params):
        p = params[key].reshape(-1)
        for i in rng.choice(p.size, size=min(3, p.size), replace=False):
            old = p[i]
            p[i] = old + EPS
            up = _objective(module, params, x, w)
            p[i] = old - EPS
            down = _objective(module, params, x, w)
            p[i] = old
            assert _close(grads[key].reshape(-1)[i], (up - down) / (2 * EPS)), key


def test_linear_gradients():
    _check_module(Linear('fc', 5, 4), (3, 5))


def test_linear_gradients_over_extra_axes():
    _check_module(Linear('fc', 5, 4), (2, 6, 5))


def test_activation_gradients():
    _check_module(SiLU(), (4, 7))
    _check_module(Mish(), (4, 7))


def test_layer_norm_gradients():
    _check_module(LayerNorm('ln', 6), (5, 6))


def test_group_norm_gradients():
    _check_module(GroupNorm('gn', 8, 4), (2, 8, 5))


def test_conv1d_gradients():
    _check_module(Conv1d('conv', 3, 4, 3, padding=1), (2, 3, 6))


def test_strided_conv1d_gradients():
    _check_module(Conv1d('down', 4, 4, 3, stride=2, padding=1), (2, 4, 8))


def test_upsample_and_maxpool_gradients():
    _check_module(Sequential([Upsample(), Conv1d('up', 3, 3, 3, padding=1)]), (2, 3, 4))
    _check_module(MaxPool(), (2, 9, 4))


def test_conv1d_output_length():
    params = {}
    conv = Conv1d('down', 2, 2, 3, stride=2, padding=1)
    conv.init(params, np.random.default_rng(0))
    y, _ = conv.forward(params, np.zeros((1, 2, 8)))
    assert y.shape == (1, 2, 4)


def test_conv1d_rejects_wrong_channels():
    params = {}
    conv = Conv1d('conv', 3, 4, 3, padding=1)
    conv.init(params, np.random.default_rng(0))
    with pytest.raises(InvalidSizeError):
        conv.forward(params, np.zeros((1, 2, 5)))


def test_group_norm_rejects_uneven_groups():
    with pytest.raises(InvalidSizeError):
        GroupNorm('gn', 6, 4)


def test_sinusoidal_embedding_shape_and_range():
    emb = sinusoidal_embedding(np.array([0.0, 0.5, 1.0]), 8)
    assert emb.shape == (3, 8)
    assert np.all(np.abs(emb) <= 1.0)
    # t = 0 gives sin 0 and cos 1
    np.testing.assert_allclose(emb[0], [0, 0, 0, 0, 1, 1, 1, 1])


def test_adam_descends_quadratic():
    params = {'x': np.array([3.0, -2.0])}
    opt = Adam(lr=0.1)
    for _ in range(500):
        opt.step(params, {'x': 2.0 * params['x']})
    assert np.linalg.norm(params['x']) < 0.1


def test_adam_state_round_trip():
    params = {'x': np.array([1.0, 2.0])}
    opt = Adam(lr=0.01)
    opt.step(params, {'x': np.array([0.5, -0.5])})
    restored = Adam(lr=0.01)
    restored.load_state_dict(opt.state_dict())
    a, b = {'x': params['x'].copy()}, {'x': params['x'].copy()}
    opt.step(a, {'x': np.array([0.1, 0.2])})
    restored.step(b, {'x': np.array([0.1, 0.2])})
    np.testing.assert_array_equal(a['x'], b['x'])


def test_sgd_step():
    params = {'x': np.array([1.0])}
    opt = SGD(lr=0.5)
    opt.step(params, {'x': np.array([2.0])})
    assert params['x'][0] == 0.0
    assert opt.state_dict()['step'][0] == 1.0


def test_unknown_optimizer():
    with pytest.raises(InvalidArgumentError) as excinfo:
        make_optimizer('rmsprop', 1e-3)
    assert excinfo.value.exit_code == EXIT_VALIDATION
