# Copyright (c) 2017 Vertex.AI
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Dense matrix primitives shared by every layer.

Layers keep their own caches and call the backward helpers here in reverse
order; there is no autodiff tape.
"""

import numpy as np

PRECISIONS = {
    'float32': np.float32,
    'float64': np.float64,
}

ACTIVATIONS = ('sigmoid', 'tanh', 'leakyrelu', 'relu', 'identity')

ZERO_TOL = 1e-12


class LatentGruError(Exception):
    pass


class ConfigError(LatentGruError):
    pass


class DataError(LatentGruError):
    pass


class KernelError(LatentGruError):
    pass


class NumericalError(LatentGruError):
    pass


class GraphError(LatentGruError):
    pass


def resolve_dtype(precision):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ConfigError('precision must be one of {}, not {!r}'.format(
            ', '.join(sorted(PRECISIONS)), precision))


def _as_float(M):
    M = np.asarray(M)
    if not np.issubdtype(M.dtype, np.floating):
        M = M.astype(np.float64)
    return M


def check_finite(M, what='matrix'):
    M = np.asarray(M)
    bad = ~np.isfinite(M)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise KernelError('non-finite entry in {} at {}: {!r}'.format(
            what, idx, M[idx]))
    return M


def sigmoid(M):
    M = _as_float(M)
    z = np.exp(-np.abs(M))
    return np.where(M >= 0, 1 / (1 + z), z / (1 + z)).astype(M.dtype)


def activation(M, kind, slope=0.2):
    M = check_finite(_as_float(M), kind + ' input')
    if kind == 'sigmoid':
        return sigmoid(M)
    if kind == 'tanh':
        return np.tanh(M)
    if kind == 'leakyrelu':
        return np.where(M > 0, M, M * slope).astype(M.dtype)
    if kind == 'relu':
        return np.maximum(M, 0)
    if kind == 'identity':
        return M
    raise KernelError('unknown activation {!r}'.format(kind))


def activation_backward(kind, dY, X, Y, slope=0.2):
    """Gradient w.r.t. the activation input, given input X and output Y."""
    if kind == 'sigmoid':
        return dY * Y * (1 - Y)
    if kind == 'tanh':
        return dY * (1 - Y * Y)
    if kind == 'leakyrelu':
        return dY * np.where(X > 0, 1, slope).astype(dY.dtype)
    if kind == 'relu':
        return dY * (X > 0)
    if kind == 'identity':
        return dY
    raise KernelError('unknown activation {!r}'.format(kind))


def softmax_rows(M, mask=None):
    """Softmax over the last axis.

    Masked-out entries (mask False) get exactly zero weight. A row with no
    unmasked entry is an error rather than a silent NaN.
    """
    M = check_finite(_as_float(M), 'softmax input')
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), M.shape)
        empty = ~mask.any(axis=-1)
        if empty.any():
            row = tuple(int(i) for i in np.argwhere(empty)[0])
            raise KernelError('softmax row {} is fully masked'.format(row))
        M = np.where(mask, M, -np.inf)
    shifted = M - M.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(Y, dY):
    return Y * (dY - (dY * Y).sum(axis=-1, keepdims=True))


def glorot_uniform(rng, shape, dtype=np.float64):
    if len(shape) == 1:
        fan_in = fan_out = shape[0]
    else:
        fan_out, fan_in = shape[-2], shape[-1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class ParamTensor(object):
    def __init__(self, name, value):
        self.name = name
        self.value = np.ascontiguousarray(np.array(value, copy=True))
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad[...] = 0

    def assign(self, value):
        value = np.asarray(value)
        if value.shape != self.value.shape:
            raise KernelError('{}: expected shape {}, got {}'.format(
                self.name, self.value.shape, value.shape))
        self.value[...] = value

    def __repr__(self):
        return 'ParamTensor({!r}, shape={})'.format(self.name, self.shape)


def adam_step(p, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update of p; the gradient is cleared afterwards."""
    if not lr > 0:
        raise ConfigError('learning rate must be positive, got {!r}'.format(lr))
    for beta in (beta1, beta2):
        if not 0 < beta < 1:
            raise ConfigError('beta must lie in (0, 1), got {!r}'.format(beta))
    p.step += 1
    g = p.grad
    p.m *= beta1
    p.m += (1 - beta1) * g
    p.v *= beta2
    p.v += (1 - beta2) * g * g
    m_hat = p.m / (1 - beta1**p.step)
    v_hat = p.v / (1 - beta2**p.step)
    p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
    p.zero_grad()


class Adam(object):
    def __init__(self, lr=0.0002, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params):
        for p in params:
            adam_step(p, self.lr, self.beta1, self.beta2, self.eps)


def finite_diff_check(loss_fn, params, step=1e-4, max_entries=None, seed=0,
                      floor=1e-6):
    """Largest relative error between analytic and central-difference grads.

    loss_fn() must run forward and backward, accumulating into p.grad, and
    return the scalar loss. Parameters must be float64.
    """
    params = list(params)
    for p in params:
        if p.value.dtype != np.float64:
            raise KernelError('gradient check needs float64, {} is {}'.format(
                p.name, p.value.dtype))
    for p in params:
        p.zero_grad()
    base = loss_fn()
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    again = loss_fn()
    if again != base:
        raise KernelError('loss is not deterministic: {!r} != {!r}'.format(
            base, again))

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        flat_grad = grad.reshape(-1)
        indices = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            indices = np.sort(rng.choice(flat.size, max_entries, replace=False))
        for idx in indices:
            orig = flat[idx]
            flat[idx] = orig + step
            plus = loss_fn()
            flat[idx] = orig - step
            minus = loss_fn()
            flat[idx] = orig
            numeric = (plus - minus) / (2 * step)
            analytic_value = flat_grad[idx]
            scale = max(abs(analytic_value), abs(numeric), floor)
            worst = max(worst, abs(analytic_value - numeric) / scale)
    for p in params:
        p.zero_grad()
    return float(worst)


class Dense(object):
    """Affine map X W^T + b over the last axis."""

    def __init__(self, name, in_dim, out_dim, rng, dtype=np.float64, bias=True):
        self.W = ParamTensor(name + '.W', glorot_uniform(rng, (out_dim, in_dim),
                                                         dtype))
        self.b = ParamTensor(name + '.b', np.zeros(
            (out_dim, ), dtype=dtype)) if bias else None

    def parameters(self):
        return [self.W] + ([self.b] if self.b is not None else [])

    def forward(self, X):
        Y = X @ self.W.value.T
        if self.b is not None:
            Y = Y + self.b.value
        return Y

    def backward(self, dY, X):
        dY2 = dY.reshape(-1, dY.shape[-1])
        X2 = X.reshape(-1, X.shape[-1])
        self.W.grad += dY2.T @ X2
        if self.b is not None:
            self.b.grad += dY2.sum(axis=0)
        return dY @ self.W.value
