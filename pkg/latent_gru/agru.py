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

"""Attention-gated GRU.

The reset gate of a classic GRU is replaced by scaled dot-product attention:
the previous hidden state queries the layer's inputs seen so far in the
window, and the attended value scales U_h h_prev inside the candidate.

Shapes: M sequences (stocks x days flattened), T steps, D inputs, H hidden.
Weights are stored out x in and applied as X W^T.
"""

import numpy as np

from latent_gru.numkernel import (ConfigError, ParamTensor, glorot_uniform,
                                  sigmoid, softmax_backward, softmax_rows)

GRU_MODES = ('attention', 'classic')
ATTN_SCOPES = ('window', 'current')


class AgruLayerParams(object):
    def __init__(self, input_dim, hidden_dim, rng, mode='attention',
                 attn_scope='window', dtype=np.float64, prefix='agru'):
        if mode not in GRU_MODES:
            raise ConfigError('gru_mode must be one of {}, not {!r}'.format(
                ', '.join(GRU_MODES), mode))
        if attn_scope not in ATTN_SCOPES:
            raise ConfigError('attn_scope must be one of {}, not {!r}'.format(
                ', '.join(ATTN_SCOPES), attn_scope))
        if input_dim < 1 or hidden_dim < 1:
            raise ConfigError('{}: dimensions must be positive'.format(prefix))
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.mode = mode
        self.attn_scope = attn_scope
        D, H = input_dim, hidden_dim

        def weight(name, shape):
            return ParamTensor('{}.{}'.format(prefix, name),
                               glorot_uniform(rng, shape, dtype))

        def bias(name):
            return ParamTensor('{}.{}'.format(prefix, name),
                               np.zeros((H, ), dtype=dtype))

        self.W_z, self.U_z, self.b_z = weight('W_z', (H, D)), weight(
            'U_z', (H, H)), bias('b_z')
        self.W_h, self.U_h, self.b_h = weight('W_h', (H, D)), weight(
            'U_h', (H, H)), bias('b_h')
        if mode == 'attention':
            # query, key and value all live in the hidden dimension
            self.W_q = weight('W_q', (H, H))
            self.W_k = weight('W_k', (H, D))
            self.W_v = weight('W_v', (H, D))
        else:
            self.W_r, self.U_r, self.b_r = weight('W_r', (H, D)), weight(
                'U_r', (H, H)), bias('b_r')

    def parameters(self):
        params = [self.W_z, self.U_z, self.b_z, self.W_h, self.U_h, self.b_h]
        if self.mode == 'attention':
            params += [self.W_q, self.W_k, self.W_v]
        else:
            params += [self.W_r, self.U_r, self.b_r]
        return params


def attn_reset(h_prev, inputs, params):
    """Attention read-out used in place of the reset gate.

    h_prev is (M, H); inputs is (M, s, D), the steps attended over.
    Returns r (M, H), the weights alpha (M, s) and a backward cache.
    """
    q = h_prev @ params.W_q.value.T
    K = inputs @ params.W_k.value.T
    V = inputs @ params.W_v.value.T
    scores = (K @ q[:, :, None])[..., 0] / params.hidden_dim**0.5
    alpha = softmax_rows(scores)
    r = (alpha[:, None, :] @ V)[:, 0]
    return r, alpha, (h_prev, inputs, q, K, V, alpha)


def attn_reset_backward(dr, cache, params):
    h_prev, inputs, q, K, V, alpha = cache
    dalpha = (V @ dr[:, :, None])[..., 0]
    dV = alpha[:, :, None] * dr[:, None, :]
    dscores = softmax_backward(alpha, dalpha) / params.hidden_dim**0.5
    dq = (dscores[:, None, :] @ K)[:, 0]
    dK = dscores[:, :, None] * q[:, None, :]
    params.W_q.grad += dq.T @ h_prev
    params.W_k.grad += np.tensordot(dK, inputs, axes=([0, 1], [0, 1]))
    params.W_v.grad += np.tensordot(dV, inputs, axes=([0, 1], [0, 1]))
    dh_prev = dq @ params.W_q.value
    dinputs = dK @ params.W_k.value + dV @ params.W_v.value
    return dh_prev, dinputs


def reset_gate(x_t, h_prev, params):
    r = sigmoid(x_t @ params.W_r.value.T + h_prev @ params.U_r.value.T +
                params.b_r.value)
    return r, (x_t, h_prev, r)


def reset_gate_backward(dr, cache, params):
    x_t, h_prev, r = cache
    dpre = dr * r * (1 - r)
    params.W_r.grad += dpre.T @ x_t
    params.U_r.grad += dpre.T @ h_prev
    params.b_r.grad += dpre.sum(axis=0)
    return dpre @ params.W_r.value, dpre @ params.U_r.value


def agru_step(x_t, h_prev, r, params):
    z = sigmoid(x_t @ params.W_z.value.T + h_prev @ params.U_z.value.T +
                params.b_z.value)
    u = h_prev @ params.U_h.value.T
    c = np.tanh(x_t @ params.W_h.value.T + r * u + params.b_h.value)
    h = (1 - z) * h_prev + z * c
    return h, (x_t, h_prev, r, z, u, c)


def agru_step_backward(dh, cache, params):
    """Returns (dx_t, dh_prev, dr) and accumulates gate weight gradients."""
    x_t, h_prev, r, z, u, c = cache
    dz = dh * (c - h_prev)
    dc = dh * z
    dh_prev = dh * (1 - z)

    dpre_c = dc * (1 - c * c)
    params.W_h.grad += dpre_c.T @ x_t
    params.b_h.grad += dpre_c.sum(axis=0)
    dx = dpre_c @ params.W_h.value
    dr = dpre_c * u
    du = dpre_c * r
    params.U_h.grad += du.T @ h_prev
    dh_prev += du @ params.U_h.value

    dpre_z = dz * z * (1 - z)
    params.W_z.grad += dpre_z.T @ x_t
    params.U_z.grad += dpre_z.T @ h_prev
    params.b_z.grad += dpre_z.sum(axis=0)
    dx += dpre_z @ params.W_z.value
    dh_prev += dpre_z @ params.U_z.value
    return dx, dh_prev, dr


class LayerTrace(object):
    def __init__(self, inputs):
        self.inputs = inputs
        self.steps = []
        self.alphas = []


def layer_forward(X, params):
    """Run one layer over X (M, T, D); returns the hidden sequence (M, T, H)."""
    M, T, _ = X.shape
    h = np.zeros((M, params.hidden_dim), dtype=X.dtype)
    trace = LayerTrace(X)
    states = []
    for t in range(T):
        if params.mode == 'attention':
            start = t if params.attn_scope == 'current' else 0
            r, alpha, rcache = attn_reset(h, X[:, start:t + 1], params)
        else:
            r, rcache = reset_gate(X[:, t], h, params)
            alpha = None
        h, scache = agru_step(X[:, t], h, r, params)
        states.append(h)
        trace.steps.append((rcache, scache))
        trace.alphas.append(alpha)
    return np.stack(states, axis=1), trace


def layer_backward(dstates, trace, params):
    X = trace.inputs
    T = X.shape[1]
    dX = np.zeros_like(X)
    dh_next = np.zeros_like(dstates[:, 0])
    for t in reversed(range(T)):
        rcache, scache = trace.steps[t]
        dx_t, dh_prev, dr = agru_step_backward(dstates[:, t] + dh_next, scache,
                                               params)
        dX[:, t] += dx_t
        if params.mode == 'attention':
            dh_attn, dwindow = attn_reset_backward(dr, rcache, params)
            start = t if params.attn_scope == 'current' else 0
            dX[:, start:t + 1] += dwindow
        else:
            dx_r, dh_attn = reset_gate_backward(dr, rcache, params)
            dX[:, t] += dx_r
        dh_next = dh_prev + dh_attn
    return dX


class EncoderOutput(object):
    def __init__(self, A1, hidden_sequence, traces):
        self.A1 = A1
        self.hidden_sequence = hidden_sequence
        self.traces = traces


def build_stack(input_dim, sizes, rng, mode='attention', attn_scope='window',
                dtype=np.float64, prefix='agru'):
    stack = []
    for idx, size in enumerate(sizes):
        stack.append(AgruLayerParams(input_dim, size, rng, mode, attn_scope,
                                     dtype, '{}.{}'.format(prefix, idx)))
        input_dim = size
    return stack


def encode(batch_inputs, layer_stack):
    """Stacked encoding of (M, his_t, d_x) windows; A1 is the top layer's last state."""
    X = batch_inputs
    sequence, traces = [], []
    for params in layer_stack:
        X, trace = layer_forward(X, params)
        sequence.append(X)
        traces.append(trace)
    return EncoderOutput(X[:, -1], sequence, traces)


def encode_backward(dA1, output, layer_stack):
    top = output.hidden_sequence[-1]
    dstates = np.zeros_like(top)
    dstates[:, -1] = dA1
    for params, trace in reversed(list(zip(layer_stack, output.traces))):
        dstates = layer_backward(dstates, trace, params)
    return dstates
