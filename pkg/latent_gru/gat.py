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

"""Dense multi-head graph attention.

Node features are (B, N, F) for B independent days; the adjacency is an
(N, N) or (B, N, N) boolean mask with a true diagonal. Logits outside the
mask get exactly zero attention, so disconnected components never exchange
information.
"""

import numpy as np

from latent_gru.numkernel import (ConfigError, ParamTensor, activation,
                                  activation_backward, glorot_uniform,
                                  softmax_backward, softmax_rows)

HEAD_COMBINES = ('concat', 'average')


class GatLayerParams(object):
    def __init__(self, in_dim, out_dim, rng, heads=1, head_combine='concat',
                 activation='relu', slope=0.2, dtype=np.float64, prefix='gat'):
        if heads < 1:
            raise ConfigError('{}: heads must be >= 1'.format(prefix))
        if head_combine not in HEAD_COMBINES:
            raise ConfigError('{}: head_combine must be one of {}'.format(
                prefix, ', '.join(HEAD_COMBINES)))
        if head_combine == 'concat' and out_dim % heads:
            raise ConfigError('{}: {} heads do not divide out_dim {}'.format(
                prefix, heads, out_dim))
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.heads = heads
        self.head_combine = head_combine
        self.activation = activation
        self.slope = slope
        if head_combine == 'concat':
            self.head_dim = out_dim // heads
        else:
            self.head_dim = out_dim
        self.W = ParamTensor(prefix + '.W', glorot_uniform(
            rng, (heads * self.head_dim, in_dim), dtype))
        self.a = ParamTensor(prefix + '.a', glorot_uniform(
            rng, (heads, 2 * self.head_dim), dtype))

    def parameters(self):
        return [self.W, self.a]


def day_adjacency(adjacency, node_mask):
    """Restrict a graph to the stocks present on each day.

    Absent stocks keep only their self-loop and are invisible to the rest.
    """
    node_mask = np.asarray(node_mask, dtype=bool)
    eye = np.eye(adjacency.shape[-1], dtype=bool)
    return (adjacency & node_mask[..., :, None] & node_mask[..., None, :]) | eye


def gat_forward(H, adjacency, params):
    B, N, _ = H.shape
    K, F = params.heads, params.head_dim
    P = (H @ params.W.value.T).reshape(B, N, K, F).transpose(0, 2, 1, 3)
    src = np.einsum('bknf,kf->bkn', P, params.a.value[:, :F])
    dst = np.einsum('bknf,kf->bkn', P, params.a.value[:, F:])
    e_pre = src[..., :, None] + dst[..., None, :]
    e = activation(e_pre, 'leakyrelu', params.slope)
    mask = np.broadcast_to(adjacency, (B, N, N))[:, None]
    sigma = softmax_rows(e, mask)
    agg = sigma @ P
    if params.head_combine == 'concat':
        combined = agg.transpose(0, 2, 1, 3).reshape(B, N, K * F)
    else:
        combined = agg.mean(axis=1)
    out = activation(combined, params.activation)
    cache = (H, P, e_pre, sigma, combined, out)
    return out, cache


def gat_backward(dout, cache, params):
    H, P, e_pre, sigma, combined, out = cache
    B, N, _ = H.shape
    K, F = params.heads, params.head_dim
    dcomb = activation_backward(params.activation, dout, combined, out)
    if params.head_combine == 'concat':
        dagg = dcomb.reshape(B, N, K, F).transpose(0, 2, 1, 3)
    else:
        dagg = np.broadcast_to(dcomb[:, None] / K, (B, K, N, F))
    dsigma = dagg @ P.transpose(0, 1, 3, 2)
    dP = sigma.transpose(0, 1, 3, 2) @ dagg
    de = softmax_backward(sigma, dsigma)
    de_pre = activation_backward('leakyrelu', de, e_pre, None, params.slope)
    dsrc = de_pre.sum(axis=-1)
    ddst = de_pre.sum(axis=-2)
    a = params.a.value
    params.a.grad[:, :F] += (dsrc[..., None, :] @ P).sum(axis=0)[:, 0]
    params.a.grad[:, F:] += (ddst[..., None, :] @ P).sum(axis=0)[:, 0]
    dP = dP + dsrc[..., None] * a[None, :, None, :F] + \
        ddst[..., None] * a[None, :, None, F:]
    dP2 = dP.transpose(0, 2, 1, 3).reshape(B, N, K * F)
    params.W.grad += np.tensordot(dP2, H, axes=([0, 1], [0, 1]))
    return dP2 @ params.W.value


class GatTrace(object):
    def __init__(self, caches, outputs):
        self.caches = caches
        self.outputs = outputs

    def attention(self, layer=0):
        """Attention coefficients (B, heads, N, N) of one layer."""
        return self.caches[layer][3]


def build_stack(in_dim, sizes, rng, heads=1, final_activation='relu',
                dtype=np.float64, prefix='gat', slope=0.2):
    """Hidden layers concatenate heads, the last layer averages them."""
    stack = []
    for idx, size in enumerate(sizes):
        last = idx == len(sizes) - 1
        stack.append(GatLayerParams(
            in_dim, size, rng, heads=heads,
            head_combine='average' if last else 'concat',
            activation=final_activation if last else 'relu', slope=slope,
            dtype=dtype, prefix='{}.{}'.format(prefix, idx)))
        in_dim = size
    return stack


def stack_forward(H, adjacency, stack):
    caches, outputs = [], []
    for params in stack:
        H, cache = gat_forward(H, adjacency, params)
        caches.append(cache)
        outputs.append(H)
    return H, GatTrace(caches, outputs)


def stack_backward(dout, trace, stack):
    for params, cache in reversed(list(zip(stack, trace.caches))):
        dout = gat_backward(dout, cache, params)
    return dout


def encode_cross_section(features, adjacency, stack):
    """Cross-sectional encoding of one or more day slices.

    features is (N, d_x) or (B, N, d_x); adjacency may also be a
    CorrelationGraph.
    """
    if hasattr(adjacency, 'adjacency'):
        adjacency = adjacency.adjacency()
    single = features.ndim == 2
    if single:
        features = features[None]
    A2, trace = stack_forward(features, adjacency, stack)
    return (A2[0] if single else A2), trace
