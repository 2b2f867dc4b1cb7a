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

import numpy as np

from latent_gru.numkernel import (ConfigError, ParamTensor, glorot_uniform,
                                  softmax_backward, softmax_rows)


class LatentBank(object):
    """d_r learnable market-state vectors of width d."""

    def __init__(self, R):
        self.R = R

    @property
    def d_r(self):
        return self.R.shape[0]

    @property
    def d(self):
        return self.R.shape[1]

    def parameters(self):
        return [self.R]


def init_bank(d_r, d, seed, dtype=np.float64, name='latent.R'):
    if d_r < 1 or d < 1:
        raise ConfigError('latent bank needs d_r >= 1 and d >= 1, got {}x{}'
                          .format(d_r, d))
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d_r, d)).astype(dtype)
    return LatentBank(ParamTensor(name, values))


class CrossAttnParams(object):
    """Per-head projections stored (heads, d, d/heads); W_O is d x d."""

    def __init__(self, d, heads, rng, dtype=np.float64, prefix='cross'):
        if heads < 1 or d % heads:
            raise ConfigError('{}: {} heads do not divide width {}'.format(
                prefix, heads, d))
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        shape = (heads, d, self.head_dim)
        self.W_Q = ParamTensor(prefix + '.W_Q', glorot_uniform(rng, shape, dtype))
        self.W_K = ParamTensor(prefix + '.W_K', glorot_uniform(rng, shape, dtype))
        self.W_V = ParamTensor(prefix + '.W_V', glorot_uniform(rng, shape, dtype))
        self.W_O = ParamTensor(prefix + '.W_O', glorot_uniform(rng, (d, d), dtype))

    def parameters(self):
        return [self.W_Q, self.W_K, self.W_V, self.W_O]


def cross_attention(A, bank, params):
    """Rows of A (M, d) query the bank; returns B (M, d) and a cache.

    Each row's attention runs over the d_r latent states.
    """
    if bank.d != params.d or A.shape[-1] != params.d:
        raise ConfigError('cross attention width {} does not match stream {} '
                          'and bank {}'.format(params.d, A.shape[-1], bank.d))
    R = bank.R.value
    Q = np.einsum('md,kde->kme', A, params.W_Q.value)
    K = np.einsum('rd,kde->kre', R, params.W_K.value)
    V = np.einsum('rd,kde->kre', R, params.W_V.value)
    scores = Q @ K.transpose(0, 2, 1) / params.head_dim**0.5
    P = softmax_rows(scores)
    heads = P @ V
    concat = heads.transpose(1, 0, 2).reshape(A.shape[0], params.d)
    B = concat @ params.W_O.value
    return B, (A, Q, K, V, P, concat)


def cross_attention_backward(dB, cache, bank, params):
    A, Q, K, V, P, concat = cache
    R = bank.R.value
    M = A.shape[0]
    params.W_O.grad += concat.T @ dB
    dconcat = dB @ params.W_O.value.T
    dheads = dconcat.reshape(M, params.heads, params.head_dim).transpose(1, 0, 2)
    dP = dheads @ V.transpose(0, 2, 1)
    dV = P.transpose(0, 2, 1) @ dheads
    dscores = softmax_backward(P, dP) / params.head_dim**0.5
    dQ = dscores @ K
    dK = dscores.transpose(0, 2, 1) @ Q
    params.W_Q.grad += np.einsum('md,kme->kde', A, dQ)
    params.W_K.grad += np.einsum('rd,kre->kde', R, dK)
    params.W_V.grad += np.einsum('rd,kre->kde', R, dV)
    bank.R.grad += (np.einsum('kre,kde->rd', dK, params.W_K.value) +
                    np.einsum('kre,kde->rd', dV, params.W_V.value))
    return np.einsum('kme,kde->md', dQ, params.W_Q.value)
