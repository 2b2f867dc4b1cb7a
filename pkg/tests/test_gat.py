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
import pytest

from latent_gru.gat import (GatLayerParams, build_stack, day_adjacency,
                            encode_cross_section, gat_forward, stack_backward,
                            stack_forward)
from latent_gru.numkernel import ConfigError, ParamTensor, finite_diff_check
from latent_gru.relgraph import CorrelationGraph


def leaky(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def reference_layer(H, adj, params):
    '''Node-by-node loop over heads and neighbours.'''
    N = H.shape[0]
    K, F = params.heads, params.head_dim
    W = params.W.value.reshape(K, F, -1)
    a = params.a.value
    heads = []
    for k in range(K):
        P = H @ W[k].T
        out = np.zeros((N, F))
        for i in range(N):
            nbrs = [j for j in range(N) if adj[i, j]]
            e = np.array([leaky(a[k, :F] @ P[i] + a[k, F:] @ P[j],
                                params.slope) for j in nbrs])
            w = np.exp(e - e.max())
            w /= w.sum()
            out[i] = sum(wj * P[j] for wj, j in zip(w, nbrs))
        heads.append(out)
    if params.head_combine == 'concat':
        return np.concatenate(heads, axis=1)
    return np.mean(heads, axis=0)


def test_matches_loop_reference():
    '''Three nodes, two heads, hand-enumerated neighbourhoods'''
    rng = np.random.default_rng(0)
    adj = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    H = rng.normal(size=(3, 4))
    for combine in ('concat', 'average'):
        params = GatLayerParams(4, 6, rng, heads=2, head_combine=combine,
                                activation='identity')
        out, _ = gat_forward(H[None], adj, params)
        np.testing.assert_allclose(out[0], reference_layer(H, adj, params),
                                   rtol=1e-12, atol=1e-12)


def test_lone_node_attends_to_itself():
    rng = np.random.default_rng(1)
    params = GatLayerParams(3, 2, rng, heads=2, head_combine='average',
                            activation='identity')
    H = rng.normal(size=(1, 1, 3))
    out, cache = gat_forward(H, np.ones((1, 1), dtype=bool), params)
    np.testing.assert_allclose(cache[3], np.ones((1, 2, 1, 1)))
    P = H[0] @ params.W.value.T
    np.testing.assert_allclose(out[0], P.reshape(1, 2, 2).mean(axis=1))


def test_attention_is_masked_distribution():
    rng = np.random.default_rng(2)
    adj = rng.random((6, 6)) < 0.4
    adj = adj | adj.T | np.eye(6, dtype=bool)
    params = GatLayerParams(3, 4, rng, heads=2)
    _, trace = stack_forward(rng.normal(size=(2, 6, 3)), adj, [params])
    sigma = trace.attention(0)
    assert sigma.shape == (2, 2, 6, 6)
    np.testing.assert_allclose(sigma.sum(axis=-1), 1.0)
    assert (sigma[:, :, ~adj] == 0).all()


def test_components_do_not_mix():
    '''Perturbing one component leaves the other bitwise unchanged'''
    rng = np.random.default_rng(3)
    graph = CorrelationGraph(list('ABCDE'), [(0, 1, 0.9), (2, 3, 0.9),
                                             (3, 4, 0.85)])
    stack = build_stack(3, [4, 2], rng, heads=2)
    H = rng.normal(size=(5, 3))
    base, _ = encode_cross_section(H, graph, stack)
    H[3] += 5.0
    moved, _ = encode_cross_section(H, graph, stack)
    np.testing.assert_allclose(moved[:2], base[:2], rtol=1e-13, atol=0)


def test_permutation_equivariance():
    rng = np.random.default_rng(4)
    graph = CorrelationGraph(list('ABCDE'), [(0, 1, 0.9), (1, 4, 0.8),
                                             (2, 3, 0.95)])
    stack = build_stack(3, [4, 2], rng, heads=2, final_activation='identity')
    H = rng.normal(size=(5, 3))
    order = [3, 0, 4, 2, 1]
    base, _ = encode_cross_section(H, graph, stack)
    moved, _ = encode_cross_section(H[order], graph.permute(order), stack)
    np.testing.assert_allclose(moved, base[order], rtol=1e-12, atol=1e-14)


def test_batched_days_match_single_days():
    rng = np.random.default_rng(5)
    adj = np.ones((4, 4), dtype=bool)
    stack = build_stack(3, [4, 1], rng, heads=2)
    H = rng.normal(size=(3, 4, 3))
    batched, _ = encode_cross_section(H, adj, stack)
    for b in range(3):
        single, _ = encode_cross_section(H[b], adj, stack)
        np.testing.assert_allclose(batched[b], single, rtol=1e-12, atol=1e-14)


def test_day_adjacency_hides_absent_stocks():
    adj = np.ones((3, 3), dtype=bool)
    day = day_adjacency(adj, np.array([True, False, True]))
    expected = np.array([[1, 0, 1], [0, 1, 0], [1, 0, 1]], dtype=bool)
    assert (day == expected).all()
    both = day_adjacency(adj, np.array([[True, True, False],
                                        [False, True, True]]))
    assert both.shape == (2, 3, 3)
    assert both[:, np.arange(3), np.arange(3)].all()


def test_stack_layout():
    rng = np.random.default_rng(6)
    stack = build_stack(32, [32, 4], rng, heads=4)
    assert [p.head_combine for p in stack] == ['concat', 'average']
    assert stack[0].W.value.shape == (32, 32)
    assert stack[1].W.value.shape == (16, 32)
    assert stack[1].a.value.shape == (4, 8)


def test_heads_must_divide_concat_width():
    with pytest.raises(ConfigError):
        GatLayerParams(4, 6, np.random.default_rng(7), heads=4)
    with pytest.raises(ConfigError):
        GatLayerParams(4, 6, np.random.default_rng(7), head_combine='sum')


@pytest.mark.parametrize('final', ['relu', 'identity'])
def test_stack_gradients(final):
    '''Two-layer stack gradients for weights and inputs match finite differences'''
    rng = np.random.default_rng(8)
    adj = np.array([[1, 1, 0, 1], [1, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]],
                   dtype=bool)
    stack = build_stack(3, [4, 2], rng, heads=2, final_activation=final)
    H = ParamTensor('H', rng.normal(size=(2, 4, 3)))
    weights = rng.normal(size=(2, 4, 2))

    def loss_fn():
        out, trace = stack_forward(H.value, adj, stack)
        H.grad += stack_backward(weights, trace, stack)
        return float((weights * out).sum())

    params = [p for layer in stack for p in layer.parameters()] + [H]
    assert finite_diff_check(loss_fn, params, step=1e-5, floor=1e-5) < 1e-4
