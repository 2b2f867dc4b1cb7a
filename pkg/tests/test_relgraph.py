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

from conftest import bars, frame_panel, random_walk
from latent_gru.dataset import compute_daily_returns
from latent_gru.numkernel import ConfigError, GraphError
from latent_gru.relgraph import CorrelationGraph, build_graph, pearson


def closes_from_returns(returns, start=100.0):
    return list(start * np.cumprod(np.concatenate([[1.0], 1 + np.asarray(returns)])))


def returns_panel(series):
    closes = dict((name, closes_from_returns(r)) for name, r in series.items())
    return compute_daily_returns(frame_panel(bars(closes)))


def test_pearson_examples():
    assert pearson([1, 2, 3, 4, 5], [2, 4, 6, 8, 10]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert pearson([1, 2, 3], [1, 2, 3]) <= 1.0


def test_pearson_undefined():
    '''Constant or too-short series have no correlation'''
    assert pearson([1, 1, 1], [1, 2, 3]) is None
    assert pearson([1, 2, 3], [5, 5, 5]) is None
    assert pearson([1], [2]) is None
    assert pearson([1, 2, 3], [1, 2, 3], [True, False, False]) is None


def test_pearson_mask_and_nan():
    a = [1.0, 2.0, np.nan, 4.0, 100.0]
    b = [2.0, 4.0, 1.0, 8.0, -100.0]
    assert pearson(a, b, [True, True, True, True, False]) == pytest.approx(1.0)


def test_pearson_length_mismatch():
    with pytest.raises(GraphError):
        pearson([1, 2, 3], [1, 2])


def test_pearson_matches_corrcoef():
    '''Agrees with numpy over random pairs, symmetric and scale invariant'''
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.standard_normal(30)
        b = 0.5 * a + rng.standard_normal(30)
        expected = np.corrcoef(a, b)[0, 1]
        assert pearson(a, b) == pytest.approx(expected, abs=1e-12)
        assert pearson(b, a) == pytest.approx(pearson(a, b), abs=1e-15)
        assert pearson(3 * a + 7, b) == pytest.approx(expected, abs=1e-12)
        assert pearson(-a, b) == pytest.approx(-expected, abs=1e-12)


def test_graph_thresholding():
    '''Perfectly correlated pair gets an edge, the noise stock does not'''
    rng = np.random.default_rng(1)
    base = 0.01 * rng.standard_normal(40)
    panel = returns_panel(dict(A=base, B=2 * base,
                               C=0.01 * rng.standard_normal(40)))
    graph = build_graph(panel, panel.dates[-1], lookback_days=41,
                        judge_value=0.8)
    assert graph.neighbors(0) == [0, 1]
    assert graph.neighbors(2) == [2]
    assert graph.weight(0, 1) == pytest.approx(1.0)
    assert graph.weight(0, 2) is None
    assert graph.weight(2, 2) == 1.0
    assert graph.window == [str(panel.dates[0]), str(panel.dates[-1])]
    adj = graph.adjacency()
    assert (adj == adj.T).all()
    assert adj.diagonal().all()


def test_graph_absolute_mode():
    rng = np.random.default_rng(2)
    base = 0.01 * rng.standard_normal(40)
    panel = returns_panel(dict(A=base, B=-base))
    signed = build_graph(panel, panel.dates[-1], 41, 0.8, 'signed')
    absolute = build_graph(panel, panel.dates[-1], 41, 0.8, 'absolute')
    assert signed.cross_edge_count == 0
    assert absolute.cross_edge_count == 1
    assert absolute.weight(0, 1) == pytest.approx(-1.0)


def test_graph_bad_mode():
    panel = returns_panel(dict(A=[0.01, 0.02]))
    with pytest.raises(ConfigError):
        build_graph(panel, panel.dates[-1], 10, 0.8, 'spearman')


def test_graph_threshold_monotone():
    '''Raising judge_value never adds edges'''
    rng = np.random.default_rng(3)
    closes = random_walk(rng, 8, 60)
    common = np.cumprod(1 + 0.01 * rng.standard_normal(60))
    closes = closes * common[None, :]
    panel = compute_daily_returns(frame_panel(bars(
        dict(('T%d' % i, list(c)) for i, c in enumerate(closes)))))
    previous = None
    for judge in (-1.0, 0.0, 0.2, 0.4, 0.6, 0.8, 0.95, 1.0):
        edges = set((i, j) for i, j, _ in
                    build_graph(panel, panel.dates[-1], 60, judge).edges())
        if previous is not None:
            assert edges <= previous
        previous = edges
    full = build_graph(panel, panel.dates[-1], 60, -1.0)
    assert full.cross_edge_count == 8 * 7 // 2


def test_graph_uses_only_lookback_window():
    '''Returns after as_of do not change the graph'''
    rng = np.random.default_rng(4)
    base = 0.01 * rng.standard_normal(40)
    tail = 0.01 * rng.standard_normal(10)
    first = returns_panel(dict(A=np.concatenate([base, tail]),
                               B=np.concatenate([base, -tail])))
    second = returns_panel(dict(A=np.concatenate([base, tail]),
                                B=np.concatenate([base, tail])))
    as_of = first.dates[40]
    assert first.dates[40] == second.dates[40]
    assert (build_graph(first, as_of, 30, 0.8).edges() ==
            build_graph(second, as_of, 30, 0.8).edges())


def test_graph_json_round_trip():
    graph = CorrelationGraph(['A', 'B', 'C'], [(0, 2, 0.9), (1, 2, -0.85)],
                             0.8, ['2020-01-01', '2020-12-31'])
    again = CorrelationGraph.from_json(graph.to_json())
    assert again.tickers == graph.tickers
    assert again.edges() == graph.edges()
    assert again.judge_value == 0.8
    assert again.window == graph.window


def test_graph_malformed_json():
    with pytest.raises(GraphError):
        CorrelationGraph.from_json('{"tickers": ["A"]}')
    with pytest.raises(GraphError):
        CorrelationGraph.from_json('{"tickers": ["A"], "edges": [[0, 3, 1.0]]}')
    with pytest.raises(GraphError):
        CorrelationGraph.from_json('{"n": 2, "tickers": ["A"], "edges": []}')


def test_graph_permute():
    graph = CorrelationGraph(['A', 'B', 'C'], [(0, 1, 0.9)])
    moved = graph.permute([2, 0, 1])
    assert moved.tickers == ['C', 'A', 'B']
    assert moved.edges() == [(1, 2, 0.9)]
    assert (moved.adjacency() ==
            graph.adjacency()[np.ix_([2, 0, 1], [2, 0, 1])]).all()
