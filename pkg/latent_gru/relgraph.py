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

import json

import numpy as np
from loguru import logger

from latent_gru.numkernel import ConfigError, GraphError

CORR_MODES = ('signed', 'absolute')


def pearson(a, b, mask=None):
    """Pearson correlation over jointly finite (and masked-in) entries.

    Returns None when fewer than two joint observations remain or either
    series is constant there.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise GraphError('series lengths differ: {} vs {}'.format(
            a.shape, b.shape))
    joint = np.isfinite(a) & np.isfinite(b)
    if mask is not None:
        joint &= np.asarray(mask, dtype=bool)
    a = a[joint]
    b = b[joint]
    if a.size < 2 or (a == a[0]).all() or (b == b[0]).all():
        return None
    da = a - a.mean()
    db = b - b.mean()
    rho = (da * db).sum() / np.sqrt((da * da).sum() * (db * db).sum())
    return float(min(1.0, max(-1.0, rho)))


class CorrelationGraph(object):
    """Undirected stock graph; every node carries a weight-1 self-loop."""

    def __init__(self, tickers, edges=(), judge_value=None, window=None):
        self.tickers = [str(t) for t in tickers]
        self.n = len(self.tickers)
        self.judge_value = judge_value
        self.window = list(window) if window is not None else None
        self._weights = {}
        for i, j, w in edges:
            i, j = int(i), int(j)
            if i == j:
                continue
            if not (0 <= i < self.n and 0 <= j < self.n):
                raise GraphError('edge ({}, {}) outside {} nodes'.format(
                    i, j, self.n))
            self._weights[(min(i, j), max(i, j))] = float(w)
        self._neighbors = [[i] for i in range(self.n)]
        for i, j in self._weights:
            self._neighbors[i].append(j)
            self._neighbors[j].append(i)
        for nbrs in self._neighbors:
            nbrs.sort()

    def neighbors(self, i):
        return list(self._neighbors[i])

    def weight(self, i, j):
        if i == j:
            return 1.0
        return self._weights.get((min(i, j), max(i, j)))

    def edges(self):
        return [(i, j, w) for (i, j), w in sorted(self._weights.items())]

    @property
    def cross_edge_count(self):
        return len(self._weights)

    def adjacency(self):
        adj = np.eye(self.n, dtype=bool)
        for i, j in self._weights:
            adj[i, j] = adj[j, i] = True
        return adj

    def permute(self, order):
        """Graph over nodes reordered so new node k is old node order[k]."""
        order = list(order)
        new_of_old = dict((old, new) for new, old in enumerate(order))
        edges = [(new_of_old[i], new_of_old[j], w) for i, j, w in self.edges()]
        return CorrelationGraph([self.tickers[i] for i in order], edges,
                                self.judge_value, self.window)

    def __iter__(self):
        yield 'n', self.n
        yield 'tickers', self.tickers
        yield 'edges', [[i, j, w] for i, j, w in self.edges()]
        yield 'judge_value', self.judge_value
        yield 'window', self.window

    def to_json(self):
        return json.dumps(dict(self), indent=4, sort_keys=True) + '\n'

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
            graph = cls(doc['tickers'], doc['edges'], doc.get('judge_value'),
                        doc.get('window'))
        except (ValueError, KeyError, TypeError) as ex:
            raise GraphError('malformed graph document: {}'.format(ex))
        if graph.n != doc.get('n', graph.n):
            raise GraphError('graph declares n={} but lists {} tickers'.format(
                doc['n'], graph.n))
        return graph


def build_graph(panel, as_of, lookback_days=252, judge_value=0.8,
                mode='signed'):
    if mode not in CORR_MODES:
        raise ConfigError('corr_mode must be one of {}, not {!r}'.format(
            ', '.join(CORR_MODES), mode))
    end = panel.date_index(as_of)
    start = end - lookback_days + 1
    if start < 0:
        logger.warning('only {} days of history before {}, wanted {}',
                       end + 1, panel.dates[end], lookback_days)
        start = 0
    window = slice(start, end + 1)
    returns = panel.returns[:, window]
    valid = panel.return_mask[:, window]

    edges = []
    for i in range(panel.n):
        for j in range(i + 1, panel.n):
            rho = pearson(returns[i], returns[j], valid[i] & valid[j])
            if rho is None:
                continue
            score = abs(rho) if mode == 'absolute' else rho
            if score >= judge_value:
                edges.append((i, j, rho))
    graph = CorrelationGraph(
        panel.tickers, edges, judge_value,
        [str(panel.dates[start]), str(panel.dates[end])])
    if not graph.cross_edge_count:
        logger.warning('correlation graph at judge_value={} has no cross edges',
                       judge_value)
    else:
        logger.info('correlation graph: {} nodes, {} edges', graph.n,
                    graph.cross_edge_count)
    return graph
