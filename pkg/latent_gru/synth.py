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


"""Planted-signal market.

Each stock carries a signal s = cluster factor + own component, published
on day t through volume and turnover. The log return of day t + lag is
beta * s_i + gamma * mean(s_j over cluster peers) from day t, plus noise and
a pull of kappa toward the stock's base price. With lag >= label_t every
signal behind a label is already inside the input window, so members of a
cluster co-move strongly and the labels are learnable at desk scale.
"""

import numpy as np
import pandas as pd
from loguru import logger

from latent_gru.numkernel import ConfigError
from latent_gru.relgraph import CorrelationGraph


def _ar1(rng, shape, phi, scale):
    out = np.zeros(shape)
    shock = scale * np.sqrt(1 - phi * phi)
    out[..., 0] = scale * rng.standard_normal(shape[:-1])
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + shock * rng.standard_normal(
            shape[:-1])
    return out


def make_market(n_stocks=20, n_days=600, seed=0, beta=0.08, gamma=0.04,
                noise=0.005, n_clusters=4, start='2018-01-02', phi=0.0,
                own_scale=0.4, lag=5, kappa=0.05):
    """Returns (bars frame in the ingest CSV layout, ground-truth graph)."""
    if n_stocks < 2 or n_days < 2:
        raise ConfigError('synthetic market needs >= 2 stocks and >= 2 days')
    if not 1 <= n_clusters <= n_stocks:
        raise ConfigError('n_clusters must lie in [1, n_stocks]')
    if lag < 1 or not 0 <= kappa < 1:
        raise ConfigError('lag must be >= 1 and kappa in [0, 1)')
    rng = np.random.default_rng(seed)
    cluster = np.arange(n_stocks) % n_clusters
    peers = (cluster[:, None] == cluster[None, :]) & ~np.eye(n_stocks,
                                                             dtype=bool)

    factor = _ar1(rng, (n_clusters, n_days), phi, 1.0)
    own = _ar1(rng, (n_stocks, n_days), phi, own_scale)
    signal = factor[cluster] + own
    counts = np.maximum(peers.sum(axis=1, keepdims=True), 1)
    peer_mean = np.where(peers.any(axis=1, keepdims=True),
                         peers @ signal / counts, 0.0)
    drive = beta * signal + gamma * peer_mean

    shocks = noise * rng.standard_normal((n_stocks, n_days))
    level = np.zeros((n_stocks, n_days))
    for t in range(1, n_days):
        push = drive[:, t - lag] if t >= lag else 0.0
        level[:, t] = (1 - kappa) * level[:, t - 1] + push + shocks[:, t]
    base = 10 + 40 * rng.random(n_stocks)
    close = base[:, None] * np.exp(level)
    prev = np.concatenate([base[:, None], close[:, :-1]], axis=1)
    opens = prev * (1 + 0.002 * rng.standard_normal((n_stocks, n_days)))
    wick = np.abs(0.003 * rng.standard_normal((2, n_stocks, n_days)))
    high = np.maximum(opens, close) * (1 + wick[0])
    low = np.minimum(opens, close) * (1 - wick[1])
    volume = 1e6 * (3 + np.clip(signal, -2.5, 2.5))
    turnover = volume * close

    tickers = ['S%03d' % i for i in range(n_stocks)]
    dates = pd.bdate_range(start, periods=n_days).strftime('%Y-%m-%d')
    frame = pd.DataFrame(dict(
        date=np.tile(dates, n_stocks),
        ticker=np.repeat(tickers, n_days),
        open=opens.ravel(),
        high=high.ravel(),
        low=low.ravel(),
        close=close.ravel(),
        volume=volume.ravel(),
        turnover=turnover.ravel(),
    ))
    edges = [(i, j, 1.0) for i in range(n_stocks)
             for j in range(i + 1, n_stocks) if peers[i, j]]
    truth = CorrelationGraph(tickers, edges, None, [dates[0], dates[-1]])
    logger.info('synthetic market: {} stocks x {} days, {} clusters',
                n_stocks, n_days, n_clusters)
    return frame, truth
