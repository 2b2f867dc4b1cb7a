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

import os

import numpy as np
import pandas as pd
import pytest

from latent_gru.dataset import (compute_daily_returns, panel_from_frame,
                                preprocess, split_by_date)
from latent_gru.model import ModelConfig
from latent_gru.synth import make_market

TINY_MODEL = dict(
    his_t=3,
    label_t=2,
    gru_sizes=[4, 3],
    temporal_dim=4,
    gat_sizes=[4, 2],
    gat_heads=2,
    head_sizes=[4, 1],
    head_heads=1,
    d_r=3,
    d_i=4,
    cross_heads=2,
    batch_size=8,
    epochs=2,
    lookback_days=60,
    precision='float64',
)


class Context(object):
    def __init__(self, tmpdir):
        self.root_dir = str(tmpdir)
        self.out_dir = os.path.join(self.root_dir, 'run')

    def path(self, *parts):
        return os.path.join(self.root_dir, *parts)

    def out(self, *parts):
        return os.path.join(self.out_dir, *parts)

    def write(self, name, text):
        path = self.path(name)
        with open(path, 'w', encoding='utf-8') as file_:
            file_.write(text)
        return path


@pytest.fixture
def ctx(tmpdir):
    # tmpdir is magical: https://docs.pytest.org/en/latest/tmpdir.html
    return Context(tmpdir)


def bars(closes, start='2020-01-01', volume=1000.0):
    """Bars frame from {ticker: [close, ...]} with open/high/low around close."""
    dates = pd.bdate_range(start, periods=max(len(c) for c in closes.values()))
    rows = []
    for ticker, series in sorted(closes.items()):
        for date, close in zip(dates, series):
            if close is None:
                continue
            rows.append(dict(
                date=date.strftime('%Y-%m-%d'),
                ticker=ticker,
                open=close,
                high=close * 1.01,
                low=close * 0.99,
                close=close,
                volume=volume,
                turnover=volume * close,
            ))
    return pd.DataFrame(rows, columns=['date', 'ticker', 'open', 'high', 'low',
                                       'close', 'volume', 'turnover'])


def frame_panel(frame, max_fill_days=5):
    clean = frame.copy()
    clean['date'] = pd.to_datetime(clean['date'])
    return panel_from_frame(clean, max_fill_days=max_fill_days)


def thirds(dates):
    dates = [str(d) for d in dates]
    cut1, cut2 = int(len(dates) * 0.6), int(len(dates) * 0.8)
    return dict(train=[dates[0], dates[cut1 - 1]],
                valid=[dates[cut1], dates[cut2 - 1]],
                test=[dates[cut2], dates[-1]])


def prepared_panel(frame, min_train_days=20):
    panel = frame_panel(frame)
    panel = split_by_date(panel, thirds(panel.dates))
    panel = compute_daily_returns(panel)
    return preprocess(panel, 5.0, 'train', min_train_days)


def tiny_config(**overrides):
    values = dict(TINY_MODEL)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture(scope='session')
def small_market():
    return make_market(n_stocks=6, n_days=120, seed=3, n_clusters=2)


@pytest.fixture(scope='session')
def small_panel(small_market):
    frame, _ = small_market
    return prepared_panel(frame)


def random_walk(rng, n, t, start=50.0, scale=0.01):
    steps = 1 + scale * rng.standard_normal((n, t))
    return start * np.cumprod(steps, axis=1)
