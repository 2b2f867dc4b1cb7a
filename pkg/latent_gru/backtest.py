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

"""Daily top-k equal-weight strategy and its performance metrics.

MDD is stored positive; tables render it negative. Ratios with a zero
denominator are None.
"""

import numpy as np
import pandas as pd
from loguru import logger

from latent_gru.numkernel import ZERO_TOL, ConfigError, NumericalError

TRADING_DAYS = 252
EXECUTIONS = ('close', 'open')
IR_BENCHMARKS = ('universe', 'risk_free')


class EquityCurve(object):
    """Portfolio path from initial_value; values[t] = values[t-1] * (1 + returns[t])."""

    def __init__(self, dates, returns, initial_value=1.0):
        self.dates = [str(d) for d in dates]
        self.returns = np.asarray(returns, dtype=np.float64)
        if len(self.dates) != len(self.returns):
            raise ConfigError('{} dates for {} returns'.format(
                len(self.dates), len(self.returns)))
        self.initial_value = float(initial_value)
        growth = np.concatenate([[self.initial_value], 1 + self.returns])
        self.values = np.multiply.accumulate(growth)[1:]

    @classmethod
    def from_values(cls, values, dates=None):
        """Curve through a price path whose first entry is the starting value."""
        values = np.asarray(values, dtype=np.float64)
        if len(values) < 1 or (values <= 0).any():
            raise ConfigError('a value path needs positive entries')
        returns = values[1:] / values[:-1] - 1
        if dates is None:
            dates = [str(i) for i in range(1, len(values))]
        curve = cls(dates, returns, values[0])
        curve.values = values[1:].copy()
        return curve

    def __len__(self):
        return len(self.returns)

    def path(self):
        return np.concatenate([[self.initial_value], self.values])

    def rows(self):
        return [
            dict(date=d, value=float(v), ret=float(r))
            for d, v, r in zip(self.dates, self.values, self.returns)
        ]

    def frame(self):
        return pd.DataFrame(self.rows(), columns=['date', 'value', 'ret'])


def metric_arr(curve):
    if len(curve) < 1:
        raise ConfigError('ARR needs at least one return')
    r = curve.returns
    if (r <= -1).any():
        raise NumericalError('bankrupt path: return {} on {}'.format(
            r[r <= -1][0], curve.dates[int(np.argmax(r <= -1))]))
    growth = np.prod(1 + r)
    return float(growth**(TRADING_DAYS / len(r)) - 1)


def metric_avol(curve):
    if len(curve) < 2:
        raise ConfigError('AVoL needs at least two returns')
    return float(np.std(curve.returns, ddof=1) * np.sqrt(TRADING_DAYS))


def metric_mdd(curve):
    path = curve.path()
    peak = np.maximum.accumulate(path)
    return float(((peak - path) / peak).max())


def _excess(curve, benchmark, risk_free, ir_benchmark):
    if ir_benchmark == 'risk_free':
        return curve.returns - risk_free / TRADING_DAYS
    if benchmark is None:
        raise ConfigError('IR against the universe needs a benchmark curve')
    if benchmark.dates != curve.dates:
        raise ConfigError('benchmark dates do not match the portfolio curve')
    return curve.returns - benchmark.returns


def metric_ratios(arr, avol, mdd, curve, benchmark, risk_free=0.0,
                  ir_benchmark='universe', annualize_ir=False):
    asr = arr / avol if avol is not None and avol > ZERO_TOL else None
    cr = arr / abs(mdd) if mdd is not None and abs(mdd) > ZERO_TOL else None
    ir = None
    excess = _excess(curve, benchmark, risk_free, ir_benchmark)
    if len(excess) >= 2:
        sd = np.std(excess, ddof=1)
        if sd > ZERO_TOL:
            ir = float(excess.mean() / sd)
            if annualize_ir:
                ir *= np.sqrt(TRADING_DAYS)
    return asr, cr, ir


def metric_errors(predictions, labels):
    """MSE and MAE over aligned pairs.

    pandas Series are aligned on their index first; plain sequences must
    already correspond.
    """
    if isinstance(predictions, pd.Series) and isinstance(labels, pd.Series):
        common = predictions.index.intersection(labels.index)
        predictions = predictions.loc[common].to_numpy(dtype=np.float64)
        labels = labels.loc[common].to_numpy(dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise ConfigError('{} predictions for {} labels'.format(
            predictions.shape, labels.shape))
    if not predictions.size:
        raise ConfigError('no aligned prediction/label pairs')
    diff = predictions - labels
    return float((diff * diff).mean()), float(np.abs(diff).mean())


def _realized_returns(panel, day, execution):
    """Per-stock return of a position formed from day's signal, or None if unavailable."""
    if execution == 'close':
        if day + 1 >= panel.t:
            return None, None
        return panel.returns[:, day + 1], panel.return_mask[:, day + 1]
    if day + 2 >= panel.t:
        return None, None
    opens = panel.raw_open
    ok = (panel.validity_mask[:, day + 1] & panel.validity_mask[:, day + 2])
    now = np.where(ok, opens[:, day + 1], 1.0)
    later = np.where(ok, opens[:, day + 2], 1.0)
    return np.where(ok, later / now - 1, 0.0), ok


def simulate_topk(scores, panel, k, execution='close'):
    """Top-k portfolio and the equal-weighted universe benchmark.

    scores is a frame with date, ticker and score columns. Ties go to the
    earlier ticker. Returns (curve, benchmark).
    """
    if k < 1:
        raise ConfigError('k must be >= 1, got {}'.format(k))
    if execution not in EXECUTIONS:
        raise ConfigError('execution must be one of {}'.format(', '.join(
            EXECUTIONS)))
    position = dict((str(t), i) for i, t in enumerate(panel.tickers))
    # rows are dated by the day the return is realized
    lead = 2 if execution == 'open' else 1
    dates, port, bench = [], [], []
    for date, group in scores.groupby('date', sort=True):
        day = panel.date_index(date)
        realized, ok = _realized_returns(panel, day, execution)
        if realized is None:
            logger.warning('{}: no next trading day to realize scores', date)
            continue
        idx = np.array([position[str(t)] for t in group['ticker']])
        score = group['score'].to_numpy(dtype=np.float64)
        usable = ok[idx]
        if not usable.all():
            logger.warning('{}: {} scored stocks have no realizable return',
                           date, int((~usable).sum()))
        idx, score = idx[usable], score[usable]
        if not len(idx):
            logger.warning('{}: nothing to hold', date)
            continue
        if len(idx) < k:
            logger.warning('{}: only {} scorable stocks for k={}', date,
                           len(idx), k)
        order = np.lexsort((idx, -score))
        held = np.sort(idx[order[:k]])
        universe = np.sort(idx)
        dates.append(str(panel.dates[day + lead]))
        port.append(realized[held].mean())
        bench.append(realized[universe].mean())
    return EquityCurve(dates, port), EquityCurve(dates, bench)


def curve_metrics(curve, benchmark=None, risk_free=0.0,
                  ir_benchmark='universe', annualize_ir=False):
    arr = metric_arr(curve)
    avol = metric_avol(curve)
    mdd = metric_mdd(curve)
    asr, cr, ir = metric_ratios(arr, avol, mdd, curve, benchmark, risk_free,
                                ir_benchmark, annualize_ir)
    return dict(arr=arr, avol=avol, mdd=mdd, asr=asr, cr=cr, ir=ir)


class BacktestReport(object):
    METRICS = ('arr', 'avol', 'mdd', 'asr', 'cr', 'ir', 'mse', 'mae')

    def __init__(self, k, curve, benchmark_curve, metrics, benchmark_metrics,
                 meta=None):
        self.k = k
        self.curve = curve
        self.benchmark_curve = benchmark_curve
        for name in self.METRICS:
            setattr(self, name, metrics.get(name))
        self.benchmark_metrics = benchmark_metrics
        self.meta = meta or {}
        self.recheck()

    def recheck(self):
        if self.asr is not None and abs(self.asr * self.avol - self.arr) > 1e-9:
            raise NumericalError('ASR is inconsistent with ARR/AVoL')
        if self.cr is not None and abs(self.cr * self.mdd - self.arr) > 1e-9:
            raise NumericalError('CR is inconsistent with ARR/MDD')

    def __iter__(self):
        yield 'k', self.k
        for name in self.METRICS:
            yield name, getattr(self, name)
        yield 'curve', self.curve.rows()
        yield 'benchmark', self.benchmark_curve.rows()
        yield 'benchmark_metrics', self.benchmark_metrics
        yield 'meta', self.meta


def run_backtest(scores, panel, k, execution='close', risk_free=0.0,
                 ir_benchmark='universe', annualize_ir=False, meta=None):
    if ir_benchmark not in IR_BENCHMARKS:
        raise ConfigError('ir_benchmark must be one of {}'.format(', '.join(
            IR_BENCHMARKS)))
    curve, benchmark = simulate_topk(scores, panel, k, execution)
    if len(curve) < 2:
        raise ConfigError('backtest needs at least two trading days, got {}'
                          .format(len(curve)))
    metrics = curve_metrics(curve, benchmark, risk_free, ir_benchmark,
                            annualize_ir)
    bench = curve_metrics(benchmark, None, risk_free, 'risk_free', annualize_ir)
    del bench['ir']
    if 'label' in scores:
        pairs = scores.dropna(subset=['label'])
        metrics['mse'], metrics['mae'] = metric_errors(pairs['score'],
                                                       pairs['label'])
    return BacktestReport(k, curve, benchmark, metrics, bench, meta)
