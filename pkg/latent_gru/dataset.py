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
import pandas as pd
from loguru import logger

from latent_gru.numkernel import ZERO_TOL, ConfigError, DataError

COLUMNS = ('date', 'ticker', 'open', 'high', 'low', 'close', 'volume',
           'turnover')
FEATURES = ('open', 'close', 'high', 'low', 'volume', 'turnover')
PRICES = ('open', 'high', 'low', 'close')
SPLITS = ('train', 'valid', 'test')

DEFAULT_SCHEMA = dict((name, name) for name in COLUMNS)


class LoadReport(object):
    def __init__(self, rows_read=0, rows_rejected=0, tickers=0,
                 date_range=None):
        self.rows_read = rows_read
        self.rows_rejected = rows_rejected
        self.tickers = tickers
        self.date_range = date_range

    def __iter__(self):
        yield 'rows_read', self.rows_read
        yield 'rows_rejected', self.rows_rejected
        yield 'tickers', self.tickers
        yield 'date_range', self.date_range


class Panel(object):
    """Aligned stock x day x feature arrays.

    features holds the six inputs in FEATURES order; raw_open and raw_close keep
    the unnormalized prices (NaN where nothing was observed or carried). filled
    marks entries either observed or forward-filled; validity_mask marks only
    observed ones.
    """

    FIELDS = ('tickers', 'dates', 'features', 'raw_open', 'raw_close',
              'returns', 'return_mask', 'validity_mask', 'filled',
              'split_tags')

    def __init__(self, tickers, dates, features, raw_open, raw_close,
                 validity_mask, filled, returns=None, return_mask=None,
                 split_tags=None, report=None):
        self.tickers = np.asarray(tickers, dtype=str)
        self.dates = np.asarray(dates, dtype='datetime64[D]')
        n, t = len(self.tickers), len(self.dates)
        if t > 1 and not (np.diff(self.dates) > np.timedelta64(0, 'D')).all():
            raise DataError('panel dates must be strictly increasing')
        self.features = np.asarray(features, dtype=np.float64)
        self.raw_open = np.asarray(raw_open, dtype=np.float64)
        self.raw_close = np.asarray(raw_close, dtype=np.float64)
        self.validity_mask = np.asarray(validity_mask, dtype=bool)
        self.filled = np.asarray(filled, dtype=bool)
        if returns is None:
            returns = np.zeros((n, t))
            return_mask = np.zeros((n, t), dtype=bool)
        self.returns = np.asarray(returns, dtype=np.float64)
        self.return_mask = np.asarray(return_mask, dtype=bool)
        if split_tags is None:
            split_tags = np.full(t, '', dtype='<U5')
        self.split_tags = np.asarray(split_tags, dtype='<U5')
        self.report = report if report is not None else LoadReport()
        if self.features.shape != (n, t, len(FEATURES)):
            raise DataError('features shape {} does not match {} stocks x {} '
                            'days'.format(self.features.shape, n, t))

    @property
    def n(self):
        return len(self.tickers)

    @property
    def t(self):
        return len(self.dates)

    def replace(self, **changes):
        fields = dict((name, getattr(self, name)) for name in self.FIELDS)
        fields['report'] = self.report
        fields.update(changes)
        return Panel(**fields)

    def select_stocks(self, keep):
        keep = np.asarray(keep, dtype=bool)
        changes = dict(tickers=self.tickers[keep])
        for name in self.FIELDS[2:-1]:
            changes[name] = getattr(self, name)[keep]
        return self.replace(**changes)

    def select_dates(self, keep):
        keep = np.asarray(keep, dtype=bool)
        changes = dict(dates=self.dates[keep], split_tags=self.split_tags[keep])
        for name in self.FIELDS[2:-1]:
            changes[name] = getattr(self, name)[:, keep]
        return self.replace(**changes)

    def date_index(self, date):
        date = np.datetime64(pd.Timestamp(date).date(), 'D')
        idx = int(np.searchsorted(self.dates, date))
        if idx >= self.t or self.dates[idx] != date:
            raise DataError('date {} is not in the panel'.format(date))
        return idx

    def date_strings(self):
        return [str(d) for d in self.dates]


class SampleBatch(object):
    def __init__(self, day_indices, dates, inputs, labels, mask):
        self.day_indices = np.asarray(day_indices, dtype=np.int64)
        self.dates = np.asarray(dates, dtype='datetime64[D]')
        self.inputs = inputs
        self.labels = labels
        self.mask = mask

    def __len__(self):
        return len(self.day_indices)

    def take(self, indices):
        return SampleBatch(self.day_indices[indices], self.dates[indices],
                           self.inputs[indices], self.labels[indices],
                           self.mask[indices])


def _bounded_ffill(values, observed, limit):
    """Carry observed values over gaps of at most limit days.

    Longer gaps stay unfilled in full, as do days before the first observation.
    """
    out = values.copy()
    filled = observed.copy()
    n, t = observed.shape
    for i in range(n):
        last = -1
        for day in range(t + 1):
            if day < t and not observed[i, day]:
                continue
            gap = day - last - 1
            if last >= 0 and 0 < gap <= limit:
                out[i, last + 1:day] = values[i, last]
                filled[i, last + 1:day] = True
            last = day
    return out, filled


def panel_from_frame(frame, max_fill_days=5, report=None):
    tickers = np.array(sorted(frame['ticker'].unique()), dtype=str)
    dates = np.array(sorted(frame['date'].unique()), dtype='datetime64[D]')
    index = pd.Index(tickers)
    columns = pd.DatetimeIndex(dates.astype('datetime64[ns]'))
    wide = {}
    for name in FEATURES:
        table = frame.pivot(index='ticker', columns='date', values=name)
        table.columns = pd.DatetimeIndex(table.columns)
        wide[name] = table.reindex(index=index, columns=columns).to_numpy(
            dtype=np.float64)
    observed = ~np.isnan(wide['close'])
    stacked = np.stack([wide[name] for name in FEATURES], axis=-1)
    stacked = np.where(observed[..., None], stacked, 0.0)
    features, filled = _bounded_ffill(stacked, observed, max_fill_days)
    raw_open = np.where(filled, features[..., FEATURES.index('open')], np.nan)
    raw_close = np.where(filled, features[..., FEATURES.index('close')], np.nan)
    return Panel(tickers, dates, features, raw_open, raw_close, observed,
                 filled, report=report)


def load_panel(path, schema=None, max_fill_days=5):
    schema = dict(DEFAULT_SCHEMA, **(schema or {}))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False,
                            encoding='utf-8')
    except (IOError, OSError) as ex:
        raise DataError('cannot read {}: {}'.format(path, ex))
    missing = [schema[name] for name in COLUMNS if schema[name] not in frame]
    if missing:
        raise DataError('missing column(s) in {}: {}'.format(
            path, ', '.join(missing)))
    frame = frame[[schema[name] for name in COLUMNS]]
    frame.columns = list(COLUMNS)
    rows_read = len(frame)

    dates = pd.to_datetime(frame['date'], format='%Y-%m-%d', errors='coerce')
    tickers = frame['ticker'].str.strip()
    numbers = dict((name, pd.to_numeric(frame[name], errors='coerce'))
                   for name in COLUMNS[2:])
    ok = dates.notna() & (tickers != '')
    for name in COLUMNS[2:]:
        ok &= numbers[name].notna() & np.isfinite(numbers[name])
        if name in PRICES:
            ok &= numbers[name] > 0
        else:
            ok &= numbers[name] >= 0
    rows_rejected = int((~ok).sum())
    if rows_rejected:
        logger.warning('{}: rejected {} of {} rows', path, rows_rejected,
                       rows_read)

    clean = pd.DataFrame(dict(date=dates[ok], ticker=tickers[ok]))
    for name in COLUMNS[2:]:
        clean[name] = numbers[name][ok].astype(np.float64)
    if clean.empty:
        raise DataError('{}: no valid rows'.format(path))

    dup = clean.duplicated(['ticker', 'date'], keep=False)
    if dup.any():
        pairs = sorted(set(
            (t, d.strftime('%Y-%m-%d'))
            for t, d in zip(clean['ticker'][dup], clean['date'][dup])))
        raise DataError('duplicate (ticker, date) rows: {}'.format(', '.join(
            '{}@{}'.format(t, d) for t, d in pairs)))

    report = LoadReport(
        rows_read=rows_read,
        rows_rejected=rows_rejected,
        tickers=int(clean['ticker'].nunique()),
        date_range=[
            clean['date'].min().strftime('%Y-%m-%d'),
            clean['date'].max().strftime('%Y-%m-%d'),
        ],
    )
    logger.info('loaded {} rows for {} tickers from {}', rows_read - rows_rejected,
                report.tickers, path)
    return panel_from_frame(clean, max_fill_days=max_fill_days, report=report)


def compute_daily_returns(panel):
    """Simple close-to-close returns.

    A return is defined where the stock trades on day t and a close for day t-1
    exists, observed or carried forward.
    """
    close = panel.raw_close
    returns = np.zeros_like(close)
    mask = np.zeros(close.shape, dtype=bool)
    mask[:, 1:] = panel.validity_mask[:, 1:] & panel.filled[:, :-1]
    prev = np.where(mask[:, 1:], close[:, :-1], 1.0)
    cur = np.where(mask[:, 1:], close[:, 1:], 1.0)
    returns[:, 1:] = np.where(mask[:, 1:], (cur - prev) / prev, 0.0)
    return panel.replace(returns=returns, return_mask=mask)


def _parse_range(name, bounds):
    try:
        start, end = bounds
        start = np.datetime64(pd.Timestamp(start).date(), 'D')
        end = np.datetime64(pd.Timestamp(end).date(), 'D')
    except (TypeError, ValueError):
        raise ConfigError('split {!r} needs a [start, end] date pair, got '
                          '{!r}'.format(name, bounds))
    if start > end:
        raise ConfigError('split {!r} starts after it ends: {} > {}'.format(
            name, start, end))
    return start, end


def split_by_date(panel, boundaries):
    unknown = set(boundaries) - set(SPLITS)
    if unknown:
        raise ConfigError('unknown split name(s): {}'.format(', '.join(
            sorted(unknown))))
    if 'train' not in boundaries:
        raise ConfigError('a train split is required')
    ranges = [(name, _parse_range(name, boundaries[name])) for name in SPLITS
              if name in boundaries]
    for (name_a, (_, end_a)), (name_b, (start_b, _)) in zip(ranges, ranges[1:]):
        if start_b <= end_a:
            raise ConfigError('split {!r} overlaps or precedes {!r}'.format(
                name_b, name_a))
    tags = np.full(panel.t, '', dtype='<U5')
    for name, (start, end) in ranges:
        tags[(panel.dates >= start) & (panel.dates <= end)] = name
    keep = tags != ''
    dropped = int((~keep).sum())
    if dropped:
        logger.info('dropping {} dates outside the configured splits', dropped)
    return panel.replace(split_tags=tags).select_dates(keep)


def preprocess(panel, mad_clip=5.0, stats_split='train', min_train_days=20):
    """MAD clipping then z-scoring per stock and feature.

    Every statistic comes from stats_split days where the stock actually
    traded; other days are transformed with those statistics.
    """
    stats_days = panel.split_tags == stats_split
    if not stats_days.any():
        raise ConfigError('no {!r} days to compute statistics from'.format(
            stats_split))
    counts = (panel.validity_mask & stats_days[None, :]).sum(axis=1)
    keep = counts >= min_train_days
    for ticker, count in zip(panel.tickers[~keep], counts[~keep]):
        logger.warning('excluding {}: {} valid {} days, need {}', ticker,
                       int(count), stats_split, min_train_days)
    if not keep.any():
        raise DataError('every stock has fewer than {} valid {} days'.format(
            min_train_days, stats_split))
    panel = panel.select_stocks(keep)

    ref_mask = panel.validity_mask & stats_days[None, :]
    out = np.zeros_like(panel.features)
    for i in range(panel.n):
        sel = ref_mask[i]
        for f in range(len(FEATURES)):
            col = panel.features[i, :, f]
            ref = col[sel]
            med = np.median(ref)
            mad = np.median(np.abs(ref - med))
            col = np.clip(col, med - mad_clip * mad, med + mad_clip * mad)
            ref = col[sel]
            mu = ref.mean()
            sd = ref.std()
            if sd > ZERO_TOL * max(1.0, abs(mu)):
                out[i, :, f] = (col - mu) / sd
    out[~panel.filled] = 0.0
    return panel.replace(features=out)


def build_windows(panel, his_t, label_t, split=None):
    """Anchor-day samples whose window and label horizon share one split."""
    if his_t < 1 or label_t < 1:
        raise ConfigError('his_t and label_t must be >= 1')
    n, t = panel.n, panel.t
    anchors = []
    for day in range(his_t - 1, t - label_t):
        tags = panel.split_tags[day - his_t + 1:day + label_t + 1]
        if (tags != tags[0]).any():
            continue
        if split is not None and tags[0] != split:
            continue
        anchors.append(day)

    inputs, labels, masks, kept = [], [], [], []
    close = panel.raw_close
    for day in anchors:
        window = slice(day - his_t + 1, day + 1)
        mask = (panel.validity_mask[:, day] &
                panel.validity_mask[:, day + label_t] &
                panel.filled[:, window].all(axis=1))
        if not mask.any():
            continue
        now = np.where(mask, close[:, day], 1.0)
        later = np.where(mask, close[:, day + label_t], 1.0)
        labels.append(np.where(mask, (later - now) / now, 0.0))
        inputs.append(panel.features[:, window, :])
        masks.append(mask)
        kept.append(day)

    if not kept:
        logger.warning('no eligible anchor days for his_t={} label_t={} split={}',
                       his_t, label_t, split)
        return SampleBatch(
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype='datetime64[D]'),
            np.zeros((0, n, his_t, len(FEATURES))),
            np.zeros((0, n)),
            np.zeros((0, n), dtype=bool),
        )
    kept = np.asarray(kept)
    return SampleBatch(kept, panel.dates[kept], np.stack(inputs),
                       np.stack(labels), np.stack(masks))
