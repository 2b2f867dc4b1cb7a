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

import collections
import copy

import numpy as np
import pandas as pd
from loguru import logger

from latent_gru import agru, gat, latent, storage
from latent_gru.dataset import FEATURES, build_windows
from latent_gru.numkernel import (Adam, ConfigError, DataError, Dense,
                                  GraphError, KernelError, NumericalError,
                                  PRECISIONS, resolve_dtype)

# Row labels of the module ablation: I temporal attention-GRU branch,
# II cross-sectional GAT branch, III latent-state cross attention,
# IV prediction GAT head.
ABLATIONS = collections.OrderedDict([
    ('I+II', (True, True, False, False)),
    ('I+III', (True, False, True, False)),
    ('II+III', (False, True, True, False)),
    ('I+II+III', (True, True, True, False)),
    ('I+II+IV', (True, True, False, True)),
    ('I+III+IV', (True, False, True, True)),
    ('II+III+IV', (False, True, True, True)),
    ('I+II+III+IV', (True, True, True, True)),
])

TOGGLES = ('use_agru_attention', 'use_gat_encoder', 'use_latent',
           'use_head_gat')

# Relative loss drop that resets the early-stopping count.
MIN_GAIN = 1e-3


def _positive_int(name, value):
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError('{} must be a positive integer, got {!r}'.format(
            name, value))


def _sizes(name, value):
    if not isinstance(value, (list, tuple)) or not value:
        raise ConfigError('{} must be a non-empty list, got {!r}'.format(
            name, value))
    for item in value:
        _positive_int(name, item)
    return list(value)


def normalize_ablation(label):
    key = str(label).replace(' ', '').upper()
    if key in ('FULL', 'ALL'):
        key = 'I+II+III+IV'
    if key not in ABLATIONS:
        raise ConfigError('unknown ablation {!r}; choose from {}'.format(
            label, ', '.join(ABLATIONS)))
    return key


class ModelConfig(object):
    DEFAULTS = collections.OrderedDict([
        ('his_t', 10),
        ('label_t', 5),
        ('judge_value', 0.8),
        ('lookback_days', 252),
        ('gru_sizes', [32, 10]),
        ('temporal_dim', 32),
        ('gat_sizes', [32, 4]),
        ('gat_heads', 4),
        ('head_sizes', [32, 1]),
        ('head_heads', 1),
        ('d_r', 32),
        ('d_i', 16),
        ('cross_heads', 4),
        ('lr', 0.0002),
        ('beta1', 0.9),
        ('beta2', 0.999),
        ('eps', 1e-8),
        ('batch_size', 32),
        ('epochs', 200),
        ('patience', 20),
        ('seed', 1),
        ('precision', 'float32'),
        ('gru_mode', 'attention'),
        ('attn_scope', 'window'),
        ('slope', 0.2),
        ('ablation', None),
        ('use_agru_attention', True),
        ('use_gat_encoder', True),
        ('use_latent', True),
        ('use_head_gat', True),
    ])

    def __init__(self, **kwargs):
        kwargs.pop('version', None)
        unknown = sorted(set(kwargs) - set(self.DEFAULTS))
        if unknown:
            raise ConfigError('unknown config key(s): {}'.format(
                ', '.join(unknown)))
        for key, default in self.DEFAULTS.items():
            setattr(self, key, copy.deepcopy(kwargs.get(key, default)))
        if self.ablation is not None:
            self.ablation = normalize_ablation(self.ablation)
            for key, value in zip(TOGGLES, ABLATIONS[self.ablation]):
                setattr(self, key, value)
        self.validate()

    def validate(self):
        for key in ('his_t', 'label_t', 'lookback_days', 'temporal_dim',
                    'gat_heads', 'head_heads', 'd_r', 'd_i', 'cross_heads',
                    'batch_size'):
            _positive_int(key, getattr(self, key))
        if isinstance(self.epochs, bool) or not isinstance(
                self.epochs, int) or self.epochs < 0:
            raise ConfigError('epochs must be a non-negative integer')
        if isinstance(self.patience, bool) or not isinstance(
                self.patience, int) or self.patience < 0:
            raise ConfigError('patience must be a non-negative integer')
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError('seed must be an integer, got {!r}'.format(
                self.seed))
        self.gru_sizes = _sizes('gru_sizes', self.gru_sizes)
        self.gat_sizes = _sizes('gat_sizes', self.gat_sizes)
        self.head_sizes = _sizes('head_sizes', self.head_sizes)
        if self.head_sizes[-1] != 1:
            raise ConfigError('the last head layer must have width 1')
        if not self.lr > 0:
            raise ConfigError('lr must be positive, got {!r}'.format(self.lr))
        for key in ('beta1', 'beta2'):
            if not 0 < getattr(self, key) < 1:
                raise ConfigError('{} must lie in (0, 1)'.format(key))
        if self.precision not in PRECISIONS:
            raise ConfigError('precision must be one of {}'.format(', '.join(
                sorted(PRECISIONS))))
        if self.gru_mode not in agru.GRU_MODES:
            raise ConfigError('gru_mode must be one of {}'.format(', '.join(
                agru.GRU_MODES)))
        if self.attn_scope not in agru.ATTN_SCOPES:
            raise ConfigError('attn_scope must be one of {}'.format(', '.join(
                agru.ATTN_SCOPES)))
        for key in TOGGLES:
            if not isinstance(getattr(self, key), bool):
                raise ConfigError('{} must be true or false'.format(key))
        if not (self.use_agru_attention or self.use_gat_encoder):
            raise ConfigError('at least one of use_agru_attention and '
                              'use_gat_encoder must be enabled')
        for size in self.gat_sizes[:-1]:
            if size % self.gat_heads:
                raise ConfigError('gat_heads={} does not divide layer width {}'
                                  .format(self.gat_heads, size))
        for size in self.head_sizes[:-1]:
            if size % self.head_heads:
                raise ConfigError('head_heads={} does not divide layer width {}'
                                  .format(self.head_heads, size))
        if self.use_latent:
            widths = []
            if self.use_agru_attention:
                widths.append(self.temporal_dim)
            if self.use_gat_encoder:
                widths.append(self.gat_sizes[-1])
            for width in widths:
                if width % self.cross_heads:
                    raise ConfigError(
                        'cross_heads={} does not divide stream width {}'.format(
                            self.cross_heads, width))

    @property
    def label(self):
        flags = [getattr(self, key) for key in TOGGLES]
        return '+'.join(n for n, on in zip(('I', 'II', 'III', 'IV'), flags)
                        if on)

    def replace(self, **changes):
        values = dict(self)
        values.update(changes)
        if any(key in changes for key in TOGGLES) and 'ablation' not in changes:
            values['ablation'] = None
        return type(self)(**values)

    def __iter__(self):
        yield 'version', 1
        for key in self.DEFAULTS:
            yield key, getattr(self, key)


class EpochLog(object):
    def __init__(self, epoch, train_loss, valid_loss):
        self.epoch = epoch
        self.train_loss = train_loss
        self.valid_loss = valid_loss

    def __iter__(self):
        yield 'epoch', self.epoch
        yield 'train_loss', self.train_loss
        yield 'valid_loss', self.valid_loss


class ForwardTrace(object):
    """Everything one forward pass leaves behind for backward."""

    def __init__(self, shape, adjacency):
        self.shape = shape
        self.adjacency = adjacency
        self.streams = collections.OrderedDict()
        self.encoder = None
        self.encoder_top = None
        self.gat_trace = None
        self.cross = {}
        self.Z = None
        self.head_trace = None


class LatentGruNet(object):
    def __init__(self, config, input_dim=len(FEATURES)):
        self.config = config
        self.input_dim = input_dim
        self.dtype = dtype = resolve_dtype(config.precision)
        rng = np.random.default_rng(config.seed)
        self.agru = self.projection = self.gat = None
        self.bank1 = self.cross1 = self.bank2 = self.cross2 = None
        self.head = self.readout = None

        d_z = 0
        if config.use_agru_attention:
            self.agru = agru.build_stack(input_dim, config.gru_sizes, rng,
                                         config.gru_mode, config.attn_scope,
                                         dtype)
            self.projection = Dense('temporal_proj', config.gru_sizes[-1],
                                    config.temporal_dim, rng, dtype)
            d_z += config.temporal_dim
        if config.use_gat_encoder:
            self.gat = gat.build_stack(input_dim, config.gat_sizes, rng,
                                       heads=config.gat_heads,
                                       final_activation='relu', dtype=dtype,
                                       prefix='gat', slope=config.slope)
            d_z += config.gat_sizes[-1]
        if config.use_latent:
            if config.d_i != config.temporal_dim:
                logger.warning('d_i={} overridden: latent banks take the width '
                               'of their paired stream', config.d_i)
            if self.agru is not None:
                self.bank1 = latent.init_bank(config.d_r, config.temporal_dim,
                                              int(rng.integers(2**31)), dtype,
                                              'latent.R1')
                self.cross1 = latent.CrossAttnParams(config.temporal_dim,
                                                     config.cross_heads, rng,
                                                     dtype, 'cross1')
                d_z += config.temporal_dim
            if self.gat is not None:
                width = config.gat_sizes[-1]
                self.bank2 = latent.init_bank(config.d_r, width,
                                              int(rng.integers(2**31)), dtype,
                                              'latent.R2')
                self.cross2 = latent.CrossAttnParams(width, config.cross_heads,
                                                     rng, dtype, 'cross2')
                d_z += width
        self.d_z = d_z
        if config.use_head_gat:
            self.head = gat.build_stack(d_z, config.head_sizes, rng,
                                        heads=config.head_heads,
                                        final_activation='identity',
                                        dtype=dtype, prefix='head',
                                        slope=config.slope)
        else:
            self.readout = Dense('readout', d_z, 1, rng, dtype)

    def parameters(self):
        params = []
        for layer in self.agru or ():
            params += layer.parameters()
        for part in (self.projection, ):
            if part is not None:
                params += part.parameters()
        for layer in self.gat or ():
            params += layer.parameters()
        for part in (self.bank1, self.cross1, self.bank2, self.cross2):
            if part is not None:
                params += part.parameters()
        for layer in self.head or ():
            params += layer.parameters()
        if self.readout is not None:
            params += self.readout.parameters()
        return params

    def state(self):
        return collections.OrderedDict(
            (p.name, p.value.copy()) for p in self.parameters())

    def load_state(self, state):
        params = self.parameters()
        names = [p.name for p in params]
        if list(state) != names:
            raise ConfigError('checkpoint parameters do not match the model: '
                              'expected {} tensors, got {}'.format(
                                  len(names), len(state)))
        for p in params:
            p.assign(state[p.name])

    def forward(self, inputs, node_mask, adjacency):
        """Scores for (B, N, his_t, d_x) windows, or one (N, his_t, d_x) day."""
        inputs = np.asarray(inputs, dtype=self.dtype)
        node_mask = np.asarray(node_mask, dtype=bool)
        if inputs.ndim == 3:
            inputs, node_mask = inputs[None], node_mask[None]
        B, N, T, D = inputs.shape
        adj = gat.day_adjacency(np.asarray(adjacency, dtype=bool), node_mask)
        trace = ForwardTrace((B, N), adj)

        if self.agru is not None:
            enc = agru.encode(inputs.reshape(B * N, T, D), self.agru)
            trace.encoder = enc
            trace.encoder_top = enc.A1
            trace.streams['A1'] = self.projection.forward(enc.A1)
        if self.gat is not None:
            A2, trace.gat_trace = gat.stack_forward(inputs[:, :, -1, :], adj,
                                                    self.gat)
            trace.streams['A2'] = A2.reshape(B * N, -1)
        if self.cross1 is not None:
            B1, trace.cross['B1'] = latent.cross_attention(
                trace.streams['A1'], self.bank1, self.cross1)
            trace.streams['B1'] = B1
        if self.cross2 is not None:
            B2, trace.cross['B2'] = latent.cross_attention(
                trace.streams['A2'], self.bank2, self.cross2)
            trace.streams['B2'] = B2

        trace.Z = np.concatenate(list(trace.streams.values()),
                                 axis=1).reshape(B, N, -1)
        if self.head is not None:
            out, trace.head_trace = gat.stack_forward(trace.Z, adj, self.head)
        else:
            out = self.readout.forward(trace.Z)
        return out[..., 0], trace

    def backward(self, dpreds, trace):
        B, N = trace.shape
        dout = np.asarray(dpreds, dtype=self.dtype).reshape(B, N, 1)
        if self.head is not None:
            dZ = gat.stack_backward(dout, trace.head_trace, self.head)
        else:
            dZ = self.readout.backward(dout, trace.Z)
        dZ = dZ.reshape(B * N, -1)

        grads = {}
        offset = 0
        for name, stream in trace.streams.items():
            width = stream.shape[1]
            grads[name] = dZ[:, offset:offset + width]
            offset += width
        if self.cross1 is not None:
            grads['A1'] = grads['A1'] + latent.cross_attention_backward(
                grads['B1'], trace.cross['B1'], self.bank1, self.cross1)
        if self.cross2 is not None:
            grads['A2'] = grads['A2'] + latent.cross_attention_backward(
                grads['B2'], trace.cross['B2'], self.bank2, self.cross2)
        if self.gat is not None:
            gat.stack_backward(grads['A2'].reshape(B, N, -1), trace.gat_trace,
                               self.gat)
        if self.agru is not None:
            dtop = self.projection.backward(grads['A1'], trace.encoder_top)
            agru.encode_backward(dtop, trace.encoder, self.agru)


def parameter_census(model):
    return collections.OrderedDict(
        (p.name, p.shape) for p in model.parameters())


def parameter_count(model):
    return int(sum(p.size for p in model.parameters()))


def loss_mse(predictions, labels, mask=None):
    predictions = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if predictions.shape != labels.shape:
        raise KernelError('predictions {} and labels {} differ in shape'.format(
            predictions.shape, labels.shape))
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    count = int(np.sum(mask))
    if not count:
        raise NumericalError('loss over zero unmasked stocks')
    diff = np.where(mask, predictions - labels, 0.0)
    return float((diff * diff).sum() / count)


def batch_loss(predictions, labels, mask):
    """Mean over days of each day's masked MSE, with its gradient."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise NumericalError('day {} of the batch has no unmasked stocks'.format(
            int(np.argmin(counts))))
    diff = np.where(mask, predictions.astype(np.float64) - labels, 0.0)
    per_day = (diff * diff).sum(axis=1) / counts
    B = len(counts)
    return float(per_day.mean()), 2 * diff / (counts[:, None] * B)


def graph_adjacency(graph, panel):
    if list(graph.tickers) != [str(t) for t in panel.tickers]:
        raise GraphError('graph tickers do not match the panel universe')
    return graph.adjacency()


def evaluate(model, samples, adjacency, batch_size):
    total = 0.0
    for start in range(0, len(samples), batch_size):
        chunk = samples.take(np.arange(start, min(start + batch_size,
                                                  len(samples))))
        preds, _ = model.forward(chunk.inputs, chunk.mask, adjacency)
        loss, _ = batch_loss(preds, chunk.labels, chunk.mask)
        total += loss * len(chunk)
    return total / len(samples)


def train(model, panel, graph, config=None, progress=False):
    """Adam over seeded-shuffled day batches, keeping the best-validation snapshot."""
    config = config or model.config
    adjacency = graph_adjacency(graph, panel)
    train_set = build_windows(panel, config.his_t, config.label_t, 'train')
    if not len(train_set):
        raise DataError('no eligible training days')
    valid_set = build_windows(panel, config.his_t, config.label_t, 'valid')
    optimizer = Adam(config.lr, config.beta1, config.beta2, config.eps)
    params = model.parameters()
    rng = np.random.default_rng([config.seed, 1])

    best_score = None
    best_state = model.state()
    stale = 0
    log = []
    bar = storage.make_progress_bar('train', config.epochs) if (
        progress and config.epochs) else None
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for batch_no, start in enumerate(range(0, len(order),
                                               config.batch_size)):
            batch = train_set.take(order[start:start + config.batch_size])
            preds, trace = model.forward(batch.inputs, batch.mask, adjacency)
            loss, dpreds = batch_loss(preds, batch.labels, batch.mask)
            if not np.isfinite(loss):
                raise NumericalError(
                    'non-finite loss in epoch {} batch {} (first day {})'.format(
                        epoch, batch_no, batch.dates[0]))
            model.backward(dpreds, trace)
            optimizer.step(params)
            total += loss * len(batch)
            logger.debug('epoch {} batch {}: loss {:.6g}', epoch, batch_no,
                         loss)
        train_loss = total / len(train_set)
        valid_loss = evaluate(model, valid_set, adjacency,
                              config.batch_size) if len(valid_set) else None
        score = valid_loss if valid_loss is not None else train_loss
        if best_score is None or score < best_score * (1 - MIN_GAIN):
            stale = 0
        else:
            stale += 1
        if best_score is None or score < best_score:
            best_score = score
            best_state = model.state()
        log.append(EpochLog(epoch, train_loss, valid_loss))
        logger.info('epoch {}: train {:.6g} valid {}', epoch, train_loss,
                    'n/a' if valid_loss is None else '{:.6g}'.format(
                        valid_loss))
        if bar is not None:
            bar.update(epoch)
        if config.patience and stale >= config.patience:
            logger.info('no gain for {} epochs, stopping after epoch {}',
                        stale, epoch)
            break
    if bar is not None:
        bar.finish()
    model.load_state(best_state)
    return model, log


def predict_scores(model, panel, graph, split='test', batch_size=None):
    """Scores (and realized labels) for every eligible stock-day of a split."""
    config = model.config
    adjacency = graph_adjacency(graph, panel)
    samples = build_windows(panel, config.his_t, config.label_t, split)
    batch_size = batch_size or config.batch_size
    rows = []
    for start in range(0, len(samples), batch_size):
        chunk = samples.take(np.arange(start, min(start + batch_size,
                                                  len(samples))))
        preds, _ = model.forward(chunk.inputs, chunk.mask, adjacency)
        for b, date in enumerate(chunk.dates):
            for i in np.flatnonzero(chunk.mask[b]):
                rows.append((str(date), str(panel.tickers[i]),
                             float(preds[b, i]), float(chunk.labels[b, i])))
    return pd.DataFrame(rows, columns=['date', 'ticker', 'score', 'label'])


def ensemble_scores(frames):
    """Average per-seed scores per (date, ticker)."""
    frames = list(frames)
    if not frames:
        raise ConfigError('no score sets to average')
    stacked = pd.concat(frames, ignore_index=True)
    merged = stacked.groupby(['date', 'ticker'], sort=True).agg(
        score=('score', 'mean'), label=('label', 'first')).reset_index()
    return merged
