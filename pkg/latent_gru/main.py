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
import contextlib
import json
import os
import sys

import click
from loguru import logger

from latent_gru import storage
from latent_gru.backtest import EXECUTIONS, IR_BENCHMARKS, BacktestReport, run_backtest
from latent_gru.dataset import (SPLITS, compute_daily_returns, load_panel,
                                preprocess, split_by_date)
from latent_gru.model import (LatentGruNet, ModelConfig, ensemble_scores,
                              predict_scores, train)
from latent_gru.numkernel import (ConfigError, DataError, GraphError,
                                  KernelError, LatentGruError, NumericalError)
from latent_gru.relgraph import CORR_MODES, CorrelationGraph, build_graph
from latent_gru.synth import make_market

from . import __version__

CTX_SETTINGS = dict(help_option_names=['-h', '--help'])

DEFAULT_SPLITS = collections.OrderedDict([
    ('train', ['2018-01-01', '2021-12-31']),
    ('valid', ['2022-01-01', '2022-12-31']),
    ('test', ['2023-01-01', '2023-12-31']),
])

SWEEP_PARAMETERS = collections.OrderedDict([
    ('judge_value', float),
    ('label_t', int),
    ('his_t', int),
    ('hidden_size', int),
    ('gat_heads', int),
    ('num_hidden_states', int),
    ('d_r', int),
])


class RuntimeFailure(click.ClickException):
    exit_code = 2


@contextlib.contextmanager
def reported_errors():
    try:
        yield
    except (NumericalError, KernelError, GraphError) as ex:
        raise RuntimeFailure(str(ex))
    except LatentGruError as ex:
        raise click.ClickException(str(ex))


class RunConfig(object):
    """Model settings plus everything a run needs around the model."""

    DEFAULTS = collections.OrderedDict([
        ('data_path', None),
        ('schema', {}),
        ('splits', DEFAULT_SPLITS),
        ('panel_cache', None),
        ('seeds', [1]),
        ('k', 10),
        ('mad_clip', 5.0),
        ('min_train_days', 20),
        ('max_fill_days', 5),
        ('corr_mode', 'signed'),
        ('execution', 'close'),
        ('risk_free', 0.0),
        ('ir_benchmark', 'universe'),
        ('annualize_ir', False),
        ('predict_split', 'test'),
    ])

    MODEL_KEYS = tuple(key for key in ModelConfig.DEFAULTS if key != 'seed')

    def __init__(self, **kwargs):
        kwargs.pop('version', None)
        unknown = sorted(
            set(kwargs) - set(self.MODEL_KEYS) - set(self.DEFAULTS))
        if unknown:
            raise ConfigError('unknown config key(s): {}'.format(
                ', '.join(unknown)))
        self.model = ModelConfig(**dict(
            (key, kwargs[key]) for key in self.MODEL_KEYS if key in kwargs))
        for key, default in self.DEFAULTS.items():
            value = kwargs.get(key, default)
            setattr(self, key, json.loads(json.dumps(value)))
        self.validate()

    def __getattr__(self, name):
        if name == 'model':
            raise AttributeError(name)
        return getattr(self.model, name)

    def validate(self):
        if not isinstance(self.seeds, list) or not self.seeds or any(
                isinstance(s, bool) or not isinstance(s, int)
                for s in self.seeds):
            raise ConfigError('seeds must be a non-empty list of integers')
        if isinstance(self.k, bool) or not isinstance(self.k, int) or self.k < 1:
            raise ConfigError('k must be a positive integer')
        if not isinstance(self.splits, dict) or 'train' not in self.splits:
            raise ConfigError('splits must map at least train to a date pair')
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise ConfigError('unknown split(s): {}'.format(', '.join(
                sorted(unknown))))
        if self.predict_split not in SPLITS:
            raise ConfigError('predict_split must be one of {}'.format(
                ', '.join(SPLITS)))
        if self.corr_mode not in CORR_MODES:
            raise ConfigError('corr_mode must be one of {}'.format(', '.join(
                CORR_MODES)))
        if self.execution not in EXECUTIONS:
            raise ConfigError('execution must be one of {}'.format(', '.join(
                EXECUTIONS)))
        if self.ir_benchmark not in IR_BENCHMARKS:
            raise ConfigError('ir_benchmark must be one of {}'.format(
                ', '.join(IR_BENCHMARKS)))
        if not self.mad_clip > 0:
            raise ConfigError('mad_clip must be positive')
        for key in ('min_train_days', 'max_fill_days'):
            value = getattr(self, key)
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                raise ConfigError('{} must be a non-negative integer'.format(key))

    def model_config(self, seed):
        return self.model.replace(seed=seed)

    def replace(self, **changes):
        values = dict(self)
        if any(key in changes for key in ('use_agru_attention', 'use_gat_encoder',
                                          'use_latent', 'use_head_gat')):
            values['ablation'] = None
        values.update(changes)
        return RunConfig(**values)

    def __iter__(self):
        yield 'version', 1
        for key, value in self.model:
            if key not in ('version', 'seed'):
                yield key, value
        for key in self.DEFAULTS:
            yield key, getattr(self, key)


def parse_override(item):
    if '=' not in item:
        raise ConfigError('--set expects key=value, got {!r}'.format(item))
    key, raw = item.split('=', 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def load_run_config(config_path=None, overrides=(), seeds=None, k=None):
    values = {}
    if config_path:
        values.update(storage.read_json(config_path))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    if seeds is not None:
        try:
            values['seeds'] = [int(s) for s in seeds.split(',') if s.strip()]
        except ValueError:
            raise ConfigError('--seeds expects a comma-separated list of '
                              'integers, got {!r}'.format(seeds))
    if k is not None:
        values['k'] = k
    return RunConfig(**values)


def sweep_changes(config, parameter, value):
    if parameter == 'hidden_size':
        return dict(gru_sizes=[value] + list(config.gru_sizes[1:]))
    if parameter in ('num_hidden_states', 'd_r'):
        return dict(d_r=value)
    return {parameter: value}


class RunPaths(object):
    def __init__(self, out_dir, panel_cache=None):
        self.out_dir = out_dir
        self.config = self.join('config.resolved.json')
        self.panel_cache = panel_cache or self.join('panel.cache')
        self.load_report = self.join('load_report.json')
        self.graph = self.join('graph.json')
        self.losses = self.join('losses.csv')
        self.scores = self.join('scores.csv')
        self.report = self.join('report.json')
        self.curve = self.join('curve.csv')
        self.sweep = self.join('sweep.csv')
        self.market = self.join('market.csv')
        self.truth_graph = self.join('truth_graph.json')
        self.synth_config = self.join('synth.config.json')

    def join(self, name):
        return os.path.join(self.out_dir, name)

    def checkpoint(self, seed):
        return self.join('ckpt.seed%d' % seed)


class App(object):
    def __init__(self, out_dir, config, progress=True):
        self.out_dir = os.path.abspath(out_dir)
        self.config = config
        self.progress = progress
        self.paths = RunPaths(self.out_dir, config.panel_cache)

    def save_config(self):
        storage.write_json(self.paths.config, dict(self.config))

    def _panel(self):
        return storage.load_panel_cache(self.paths.panel_cache)

    def _graph(self, panel, rebuild=False):
        if not rebuild and os.path.exists(self.paths.graph):
            with open(self.paths.graph, encoding='utf-8') as file_:
                return CorrelationGraph.from_json(file_.read())
        train_dates = panel.dates[panel.split_tags == 'train']
        if not len(train_dates):
            raise DataError('panel has no train days to build the graph from')
        graph = build_graph(panel, train_dates[-1], self.config.lookback_days,
                            self.config.judge_value, self.config.corr_mode)
        storage.write_json(self.paths.graph, dict(graph))
        return graph

    def _models(self):
        models = []
        for seed in self.config.seeds:
            config, state = storage.load_checkpoint(self.paths.checkpoint(seed))
            model = LatentGruNet(ModelConfig(**config))
            model.load_state(state)
            models.append(model)
        return models

    def cmd_ingest(self):
        if not self.config.data_path:
            raise ConfigError('data_path is not set; pass --set data_path=FILE')
        panel = load_panel(self.config.data_path, self.config.schema,
                           self.config.max_fill_days)
        panel = split_by_date(panel, self.config.splits)
        panel = compute_daily_returns(panel)
        panel = preprocess(panel, self.config.mad_clip, 'train',
                           self.config.min_train_days)
        storage.save_panel(self.paths.panel_cache, panel)
        report = dict(panel.report)
        report['universe'] = panel.n
        report['days'] = dict((name, int((panel.split_tags == name).sum()))
                              for name in SPLITS)
        storage.write_json(self.paths.load_report, report)
        click.echo(storage.dumps_json(report), nl=False)
        return panel

    def cmd_synth(self, n_stocks, n_days, seed, n_clusters):
        frame, truth = make_market(n_stocks, n_days, seed,
                                   n_clusters=n_clusters)
        storage.write_frame(self.paths.market, frame)
        storage.write_json(self.paths.truth_graph, dict(truth))
        dates = sorted(frame['date'].unique())
        cut1, cut2 = int(len(dates) * 0.6), int(len(dates) * 0.8)
        splits = collections.OrderedDict([
            ('train', [dates[0], dates[cut1 - 1]]),
            ('valid', [dates[cut1], dates[cut2 - 1]]),
            ('test', [dates[cut2], dates[-1]]),
        ])
        storage.write_json(self.paths.synth_config,
                           dict(data_path=self.paths.market, splits=splits))
        click.echo('Wrote %s (%d stocks x %d days)' % (self.paths.market,
                                                       n_stocks, n_days))
        click.echo('Use --config %s to ingest it' % self.paths.synth_config)

    def cmd_train(self):
        panel = self._panel()
        graph = self._graph(panel, rebuild=True)
        rows = []
        for seed in self.config.seeds:
            config = self.config.model_config(seed)
            model = LatentGruNet(config)
            _, log = train(model, panel, graph, config, progress=self.progress)
            storage.save_checkpoint(self.paths.checkpoint(seed),
                                    model.parameters(), config)
            rows += [(seed, e.epoch, e.train_loss, e.valid_loss) for e in log]
            click.echo('seed %d: %d epochs, %d parameters' %
                       (seed, len(log), sum(p.size for p in model.parameters())))
        storage.write_csv(self.paths.losses,
                          ['seed', 'epoch', 'train_loss', 'valid_loss'], rows)

    def cmd_predict(self, split=None):
        split = split or self.config.predict_split
        panel = self._panel()
        graph = self._graph(panel)
        frames = [predict_scores(model, panel, graph, split)
                  for model in self._models()]
        scores = ensemble_scores(frames)
        storage.write_frame(self.paths.scores,
                            scores[['date', 'ticker', 'score']])
        click.echo('Scored %d stock-days over %d dates (%s)' %
                   (len(scores), scores['date'].nunique(), split))
        return scores

    def cmd_backtest(self):
        scores = self.cmd_predict()
        panel = self._panel()
        meta = dict(
            ablation=self.config.model.label,
            seeds=self.config.seeds,
            split=self.config.predict_split,
            execution=self.config.execution,
            ir_benchmark=self.config.ir_benchmark,
        )
        report = run_backtest(scores, panel, self.config.k,
                              self.config.execution, self.config.risk_free,
                              self.config.ir_benchmark,
                              self.config.annualize_ir, meta)
        storage.write_json(self.paths.report, dict(report))
        storage.write_frame(self.paths.curve, report.curve.frame())
        click.echo(format_report(dict(report)), nl=False)
        return report

    def cmd_sweep(self, parameter, values):
        if parameter not in SWEEP_PARAMETERS:
            raise ConfigError('unknown sweep parameter {!r}; choose from {}'
                              .format(parameter, ', '.join(SWEEP_PARAMETERS)))
        if not values:
            raise ConfigError('no values given for {}'.format(parameter))
        try:
            values = [SWEEP_PARAMETERS[parameter](v) for v in values]
        except ValueError as ex:
            raise ConfigError('bad value for {}: {}'.format(parameter, ex))
        if not os.path.exists(self.paths.panel_cache):
            raise ConfigError('no panel cache at {}; run ingest first'.format(
                self.paths.panel_cache))

        rows = []
        bar = storage.make_progress_bar(parameter, len(values)) \
            if self.progress else None
        for idx, value in enumerate(values):
            changes = sweep_changes(self.config, parameter, value)
            changes['panel_cache'] = self.paths.panel_cache
            sub_dir = os.path.join(self.out_dir, 'sweep',
                                   '{}={}'.format(parameter, value))
            app = App(sub_dir, self.config.replace(**changes), progress=False)
            with storage.run_lock(sub_dir):
                app.save_config()
                app.cmd_train()
                report = app.cmd_backtest()
            rows.append([parameter, value] +
                        [getattr(report, name) for name in BacktestReport.METRICS])
            if bar is not None:
                bar.update(idx + 1)
        if bar is not None:
            bar.finish()
        storage.write_csv(self.paths.sweep,
                          ['parameter', 'value'] + list(BacktestReport.METRICS),
                          rows)
        click.echo('Wrote %s' % self.paths.sweep)

    def cmd_report(self):
        if not os.path.exists(self.paths.report):
            raise ConfigError('no report at {}; run backtest first'.format(
                self.paths.report))
        click.echo(format_report(storage.read_json(self.paths.report)),
                   nl=False)


def _fmt(value):
    return 'n/a' if value is None else '{:.4f}'.format(value)


def format_report(report):
    lines = ['k = %s  (%s)' % (report['k'], report.get('meta', {}).get(
        'ablation', ''))]
    bench = report.get('benchmark_metrics') or {}
    lines.append('{:<6} {:>10} {:>10}'.format('metric', 'top-k', 'universe'))
    for name in BacktestReport.METRICS:
        value, other = report.get(name), bench.get(name)
        if name == 'mdd':
            value = None if value is None else -value
            other = None if other is None else -other
        lines.append('{:<6} {:>10} {:>10}'.format(
            name.upper(), _fmt(value), '' if name not in bench else _fmt(other)))
    return '\n'.join(lines) + '\n'


def configure_logging(verbose, quiet):
    level = 'DEBUG' if verbose else ('WARNING' if quiet else 'INFO')
    logger.remove()
    logger.add(sys.stderr, level=level,
               format='{time:HH:mm:ss} | {level: <7} | {message}')


def run_options(func):
    options = [
        click.option('--config', 'config_path', type=click.Path(),
                     help='JSON config file.'),
        click.option('--set', 'overrides', multiple=True, metavar='KEY=VALUE',
                     help='Override one config key (repeatable).'),
        click.option('--out', 'out_dir', default='run', show_default=True,
                     type=click.Path(file_okay=False),
                     help='Directory for every artifact of the run.'),
        click.option('--seeds', help='Comma-separated training seeds.'),
        click.option('--k', type=int, help='Stocks held per day.'),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def make_app(ctx, config_path, overrides, out_dir, seeds, k):
    config = load_run_config(config_path, overrides, seeds, k)
    return App(out_dir, config, progress=not ctx.obj.get('quiet'))


@contextlib.contextmanager
def run(ctx, config_path, overrides, out_dir, seeds, k):
    with reported_errors():
        app = make_app(ctx, config_path, overrides, out_dir, seeds, k)
        with storage.run_lock(app.out_dir):
            app.save_config()
            yield app


@click.group(context_settings=CTX_SETTINGS)
@click.option('-v', '--verbose', is_flag=True, help='Log debug detail.')
@click.option('-q', '--quiet', is_flag=True, help='Only log warnings.')
@click.pass_context
def cli(ctx, verbose, quiet):
    """latent-gru stock predictor"""
    ctx.ensure_object(dict)
    ctx.obj['quiet'] = quiet
    configure_logging(verbose, quiet)


@cli.command()
@click.argument('topic', default=None, required=False, nargs=1)
@click.pass_context
def help(ctx, topic, **kw):
    """Show this message and exit."""
    if topic is None:
        click.echo(ctx.parent.get_help())
    else:
        click.echo(cli.commands[topic].get_help(ctx))


@cli.command('version')
def cmd_version():
    """Print version and exit."""
    click.echo(__version__)


@cli.command('ingest')
@run_options
@click.pass_context
def cmd_ingest(ctx, **kwargs):
    """Validate a bars CSV and cache the preprocessed panel."""
    with run(ctx, **kwargs) as app:
        app.cmd_ingest()


@cli.command('synth')
@click.option('--stocks', 'n_stocks', default=20, show_default=True)
@click.option('--days', 'n_days', default=600, show_default=True)
@click.option('--seed', default=0, show_default=True)
@click.option('--clusters', 'n_clusters', default=4, show_default=True)
@run_options
@click.pass_context
def cmd_synth(ctx, n_stocks, n_days, seed, n_clusters, **kwargs):
    """Generate a planted-signal market CSV."""
    with run(ctx, **kwargs) as app:
        app.cmd_synth(n_stocks, n_days, seed, n_clusters)


@cli.command('train')
@run_options
@click.pass_context
def cmd_train(ctx, **kwargs):
    """Train one model per seed.

    Builds the correlation graph as of the last train day, then writes one
    checkpoint per seed and the per-epoch losses.
    """
    with run(ctx, **kwargs) as app:
        app.cmd_train()


@cli.command('predict')
@click.option('--split', type=click.Choice(SPLITS), default=None,
              help='Split to score (default: predict_split).')
@run_options
@click.pass_context
def cmd_predict(ctx, split, **kwargs):
    """Write seed-averaged scores for a split."""
    with run(ctx, **kwargs) as app:
        app.cmd_predict(split)


@cli.command('backtest')
@run_options
@click.pass_context
def cmd_backtest(ctx, **kwargs):
    """Run the daily top-k strategy on the ensemble scores."""
    with run(ctx, **kwargs) as app:
        app.cmd_backtest()


@cli.command('sweep')
@click.argument('parameter')
@click.argument('values', nargs=-1)
@run_options
@click.pass_context
def cmd_sweep(ctx, parameter, values, **kwargs):
    """Train and backtest once per value of PARAMETER.

    PARAMETER is one of judge_value, label_t, his_t, hidden_size, gat_heads,
    num_hidden_states (alias d_r).
    """
    with run(ctx, **kwargs) as app:
        app.cmd_sweep(parameter, values)


@cli.command('report')
@click.option('--out', 'out_dir', default='run', show_default=True,
              type=click.Path(file_okay=False))
def cmd_report(out_dir):
    """Print the metrics of a finished backtest."""
    with reported_errors():
        App(out_dir, RunConfig(), progress=False).cmd_report()


def main():
    try:
        cli.main(standalone_mode=False)
    except click.exceptions.UsageError as ex:
        ex.show()
        sys.exit(1)
    except click.ClickException as ex:
        ex.show()
        sys.exit(ex.exit_code)
    except click.exceptions.Abort:
        click.echo('Aborted!', err=True)
        sys.exit(1)
