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
import os
import sys

import numpy as np
import pandas as pd
import pytest
from click.testing import CliRunner
from loguru import logger

from conftest import TINY_MODEL
from latent_gru import __version__, storage
from latent_gru.main import RunConfig, cli, load_run_config, sweep_changes
from latent_gru.relgraph import CorrelationGraph


@pytest.fixture(autouse=True)
def restore_logging():
    yield
    # the CLI points loguru at the runner's captured stderr
    logger.remove()
    logger.add(sys.stderr)


def invoke(*args):
    result = CliRunner().invoke(cli, ['-q'] + [str(a) for a in args])
    if result.exception and not isinstance(result.exception, SystemExit):
        raise result.exception
    return result


def prepare(ctx, epochs=1, **extra):
    '''Synthesize a small market, ingest it and return the run config path.'''
    result = invoke('synth', '--stocks', 6, '--days', 120, '--seed', 3,
                    '--clusters', 2, '--out', ctx.out_dir)
    assert result.exit_code == 0, result.output
    config = storage.read_json(ctx.out('synth.config.json'))
    config.update(TINY_MODEL)
    config.update(epochs=epochs, k=3)
    config.update(extra)
    path = ctx.path('run.json')
    storage.write_json(path, config)
    result = invoke('ingest', '--config', path, '--out', ctx.out_dir)
    assert result.exit_code == 0, result.output
    return path


def test_version():
    result = invoke('version')
    assert result.exit_code == 0
    assert result.output.strip() == __version__


def test_synth_writes_market(ctx):
    result = invoke('synth', '--stocks', 4, '--days', 30, '--out', ctx.out_dir)
    assert result.exit_code == 0, result.output
    frame = pd.read_csv(ctx.out('market.csv'))
    assert len(frame) == 4 * 30
    truth = CorrelationGraph.from_json(open(ctx.out('truth_graph.json')).read())
    assert truth.tickers == ['S000', 'S001', 'S002', 'S003']
    config = storage.read_json(ctx.out('synth.config.json'))
    assert config['data_path'] == ctx.out('market.csv')
    assert sorted(config['splits']) == ['test', 'train', 'valid']
    assert os.path.exists(ctx.out('config.resolved.json'))


def test_full_pipeline(ctx):
    '''synth, ingest, train, predict, backtest and report in one run directory'''
    path = prepare(ctx)
    report = storage.read_json(ctx.out('load_report.json'))
    assert report['universe'] == 6
    assert report['days'] == dict(train=72, valid=24, test=24)

    result = invoke('train', '--config', path, '--out', ctx.out_dir,
                    '--seeds', '1,2')
    assert result.exit_code == 0, result.output
    assert os.path.exists(ctx.out('ckpt.seed1'))
    assert os.path.exists(ctx.out('ckpt.seed2'))
    assert os.path.exists(ctx.out('graph.json'))
    losses = pd.read_csv(ctx.out('losses.csv'))
    assert list(losses.columns) == ['seed', 'epoch', 'train_loss', 'valid_loss']
    assert list(losses['seed']) == [1, 2]

    result = invoke('predict', '--config', path, '--out', ctx.out_dir,
                    '--seeds', '1,2')
    assert result.exit_code == 0, result.output
    scores = pd.read_csv(ctx.out('scores.csv'))
    assert list(scores.columns) == ['date', 'ticker', 'score']
    assert not scores.duplicated(['date', 'ticker']).any()

    result = invoke('backtest', '--config', path, '--out', ctx.out_dir,
                    '--seeds', '1,2')
    assert result.exit_code == 0, result.output
    doc = storage.read_json(ctx.out('report.json'))
    for key in ('k', 'arr', 'avol', 'mdd', 'asr', 'cr', 'ir', 'mse', 'mae',
                'curve', 'benchmark'):
        assert key in doc
    assert doc['k'] == 3
    assert doc['meta']['seeds'] == [1, 2]
    assert doc['meta']['ablation'] == 'I+II+III+IV'
    curve = pd.read_csv(ctx.out('curve.csv'))
    assert list(curve.columns) == ['date', 'value', 'ret']
    assert len(curve) == len(doc['curve'])

    result = invoke('report', '--out', ctx.out_dir)
    assert result.exit_code == 0, result.output
    assert 'ARR' in result.output
    mdd_line = [l for l in result.output.splitlines() if l.startswith('MDD')][0]
    if doc['mdd'] > 0:
        assert '-' in mdd_line


def test_training_is_reproducible(ctx):
    '''Two runs of one config give identical checkpoints, scores and reports'''
    path = prepare(ctx)
    other = ctx.path('again')
    cache = 'panel_cache=' + json.dumps(ctx.out('panel.cache'))
    for out in (ctx.out_dir, other):
        for command in ('train', 'backtest'):
            result = invoke(command, '--config', path, '--out', out, '--set',
                            cache)
            assert result.exit_code == 0, result.output
    _, first = storage.load_checkpoint(ctx.out('ckpt.seed1'))
    _, second = storage.load_checkpoint(os.path.join(other, 'ckpt.seed1'))
    assert list(first) == list(second)
    assert all(np.array_equal(first[k], second[k]) for k in first)
    for name in ('losses.csv', 'scores.csv', 'report.json', 'curve.csv'):
        with open(ctx.out(name), 'rb') as a, \
                open(os.path.join(other, name), 'rb') as b:
            assert a.read() == b.read(), name


def test_ablation_reaches_report(ctx):
    path = prepare(ctx, ablation='I+II')
    for command in ('train', 'backtest'):
        result = invoke(command, '--config', path, '--out', ctx.out_dir)
        assert result.exit_code == 0, result.output
    doc = storage.read_json(ctx.out('report.json'))
    assert doc['meta']['ablation'] == 'I+II'
    config, state = storage.load_checkpoint(ctx.out('ckpt.seed1'))
    assert config['use_latent'] is False
    assert 'readout.W' in state


def test_missing_column_exits_1(ctx):
    csv = ctx.write('bars.csv', 'date,ticker,open,high,low,close,volume\n'
                    '2020-01-01,A,1,1,1,1,1\n')
    result = invoke('ingest', '--set', 'data_path=' + csv, '--out', ctx.out_dir)
    assert result.exit_code == 1
    assert 'turnover' in result.output


def test_unknown_config_key_exits_1(ctx):
    result = invoke('ingest', '--set', 'bogus=1', '--out', ctx.out_dir)
    assert result.exit_code == 1
    assert 'bogus' in result.output


def test_predict_without_checkpoints_exits_1(ctx):
    path = prepare(ctx)
    result = invoke('predict', '--config', path, '--out', ctx.out_dir)
    assert result.exit_code == 1
    assert 'ckpt.seed1' in result.output


def test_mismatched_graph_exits_2(ctx):
    path = prepare(ctx)
    assert invoke('train', '--config', path, '--out', ctx.out_dir).exit_code == 0
    graph = CorrelationGraph(['X%d' % i for i in range(6)])
    with open(ctx.out('graph.json'), 'w') as file_:
        file_.write(graph.to_json())
    result = invoke('predict', '--config', path, '--out', ctx.out_dir)
    assert result.exit_code == 2


def test_sweep(ctx):
    path = prepare(ctx)
    result = invoke('sweep', 'his_t', 2, 3, '--config', path, '--out',
                    ctx.out_dir)
    assert result.exit_code == 0, result.output
    sweep = pd.read_csv(ctx.out('sweep.csv'))
    assert list(sweep['value']) == [2, 3]
    assert list(sweep.columns)[:4] == ['parameter', 'value', 'arr', 'avol']
    assert os.path.exists(ctx.out('sweep', 'his_t=2', 'report.json'))
    resolved = storage.read_json(ctx.out('sweep', 'his_t=3',
                                         'config.resolved.json'))
    assert resolved['his_t'] == 3


def test_sweep_rejects_bad_requests(ctx):
    path = prepare(ctx)
    result = invoke('sweep', 'dropout', 0.1, '--config', path, '--out',
                    ctx.out_dir)
    assert result.exit_code == 1
    result = invoke('sweep', 'his_t', '--config', path, '--out', ctx.out_dir)
    assert result.exit_code == 1
    result = invoke('sweep', 'his_t', 'ten', '--config', path, '--out',
                    ctx.out_dir)
    assert result.exit_code == 1


def test_report_without_backtest_exits_1(ctx):
    result = invoke('report', '--out', ctx.out_dir)
    assert result.exit_code == 1


def test_run_config_layers(ctx):
    path = ctx.write('base.json', json.dumps(dict(k=5, his_t=7, seeds=[3])))
    config = load_run_config(path, ['his_t=4', 'corr_mode=absolute'],
                             seeds='8,9')
    assert config.k == 5
    assert config.his_t == 4
    assert config.corr_mode == 'absolute'
    assert config.seeds == [8, 9]
    assert config.model_config(9).seed == 9
    again = RunConfig(**dict(config))
    assert dict(again) == dict(config)


def test_sweep_aliases():
    config = RunConfig()
    assert sweep_changes(config, 'hidden_size', 64) == dict(gru_sizes=[64, 10])
    assert sweep_changes(config, 'num_hidden_states', 8) == dict(d_r=8)
    assert sweep_changes(config, 'gat_heads', 2) == dict(gat_heads=2)
