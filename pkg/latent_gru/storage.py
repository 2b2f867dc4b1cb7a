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
import io
import json
import os
import tempfile

import lockfile
import numpy as np
import pandas as pd
import progressbar

from latent_gru.dataset import FEATURES, LoadReport, Panel
from latent_gru.numkernel import ConfigError, DataError

PANEL_VERSION = 1
CHECKPOINT_VERSION = 1


def make_progress_bar(name, size):
    widgets = [
        '%s: ' % name[:8],
        progressbar.Percentage(),
        ' ',
        progressbar.Bar(),
        ' ',
        progressbar.AdaptiveETA(),
    ]
    return progressbar.ProgressBar(widgets=widgets, max_value=size)


@contextlib.contextmanager
def atomic_open(dst_path, *args, **kwargs):
    dst_dir = os.path.dirname(os.path.abspath(dst_path))
    if not os.path.exists(dst_dir):
        os.makedirs(dst_dir)
    tmp_file, tmp_path = tempfile.mkstemp(dir=dst_dir, prefix='.tmp-')
    os.close(tmp_file)
    try:
        with io.open(tmp_path, *args, **kwargs) as file_:
            yield file_
        os.replace(tmp_path, dst_path)
    finally:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)


def _builtin(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError('{!r} is not JSON serializable'.format(obj))


def dumps_json(obj):
    return json.dumps(obj, indent=4, sort_keys=True, default=_builtin) + '\n'


def write_json(path, obj):
    with atomic_open(path, 'w', encoding='utf-8') as file_:
        file_.write(dumps_json(obj))


def read_json(path):
    try:
        with io.open(path, encoding='utf-8') as file_:
            return json.load(file_)
    except (IOError, OSError) as ex:
        raise ConfigError('cannot read {}: {}'.format(path, ex))
    except ValueError as ex:
        raise ConfigError('{} is not valid JSON: {}'.format(path, ex))


def write_csv(path, header, rows):
    frame = pd.DataFrame(list(rows), columns=list(header))
    write_frame(path, frame)


def write_frame(path, frame):
    with atomic_open(path, 'w', encoding='utf-8', newline='') as file_:
        frame.to_csv(file_, index=False, float_format='%.17g')


def save_panel(path, panel):
    arrays = dict(
        format_version=np.array(PANEL_VERSION),
        report=np.array(json.dumps(dict(panel.report), sort_keys=True)),
        feature_names=np.array(FEATURES),
    )
    for name in panel.FIELDS:
        arrays[name] = getattr(panel, name)
    with atomic_open(path, 'wb') as file_:
        np.savez(file_, **arrays)


def load_panel_cache(path):
    if not os.path.exists(path):
        raise ConfigError('no panel cache at {}; run ingest first'.format(path))
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data['format_version'])
            if version != PANEL_VERSION:
                raise DataError('panel cache {} has format {}, expected {}'
                                .format(path, version, PANEL_VERSION))
            names = tuple(str(name) for name in data['feature_names'])
            if names != FEATURES:
                raise DataError('panel cache {} has features {}, expected {}'
                                .format(path, ', '.join(names),
                                        ', '.join(FEATURES)))
            fields = dict((name, data[name]) for name in Panel.FIELDS)
            report = LoadReport(**json.loads(str(data['report'])))
    except (KeyError, ValueError, OSError) as ex:
        raise DataError('unreadable panel cache {}: {}'.format(path, ex))
    return Panel(report=report, **fields)


def save_checkpoint(path, params, config):
    params = list(params)
    arrays = collections.OrderedDict([
        ('format_version', np.array(CHECKPOINT_VERSION)),
        ('config', np.array(json.dumps(dict(config), sort_keys=True))),
        ('names', np.array([p.name for p in params])),
    ])
    for idx, p in enumerate(params):
        arrays['param_%04d' % idx] = p.value
    with atomic_open(path, 'wb') as file_:
        np.savez(file_, **arrays)


def load_checkpoint(path):
    """Returns (config dict, OrderedDict of parameter name to array)."""
    if not os.path.exists(path):
        raise ConfigError('missing checkpoint {}'.format(path))
    try:
        with np.load(path, allow_pickle=False) as data:
            version = int(data['format_version'])
            if version != CHECKPOINT_VERSION:
                raise DataError('checkpoint {} has format {}, expected {}'
                                .format(path, version, CHECKPOINT_VERSION))
            config = json.loads(str(data['config']))
            names = [str(name) for name in data['names']]
            state = collections.OrderedDict(
                (name, data['param_%04d' % idx].copy())
                for idx, name in enumerate(names))
    except (KeyError, ValueError, OSError) as ex:
        raise DataError('unreadable checkpoint {}: {}'.format(path, ex))
    return config, state


@contextlib.contextmanager
def run_lock(out_dir, timeout=10):
    if not os.path.exists(out_dir):
        os.makedirs(out_dir)
    lock = lockfile.LockFile(os.path.join(out_dir, 'run'))
    try:
        lock.acquire(timeout=timeout)
    except lockfile.LockTimeout:
        raise ConfigError('{} is in use by another run'.format(out_dir))
    try:
        yield
    finally:
        lock.release()
