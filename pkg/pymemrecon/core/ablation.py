"""
Ablation suites over the memory design, each run on synthetic scenes with a
fixed model:

``clip``
    attention clipping on and off, with low-attention outlier tokens injected
    into the long-term memory before every step

``lm``
    full two-tier memory against working memory only (drained frames are
    dropped)

``memsize``
    long-term budgets of 64, 256, 1024 and 4096 tokens
"""
__all__ = [
    'ablation_table',
    'make_outlier_hook',
    'run_suite',
    'suite_settings',
    'validate_ablation_table',
    'ABLATION_SCHEMA_VERSION',
    'MEMSIZE_BUDGETS',
    'SUITES',
    'TABLE_COLUMNS',
]


import logging

from dataclasses import replace

import numpy as np
import pandas as pd

from .evaluation import evaluate_reconstruction
from .inference import reconstruct_ordered
from .memory import (
    MemoryConfig,
    consolidate,
)
from .tensor import (
    Tensor,
    concat,
)
from ..utils import (
    json_normalized_dict,
    seed_stream,
)


logger = logging.getLogger(__name__)


ABLATION_SCHEMA_VERSION = 1

SUITES = ('clip', 'lm', 'memsize')

MEMSIZE_BUDGETS = (64, 256, 1024, 4096)

TABLE_COLUMNS = (
    'suite', 'setting', 'scene', 'acc_mean', 'acc_median', 'comp_mean',
    'comp_median', 'nc_mean', 'nc_median', 'max_tokens',
)


def suite_settings(suite, memory_config=None):
    """
    The ``(setting_name, MemoryConfig)`` pairs compared by a suite.
    """
    base = memory_config if memory_config is not None else MemoryConfig()
    if suite == 'clip':
        return [('clip_on', replace(base, clip_enabled=True)), ('clip_off', replace(base, clip_enabled=False))]
    if suite == 'lm':
        return [
            ('full', replace(base, long_term_enabled=True)),
            ('working_only', replace(base, long_term_enabled=False)),
        ]
    if suite == 'memsize':
        return [
            (f'lt_max_{budget}', replace(base, lt_max_tokens=budget, topk_keep=None))
            for budget in MEMSIZE_BUDGETS
        ]
    raise ValueError(f'unknown ablation suite "{suite}", expected one of {list(SUITES)}')


def make_outlier_hook(rng, n_tokens=8, magnitude=50.0, key_scale=10.0):
    """
    Returns a memory hook that appends ``n_tokens`` outlier tokens to the
    long-term memory before each step: keys point away from the mean key
    direction of the bank (so they receive little attention) and values have
    a large norm (so any attention they do receive distorts the readout).
    """
    def hook(bank, position):
        keys, _ = bank.keys_and_values()
        mean_key = keys.data.mean(axis=0)
        direction = -mean_key / max(np.linalg.norm(mean_key), 1e-12)
        dim = keys.shape[1]
        dtype = keys.dtype

        outlier_keys = key_scale * (direction + 0.1 * rng.normal(size=(n_tokens, dim)))
        outlier_values = magnitude * rng.normal(size=(n_tokens, dim))
        new_keys = Tensor(outlier_keys, dtype=dtype)
        new_values = Tensor(outlier_values, dtype=dtype)

        if bank.lt_keys is None:
            bank.lt_keys, bank.lt_values = new_keys, new_values
        else:
            bank.lt_keys = concat([bank.lt_keys, new_keys], axis=0)
            bank.lt_values = concat([bank.lt_values, new_values], axis=0)
        bank.acc_attn = np.concatenate([bank.acc_attn, np.zeros(n_tokens)])
        bank.origin = np.concatenate([bank.origin, np.full((n_tokens, 2), -1, dtype=np.int64)])
        consolidate(bank)

    return hook


def run_suite(model, scenes, suite, memory_config=None, seed=0):
    """
    Runs an ablation suite: an ordered reconstruction of every scene under
    every setting of the suite, each evaluated against the scene's ground
    truth.

    Parameters
    ----------
    ``model`` : ``pymemrecon.core.model.ReconstructionModel``
        The trained model

    ``scenes`` : ``list``
        ``SceneSample`` objects

    ``suite`` : ``str``
        ``'clip'``, ``'lm'`` or ``'memsize'``

    ``memory_config`` : ``pymemrecon.core.memory.MemoryConfig``, ``None``
        The base memory settings

    ``seed`` : ``int``
        Seed of the outlier injection

    Returns
    -------
    ``pandas.DataFrame`` :
        One row per (setting, scene), columns ``TABLE_COLUMNS``
    """
    rows = []
    for setting, config in suite_settings(suite, memory_config):
        for scene_position, scene in enumerate(scenes):
            hook = None
            if suite == 'clip':
                hook = make_outlier_hook(seed_stream(seed + scene_position, 'eval'))
            reconstruction = reconstruct_ordered(model, scene.frames, config, memory_hook=hook)
            report = evaluate_reconstruction(reconstruction.pointmaps, scene.gt_pointmaps, seed=seed)
            rows.append({
                'suite': suite,
                'setting': setting,
                'scene': scene_position,
                'acc_mean': report.acc_mean,
                'acc_median': report.acc_median,
                'comp_mean': report.comp_mean,
                'comp_median': report.comp_median,
                'nc_mean': report.nc_mean,
                'nc_median': report.nc_median,
                'max_tokens': int(max(reconstruction.step_tokens)),
            })
            logger.info('ablation %s/%s scene %d: acc %.4f', suite, setting, scene_position, report.acc_mean)

    return pd.DataFrame(rows, columns=list(TABLE_COLUMNS))


def ablation_table(frame, suite, memory_config=None):
    """
    The JSON document of a suite run: the per-scene records, the
    per-setting means and the flattened memory settings compared, with a
    schema version.
    """
    settings = {
        setting: {
            key: (value.item() if hasattr(value, 'item') else value)
            for key, value in json_normalized_dict({'memory': config.to_dict()}).items()
        }
        for setting, config in suite_settings(suite, memory_config)
    }
    summary = frame.groupby('setting', sort=False)[['acc_mean', 'comp_mean', 'nc_mean', 'max_tokens']].mean()
    return {
        'schema_version': ABLATION_SCHEMA_VERSION,
        'suite': suite,
        'columns': list(TABLE_COLUMNS),
        'records': [
            {key: (value.item() if hasattr(value, 'item') else value) for key, value in record.items()}
            for record in frame.to_dict(orient='records')
        ],
        'summary': [
            {'setting': setting, **{key: float(value) for key, value in values.items()}}
            for setting, values in summary.iterrows()
        ],
        'settings': settings,
    }


def validate_ablation_table(document):
    """
    Returns the list of schema diagnostics of an ablation table document,
    empty when it is valid.
    """
    if not isinstance(document, dict):
        return ['<root>: expected a JSON object']

    diagnostics = []
    if document.get('schema_version') != ABLATION_SCHEMA_VERSION:
        diagnostics.append(f'schema_version: expected {ABLATION_SCHEMA_VERSION}, got {document.get("schema_version")!r}')
    if document.get('suite') not in SUITES:
        diagnostics.append(f'suite: expected one of {list(SUITES)}, got {document.get("suite")!r}')
    records = document.get('records')
    if not isinstance(records, list) or not records:
        diagnostics.append('records: expected a non-empty list')
        return diagnostics

    for position, record in enumerate(records):
        missing = [column for column in TABLE_COLUMNS if column not in record]
        if missing:
            diagnostics.append(f'records.{position}: missing columns {missing}')
            continue
        for column in ('acc_mean', 'acc_median', 'comp_mean', 'comp_median'):
            if not isinstance(record[column], (int, float)) or record[column] < 0:
                diagnostics.append(f'records.{position}.{column}: expected a non-negative number')
        for column in ('nc_mean', 'nc_median'):
            if not isinstance(record[column], (int, float)) or not -1.0 <= record[column] <= 1.0:
                diagnostics.append(f'records.{position}.{column}: expected a number in [-1, 1]')

    return diagnostics
