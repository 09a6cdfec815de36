"""
The training loop: curriculum-sampled clips from synthetic scenes, the
memory-conditioned forward pass over each clip, the clip loss and AdamW
updates, with a JSON-lines training log and a final checkpoint.
"""
__all__ = [
    'TrainResult',
    'clip_interval',
    'generate_training_scenes',
    'run_clip',
    'train',
    'ALPHA_CHECK_FRACTION',
    'TRAIN_LOG_NAME',
]


import json
import logging
import sys

from dataclasses import (
    dataclass,
    replace,
)
from pathlib import Path

import numpy as np
import pandas as pd

from tqdm import tqdm

from .io import save_checkpoint
from .memory import (
    MemoryBank,
    working_insert,
)
from .model import ReconstructionModel
from .objective import (
    curriculum_interval,
    supervision_pairs,
    total_loss,
)
from .optim import AdamW
from .scenes import (
    generate_scene,
    sample_clip,
)
from ..utils import (
    atomic_write_text,
    dump_json,
    seed_stream,
)


logger = logging.getLogger(__name__)


ALPHA_CHECK_FRACTION = 0.3

TRAIN_LOG_NAME = 'train_log.jsonl'


@dataclass
class TrainResult:
    model: ReconstructionModel
    history: list
    summary: pd.DataFrame
    checkpoint_dir: object = None


def generate_training_scenes(run_config):
    """
    Renders the training scenes of a run; scene seeds are drawn from the
    ``'data'`` stream of the run seed.
    """
    seeds = seed_stream(run_config.seed, 'data').integers(0, 2 ** 31, size=run_config.data.n_scenes)
    params = run_config.data.scene_params(run_config.model.image_size)
    return [generate_scene(int(seed), params) for seed in seeds]


def clip_interval(eta, scene_length, curriculum):
    """
    Curriculum frame interval for the training ratio ``eta``, capped so that
    a clip of ``curriculum.n_frames`` frames fits in the scene.
    """
    longest = max(1, (scene_length - 1) // max(1, curriculum.n_frames - 1))
    return min(curriculum_interval(eta, curriculum), longest)


def run_clip(model, clip, memory_config, mode='train', rng=None, loss_config=None):
    """
    Runs the model over a clip - the two-view initialisation on the first
    two frames, then one memory-conditioned step per frame - and computes
    the clip loss. The memory bank admits every frame (no similarity gate).

    Returns
    -------
    ``tuple`` :
        ``(outputs, loss_terms, clipped_fraction)``
    """
    bank = MemoryBank(replace(memory_config, gating_enabled=False))
    frames = clip.frames

    outputs = [model.initialize(frames[0], frames[1])]
    working_insert(bank, outputs[0].new_key, outputs[0].new_value)

    clipped = []
    for frame in frames[2:]:
        prev = outputs[-1]
        output = model.forward_step(
            frame, prev.next_query, bank, prev_visual=prev.visual, mode=mode, rng=rng
        )
        clipped.append(output.record.clipped_fraction)
        working_insert(bank, output.new_key, output.new_value)
        outputs.append(output)

    predictions, targets = supervision_pairs(outputs, clip.gt_pointmaps)
    terms = total_loss(predictions, targets, loss_config)

    return outputs, terms, float(np.mean(clipped)) if clipped else 0.0


def _alpha_check(history, run_config, warned):
    epochs_done = history[-1]['epoch'] + 1
    if warned or epochs_done < max(1, int(np.ceil(ALPHA_CHECK_FRACTION * run_config.epochs))):
        return warned
    if min(record['loss'] for record in history) >= 0:
        logger.warning(
            'total loss has not gone negative after %d of %d epochs; consider tuning loss.alpha '
            '(currently %s)', epochs_done, run_config.epochs, run_config.loss.alpha
        )
    return True


def train(run_config, out_dir=None, scenes=None, progress=None):
    """
    Trains a model from scratch.

    Parameters
    ----------
    ``run_config`` : ``pymemrecon.config.RunConfig``
        The (validated) run config

    ``out_dir`` : ``str``, ``pathlib.Path``, ``None``
        Where to write ``train_log.jsonl``, ``train_summary.json`` and the
        ``checkpoint`` directory; nothing is written when ``None``

    ``scenes`` : ``list``, ``None``
        Training scenes; rendered from the config when ``None``

    ``progress`` : ``bool``, ``None``
        Whether to show a progress bar; by default only when stderr is a
        terminal

    Returns
    -------
    ``pymemrecon.core.training.TrainResult``
    """
    run_config.check()
    scenes = scenes if scenes is not None else generate_training_scenes(run_config)

    model = ReconstructionModel(run_config.model, seed=run_config.seed)
    optimizer = AdamW(model.parameters(), run_config.optimizer)
    clip_rng = seed_stream(run_config.seed, 'clip')
    dropout_rng = seed_stream(run_config.seed, 'dropout')
    curriculum = run_config.curriculum

    total_steps = run_config.total_steps
    history = []
    warned = False
    show = progress if progress is not None else sys.stderr.isatty()

    with tqdm(total=total_steps, disable=not show, desc='train', unit='step') as bar:
        for step in range(total_steps):
            epoch = step // run_config.steps_per_epoch
            eta = step / (total_steps - 1) if total_steps > 1 else 0.0
            scene = scenes[int(clip_rng.integers(len(scenes)))]
            interval = clip_interval(eta, len(scene), curriculum)
            clip = sample_clip(scene, interval, curriculum.n_frames, rng=clip_rng)

            model.zero_grad()
            _, terms, clipped_fraction = run_clip(
                model, clip, run_config.memory, mode='train', rng=dropout_rng,
                loss_config=run_config.loss,
            )
            terms.total.backward()
            optimizer.step()

            history.append({
                'step': step,
                'epoch': epoch,
                'eta': eta,
                'T': interval,
                'loss': terms.value,
                'loss_conf': terms.conf,
                'loss_scale': terms.scale,
                'clipped_fraction': clipped_fraction,
            })
            bar.update(1)
            bar.set_postfix(loss=f'{terms.value:.4f}')

            if (step + 1) % run_config.steps_per_epoch == 0:
                logger.info('epoch %d done: last loss %.4f', epoch, terms.value)
                warned = _alpha_check(history, run_config, warned)

    summary = pd.DataFrame(history).groupby('epoch')[['loss', 'loss_conf', 'loss_scale']].mean()

    checkpoint_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        atomic_write_text(
            out_dir / TRAIN_LOG_NAME,
            ''.join(json.dumps(record, sort_keys=True) + '\n' for record in history),
        )
        atomic_write_text(
            out_dir / 'train_summary.json',
            dump_json(json.loads(summary.reset_index().to_json(orient='records'))),
        )
        checkpoint_dir = out_dir / 'checkpoint'
        save_checkpoint(checkpoint_dir, model, run_config, step=total_steps)

    return TrainResult(model=model, history=history, summary=summary, checkpoint_dir=checkpoint_dir)
