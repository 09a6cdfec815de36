"""
Command-line entry point: ``pymemrecon <subcommand> ...``.

Subcommands
-----------
``gen-data``     render synthetic scenes and dump them to a directory
``train``        train a model and write a checkpoint and a training log
``reconstruct``  reconstruct a frame directory with a checkpoint
``eval``         score predicted pointmaps against a scene dump
``ablate``       run an ablation suite and write a comparative table

Exit codes: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error (the config diagnostics are printed one per line).
The log level comes from ``--log-level`` or the ``PYMEMRECON_LOG_LEVEL``
environment variable.
"""
__all__ = [
    'build_parser',
    'cmd_ablate',
    'cmd_eval',
    'cmd_gen_data',
    'cmd_reconstruct',
    'cmd_train',
    'configure_logging',
    'main',
    'EXIT_FAILURE',
    'EXIT_OK',
    'EXIT_USAGE',
    'LOG_FORMAT',
    'LOG_LEVEL_ENV_VAR',
]


import argparse
import logging
import os
import sys
import time

from dataclasses import replace
from pathlib import Path

import numpy as np

from .. import __version__
from ..config import RunConfig
from ..core.ablation import (
    ablation_table,
    run_suite,
    validate_ablation_table,
    SUITES,
)
from ..core.evaluation import evaluate_reconstruction
from ..core.find import (
    find_frames,
    find_point_clouds,
    find_scene_dirs,
)
from ..core.grids import Pointmap
from ..core.inference import (
    reconstruct_ordered,
    reconstruct_unordered,
    run_report,
    CONFIDENCE_KINDS,
    STRATEGIES,
)
from ..core.io import (
    load_checkpoint,
    load_frames,
    load_pointmaps,
    load_scene,
    read_point_cloud,
    save_pointmaps,
    save_scene,
    write_point_cloud,
    CAMERA_FILE_NAME,
)
from ..core.memory import MemoryConfig
from ..core.training import (
    generate_training_scenes,
    train,
)
from ..exceptions import (
    CheckpointError,
    ConfigError,
    DimensionError,
    MemReconError,
)
from ..utils import (
    ARRAY_MANIFEST_NAME,
    atomic_directory,
    atomic_write_text,
    dump_json,
)


logger = logging.getLogger(__name__)


EXIT_OK = 0

EXIT_FAILURE = 1

EXIT_USAGE = 2

LOG_LEVEL_ENV_VAR = 'PYMEMRECON_LOG_LEVEL'

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'

LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')


def configure_logging(level=None):
    """
    Attaches a stderr handler to the package logger. The level falls back
    to the ``PYMEMRECON_LOG_LEVEL`` environment variable, then ``WARNING``.
    """
    level = (level or os.environ.get(LOG_LEVEL_ENV_VAR) or 'WARNING').upper()
    if level not in LOG_LEVELS:
        raise ConfigError('invalid log level', [f'log_level: must be one of {list(LOG_LEVELS)}, got {level!r}'])

    package_logger = logging.getLogger('pymemrecon')
    for handler in list(package_logger.handlers):
        if getattr(handler, '_pymemrecon_cli', False):
            package_logger.removeHandler(handler)

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    handler._pymemrecon_cli = True
    package_logger.addHandler(handler)
    package_logger.setLevel(level)

    return package_logger


def _load_run_config(path):
    return RunConfig.load(path) if path is not None else RunConfig().check()


def _checkpoint_run_config(manifest):
    document = manifest.get('run_config')
    return RunConfig.from_dict(document) if document is not None else RunConfig()


def _load_scenes(data_dir):
    scenes = [load_scene(path) for path in find_scene_dirs(data_dir)]
    if not scenes:
        raise CheckpointError(f'no scene dumps found in "{data_dir}"')
    return scenes


def _input_frame_paths(input_dir):
    input_dir = Path(input_dir)
    if input_dir.joinpath(CAMERA_FILE_NAME).is_file():
        input_dir = input_dir / 'frames'
    return list(find_frames(input_dir))


def cmd_gen_data(config, out_dir):
    """
    Renders the scenes of a run config into ``out_dir/scene_NNNN`` dumps
    and echoes the config as ``out_dir/config.json``.

    Returns
    -------
    ``list`` :
        The scene directories written
    """
    out_dir = Path(out_dir)
    scene_dirs = []
    for position, scene in enumerate(generate_training_scenes(config)):
        scene_dir = out_dir / f'scene_{position:04d}'
        save_scene(scene_dir, scene)
        scene_dirs.append(scene_dir)
    config.dump(out_dir / 'config.json')

    logger.info('%d scenes written to %s', len(scene_dirs), out_dir)
    return scene_dirs


def cmd_train(config, out_dir, data_dir=None):
    """
    Trains a model on rendered scenes (or the scene dumps in ``data_dir``)
    and writes the checkpoint, training log and summary under ``out_dir``.
    """
    scenes = _load_scenes(data_dir) if data_dir is not None else None
    result = train(config, out_dir=out_dir, scenes=scenes)
    config.dump(Path(out_dir) / 'config.json')
    return result


def cmd_reconstruct(checkpoint, input_dir, out_dir, unordered=False, strategy='mst',
                    clip=True, lt_max_tokens=None, confidence_kind='sigmoid', workers=None):
    """
    Reconstructs the frames of ``input_dir`` (a frame directory or a scene
    dump) and writes, under ``out_dir``:

    ``frames/NNNN.ply``      per-frame point clouds with confidences
    ``reconstruction.ply``   all frames merged
    ``pointmaps/``           the pointmaps as an array dump
    ``report.json``          the run report
    ``memory_stats.json``    the memory bookkeeping history

    Returns
    -------
    ``dict`` :
        The run report
    """
    model, manifest = load_checkpoint(checkpoint)
    memory_config = _checkpoint_run_config(manifest).memory
    memory_config = replace(memory_config, clip_enabled=clip)
    if lt_max_tokens is not None:
        memory_config = replace(memory_config, lt_max_tokens=lt_max_tokens, topk_keep=None)
    diagnostics = memory_config.validate()
    if diagnostics:
        raise ConfigError('invalid memory settings', [f'memory.{error}' for error in diagnostics])

    frame_paths = _input_frame_paths(input_dir)
    frames = load_frames(frame_paths)
    logger.info('reconstructing %d frames from %s', len(frames), input_dir)

    started = time.perf_counter()
    if unordered:
        reconstruction = reconstruct_unordered(
            model, frames, strategy=strategy, memory_config=memory_config,
            confidence_kind=confidence_kind, workers=workers,
        )
    else:
        reconstruction = reconstruct_ordered(model, frames, memory_config)
    elapsed = time.perf_counter() - started

    report = run_report(reconstruction, elapsed_seconds=elapsed)
    report['frames'] = [path.name for path in frame_paths]

    with atomic_directory(out_dir) as tmp_dir:
        for position, (pointmap, confidence) in enumerate(zip(reconstruction.pointmaps, reconstruction.confidences)):
            write_point_cloud(
                tmp_dir / 'frames' / f'{position:04d}.ply',
                pointmap.array.reshape(-1, 3),
                np.asarray(confidence).reshape(-1),
            )
        write_point_cloud(
            tmp_dir / 'reconstruction.ply',
            np.concatenate([pm.valid_points() for pm in reconstruction.pointmaps], axis=0),
            np.concatenate([
                np.asarray(conf)[pm.valid] for pm, conf in zip(reconstruction.pointmaps, reconstruction.confidences)
            ]),
        )
        save_pointmaps(
            tmp_dir / 'pointmaps',
            reconstruction.pointmaps,
            reconstruction.confidences,
            extra={'order': [int(i) for i in reconstruction.order]},
        )
        atomic_write_text(tmp_dir / 'report.json', dump_json(report))
        atomic_write_text(tmp_dir / 'memory_stats.json', dump_json(reconstruction.memory_stats))

    logger.info('reconstruction written to %s in %.2fs', out_dir, elapsed)
    return report


def _load_predictions(pred, gt_pointmaps):
    pred = Path(pred)
    if pred.joinpath(ARRAY_MANIFEST_NAME).is_file():
        pointmaps, _, _ = load_pointmaps(pred)
        return pointmaps
    if pred.joinpath('pointmaps', ARRAY_MANIFEST_NAME).is_file():
        pointmaps, _, _ = load_pointmaps(pred / 'pointmaps')
        return pointmaps

    ply_dir = pred / 'frames' if pred.joinpath('frames').is_dir() else pred
    paths = list(find_point_clouds(ply_dir))
    if len(paths) != len(gt_pointmaps):
        raise DimensionError(f'{len(paths)} predicted point clouds but {len(gt_pointmaps)} ground-truth frames')

    pointmaps = []
    for path, gt in zip(paths, gt_pointmaps):
        points, _ = read_point_cloud(path)
        if points.shape[0] != gt.valid.size:
            raise DimensionError(
                f'"{path.name}" holds {points.shape[0]} points, expected one per pixel ({gt.valid.size})'
            )
        points = points.reshape(gt.shape + (3,))
        pointmaps.append(Pointmap(points, np.all(np.isfinite(points), axis=-1)))

    return pointmaps


def cmd_eval(pred, gt, report_path=None):
    """
    Evaluates predicted pointmaps (a reconstruct output directory, a
    pointmap dump or a directory of per-frame PLY files with one point per
    pixel) against the ground truth of a scene dump.

    Returns
    -------
    ``dict`` :
        The metrics report
    """
    scene = load_scene(gt)
    pred_pointmaps = _load_predictions(pred, scene.gt_pointmaps)
    if len(pred_pointmaps) != len(scene.gt_pointmaps):
        raise DimensionError(
            f'{len(pred_pointmaps)} predicted pointmaps but {len(scene.gt_pointmaps)} ground-truth frames'
        )

    report = evaluate_reconstruction(pred_pointmaps, scene.gt_pointmaps).to_dict()
    if report_path is not None:
        atomic_write_text(report_path, dump_json(report))
    return report


def cmd_ablate(checkpoint, suite, out_path, data_dir=None, n_scenes=None, seed=None):
    """
    Runs an ablation suite with a checkpoint on the scene dumps in
    ``data_dir`` (or on scenes rendered from the checkpoint's run config)
    and writes the comparative JSON table to ``out_path``.

    Returns
    -------
    ``dict`` :
        The table document
    """
    model, manifest = load_checkpoint(checkpoint)
    run_config = _checkpoint_run_config(manifest)
    seed = seed if seed is not None else run_config.seed

    if data_dir is not None:
        scenes = _load_scenes(data_dir)
    else:
        data = run_config.data if n_scenes is None else replace(run_config.data, n_scenes=n_scenes)
        scenes = generate_training_scenes(replace(run_config, data=data, seed=seed).check())

    frame = run_suite(model, scenes, suite, memory_config=run_config.memory, seed=seed)
    document = ablation_table(frame, suite, memory_config=run_config.memory)
    diagnostics = validate_ablation_table(document)
    if diagnostics:
        raise ConfigError('ablation table failed validation', diagnostics)

    atomic_write_text(out_path, dump_json(document))
    logger.info('ablation %s table written to %s', suite, out_path)
    return document


def _positive_int(value):
    try:
        number = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected a positive integer, got {value!r}')
    if number < 1:
        raise argparse.ArgumentTypeError(f'expected a positive integer, got {value!r}')
    return number


def build_parser():
    parser = argparse.ArgumentParser(
        prog='pymemrecon',
        description='Incremental 3D reconstruction with a two-tier spatial memory.',
    )
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument(
        '--log-level', choices=LOG_LEVELS, type=str.upper, default=None,
        help=f'log verbosity (default: ${LOG_LEVEL_ENV_VAR} or WARNING)',
    )
    subparsers = parser.add_subparsers(dest='command', metavar='<command>')
    subparsers.required = True

    gen_data = subparsers.add_parser('gen-data', help='render synthetic scenes to disk')
    gen_data.add_argument('--config', help='run config JSON (default: built-in defaults)')
    gen_data.add_argument('--out', required=True, help='output directory')

    train_ = subparsers.add_parser('train', help='train a model')
    train_.add_argument('--config', help='run config JSON (default: built-in defaults)')
    train_.add_argument('--out', required=True, help='output directory')
    train_.add_argument('--data', help='directory of scene dumps (default: render from the config)')

    reconstruct = subparsers.add_parser('reconstruct', help='reconstruct a frame directory')
    reconstruct.add_argument('--checkpoint', required=True, help='checkpoint directory')
    reconstruct.add_argument('--input', required=True, help='frame directory or scene dump')
    reconstruct.add_argument('--out', required=True, help='output directory')
    reconstruct.add_argument('--unordered', action='store_true', help='treat the frames as an unordered collection')
    reconstruct.add_argument('--strategy', choices=STRATEGIES, default='mst', help='unordered frame ordering')
    reconstruct.add_argument('--clip', choices=('on', 'off'), default='on', help='attention clipping')
    reconstruct.add_argument('--lt-max-tokens', type=_positive_int, default=None, help='long-term memory budget')
    reconstruct.add_argument(
        '--confidence', choices=CONFIDENCE_KINDS, default='sigmoid', help='view confidence for unordered mode'
    )
    reconstruct.add_argument('--workers', type=_positive_int, default=None, help='pair scoring threads')

    eval_ = subparsers.add_parser('eval', help='evaluate a reconstruction')
    eval_.add_argument('--pred', required=True, help='reconstruct output, pointmap dump or PLY directory')
    eval_.add_argument('--gt', required=True, help='ground-truth scene dump')
    eval_.add_argument('--report', help='report JSON path (default: print to stdout)')

    ablate = subparsers.add_parser('ablate', help='run an ablation suite')
    ablate.add_argument('--checkpoint', required=True, help='checkpoint directory')
    ablate.add_argument('--suite', required=True, choices=SUITES, help='ablation suite')
    ablate.add_argument('--out', required=True, help='table JSON path')
    ablate.add_argument('--data', help='directory of scene dumps (default: render from the checkpoint config)')
    ablate.add_argument('--n-scenes', type=_positive_int, default=None, help='number of rendered scenes')
    ablate.add_argument('--seed', type=int, default=None, help='scene and outlier seed')

    return parser


def _dispatch(args):
    if args.command == 'gen-data':
        cmd_gen_data(_load_run_config(args.config), args.out)
    elif args.command == 'train':
        cmd_train(_load_run_config(args.config), args.out, data_dir=args.data)
    elif args.command == 'reconstruct':
        report = cmd_reconstruct(
            args.checkpoint, args.input, args.out,
            unordered=args.unordered, strategy=args.strategy, clip=args.clip == 'on',
            lt_max_tokens=args.lt_max_tokens, confidence_kind=args.confidence, workers=args.workers,
        )
        print(f'reconstructed {report["n_frames"]} frames, max {report["max_tokens"]} memory tokens')
    elif args.command == 'eval':
        report = cmd_eval(args.pred, args.gt, args.report)
        if args.report is None:
            sys.stdout.write(dump_json(report))
    else:
        cmd_ablate(
            args.checkpoint, args.suite, args.out,
            data_dir=args.data, n_scenes=args.n_scenes, seed=args.seed,
        )


def main(argv=None):
    """
    Runs the command line and returns the exit code.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE

    try:
        configure_logging(args.log_level)
        _dispatch(args)
    except ConfigError as exc:
        print(f'pymemrecon: error: {exc.args[0]}', file=sys.stderr)
        for diagnostic in exc.diagnostics:
            print(diagnostic, file=sys.stderr)
        return EXIT_USAGE
    except (MemReconError, OSError) as exc:
        print(f'pymemrecon: error: {exc}', file=sys.stderr)
        return EXIT_FAILURE

    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
