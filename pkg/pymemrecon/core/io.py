"""
On-disk formats: PLY point clouds, PPM frames, model checkpoints, scene
dumps and pointmap dumps. Every writer is atomic - files via a temporary
file and rename, directories via a temporary directory and rename.
"""
__all__ = [
    'load_checkpoint',
    'load_frames',
    'load_pointmaps',
    'load_scene',
    'read_image',
    'read_point_cloud',
    'save_checkpoint',
    'save_pointmaps',
    'save_scene',
    'write_image',
    'write_point_cloud',
    'CAMERA_FILE_NAME',
    'CHECKPOINT_KIND',
    'POINTMAPS_KIND',
]


import io
import json
import logging

from pathlib import Path

import numpy as np

from PIL import Image
from plyfile import (
    PlyData,
    PlyElement,
)

from .grids import Pointmap
from .model import (
    ModelConfig,
    ReconstructionModel,
)
from .scenes import (
    SceneSample,
    backproject,
)
from ..exceptions import CheckpointError
from ..utils import (
    atomic_directory,
    atomic_write_bytes,
    atomic_write_text,
    dump_json,
    load_arrays,
    save_arrays,
)


logger = logging.getLogger(__name__)


CAMERA_FILE_NAME = 'camera.json'

CHECKPOINT_KIND = 'checkpoint'

POINTMAPS_KIND = 'pointmaps'


def write_point_cloud(path, points, confidence=None):
    """
    Writes an ``(N, 3)`` point cloud as a binary little-endian PLY file,
    with an optional per-point ``quality`` property holding confidences.
    """
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    dtype = [('x', '<f4'), ('y', '<f4'), ('z', '<f4')]
    if confidence is not None:
        dtype.append(('quality', '<f4'))

    vertices = np.empty(points.shape[0], dtype=dtype)
    vertices['x'], vertices['y'], vertices['z'] = points[:, 0], points[:, 1], points[:, 2]
    if confidence is not None:
        vertices['quality'] = np.asarray(confidence, dtype=np.float32).reshape(-1)

    buffer = io.BytesIO()
    PlyData([PlyElement.describe(vertices, 'vertex')], text=False, byte_order='<').write(buffer)
    atomic_write_bytes(path, buffer.getvalue())


def read_point_cloud(path):
    """
    Reads the vertices of a PLY file.

    Returns
    -------
    ``tuple`` :
        ``(points, quality)`` - an ``(N, 3)`` array and the ``(N,)``
        quality values, or ``None`` if the file has no quality property
    """
    vertices = PlyData.read(str(path))['vertex']
    points = np.stack([vertices['x'], vertices['y'], vertices['z']], axis=-1).astype(np.float64)
    names = vertices.data.dtype.names
    quality = np.asarray(vertices['quality'], dtype=np.float64) if 'quality' in names else None
    return points, quality


def write_image(path, image):
    """
    Writes a ``uint8`` ``(H, W, 3)`` image; the format follows the file
    extension (PPM for scene dumps).
    """
    path = Path(path)
    buffer = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(
        buffer, format=Image.registered_extensions()[path.suffix.lower()]
    )
    atomic_write_bytes(path, buffer.getvalue())


def read_image(path):
    with Image.open(path) as image:
        return np.asarray(image.convert('RGB'), dtype=np.uint8)


def load_frames(paths):
    return [read_image(path) for path in paths]


def save_checkpoint(directory, model, run_config=None, step=0):
    """
    Saves model parameters as a flat-binary array dump whose manifest
    echoes the run config. Equal parameters and configs give byte-identical
    directories.

    Parameters
    ----------
    ``directory`` : ``str``, ``pathlib.Path``
        The checkpoint directory - replaced if it exists

    ``model`` : ``pymemrecon.core.model.ReconstructionModel``
        The model to save

    ``run_config`` : ``pymemrecon.config.RunConfig``, ``None``
        The run config to echo; without one only the model config is stored

    ``step`` : ``int``
        The number of optimizer steps taken

    Returns
    -------
    ``dict`` :
        The manifest
    """
    extra = {
        'kind': CHECKPOINT_KIND,
        'model_config': model.config.to_dict(),
        'run_config': run_config.to_dict() if run_config is not None else None,
        'step': int(step),
    }
    with atomic_directory(directory) as tmp_dir:
        manifest = save_arrays(tmp_dir, model.state_dict(), extra=extra)

    logger.info('checkpoint written to %s (%d parameters)', directory, model.num_parameters)
    return manifest


def load_checkpoint(directory):
    """
    Loads a checkpoint written by ``save_checkpoint``.

    Returns
    -------
    ``tuple`` :
        ``(model, manifest)``

    Raises
    ------
    ``pymemrecon.exceptions.CheckpointError`` :
        If the directory is not a readable checkpoint
    """
    arrays, manifest = load_arrays(directory)
    if manifest.get('kind') != CHECKPOINT_KIND:
        raise CheckpointError(f'"{directory}" is not a model checkpoint')

    try:
        config = ModelConfig(**manifest['model_config'])
    except (KeyError, TypeError):
        raise CheckpointError(f'"{directory}" has an unreadable model config')

    model = ReconstructionModel(config)
    model.load_state_dict(arrays)

    return model, manifest


def save_scene(directory, scene):
    """
    Dumps a scene: ``frames/NNNN.ppm`` images, depth maps and validity
    masks as a flat-binary array dump under ``depths/``, and intrinsics,
    poses and metadata in ``camera.json``.
    """
    with atomic_directory(directory) as tmp_dir:
        for position, frame in enumerate(scene.frames):
            write_image(tmp_dir / 'frames' / f'{position:04d}.ppm', frame)

        arrays = {}
        for position, (depth, pointmap) in enumerate(zip(scene.depths, scene.gt_pointmaps)):
            arrays[f'depth.{position}'] = depth
            arrays[f'valid.{position}'] = pointmap.valid
        save_arrays(tmp_dir / 'depths', arrays, extra={'kind': 'depths'})

        camera = {
            'schema_version': 1,
            'intrinsics': np.asarray(scene.intrinsics).tolist(),
            'poses': [np.asarray(pose).tolist() for pose in scene.poses],
            'frame_indices': [int(i) for i in scene.frame_indices],
            'diameter': float(scene.diameter),
            'seed': scene.seed,
        }
        atomic_write_text(tmp_dir / CAMERA_FILE_NAME, dump_json(camera))

    logger.info('scene with %d frames written to %s', len(scene), directory)


def load_scene(directory):
    """
    Loads a scene dump; ground-truth pointmaps are recomputed from the
    stored depth maps, intrinsics and poses.

    Raises
    ------
    ``pymemrecon.exceptions.CheckpointError`` :
        If the directory is not a readable scene dump
    """
    directory = Path(directory)
    try:
        camera = json.loads((directory / CAMERA_FILE_NAME).read_text())
        intrinsics = np.asarray(camera['intrinsics'], dtype=np.float64)
        poses = [np.asarray(pose, dtype=np.float64) for pose in camera['poses']]
    except (OSError, ValueError, KeyError, TypeError):
        raise CheckpointError(f'"{directory}" is not a readable scene dump')

    arrays, _ = load_arrays(directory / 'depths')
    frame_paths = sorted((directory / 'frames').glob('*.ppm'))
    if len(frame_paths) != len(poses):
        raise CheckpointError(f'"{directory}" has {len(frame_paths)} frames but {len(poses)} poses')

    frames, depths, pointmaps = [], [], []
    for position, (path, pose) in enumerate(zip(frame_paths, poses)):
        depth = arrays[f'depth.{position}'].astype(np.float64)
        valid = arrays[f'valid.{position}']
        points = np.where(valid[..., None], backproject(depth, intrinsics, pose), 0.0)
        frames.append(read_image(path))
        depths.append(depth)
        pointmaps.append(Pointmap(points, valid))

    return SceneSample(
        frames=frames,
        intrinsics=intrinsics,
        poses=poses,
        gt_pointmaps=pointmaps,
        depths=depths,
        diameter=float(camera.get('diameter', 0.0)),
        frame_indices=list(camera.get('frame_indices', range(len(frames)))),
        seed=camera.get('seed'),
    )


def save_pointmaps(directory, pointmaps, confidences=None, extra=None):
    """
    Dumps pointmaps (points and validity masks, plus optional confidence
    maps) in the flat-binary array dump format.
    """
    arrays = {}
    for position, pointmap in enumerate(pointmaps):
        arrays[f'points.{position}'] = pointmap.array
        arrays[f'valid.{position}'] = pointmap.valid
        if confidences is not None:
            arrays[f'confidence.{position}'] = np.asarray(confidences[position])

    manifest_extra = dict(extra or {})
    manifest_extra.update(kind=POINTMAPS_KIND, count=len(pointmaps))
    with atomic_directory(directory) as tmp_dir:
        return save_arrays(tmp_dir, arrays, extra=manifest_extra)


def load_pointmaps(directory):
    """
    Loads a pointmap dump.

    Returns
    -------
    ``tuple`` :
        ``(pointmaps, confidences, manifest)`` - ``confidences`` is ``None``
        when the dump has none
    """
    arrays, manifest = load_arrays(directory)
    if manifest.get('kind') != POINTMAPS_KIND:
        raise CheckpointError(f'"{directory}" is not a pointmap dump')

    count = int(manifest['count'])
    pointmaps = [
        Pointmap(arrays[f'points.{i}'].astype(np.float64), arrays[f'valid.{i}'])
        for i in range(count)
    ]
    confidences = None
    if count and 'confidence.0' in arrays:
        confidences = [arrays[f'confidence.{i}'] for i in range(count)]

    return pointmaps, confidences, manifest
