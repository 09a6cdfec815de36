__all__ = [
    'find_frames',
    'find_point_clouds',
    'find_scene_dirs',
    'FRAME_EXTENSIONS',
]


import os

from pathlib import Path

from .io import CAMERA_FILE_NAME


FRAME_EXTENSIONS = ('.ppm', '.png', '.jpg', '.jpeg')


def _find_files(target_dir, suffixes, recursive):
    _target_dir = Path(target_dir).resolve()

    if not _target_dir.exists():
        raise FileNotFoundError(f'"{target_dir}" does not exist')

    if not recursive:
        yield from (
            _target_dir.joinpath(file_name)
            for file_name in sorted(os.listdir(_target_dir))
            if file_name.lower().endswith(suffixes)
        )
    else:
        for root, dir_names, file_names in os.walk(_target_dir):
            # walk subdirectories in sorted order
            dir_names.sort()
            yield from (
                Path(root).resolve().joinpath(file_name)
                for file_name in sorted(file_names)
                if file_name.lower().endswith(suffixes)
            )


def find_frames(target_dir, recursive=False):
    """
    Find and generate the paths of all frame images (PPM, PNG or JPEG) in
    the target directory, if it exists, in sorted file name order - the
    order in which an ordered reconstruction consumes them.

    If ``recursive`` is ``True`` then the search for frames in the target
    directory is recursive (look in the entire directory tree, directories
    in sorted order).

    Parameters
    ----------
    ``target_dir`` : ``str``, ``pathlib.Path``
        The target directory to search in

    ``recursive`` : ``bool``
        Whether the search should be recursive (top-down)

    Yields
    ------
    ``pathlib.Path``
        Paths of frame images in the target directory, if the directory
        exists

    Raises
    ------
    ``FileNotFoundError``
        If the target directory doesn't exist
    """
    yield from _find_files(target_dir, FRAME_EXTENSIONS, recursive)


def find_point_clouds(target_dir, recursive=False):
    """
    Find and generate the paths of all PLY files in the target directory,
    in sorted file name order.

    Raises
    ------
    ``FileNotFoundError``
        If the target directory doesn't exist
    """
    yield from _find_files(target_dir, ('.ply',), recursive)


def find_scene_dirs(target_dir, recursive=False):
    """
    Find and generate the scene dump directories in the target directory -
    directories holding a ``camera.json`` file. The target directory itself
    is generated first if it is a scene dump.

    Raises
    ------
    ``FileNotFoundError``
        If the target directory doesn't exist
    """
    _target_dir = Path(target_dir).resolve()

    if not _target_dir.exists():
        raise FileNotFoundError(f'"{target_dir}" does not exist')

    if _target_dir.joinpath(CAMERA_FILE_NAME).is_file():
        yield _target_dir

    if not recursive:
        for dir_name in sorted(os.listdir(_target_dir)):
            path = _target_dir.joinpath(dir_name)
            if path.is_dir() and path.joinpath(CAMERA_FILE_NAME).is_file():
                yield path
    else:
        for root, dir_names, _ in os.walk(_target_dir):
            dir_names.sort()
            for dir_name in dir_names:
                path = Path(root).resolve().joinpath(dir_name)
                if path.joinpath(CAMERA_FILE_NAME).is_file():
                    yield path
