__all__ = [
    'atomic_directory',
    'atomic_write_bytes',
    'atomic_write_text',
    'blake2b_hash_iterable',
    'dump_json',
    'json_normalized_dict',
    'load_arrays',
    'save_arrays',
    'seed_stream',
    'ARRAY_MANIFEST_NAME',
    'INVALID_ARRAY_DUMP_MSG',
    'SEED_STREAMS',
]


import json
import os
import shutil
import tempfile
import textwrap

from contextlib import contextmanager
from hashlib import (
    blake2b,
)
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import CheckpointError


ARRAY_MANIFEST_NAME = 'manifest.json'


# Named random sub-streams of a run seed.
SEED_STREAMS = ('data', 'dropout', 'init', 'clip', 'eval')


INVALID_ARRAY_DUMP_MSG = textwrap.dedent(
    """
    Invalid array dump - the directory you are trying to load does not
    contain a readable manifest.json, or one of the flat binary files it
    lists is missing or has the wrong number of bytes for its shape.
    """
).strip()


# Storage dtypes of the flat binary dumps: floats are always written as
# little-endian 32-bit, integers and booleans keep an exact representation.
_STORAGE_DTYPES = {
    'f': np.dtype('<f4'),
    'i': np.dtype('<i8'),
    'u': np.dtype('<i8'),
    'b': np.dtype('|u1'),
}


def blake2b_hash_iterable(iterable):
    """
    Hashes an iterable of Python primitive values, using the Python
    implementation of the BLAKE2b cryptographic hash function.

    https://docs.python.org/3/library/hashlib.html#blake2

    The values can be a mixture of booleans, integers, floats, strings,
    bytes objects or NumPy arrays - arrays are hashed by their raw bytes in
    C order, everything else by its string representation.

    Parameters
    ----------
    ``iterable`` : An iterable composed of Python primitive values or arrays

    Returns
    -------
    ``str`` :
        The BLAKE2b hash string (message digest) of the iterable
    """
    values = iterable.tolist() if isinstance(iterable, pd.Series) else list(iterable)

    def to_bytes(val):
        if isinstance(val, bytes):
            return val
        if isinstance(val, np.ndarray):
            return np.ascontiguousarray(val).tobytes()
        return str(val).encode('utf8')

    hasher = blake2b()

    for val in values:
        hasher.update(to_bytes(val))

    return hasher.hexdigest()


def seed_stream(seed, name):
    """
    Returns an independent NumPy random generator for the named sub-stream
    of a run seed.

    Each named stream (e.g. ``'data'``, ``'dropout'``, ``'init'``) gets its
    own generator, so that changing how much randomness one part of a run
    consumes never shifts the numbers another part sees. The name is folded
    into the seed via its BLAKE2b digest rather than Python's salted
    ``hash()``, so streams are stable across interpreter runs.

    Parameters
    ----------
    ``seed`` : ``int``
        The run seed

    ``name`` : ``str``
        The sub-stream name, one of ``SEED_STREAMS``

    Returns
    -------
    ``numpy.random.Generator`` :
        A generator seeded from ``(seed, name)``

    Raises
    ------
    ``ValueError`` :
        On an unknown stream name
    """
    if name not in SEED_STREAMS:
        raise ValueError(f'unknown seed stream "{name}", expected one of {list(SEED_STREAMS)}')

    digest = blake2b(str(name).encode('utf8'), digest_size=8).digest()
    name_word = int.from_bytes(digest, 'little')

    return np.random.default_rng(np.random.SeedSequence([int(seed), name_word]))


def json_normalized_dict(nested_dict):
    """
    Returns a flat dict with JSON normalised keys - the keys are generated
    by flattening the hierarchies within the original dict, and key names
    indicate their position in the original hierarchy via dot separation,
    e.g.
    ::

        {'memory': {'clip': {'enabled': True}}} -> {'memory.clip.enabled': True}

    Parameters
    ----------
    ``nested_dict`` : ``typing.Mapping``
        A (possibly nested) dict of JSON-compatible values

    Returns
    -------
    ``dict`` :
        Flat dict with dotted keys
    """
    flat_df = pd.json_normalize(dict(nested_dict)).T
    flat_df = flat_df.copy(deep=True)
    flat_df.columns = pd.Index(['value'])

    return flat_df['value'].to_dict()


def dump_json(obj):
    """
    Serialises ``obj`` to a deterministic JSON string - sorted keys, fixed
    indentation and a trailing newline, so identical inputs always give
    byte-identical files.
    """
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + '\n'


def atomic_write_bytes(path, data):
    """
    Writes ``data`` to ``path`` via a temporary file in the same directory
    followed by a rename, so readers never observe a partially written
    file.

    Parameters
    ----------
    ``path`` : ``str``, ``pathlib.Path``
        The target file path

    ``data`` : ``bytes``
        The file content
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as tmp_file:
            tmp_file.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode('utf8'))


@contextmanager
def atomic_directory(path):
    """
    Context manager yielding a temporary directory next to ``path``; on a
    clean exit the temporary directory replaces ``path`` (any existing
    directory there is removed first), on an exception it is discarded.

    Parameters
    ----------
    ``path`` : ``str``, ``pathlib.Path``
        The final directory path

    Yields
    ------
    ``pathlib.Path`` :
        The temporary directory to populate
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_dir = Path(tempfile.mkdtemp(prefix=f'.{path.name}.', dir=path.parent))

    try:
        yield tmp_dir
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    else:
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp_dir, path)


def save_arrays(directory, arrays, extra=None):
    """
    Dumps named arrays into ``directory`` as one flat binary file per array
    (row-major, little-endian; floats stored as 32-bit) plus a
    ``manifest.json`` listing names, shapes and storage dtypes.

    Parameters
    ----------
    ``directory`` : ``str``, ``pathlib.Path``
        The dump directory - created if needed

    ``arrays`` : ``typing.Mapping``
        Ordered mapping of array name to ``numpy.ndarray``

    ``extra`` : ``typing.Mapping``, ``None``
        Additional JSON-compatible entries to store in the manifest

    Returns
    -------
    ``dict`` :
        The manifest that was written
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    blobs = []
    for index, (name, array) in enumerate(arrays.items()):
        array = np.asarray(array)
        try:
            storage = _STORAGE_DTYPES[array.dtype.kind]
        except KeyError:
            raise CheckpointError(f'unsupported array dtype "{array.dtype}" for "{name}"')
        blob = np.ascontiguousarray(array, dtype=storage).tobytes()
        file_name = f'{index:04d}.bin'
        atomic_write_bytes(directory / file_name, blob)
        blobs.append(blob)
        entries.append({
            'name': name,
            'shape': list(array.shape),
            'dtype': storage.str,
            'kind': array.dtype.kind,
            'file': file_name,
        })

    manifest = dict(extra or {})
    manifest['arrays'] = entries
    manifest['digest'] = blake2b_hash_iterable(blobs)
    atomic_write_text(directory / ARRAY_MANIFEST_NAME, dump_json(manifest))

    return manifest


def load_arrays(directory):
    """
    Loads a dump written by ``save_arrays``.

    Parameters
    ----------
    ``directory`` : ``str``, ``pathlib.Path``
        The dump directory

    Returns
    -------
    ``tuple`` :
        ``(arrays, manifest)`` - an ordered dict of name to array (floats
        come back as ``float32``, booleans as ``bool``) and the manifest dict

    Raises
    ------
    ``pymemrecon.exceptions.CheckpointError`` :
        If the manifest or any listed file is missing or inconsistent
    """
    directory = Path(directory)

    try:
        with open(directory / ARRAY_MANIFEST_NAME, 'r') as manifest_file:
            manifest = json.load(manifest_file)
        entries = manifest['arrays']
    except (OSError, ValueError, KeyError, TypeError):
        raise CheckpointError(INVALID_ARRAY_DUMP_MSG)

    arrays = {}
    for entry in entries:
        try:
            blob = (directory / entry['file']).read_bytes()
            array = np.frombuffer(blob, dtype=np.dtype(entry['dtype']))
            array = array.reshape(entry['shape'])
        except (OSError, ValueError, KeyError, TypeError):
            raise CheckpointError(INVALID_ARRAY_DUMP_MSG)

        if entry.get('kind') == 'b':
            array = array.astype(bool)
        elif array.dtype.kind == 'f':
            array = array.astype(np.float32)
        else:
            array = array.astype(np.int64)

        arrays[entry['name']] = array

    return arrays, manifest
