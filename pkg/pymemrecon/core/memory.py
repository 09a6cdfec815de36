"""
The two-tier spatial memory.

The working memory holds the key/value tokens of the most recent frames; the
oldest frame drains into a long-term token store once the working memory is
full. Long-term tokens carry their accumulated attention, and when the store
grows past its budget only the most attended tokens are kept.

Attention columns are ordered long-term tokens first, then working frames
from oldest to newest.
"""
__all__ = [
    'AttentionRecord',
    'MemoryBank',
    'MemoryConfig',
    'MemoryStats',
    'WorkingFrame',
    'consolidate',
    'frame_similarity',
    'load_bank',
    'memory_read',
    'save_bank',
    'topk_indices',
    'total_tokens',
    'working_insert',
]


import logging

from dataclasses import (
    asdict,
    dataclass,
    field,
)
from pathlib import Path
from typing import Optional

import numpy as np

from .grids import TokenGrid
from .tensor import (
    Tensor,
    concat,
    index,
    matmul,
    softmax,
    sum as tensor_sum,
)
from ..exceptions import (
    CheckpointError,
    EmptyMemoryError,
    EMPTY_MEMORY_MSG,
)
from ..utils import (
    atomic_write_text,
    dump_json,
    load_arrays,
    save_arrays,
)


logger = logging.getLogger(__name__)


COSINE_EPS = 1e-12


@dataclass(frozen=True)
class MemoryConfig:
    """
    Memory budget and gating parameters.

    ``topk_keep`` defaults to half of ``lt_max_tokens`` when left as
    ``None``. ``long_term_enabled=False`` drops drained frames instead of
    storing them; ``clip_enabled=False`` reads with the plain softmax in
    inference mode.
    """
    w_max: int = 5
    sim_gate: float = 0.95
    clip: float = 5e-4
    lt_max_tokens: int = 4000
    topk_keep: Optional[int] = None
    clip_enabled: bool = True
    long_term_enabled: bool = True
    gating_enabled: bool = True

    @property
    def keep_tokens(self):
        return self.topk_keep if self.topk_keep is not None else self.lt_max_tokens // 2

    def validate(self):
        errors = []
        if not isinstance(self.w_max, int) or self.w_max < 1:
            errors.append(f'w_max: must be a positive integer, got {self.w_max!r}')
        if not -1.0 <= self.sim_gate <= 1.0:
            errors.append(f'sim_gate: must lie in [-1, 1], got {self.sim_gate!r}')
        if not 0.0 <= self.clip < 1.0:
            errors.append(f'clip: must lie in [0, 1), got {self.clip!r}')
        if not isinstance(self.lt_max_tokens, int) or self.lt_max_tokens < 1:
            errors.append(f'lt_max_tokens: must be a positive integer, got {self.lt_max_tokens!r}')
        elif self.topk_keep is not None and not (
            isinstance(self.topk_keep, int) and 1 <= self.topk_keep <= self.lt_max_tokens
        ):
            errors.append(
                f'topk_keep: must be an integer in [1, lt_max_tokens], got {self.topk_keep!r}'
            )
        return errors

    def to_dict(self):
        return asdict(self)


@dataclass
class WorkingFrame:
    keys: Tensor
    values: Tensor
    frame_index: int

    @property
    def num_tokens(self):
        return self.keys.shape[0]


@dataclass
class AttentionRecord:
    """
    Result of one memory read: the ``(P, T)`` attention weights actually
    used (after clipping or dropout and renormalisation), the number of
    entries that were zeroed and the rows that fell back to the unclipped
    distribution.
    """
    weights: np.ndarray
    clipped_count: int
    fallback_rows: int = 0
    num_long_term: int = 0
    frame_index: int = -1

    @property
    def clipped_fraction(self):
        return self.clipped_count / self.weights.size if self.weights.size else 0.0


@dataclass
class MemoryStats:
    """
    Bookkeeping history of a bank: one entry per read and one per memory
    event (gate skip, insertion, drain, drop, consolidation).
    """
    reads: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def to_dict(self):
        return {'schema_version': 1, 'reads': list(self.reads), 'events': list(self.events)}

    def dump(self, path):
        atomic_write_text(path, dump_json(self.to_dict()))


class MemoryBank:
    """
    Working memory (a list of ``WorkingFrame``) plus the long-term token
    store (``lt_keys``, ``lt_values``, ``acc_attn``, ``origin``). Keys and
    values are tensors so that training can backpropagate through memory
    reads; ``origin`` rows are ``(frame_index, patch_index)``.
    """
    def __init__(self, config=None):
        self.config = config if config is not None else MemoryConfig()
        self.working = []
        self.lt_keys = None
        self.lt_values = None
        self.acc_attn = np.zeros(0, dtype=np.float64)
        self.origin = np.zeros((0, 2), dtype=np.int64)
        self.stats = MemoryStats()

    def __repr__(self):
        return (
            f'{self.__module__}.{self.__class__.__name__}('
            f'working_frames={self.num_working_frames}, '
            f'long_term_tokens={self.long_term_tokens}'
            f')'
        )

    @property
    def num_working_frames(self):
        return len(self.working)

    @property
    def working_tokens(self):
        return int(sum(frame.num_tokens for frame in self.working))

    @property
    def long_term_tokens(self):
        return 0 if self.lt_keys is None else self.lt_keys.shape[0]

    @property
    def total_tokens(self):
        return self.working_tokens + self.long_term_tokens

    @property
    def working_frame_indices(self):
        return [frame.frame_index for frame in self.working]

    def keys_and_values(self):
        """
        Returns all keys and values as two ``(T, C)`` tensors in attention
        column order.
        """
        keys = [frame.keys for frame in self.working]
        values = [frame.values for frame in self.working]
        if self.lt_keys is not None:
            keys.insert(0, self.lt_keys)
            values.insert(0, self.lt_values)
        if not keys:
            raise EmptyMemoryError(EMPTY_MEMORY_MSG)
        if len(keys) == 1:
            return keys[0], values[0]
        return concat(keys, axis=0), concat(values, axis=0)

    def _record_event(self, event, **details):
        self.stats.events.append({'event': event, **details})
        logger.debug('memory %s: %s', event, details)


def total_tokens(bank):
    """
    Returns the number of tokens held in both memory tiers.
    """
    return bank.total_tokens


def _survivor_mask(keep):
    """
    Applies a boolean survivor mask row-wise, restoring rows in which no
    entry survives. Returns the mask and the number of restored rows.
    """
    mask = np.array(keep, dtype=bool)
    empty_rows = ~mask.any(axis=-1)
    mask[empty_rows] = True
    return mask, int(empty_rows.sum())


def memory_read(query, bank, mode='infer', rng=None, dropout_p=0.15, track=True):
    """
    Attention readout of the memory bank for a query token grid.

    ``A = softmax(Q K^T / sqrt(C))`` over all tokens of both tiers. In
    ``'train'`` mode each weight is dropped with probability ``dropout_p``
    and rows are renormalised; in ``'infer'`` mode weights below the clip
    threshold are zeroed and rows are renormalised. The fused features are
    ``A V + Q``. The pre-clip column sums of the long-term columns are added
    to the bank's accumulated attention.

    Parameters
    ----------
    ``query`` : ``pymemrecon.core.grids.TokenGrid``
        ``(P, C)`` query tokens

    ``bank`` : ``pymemrecon.core.memory.MemoryBank``
        The bank to read; must hold at least one token

    ``mode`` : ``str``
        ``'train'`` or ``'infer'``

    ``rng`` : ``numpy.random.Generator``, ``None``
        Dropout generator for ``'train'`` mode; required when ``dropout_p > 0``

    ``dropout_p`` : ``float``
        Attention dropout probability for ``'train'`` mode

    ``track`` : ``bool``
        Whether the read updates the accumulated attention and the read
        history; scoring reads that must leave the bank untouched pass
        ``False``

    Returns
    -------
    ``tuple`` :
        ``(fused, record)`` - a ``'fused'`` token grid with the query's
        frame index and the ``AttentionRecord`` of the read

    Raises
    ------
    ``pymemrecon.exceptions.EmptyMemoryError`` :
        If the bank holds no tokens
    ``ValueError`` :
        On an unknown mode, or a train-mode read with dropout but no
        ``rng``
    """
    if mode not in ('train', 'infer'):
        raise ValueError(f'unknown memory read mode "{mode}"')
    if mode == 'train' and dropout_p > 0 and rng is None:
        raise ValueError('train-mode attention dropout needs a random generator')
    if bank.total_tokens == 0:
        raise EmptyMemoryError(EMPTY_MEMORY_MSG)

    keys, values = bank.keys_and_values()
    q = query.tokens
    scores = matmul(q, keys.T) * (1.0 / np.sqrt(query.dim))
    attention = softmax(scores, axis=-1)
    raw = attention.data

    num_long_term = bank.long_term_tokens
    if num_long_term and track:
        bank.acc_attn = bank.acc_attn + raw[:, :num_long_term].sum(axis=0, dtype=np.float64)

    if mode == 'train':
        keep = rng.random(raw.shape) >= dropout_p if dropout_p > 0 else np.ones(raw.shape, dtype=bool)
        mask, fallback_rows = _survivor_mask(keep)
    elif bank.config.clip_enabled:
        mask, fallback_rows = _survivor_mask(raw >= bank.config.clip)
    else:
        mask, fallback_rows = np.ones(raw.shape, dtype=bool), 0

    clipped_count = int((~mask).sum())
    if clipped_count:
        kept = attention * mask.astype(attention.dtype)
        weights = kept / tensor_sum(kept, axis=-1, keepdims=True)
    else:
        weights = attention

    if fallback_rows:
        logger.warning(
            'memory read for frame %d: %d attention rows fell back to the unclipped distribution',
            query.frame_index, fallback_rows
        )

    fused = matmul(weights, values) + q
    record = AttentionRecord(
        weights=np.array(weights.data),
        clipped_count=clipped_count,
        fallback_rows=fallback_rows,
        num_long_term=num_long_term,
        frame_index=query.frame_index,
    )
    if not track:
        return TokenGrid(fused, query.frame_index, 'fused'), record

    bank.stats.reads.append({
        'frame_index': int(query.frame_index),
        'mode': mode,
        'working_frames': bank.num_working_frames,
        'long_term_tokens': num_long_term,
        'total_tokens': bank.total_tokens,
        'clipped_fraction': record.clipped_fraction,
        'fallback_rows': fallback_rows,
    })

    return TokenGrid(fused, query.frame_index, 'fused'), record


def frame_similarity(keys_a, keys_b):
    """
    Frame-level key similarity: the mean over patch positions of the cosine
    similarity between corresponding tokens of two ``(P, C)`` key grids.
    """
    a = keys_a.data if isinstance(keys_a, Tensor) else np.asarray(keys_a)
    b = keys_b.data if isinstance(keys_b, Tensor) else np.asarray(keys_b)
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    norms = np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), COSINE_EPS)
    return float(np.mean(np.sum(a * b, axis=-1) / norms))


def _drain(bank, frame):
    patches = np.arange(frame.num_tokens, dtype=np.int64)
    origin = np.stack([np.full_like(patches, frame.frame_index), patches], axis=-1)

    if bank.lt_keys is None:
        bank.lt_keys, bank.lt_values = frame.keys, frame.values
    else:
        bank.lt_keys = concat([bank.lt_keys, frame.keys], axis=0)
        bank.lt_values = concat([bank.lt_values, frame.values], axis=0)
    bank.acc_attn = np.concatenate([bank.acc_attn, np.zeros(frame.num_tokens)])
    bank.origin = np.concatenate([bank.origin, origin], axis=0)


def working_insert(bank, new_key, new_value):
    """
    Inserts a frame's key/value tokens into the working memory unless its
    keys are too similar to a frame already there (maximum frame similarity
    at or above ``sim_gate``). When the working memory then exceeds
    ``w_max`` frames, the oldest frame drains into the long-term store (or
    is dropped when long-term memory is disabled), after which the
    long-term store is consolidated.

    Returns
    -------
    ``bool`` :
        Whether the frame was inserted
    """
    if new_key.tokens.shape != new_value.tokens.shape:
        raise ValueError(
            f'key and value grids must be index-aligned, got {new_key.tokens.shape} and {new_value.tokens.shape}'
        )

    config = bank.config
    if config.gating_enabled and bank.working:
        similarity = max(frame_similarity(new_key.tokens, frame.keys) for frame in bank.working)
        if similarity >= config.sim_gate:
            bank._record_event('gate_skip', frame_index=int(new_key.frame_index), similarity=similarity)
            return False

    bank.working.append(WorkingFrame(new_key.tokens, new_value.tokens, new_key.frame_index))
    bank._record_event('insert', frame_index=int(new_key.frame_index))

    while len(bank.working) > config.w_max:
        oldest = bank.working.pop(0)
        if config.long_term_enabled:
            _drain(bank, oldest)
            bank._record_event('drain', frame_index=int(oldest.frame_index), tokens=oldest.num_tokens)
        else:
            bank._record_event('drop', frame_index=int(oldest.frame_index), tokens=oldest.num_tokens)

    consolidate(bank)

    return True


def topk_indices(acc_attn, k):
    """
    Indices of the ``k`` largest accumulated attention values, ties broken
    by the lower index, returned in increasing index order.
    """
    order = np.argsort(-np.asarray(acc_attn, dtype=np.float64), kind='stable')[:k]
    return np.sort(order)


def consolidate(bank):
    """
    Keeps only the ``keep_tokens`` most attended long-term tokens once the
    long-term store exceeds ``lt_max_tokens``; a no-op otherwise. Keys,
    values, accumulated attention and origins are filtered together and
    keep their relative order.
    """
    count = bank.long_term_tokens
    if count <= bank.config.lt_max_tokens:
        return bank

    kept = topk_indices(bank.acc_attn, bank.config.keep_tokens)
    bank.lt_keys = index(bank.lt_keys, kept)
    bank.lt_values = index(bank.lt_values, kept)
    bank.acc_attn = bank.acc_attn[kept]
    bank.origin = bank.origin[kept]
    bank._record_event('consolidate', before=count, after=int(kept.size))

    return bank


def save_bank(bank, directory):
    """
    Writes a snapshot of the bank (both tiers, accumulated attention and
    origins) in the flat-binary array dump format.
    """
    arrays = {}
    for position, frame in enumerate(bank.working):
        arrays[f'working.{position}.keys'] = frame.keys.data
        arrays[f'working.{position}.values'] = frame.values.data
    if bank.lt_keys is not None:
        arrays['long_term.keys'] = bank.lt_keys.data
        arrays['long_term.values'] = bank.lt_values.data
    arrays['long_term.acc_attn'] = bank.acc_attn
    arrays['long_term.origin'] = bank.origin

    return save_arrays(
        Path(directory),
        arrays,
        extra={
            'kind': 'memory_bank',
            'config': bank.config.to_dict(),
            'working_frame_indices': [int(i) for i in bank.working_frame_indices],
        },
    )


def load_bank(directory):
    """
    Restores a bank written by ``save_bank``.

    Raises
    ------
    ``pymemrecon.exceptions.CheckpointError`` :
        If the directory is not a memory bank snapshot
    """
    arrays, manifest = load_arrays(directory)
    if manifest.get('kind') != 'memory_bank':
        raise CheckpointError(f'"{directory}" is not a memory bank snapshot')

    bank = MemoryBank(MemoryConfig(**manifest['config']))
    for position, frame_index in enumerate(manifest['working_frame_indices']):
        bank.working.append(WorkingFrame(
            Tensor(arrays[f'working.{position}.keys']),
            Tensor(arrays[f'working.{position}.values']),
            frame_index,
        ))
    if 'long_term.keys' in arrays:
        bank.lt_keys = Tensor(arrays['long_term.keys'])
        bank.lt_values = Tensor(arrays['long_term.values'])
    bank.acc_attn = arrays['long_term.acc_attn'].astype(np.float64)
    bank.origin = arrays['long_term.origin'].astype(np.int64)

    return bank
