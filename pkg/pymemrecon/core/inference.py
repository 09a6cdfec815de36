"""
Reconstruction drivers.

``reconstruct_ordered`` consumes frames in the given order: a two-view
initialisation on the first two frames, then one memory-conditioned step per
frame. ``reconstruct_unordered`` first scores every ordered frame pair with
the two-view initialisation, starts from the most confident pair and then
either walks the maximum spanning tree of the pair scores or greedily picks
the frame with the highest predicted confidence against the current memory.
"""
__all__ = [
    'PairGraph',
    'Reconstruction',
    'maximum_spanning_tree',
    'reconstruct_ordered',
    'reconstruct_unordered',
    'run_report',
    'score_pairs',
    'traversal_order',
    'view_confidence',
    'CONFIDENCE_KINDS',
    'STRATEGIES',
]


import logging
import time

from concurrent.futures import ThreadPoolExecutor
from dataclasses import (
    dataclass,
    field,
)
from typing import Optional

import numpy as np
import psutil

from scipy.sparse.csgraph import minimum_spanning_tree

from .grids import (
    ConfidenceMap,
    TokenGrid,
)
from .memory import (
    MemoryBank,
    MemoryConfig,
    memory_read,
    working_insert,
)
from .tensor import no_grad
from ..exceptions import DegenerateInputError


logger = logging.getLogger(__name__)


CONFIDENCE_KINDS = ('sigmoid', 'exp')

STRATEGIES = ('mst', 'next_best')


def _mapped(conf):
    return conf.array if isinstance(conf, ConfidenceMap) else np.asarray(conf)


def view_confidence(conf1, conf2, kind='sigmoid'):
    """
    View-selection score of a pair of confidence maps.

    With ``kind='sigmoid'`` each map contributes the spatial mean of
    ``(C - 1) / C``, so the score lies in ``(0, 2)``; with ``kind='exp'``
    each contributes the spatial mean of ``C`` itself.

    Examples
    --------
    >>> view_confidence(np.full((4, 4), 2.0), np.full((4, 4), 2.0))
    1.0
    """
    if kind not in CONFIDENCE_KINDS:
        raise ValueError(f'unknown confidence kind "{kind}", expected one of {list(CONFIDENCE_KINDS)}')

    c1, c2 = _mapped(conf1).astype(np.float64), _mapped(conf2).astype(np.float64)
    if kind == 'exp':
        return float(c1.mean() + c2.mean())
    return float(((c1 - 1.0) / c1).mean() + ((c2 - 1.0) / c2).mean())


@dataclass
class PairGraph:
    """
    Dense pair graph over ``n`` frames. ``directed[i, j]`` is the score of
    initialising with frame ``i`` as reference and ``j`` as target; the
    symmetric edge score is the mean of both directions. The diagonal is
    unused.
    """
    directed: np.ndarray

    def __post_init__(self):
        self.directed = np.asarray(self.directed, dtype=np.float64)
        if self.directed.ndim != 2 or self.directed.shape[0] != self.directed.shape[1]:
            raise ValueError(f'pair scores must be a square matrix, got shape {self.directed.shape}')
        off_diagonal = ~np.eye(self.n, dtype=bool)
        if not np.all(np.isfinite(self.directed[off_diagonal])):
            raise ValueError('pair scores must be finite')

    @property
    def n(self):
        return self.directed.shape[0]

    @property
    def scores(self):
        symmetric = 0.5 * (self.directed + self.directed.T)
        np.fill_diagonal(symmetric, 0.0)
        return symmetric

    def initial_pair(self):
        """
        The most confident pair, ordered by its better direction; ties go
        to the lower indices.
        """
        scores = self.scores
        best, pair = -np.inf, (0, 1)
        for i in range(self.n):
            for j in range(i + 1, self.n):
                if scores[i, j] > best:
                    best, pair = scores[i, j], (i, j)
        i, j = pair
        return (i, j) if self.directed[i, j] >= self.directed[j, i] else (j, i)


def maximum_spanning_tree(scores):
    """
    Edges ``(i, j)`` with ``i < j`` of a maximum-weight spanning tree of a
    symmetric score matrix, sorted. Computed as the minimum spanning tree of
    ``max + 1 - score``, which keeps every off-diagonal weight positive.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    if n < 2:
        return []

    off_diagonal = ~np.eye(n, dtype=bool)
    weights = np.where(off_diagonal, scores[off_diagonal].max() + 1.0 - scores, 0.0)
    tree = minimum_spanning_tree(weights).tocoo()

    return sorted((int(min(i, j)), int(max(i, j))) for i, j in zip(tree.row, tree.col))


def traversal_order(edges, scores, initial_pair):
    """
    Visits the spanning tree from the initial pair, always following the
    highest-scoring tree edge from a visited to an unvisited frame.
    """
    order = list(initial_pair)
    visited = set(order)
    nodes = {node for edge in edges for node in edge} | visited

    while len(visited) < len(nodes):
        candidates = [
            (scores[i, j], -k, k)
            for i, j in edges
            for a, k in ((i, j), (j, i))
            if a in visited and k not in visited
        ]
        if not candidates:
            raise DegenerateInputError('the spanning tree does not connect all frames')
        _, _, chosen = max(candidates)
        order.append(chosen)
        visited.add(chosen)

    return order


@dataclass
class Reconstruction:
    """
    Per-frame predictions in the coordinate frame of the first processed
    frame, indexed by input frame. ``order`` lists input indices in
    processing order.
    """
    pointmaps: list
    confidences: list
    order: list
    memory_stats: dict = field(default_factory=dict)
    step_tokens: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    strategy: str = 'ordered'
    memory_config: Optional[MemoryConfig] = None
    pair_graph: Optional[PairGraph] = None

    def __len__(self):
        return len(self.pointmaps)


class _IncrementalRun:
    """
    Sequential reconstruction state: the memory bank, the carried-over
    step output and the predictions collected so far. Sequence positions
    are the frame indices seen by the model; ``order`` maps them back to
    input frames.
    """
    def __init__(self, model, frames, memory_config, memory_hook=None, visuals=None):
        self.model = model
        self.frames = frames
        self.bank = MemoryBank(memory_config)
        self.memory_hook = memory_hook
        self.visuals = visuals if visuals is not None else {}
        self.order = []
        self.preds = {}
        self.prev = None
        self.step_tokens = []
        self.step_seconds = []

    def visual(self, input_index, position):
        cached = self.visuals.get(input_index)
        if cached is None:
            return self.model.encode_image(self.frames[input_index], position)
        return TokenGrid(cached.tokens, position, 'visual')

    def _record(self, output, started):
        self.preds[self.order[output.frame_index]] = output.pred
        working_insert(self.bank, output.new_key, output.new_value)
        self.prev = output
        self.step_tokens.append(self.bank.total_tokens)
        self.step_seconds.append(time.perf_counter() - started)

    def start(self, first, second):
        started = time.perf_counter()
        self.order = [first, second]
        output = self.model.initialize(
            None, None, visuals=(self.visual(first, 0), self.visual(second, 1))
        )
        self._record(output, started)

    def push(self, input_index):
        started = time.perf_counter()
        position = len(self.order)
        self.order.append(input_index)
        if self.memory_hook is not None:
            self.memory_hook(self.bank, position)
        output = self.model.forward_step(
            None,
            self.prev.next_query,
            self.bank,
            prev_visual=self.prev.visual,
            mode='infer',
            visual=self.visual(input_index, position),
        )
        self._record(output, started)

    def score(self, input_index, kind):
        """
        Predicted view confidence of a candidate frame against the current
        memory, leaving the bank untouched.
        """
        visual = self.visual(input_index, len(self.order))
        fused, _ = memory_read(self.prev.next_query, self.bank, mode='infer', track=False)
        target, reference = self.model.decode(visual, fused)
        return view_confidence(
            self.model.head_out(reference)[1], self.model.head_out_target(target)[1], kind
        )

    def finish(self, strategy, pair_graph=None):
        self.preds[self.order[-1]] = self.prev.target_pred
        n = len(self.frames)
        return Reconstruction(
            pointmaps=[self.preds[i][0].detach() for i in range(n)],
            confidences=[self.preds[i][1].array.copy() for i in range(n)],
            order=list(self.order),
            memory_stats=self.bank.stats.to_dict(),
            step_tokens=list(self.step_tokens),
            step_seconds=list(self.step_seconds),
            strategy=strategy,
            memory_config=self.bank.config,
            pair_graph=pair_graph,
        )


def _check_frames(frames):
    if len(frames) < 2:
        raise DegenerateInputError(f'reconstruction needs at least 2 frames, got {len(frames)}')


def reconstruct_ordered(model, frames, memory_config=None, memory_hook=None):
    """
    Online reconstruction of frames in their given order, with attention
    clipping (unless disabled in the memory config) and no dropout.

    Parameters
    ----------
    ``model`` : ``pymemrecon.core.model.ReconstructionModel``
        The trained model

    ``frames`` : ``list``
        ``(H, W, 3)`` frames

    ``memory_config`` : ``pymemrecon.core.memory.MemoryConfig``, ``None``
        Memory budget, gating and clipping settings

    ``memory_hook`` : ``callable``, ``None``
        Called as ``hook(bank, position)`` before every memory-conditioned
        step

    Returns
    -------
    ``pymemrecon.core.inference.Reconstruction``

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If fewer than two frames are given
    """
    _check_frames(frames)

    with no_grad():
        run = _IncrementalRun(model, frames, memory_config, memory_hook)
        run.start(0, 1)
        for input_index in range(2, len(frames)):
            run.push(input_index)
        reconstruction = run.finish('ordered')

    logger.info(
        'ordered reconstruction of %d frames finished with %d memory tokens',
        len(frames), run.bank.total_tokens
    )
    return reconstruction


def score_pairs(model, visuals, kind='sigmoid', workers=None):
    """
    Scores every ordered pair ``(i, j)`` of encoded frames by the view
    confidence of the two-view initialisation with ``i`` as reference and
    ``j`` as target.

    Parameters
    ----------
    ``model`` : ``pymemrecon.core.model.ReconstructionModel``
        The trained model

    ``visuals`` : ``list``
        Visual token grids of the frames

    ``kind`` : ``str``
        ``'sigmoid'`` or ``'exp'`` view confidence

    ``workers`` : ``int``, ``None``
        Thread pool size for scoring; sequential when ``None`` or ``1``

    Returns
    -------
    ``pymemrecon.core.inference.PairGraph``
    """
    n = len(visuals)
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]

    def score(pair):
        i, j = pair
        with no_grad():
            output = model.initialize(
                None,
                None,
                visuals=(
                    TokenGrid(visuals[i].tokens, 0, 'visual'),
                    TokenGrid(visuals[j].tokens, 1, 'visual'),
                ),
            )
        return view_confidence(output.pred[1], output.target_pred[1], kind)

    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            values = list(executor.map(score, pairs))
    else:
        values = [score(pair) for pair in pairs]

    directed = np.zeros((n, n))
    for (i, j), value in zip(pairs, values):
        directed[i, j] = value

    return PairGraph(directed)


def reconstruct_unordered(model, frames, strategy='mst', memory_config=None,
                          confidence_kind='sigmoid', memory_hook=None, workers=None):
    """
    Offline reconstruction of an unordered frame collection.

    Every frame is encoded once and every ordered pair scored with the
    two-view initialisation; the most confident pair initialises the
    reconstruction. The remaining frames follow either the traversal of the
    maximum spanning tree of the pair scores (``'mst'``) or, one at a time,
    the frame with the highest view confidence against the current memory
    (``'next_best'``). Two frames are reconstructed in their given order,
    exactly as ``reconstruct_ordered`` would.

    Parameters
    ----------
    ``model`` : ``pymemrecon.core.model.ReconstructionModel``
        The trained model

    ``frames`` : ``list``
        ``(H, W, 3)`` frames in any order

    ``strategy`` : ``str``
        ``'mst'`` or ``'next_best'``

    ``memory_config`` : ``pymemrecon.core.memory.MemoryConfig``, ``None``
        Memory settings

    ``confidence_kind`` : ``str``
        View confidence used for pair scoring and view selection

    ``memory_hook`` : ``callable``, ``None``
        As for ``reconstruct_ordered``

    ``workers`` : ``int``, ``None``
        Thread pool size for pair scoring

    Returns
    -------
    ``pymemrecon.core.inference.Reconstruction`` :
        Predictions indexed by input frame, with ``order`` holding the
        processing order

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If fewer than two frames are given
    """
    _check_frames(frames)
    if strategy not in STRATEGIES:
        raise ValueError(f'unknown strategy "{strategy}", expected one of {list(STRATEGIES)}')

    with no_grad():
        visuals = {i: model.encode_image(frame, i) for i, frame in enumerate(frames)}
    graph = score_pairs(model, [visuals[i] for i in range(len(frames))], confidence_kind, workers)
    # a pair has nothing to order; the first input frame stays the world frame
    first, second = graph.initial_pair() if len(frames) > 2 else (0, 1)
    logger.info('unordered reconstruction: initial pair (%d, %d)', first, second)

    with no_grad():
        run = _IncrementalRun(model, frames, memory_config, memory_hook, visuals)
        run.start(first, second)

        if strategy == 'mst':
            scores = graph.scores
            order = traversal_order(maximum_spanning_tree(scores), scores, (first, second))
            for input_index in order[2:]:
                run.push(input_index)
        else:
            remaining = [i for i in range(len(frames)) if i not in (first, second)]
            while remaining:
                candidate_scores = [run.score(i, confidence_kind) for i in remaining]
                chosen = remaining[int(np.argmax(candidate_scores))]
                run.push(chosen)
                remaining.remove(chosen)

        return run.finish(strategy, pair_graph=graph)


def run_report(reconstruction, elapsed_seconds=None):
    """
    JSON-compatible run report: processing order, per-step token counts and
    timings, memory settings and event counts, and the resident memory of
    this process.
    """
    config = reconstruction.memory_config or MemoryConfig()
    events = {}
    for event in reconstruction.memory_stats.get('events', []):
        events[event['event']] = events.get(event['event'], 0) + 1

    process = psutil.Process()

    return {
        'schema_version': 1,
        'strategy': reconstruction.strategy,
        'n_frames': len(reconstruction),
        'order': [int(i) for i in reconstruction.order],
        'memory': {
            'clip_enabled': config.clip_enabled,
            'long_term_enabled': config.long_term_enabled,
            'lt_max_tokens': config.lt_max_tokens,
            'events': events,
        },
        'step_tokens': [int(t) for t in reconstruction.step_tokens],
        'max_tokens': int(max(reconstruction.step_tokens, default=0)),
        'step_seconds': [float(s) for s in reconstruction.step_seconds],
        'elapsed_seconds': float(
            elapsed_seconds if elapsed_seconds is not None else sum(reconstruction.step_seconds)
        ),
        'rss_bytes': int(process.memory_info().rss),
    }
