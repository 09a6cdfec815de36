"""
Reconstruction metrics: similarity alignment of predictions to ground
truth, accuracy and completion (nearest-neighbour distances in both
directions) and normal consistency.
"""
__all__ = [
    'MetricsReport',
    'accuracy',
    'align_similarity',
    'apply_similarity',
    'completion',
    'evaluate_reconstruction',
    'grid_normals',
    'nearest_distances',
    'nearest_distances_brute',
    'normal_consistency',
    'BRUTE_FORCE_MAX_POINTS',
    'MAX_CORRESPONDENCES',
    'REPORT_SCHEMA_VERSION',
]


import logging

from dataclasses import (
    dataclass,
    field,
)

import numpy as np

from scipy.spatial import cKDTree

from .grids import Pointmap
from ..exceptions import (
    DegenerateInputError,
    EmptyGroundTruthError,
    RankError,
)
from ..utils import seed_stream


logger = logging.getLogger(__name__)


BRUTE_FORCE_MAX_POINTS = 64

MAX_CORRESPONDENCES = 100_000

REPORT_SCHEMA_VERSION = 1

RANK_TOL = 1e-9


@dataclass
class MetricsReport:
    acc_mean: float
    acc_median: float
    comp_mean: float
    comp_median: float
    nc_mean: float
    nc_median: float
    n_pred: int
    n_gt: int
    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_dict(self):
        return {
            'schema_version': REPORT_SCHEMA_VERSION,
            'acc_mean': float(self.acc_mean),
            'acc_median': float(self.acc_median),
            'comp_mean': float(self.comp_mean),
            'comp_median': float(self.comp_median),
            'nc_mean': float(self.nc_mean),
            'nc_median': float(self.nc_median),
            'n_pred': int(self.n_pred),
            'n_gt': int(self.n_gt),
            'alignment': {
                'scale': float(self.scale),
                'rotation': np.asarray(self.rotation).tolist(),
                'translation': np.asarray(self.translation).tolist(),
            },
            'normal_consistency': {
                'normals': 'cross product of right and lower grid neighbour differences',
                'neighbourhood': '2x2 valid pixels',
                'dot': 'unsigned',
            },
        }


def _check_rank(centred, name):
    singular = np.linalg.svd(centred, compute_uv=False)
    if singular.size < 2 or singular[0] <= 0 or singular[1] <= RANK_TOL * singular[0]:
        raise RankError(f'{name} correspondences are collinear or coincident')


def align_similarity(pred_points, gt_points, correspondences=None):
    """
    Closed-form least-squares similarity transform (Umeyama) taking the
    predicted points onto the ground-truth points: minimises
    ``sum ||s R p + t - g||^2`` over scale ``s``, rotation ``R`` (a proper
    rotation, ``det R = +1``) and translation ``t``.

    Parameters
    ----------
    ``pred_points``, ``gt_points`` : ``numpy.ndarray``
        ``(N, 3)`` point arrays

    ``correspondences`` : ``numpy.ndarray``, ``None``
        ``(K, 2)`` index pairs ``(pred_index, gt_index)``; by default the
        arrays are index-aligned

    Returns
    -------
    ``tuple`` :
        ``(scale, rotation, translation)``

    Raises
    ------
    ``pymemrecon.exceptions.RankError`` :
        If fewer than three non-collinear correspondences are given
    """
    src = np.asarray(pred_points, dtype=np.float64)
    dst = np.asarray(gt_points, dtype=np.float64)
    if correspondences is not None:
        pairs = np.asarray(correspondences, dtype=np.int64)
        src, dst = src[pairs[:, 0]], dst[pairs[:, 1]]
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError(f'expected two (N, 3) arrays, got {src.shape} and {dst.shape}')
    if src.shape[0] < 3:
        raise RankError(f'alignment needs at least 3 correspondences, got {src.shape[0]}')

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    src_demean = src - src_mean
    dst_demean = dst - dst_mean
    _check_rank(src_demean, 'predicted')
    _check_rank(dst_demean, 'ground-truth')

    covariance = dst_demean.T @ src_demean / src.shape[0]
    U, S, Vt = np.linalg.svd(covariance)
    d = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        d[-1] = -1.0

    rotation = U @ np.diag(d) @ Vt
    scale = float(S @ d / src_demean.var(axis=0).sum())
    translation = dst_mean - scale * rotation @ src_mean

    return scale, rotation, translation


def apply_similarity(points, scale, rotation, translation):
    points = np.asarray(points, dtype=np.float64)
    return scale * points @ np.asarray(rotation).T + np.asarray(translation)


def nearest_distances_brute(source, target):
    """
    Distance from each source point to its nearest target point, by
    exhaustive search.
    """
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diffs = source[:, None, :] - target[None, :, :]
    return np.sqrt(np.min(np.sum(diffs * diffs, axis=-1), axis=1))


def _nearest(source, target):
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if target.shape[0] == 0 or source.shape[0] == 0:
        raise DegenerateInputError('nearest-neighbour search on an empty point cloud')
    if max(source.shape[0], target.shape[0]) < BRUTE_FORCE_MAX_POINTS:
        diffs = source[:, None, :] - target[None, :, :]
        squared = np.sum(diffs * diffs, axis=-1)
        indices = np.argmin(squared, axis=1)
        return np.sqrt(squared[np.arange(source.shape[0]), indices]), indices
    distances, indices = cKDTree(target).query(source)
    return distances, indices


def nearest_distances(source, target):
    """
    Distance from each source point to its nearest target point: a k-d
    tree search, or exhaustive search for clouds under
    ``BRUTE_FORCE_MAX_POINTS`` points.
    """
    return _nearest(source, target)[0]


def accuracy(pred_cloud, gt_cloud):
    """
    Mean and median distance from each predicted point to its nearest
    ground-truth point.

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If either cloud is empty
    """
    distances = nearest_distances(pred_cloud, gt_cloud)
    return float(np.mean(distances)), float(np.median(distances))


def completion(gt_cloud, pred_cloud):
    """
    Mean and median distance from each ground-truth point to its nearest
    predicted point.
    """
    distances = nearest_distances(gt_cloud, pred_cloud)
    return float(np.mean(distances)), float(np.median(distances))


def grid_normals(points, valid, viewpoint=(0.0, 0.0, 0.0)):
    """
    Per-pixel normals of a pointmap from the cross product of the
    differences to the right and lower grid neighbours, oriented towards
    ``viewpoint``. Pixels without a fully valid 2 x 2 neighbourhood, or
    with a degenerate cross product, are skipped.

    Returns
    -------
    ``tuple`` :
        ``(normals, mask)`` - an ``(H, W, 3)`` array of unit normals and the
        ``(H, W)`` mask of pixels that have one
    """
    points = np.asarray(points, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    height, width = valid.shape
    normals = np.zeros((height, width, 3))
    mask = np.zeros((height, width), dtype=bool)
    if height < 2 or width < 2:
        return normals, mask

    block = valid[:-1, :-1] & valid[1:, :-1] & valid[:-1, 1:] & valid[1:, 1:]
    right = points[:-1, 1:] - points[:-1, :-1]
    down = points[1:, :-1] - points[:-1, :-1]
    cross = np.cross(right, down)
    length = np.linalg.norm(cross, axis=-1)
    ok = block & (length > 1e-12)

    unit = cross / np.where(length > 1e-12, length, 1.0)[..., None]
    towards = np.asarray(viewpoint, dtype=np.float64) - points[:-1, :-1]
    flip = np.sum(unit * towards, axis=-1) < 0
    unit = np.where(flip[..., None], -unit, unit)

    normals[:-1, :-1] = np.where(ok[..., None], unit, 0.0)
    mask[:-1, :-1] = ok
    return normals, mask


def _normal_samples(pointmaps, viewpoints):
    points, normals = [], []
    for pointmap, viewpoint in zip(pointmaps, viewpoints):
        grid, mask = grid_normals(pointmap.array, pointmap.valid, viewpoint)
        points.append(pointmap.array[mask])
        normals.append(grid[mask])
    return np.concatenate(points, axis=0), np.concatenate(normals, axis=0)


def normal_consistency(pred, gt, pred_viewpoints=None, gt_viewpoints=None):
    """
    Normal consistency: for every predicted pixel normal, the absolute dot
    product with the normal of the nearest ground-truth point.

    Parameters
    ----------
    ``pred``, ``gt`` : ``Pointmap``, ``list``
        Aligned pointmaps (single maps or lists of maps)

    ``pred_viewpoints``, ``gt_viewpoints`` : ``list``, ``None``
        Camera centres used to orient the normals; the origin by default

    Returns
    -------
    ``tuple`` :
        ``(mean, median)``

    Raises
    ------
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If no pixel of either input has a valid 2 x 2 neighbourhood
    """
    pred = [pred] if isinstance(pred, Pointmap) else list(pred)
    gt = [gt] if isinstance(gt, Pointmap) else list(gt)
    origin = (0.0, 0.0, 0.0)
    pred_points, pred_normals = _normal_samples(pred, pred_viewpoints or [origin] * len(pred))
    gt_points, gt_normals = _normal_samples(gt, gt_viewpoints or [origin] * len(gt))
    if pred_points.shape[0] == 0 or gt_points.shape[0] == 0:
        raise DegenerateInputError('no pixel has a valid 2 x 2 neighbourhood for a normal')

    _, nearest = _nearest(pred_points, gt_points)
    consistency = np.abs(np.sum(pred_normals * gt_normals[nearest], axis=-1))
    return float(np.mean(consistency)), float(np.median(consistency))


def evaluate_reconstruction(pred_pointmaps, gt_pointmaps, align=True,
                            max_correspondences=MAX_CORRESPONDENCES, seed=0):
    """
    Full evaluation of a reconstruction against ground truth.

    Correspondences are all pixels valid in both the prediction and the
    ground truth of the same frame, subsampled to ``max_correspondences``
    pairs (with the ``'eval'`` seed stream) for the similarity alignment.
    The aligned predicted pointmaps are then scored by accuracy, completion
    and normal consistency against the valid ground-truth points.

    Parameters
    ----------
    ``pred_pointmaps``, ``gt_pointmaps`` : ``list``
        Index-aligned ``Pointmap`` lists

    ``align`` : ``bool``
        Whether to align the prediction before scoring

    ``max_correspondences`` : ``int``
        Correspondence budget of the alignment

    ``seed`` : ``int``
        Seed of the subsampling

    Returns
    -------
    ``pymemrecon.core.evaluation.MetricsReport``

    Raises
    ------
    ``pymemrecon.exceptions.EmptyGroundTruthError`` :
        If no pixel is valid in both prediction and ground truth
    """
    if len(pred_pointmaps) != len(gt_pointmaps):
        raise ValueError(f'{len(pred_pointmaps)} predicted but {len(gt_pointmaps)} ground-truth pointmaps')

    pred_corr, gt_corr = [], []
    for pred, gt in zip(pred_pointmaps, gt_pointmaps):
        both = pred.valid & gt.valid
        pred_corr.append(pred.array[both])
        gt_corr.append(gt.array[both])
    pred_corr = np.concatenate(pred_corr, axis=0).astype(np.float64)
    gt_corr = np.concatenate(gt_corr, axis=0).astype(np.float64)
    if pred_corr.shape[0] == 0:
        raise EmptyGroundTruthError('no pixel is valid in both the prediction and the ground truth')

    scale, rotation, translation = 1.0, np.eye(3), np.zeros(3)
    if align:
        if pred_corr.shape[0] > max_correspondences:
            rng = seed_stream(seed, 'eval')
            chosen = np.sort(rng.choice(pred_corr.shape[0], size=max_correspondences, replace=False))
            pred_corr, gt_corr = pred_corr[chosen], gt_corr[chosen]
        scale, rotation, translation = align_similarity(pred_corr, gt_corr)

    aligned = [
        Pointmap(apply_similarity(pred.array, scale, rotation, translation), pred.valid)
        for pred in pred_pointmaps
    ]
    pred_cloud = np.concatenate([pm.valid_points() for pm in aligned], axis=0)
    gt_cloud = np.concatenate([pm.valid_points() for pm in gt_pointmaps], axis=0)

    acc_mean, acc_median = accuracy(pred_cloud, gt_cloud)
    comp_mean, comp_median = completion(gt_cloud, pred_cloud)
    nc_mean, nc_median = normal_consistency(aligned, gt_pointmaps)

    logger.info('evaluation: acc %.4f, comp %.4f, nc %.4f', acc_mean, comp_mean, nc_mean)

    return MetricsReport(
        acc_mean=acc_mean,
        acc_median=acc_median,
        comp_mean=comp_mean,
        comp_median=comp_median,
        nc_mean=nc_mean,
        nc_median=nc_median,
        n_pred=int(pred_cloud.shape[0]),
        n_gt=int(gt_cloud.shape[0]),
        scale=scale,
        rotation=rotation,
        translation=translation,
    )
