"""
Training objective: joint pointmap normalisation, the confidence-weighted
regression loss, the scale hinge and the frame-interval curriculum.
"""
__all__ = [
    'CurriculumConfig',
    'LossConfig',
    'LossTerms',
    'active_ratio',
    'curriculum_interval',
    'loss_conf',
    'loss_scale',
    'normalize_pointmaps',
    'supervision_pairs',
    'total_loss',
]


import math

from dataclasses import (
    asdict,
    dataclass,
)

import numpy as np

from .grids import (
    ConfidenceMap,
    Pointmap,
)
from .tensor import (
    Tensor,
    as_tensor,
    log,
    norm,
    relu,
    sum as tensor_sum,
)
from ..exceptions import (
    DegenerateInputError,
    EmptyGroundTruthError,
    EMPTY_GROUND_TRUTH_MSG,
)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.4

    def validate(self):
        if not self.alpha >= 0:
            return [f'alpha: must be non-negative, got {self.alpha!r}']
        return []

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class CurriculumConfig:
    """
    Frame-interval bounds of the clip sampler and the clip length.
    """
    t_min: int = 1
    t_max: int = 4
    n_frames: int = 5

    def validate(self):
        errors = []
        if not isinstance(self.t_min, int) or self.t_min < 1:
            errors.append(f't_min: must be a positive integer, got {self.t_min!r}')
        elif not isinstance(self.t_max, int) or self.t_max < self.t_min:
            errors.append(f't_max: must be an integer >= t_min, got {self.t_max!r}')
        if not isinstance(self.n_frames, int) or self.n_frames < 2:
            errors.append(f'n_frames: must be an integer >= 2, got {self.n_frames!r}')
        return errors

    def to_dict(self):
        return asdict(self)


@dataclass
class LossTerms:
    """
    The loss of one clip: ``total`` is the differentiable scalar, the other
    fields are plain floats for logging.
    """
    total: Tensor
    conf: float
    scale: float
    scale_pred: float
    scale_gt: float

    @property
    def value(self):
        return self.total.item()

    def to_dict(self):
        return {
            'loss': self.value,
            'loss_conf': self.conf,
            'loss_scale': self.scale,
            'scale_pred': self.scale_pred,
            'scale_gt': self.scale_gt,
        }


def _points_tensor(pointmap):
    return as_tensor(pointmap.points if isinstance(pointmap, Pointmap) else pointmap)


def _mean_distance(points, masks):
    total = None
    for pts, mask in zip(points, masks):
        distances = norm(pts, axis=-1) * mask.astype(pts.dtype)
        masked_sum = tensor_sum(distances)
        total = masked_sum if total is None else total + masked_sum
    count = int(sum(mask.sum() for mask in masks))
    return total * (1.0 / count)


def normalize_pointmaps(pred, gt):
    """
    Jointly normalises a set of predicted and a set of ground-truth
    pointmaps: each set is divided by its own mean distance to the origin
    over the valid pixels of all its maps (the ground-truth masks select
    the pixels of both sets).

    Parameters
    ----------
    ``pred`` : ``list``
        Predicted ``Pointmap`` objects (points may carry gradients)

    ``gt`` : ``list``
        Ground-truth ``Pointmap`` objects, index-aligned with ``pred``

    Returns
    -------
    ``tuple`` :
        ``(pred_normalized, gt_normalized, scale_pred, scale_gt)`` - two
        lists of ``Pointmap`` and the two scales as scalar ``Tensor`` objects

    Raises
    ------
    ``pymemrecon.exceptions.EmptyGroundTruthError`` :
        If no ground-truth pixel is valid
    ``pymemrecon.exceptions.DegenerateInputError`` :
        If either set has zero mean distance
    """
    if len(pred) != len(gt):
        raise ValueError(f'{len(pred)} predicted but {len(gt)} ground-truth pointmaps')

    masks = [np.asarray(g.valid, dtype=bool) for g in gt]
    if not any(mask.any() for mask in masks):
        raise EmptyGroundTruthError(EMPTY_GROUND_TRUTH_MSG)

    pred_points = [_points_tensor(p) for p in pred]
    gt_points = [as_tensor(np.asarray(g.array)) for g in gt]
    scale_pred = _mean_distance(pred_points, masks)
    scale_gt = _mean_distance(gt_points, masks)
    if scale_pred.item() <= 0 or scale_gt.item() <= 0:
        raise DegenerateInputError('cannot normalise pointmaps with zero mean distance')

    pred_normalized = [Pointmap(pts / scale_pred, mask) for pts, mask in zip(pred_points, masks)]
    gt_normalized = [Pointmap(pts.data / scale_gt.data, mask) for pts, mask in zip(gt_points, masks)]

    return pred_normalized, gt_normalized, scale_pred, scale_gt


def loss_conf(pred, conf, gt, mask, alpha):
    """
    Confidence-aware regression loss summed over the valid pixels:
    ``sum(C * ||x_pred - x_gt|| - alpha * log(C))`` with ``C = 1 + exp(raw)``.

    Parameters
    ----------
    ``pred`` : ``Pointmap``, ``Tensor``
        Normalised ``(H, W, 3)`` prediction

    ``conf`` : ``ConfidenceMap``
        Confidence of the prediction

    ``gt`` : ``Pointmap``, ``numpy.ndarray``
        Normalised ``(H, W, 3)`` ground truth

    ``mask`` : ``numpy.ndarray``
        ``(H, W)`` boolean mask of the valid pixels

    ``alpha`` : ``float``
        Weight of the confidence regulariser

    Returns
    -------
    ``Tensor`` :
        The scalar loss

    Raises
    ------
    ``pymemrecon.exceptions.EmptyGroundTruthError`` :
        If the mask is empty
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyGroundTruthError(EMPTY_GROUND_TRUTH_MSG)

    pred_points = _points_tensor(pred)
    gt_points = gt.array if isinstance(gt, Pointmap) else np.asarray(gt)
    confidence = conf.mapped if isinstance(conf, ConfidenceMap) else as_tensor(conf)

    regression = norm(pred_points - gt_points, axis=-1)
    per_pixel = confidence * regression - alpha * log(confidence)

    return tensor_sum(per_pixel * mask.astype(per_pixel.dtype))


def loss_scale(scale_pred, scale_gt):
    """
    Hinge on the predicted scale: ``max(0, scale_pred - scale_gt)``.
    """
    return relu(as_tensor(scale_pred) - as_tensor(scale_gt).detach())


def total_loss(predictions, ground_truth, config=None):
    """
    The loss of one clip: the confidence-aware regression loss over every
    prediction (after joint normalisation) plus the scale hinge.

    Parameters
    ----------
    ``predictions`` : ``list``
        ``(Pointmap, ConfidenceMap)`` pairs

    ``ground_truth`` : ``list``
        Ground-truth ``Pointmap`` objects, index-aligned with the predictions

    ``config`` : ``LossConfig``, ``None``
        Loss parameters

    Returns
    -------
    ``pymemrecon.core.objective.LossTerms``
    """
    config = config if config is not None else LossConfig()
    pred_norm, gt_norm, scale_pred, scale_gt = normalize_pointmaps(
        [pointmap for pointmap, _ in predictions], ground_truth
    )

    conf_term = None
    for (_, confidence), pred, gt in zip(predictions, pred_norm, gt_norm):
        if not gt.valid.any():
            continue
        term = loss_conf(pred, confidence, gt, gt.valid, config.alpha)
        conf_term = term if conf_term is None else conf_term + term

    scale_term = loss_scale(scale_pred, scale_gt)

    return LossTerms(
        total=conf_term + scale_term,
        conf=conf_term.item(),
        scale=scale_term.item(),
        scale_pred=scale_pred.item(),
        scale_gt=scale_gt.item(),
    )


def supervision_pairs(outputs, ground_truth):
    """
    Pairs the step outputs of one clip with ground truth: the reference
    stream predicts frames ``0 .. N-2`` and the target stream frames
    ``1 .. N-1``.

    Parameters
    ----------
    ``outputs`` : ``list``
        The ``StepOutput`` objects of a clip, initialisation first

    ``ground_truth`` : ``list``
        The ``N`` ground-truth ``Pointmap`` objects of the clip

    Returns
    -------
    ``tuple`` :
        ``(predictions, targets)`` lists for ``total_loss``
    """
    predictions, targets = [], []
    for output in outputs:
        predictions.append(output.pred)
        targets.append(ground_truth[output.frame_index])
    for output in outputs:
        predictions.append(output.target_pred)
        targets.append(ground_truth[output.target_frame_index])
    return predictions, targets


def active_ratio(eta):
    """
    Piecewise-linear schedule of the training ratio ``eta``: rises to one at
    ``eta = 0.5``, stays there until ``eta = 0.75`` and falls back to
    ``0.5`` at the end of training.

    Raises
    ------
    ``ValueError`` :
        If ``eta`` lies outside ``[0, 1]``
    """
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f'training ratio must lie in [0, 1], got {eta!r}')
    if eta < 0.75:
        return min(1.0, 2.0 * eta)
    return max(0.5, 4.0 - 4.0 * eta)


def curriculum_interval(eta, config=None):
    """
    Frame interval ``T`` for the training ratio ``eta``, rounded half up:
    ``floor(t_min + active_ratio(eta) * (t_max - t_min) + 0.5)``.
    """
    config = config if config is not None else CurriculumConfig()
    value = config.t_min + active_ratio(eta) * (config.t_max - config.t_min)
    return int(math.floor(value + 0.5))
