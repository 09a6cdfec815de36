"""
Value types passed between the model, the spatial memory, the objective and
the evaluation code.
"""
__all__ = [
    'ConfidenceMap',
    'Pointmap',
    'TokenGrid',
    'TOKEN_KINDS',
]


from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    exp,
)
from ..exceptions import DimensionError


TOKEN_KINDS = (
    'visual',
    'fused',
    'decoded_target',
    'decoded_reference',
    'query',
    'key',
    'value',
)


@dataclass
class TokenGrid:
    """
    ``P`` patch tokens of ``C`` channels belonging to one frame.

    ``kind`` names the role of the grid (``'visual'`` encoder features,
    ``'fused'`` memory readouts, ``'query'``/``'key'``/``'value'`` memory
    features, decoder outputs) - the decoder uses it to pick the input
    projection for the reference stream.
    """
    tokens: Tensor
    frame_index: int
    kind: str = 'visual'

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise DimensionError(f'token grids are (P, C), got shape {self.tokens.shape}')
        if self.kind not in TOKEN_KINDS:
            raise ValueError(f'unknown token grid kind "{self.kind}"')

    @property
    def num_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def detach(self):
        return TokenGrid(self.tokens.detach(), self.frame_index, self.kind)


@dataclass
class Pointmap:
    """
    An ``(H, W, 3)`` grid of 3D points in the world frame (the camera frame
    of the first frame of a sequence) plus an ``(H, W)`` validity mask.

    ``points`` is a ``Tensor`` for predictions (so losses can backpropagate
    through it) and may be a plain array for ground truth.
    """
    points: object
    valid: np.ndarray

    def __post_init__(self):
        self.valid = np.asarray(self.valid, dtype=bool)
        shape = tuple(self.points.shape)
        if len(shape) != 3 or shape[-1] != 3:
            raise DimensionError(f'pointmaps are (H, W, 3), got shape {shape}')
        if self.valid.shape != shape[:2]:
            raise DimensionError(
                f'validity mask shape {self.valid.shape} does not match pointmap shape {shape}'
            )

    @property
    def array(self):
        """
        The point values as a NumPy array (no gradient).
        """
        if isinstance(self.points, Tensor):
            return self.points.data
        return np.asarray(self.points)

    @property
    def shape(self):
        return tuple(self.points.shape[:2])

    @property
    def num_valid(self):
        return int(self.valid.sum())

    def valid_points(self):
        """
        Returns the ``(N, 3)`` array of valid points in row-major pixel order.
        """
        return self.array[self.valid]

    def detach(self):
        return Pointmap(np.array(self.array), self.valid.copy())


@dataclass
class ConfidenceMap:
    """
    Per-pixel raw confidence ``raw`` and its mapped form
    ``mapped = 1 + exp(raw)``, which is strictly greater than one.
    """
    raw: Tensor
    mapped: Tensor

    @classmethod
    def from_raw(cls, raw):
        raw = as_tensor(raw)
        return cls(raw=raw, mapped=exp(raw) + 1.0)

    @property
    def shape(self):
        return tuple(self.raw.shape)

    @property
    def array(self):
        return self.mapped.data

    def detach(self):
        return ConfidenceMap(self.raw.detach(), self.mapped.detach())
