"""
The reconstruction network: an image encoder, two intertwined decoders (the
target stream produces memory queries, the reference stream predicts
geometry from memory readouts), query/key/output heads and a lightweight
memory value encoder.

Data flow of one step ``t >= 2`` (frames are 0-based below)::

    f_I(t)            = encode_image(I_t)
    f_G(t-1), A       = memory_read(f_Q(t-1), bank)
    H'(t), H(t-1)     = decode(f_I(t), f_G(t-1))
    f_Q(t)            = head_query(H'(t), f_I(t))        -> next step
    X(t-1), C(t-1)    = head_out(H(t-1))
    f_K(t-1)          = head_key(H(t-1), f_I(t-1))
    f_V(t-1)          = encode_value(X(t-1), f_K(t-1))   -> memory

The reference stream therefore lags one frame behind the input; the last
frame of a sequence is read from the target-stream prediction.
"""
__all__ = [
    'ConfidenceMap',
    'Decoder',
    'ImageEncoder',
    'OutputHead',
    'Pointmap',
    'ReconstructionModel',
    'StepOutput',
    'TokenGrid',
    'TokenHead',
    'ValueEncoder',
    'ModelConfig',
    'REFERENCE_SCALE',
]


import logging

from dataclasses import (
    asdict,
    dataclass,
)
from typing import Optional

import numpy as np

from .grids import (
    ConfidenceMap,
    Pointmap,
    TokenGrid,
)
from .memory import (
    AttentionRecord,
    memory_read,
)
from .nn import (
    Block,
    DecoderBlock,
    LayerNorm,
    Linear,
    MLP,
    Module,
    parameter,
    patchify,
    unpatchify,
)
from .tensor import (
    Tensor,
    concat,
)
from ..exceptions import (
    ConfigError,
    DimensionError,
    PipelineOrderError,
    PIPELINE_ORDER_MSG,
)
from ..utils import seed_stream


logger = logging.getLogger(__name__)


# Published full-scale settings, kept for reference only: ViT-large encoder,
# ViT-base decoders, 224 x 224 inputs with 16-pixel patches and a six-block
# memory encoder of width 1024.
REFERENCE_SCALE = {
    'image_size': 224,
    'patch_size': 16,
    'enc_dim': 1024,
    'enc_depth': 24,
    'dec_dim': 768,
    'dec_depth': 12,
    'mem_enc_dim': 1024,
    'mem_enc_depth': 6,
    'num_heads': 16,
}


@dataclass(frozen=True)
class ModelConfig:
    """
    Network hyper-parameters. The defaults are a desk-scale configuration;
    ``REFERENCE_SCALE`` records the published full-scale values.
    """
    image_size: int = 32
    patch_size: int = 8
    enc_dim: int = 64
    dec_dim: int = 48
    mem_enc_dim: int = 48
    enc_depth: int = 4
    dec_depth: int = 2
    mem_enc_depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 2.0
    attn_dropout_p: float = 0.15
    dtype: str = 'float32'

    @property
    def grid_size(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid_size ** 2

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self):
        """
        Returns a list of diagnostics, empty when the config is valid.
        """
        errors = []
        for name in (
            'image_size', 'patch_size', 'enc_dim', 'dec_dim', 'mem_enc_dim',
            'enc_depth', 'dec_depth', 'mem_enc_depth', 'num_heads',
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                errors.append(f'{name}: must be a positive integer, got {value!r}')
        if errors:
            return errors

        if self.image_size % self.patch_size:
            errors.append(
                f'image_size: {self.image_size} is not divisible by patch_size {self.patch_size}'
            )
        for name in ('enc_dim', 'dec_dim', 'mem_enc_dim'):
            if getattr(self, name) % self.num_heads:
                errors.append(f'{name}: {getattr(self, name)} is not divisible by num_heads {self.num_heads}')
        if not self.mlp_ratio > 0:
            errors.append(f'mlp_ratio: must be positive, got {self.mlp_ratio!r}')
        if not 0.0 <= self.attn_dropout_p < 1.0:
            errors.append(f'attn_dropout_p: must lie in [0, 1), got {self.attn_dropout_p!r}')
        if self.dtype not in ('float32', 'float64'):
            errors.append(f'dtype: must be "float32" or "float64", got {self.dtype!r}')

        return errors

    def to_dict(self):
        return asdict(self)


@dataclass
class StepOutput:
    """
    Everything one model step produces.

    ``pred`` is the reference-stream prediction for the previous frame
    (``frame_index``), ``target_pred`` the supervision-only target-stream
    prediction for the current frame. ``new_key``/``new_value`` are the
    memory features of ``frame_index``; ``next_query`` and ``visual`` are
    carried into the next step.
    """
    pred: tuple
    target_pred: tuple
    next_query: TokenGrid
    new_key: TokenGrid
    new_value: TokenGrid
    visual: TokenGrid
    record: Optional[AttentionRecord] = None

    @property
    def frame_index(self):
        return self.new_key.frame_index

    @property
    def target_frame_index(self):
        return self.visual.frame_index


class ImageEncoder(Module):

    def __init__(self, config, rng):
        dtype = config.np_dtype
        self.patch_size = config.patch_size
        self.patch_embed = Linear(config.patch_size ** 2 * 3, config.enc_dim, rng, dtype)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(config.num_patches, config.enc_dim)), dtype)
        self.blocks = [
            Block(config.enc_dim, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.enc_depth)
        ]
        self.norm = LayerNorm(config.enc_dim, dtype)

    def __call__(self, image):
        x = self.patch_embed(patchify(image, self.patch_size)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class Decoder(Module):
    """
    Two intertwined decoders. Each block updates both streams from the
    outputs of the previous block: self-attention within a stream,
    cross-attention to the other stream, then an MLP.

    The reference stream normally consumes memory readouts (width
    ``mem_enc_dim``); during the two-view initialisation it consumes visual
    features of the first frame (width ``enc_dim``), through its own input
    projection.
    """
    def __init__(self, config, rng):
        dtype = config.np_dtype
        self.num_patches = config.num_patches
        self.target_embed = Linear(config.enc_dim, config.dec_dim, rng, dtype)
        self.reference_embed = Linear(config.mem_enc_dim, config.dec_dim, rng, dtype)
        self.reference_visual_embed = Linear(config.enc_dim, config.dec_dim, rng, dtype)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(config.num_patches, config.dec_dim)), dtype)
        self.target_blocks = [
            DecoderBlock(config.dec_dim, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.dec_depth)
        ]
        self.reference_blocks = [
            DecoderBlock(config.dec_dim, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.dec_depth)
        ]
        self.target_norm = LayerNorm(config.dec_dim, dtype)
        self.reference_norm = LayerNorm(config.dec_dim, dtype)

    def __call__(self, target, reference):
        if target.num_tokens != reference.num_tokens or target.num_tokens != self.num_patches:
            raise DimensionError(
                f'decoder streams need {self.num_patches} tokens each, got '
                f'{target.num_tokens} (target) and {reference.num_tokens} (reference)'
            )

        reference_embed = (
            self.reference_visual_embed if reference.kind == 'visual' else self.reference_embed
        )
        x_target = self.target_embed(target.tokens) + self.pos_embed
        x_reference = reference_embed(reference.tokens) + self.pos_embed

        for target_block, reference_block in zip(self.target_blocks, self.reference_blocks):
            x_target, x_reference = (
                target_block(x_target, x_reference),
                reference_block(x_reference, x_target),
            )

        return self.target_norm(x_target), self.reference_norm(x_reference)


class TokenHead(Module):
    """
    MLP over the concatenation of decoded tokens and visual tokens - used
    for both the query head (target stream) and the key head (reference
    stream).
    """
    def __init__(self, config, rng):
        dtype = config.np_dtype
        in_dim = config.dec_dim + config.enc_dim
        self.mlp = MLP(in_dim, 2 * config.mem_enc_dim, config.mem_enc_dim, rng, dtype)

    def __call__(self, decoded, visual):
        return self.mlp(concat([decoded, visual], axis=-1))


class OutputHead(Module):
    """
    Per-patch linear head: each decoded token is projected to
    ``patch_size ** 2 * 4`` values and unpatchified to an ``(H, W, 4)``
    grid - three point coordinates and one raw confidence per pixel.
    """
    def __init__(self, config, rng):
        dtype = config.np_dtype
        self.patch_size = config.patch_size
        self.image_size = config.image_size
        self.proj = Linear(config.dec_dim, config.patch_size ** 2 * 4, rng, dtype)

    def __call__(self, decoded):
        grid = unpatchify(self.proj(decoded), self.patch_size, self.image_size, self.image_size)
        points = grid[:, :, :3]
        raw_confidence = grid[:, :, 3]
        valid = np.ones((self.image_size, self.image_size), dtype=bool)
        return Pointmap(points, valid), ConfidenceMap.from_raw(raw_confidence)


class ValueEncoder(Module):
    """
    Lightweight ViT over a predicted pointmap; its output is added to the
    memory key so that ``f_V = Encoder_V(X) + f_K``.
    """
    def __init__(self, config, rng):
        dtype = config.np_dtype
        self.patch_size = config.patch_size
        self.patch_embed = Linear(config.patch_size ** 2 * 3, config.mem_enc_dim, rng, dtype)
        self.pos_embed = parameter(rng.normal(0.0, 0.02, size=(config.num_patches, config.mem_enc_dim)), dtype)
        self.blocks = [
            Block(config.mem_enc_dim, config.num_heads, config.mlp_ratio, rng, dtype)
            for _ in range(config.mem_enc_depth)
        ]
        self.norm = LayerNorm(config.mem_enc_dim, dtype)
        self.out = Linear(config.mem_enc_dim, config.mem_enc_dim, rng, dtype)

    def __call__(self, points, key_tokens):
        x = self.patch_embed(patchify(points, self.patch_size)) + self.pos_embed
        for block in self.blocks:
            x = block(x)
        return self.out(self.norm(x)) + key_tokens


class ReconstructionModel(Module):
    """
    The full network. Parameters are initialised from the ``'init'`` seed
    stream unless an explicit generator is given.
    """
    def __init__(self, config=None, rng=None, seed=0):
        config = config if config is not None else ModelConfig()
        errors = config.validate()
        if errors:
            raise ConfigError('invalid model config', [f'model.{error}' for error in errors])

        rng = rng if rng is not None else seed_stream(seed, 'init')
        self.config = config
        self.encoder = ImageEncoder(config, rng)
        self.decoder = Decoder(config, rng)
        self.query_head = TokenHead(config, rng)
        self.key_head = TokenHead(config, rng)
        self.out_head = OutputHead(config, rng)
        self.target_out_head = OutputHead(config, rng)
        self.value_encoder = ValueEncoder(config, rng)

    def __repr__(self):
        return (
            f'{self.__module__}.{self.__class__.__name__}('
            f'{self.config!r}'
            f')'
        )

    def _image_tensor(self, frame):
        image = np.asarray(frame)
        size = self.config.image_size
        if image.shape != (size, size, 3):
            raise ConfigError(
                f'frame of shape {image.shape} does not match the configured image size',
                [f'model.image_size: expected frames of shape ({size}, {size}, 3)'],
            )
        if image.dtype.kind in 'ui':
            image = image / 255.0
        return Tensor((image - 0.5) / 0.5, dtype=self.config.np_dtype)

    def encode_image(self, frame, frame_index=0):
        """
        Encodes an ``(H, W, 3)`` frame (floats in ``[0, 1]`` or ``uint8``)
        into a grid of ``P`` visual tokens of width ``enc_dim``.

        Raises
        ------
        ``pymemrecon.exceptions.ConfigError`` :
            If the frame does not match the configured image size
        """
        tokens = self.encoder(self._image_tensor(frame))
        return TokenGrid(tokens, frame_index, 'visual')

    def decode(self, f_I, f_G):
        """
        Runs the intertwined decoders with ``f_I`` in the target stream and
        ``f_G`` in the reference stream.

        Returns
        -------
        ``tuple`` :
            ``(f_H_target, f_H_ref)`` token grids of width ``dec_dim``
        """
        target, reference = self.decoder(f_I, f_G)
        return (
            TokenGrid(target, f_I.frame_index, 'decoded_target'),
            TokenGrid(reference, f_G.frame_index, 'decoded_reference'),
        )

    def head_query(self, f_H_target, f_I):
        return TokenGrid(self.query_head(f_H_target.tokens, f_I.tokens), f_I.frame_index, 'query')

    def head_key(self, f_H_ref, f_I):
        return TokenGrid(self.key_head(f_H_ref.tokens, f_I.tokens), f_I.frame_index, 'key')

    def head_out(self, f_H_ref):
        """
        Returns the ``(Pointmap, ConfidenceMap)`` prediction of the
        reference stream.
        """
        return self.out_head(f_H_ref.tokens)

    def head_out_target(self, f_H_target):
        """
        Returns the supervision-only ``(Pointmap, ConfidenceMap)`` of the
        target stream (same architecture as ``head_out``, separate weights).
        """
        return self.target_out_head(f_H_target.tokens)

    def encode_value(self, X, f_K):
        """
        Encodes a predicted pointmap into memory value tokens, residually on
        top of the memory key tokens of the same frame.
        """
        points = X.points if isinstance(X, Pointmap) else X
        return TokenGrid(self.value_encoder(points, f_K.tokens), f_K.frame_index, 'value')

    def initialize(self, frame1, frame2, frame_indices=(0, 1), visuals=None):
        """
        The two-view initialisation step: both decoders consume visual
        features directly - the first frame in the reference stream, the
        second in the target stream.

        Parameters
        ----------
        ``frame1``, ``frame2`` : ``numpy.ndarray``
            The first two frames

        ``frame_indices`` : ``tuple``
            Frame indices to attach to the two frames

        ``visuals`` : ``tuple``, ``None``
            Optional precomputed visual token grids of the two frames, in
            which case the frames are not re-encoded

        Returns
        -------
        ``pymemrecon.core.model.StepOutput`` :
            Predictions of both frames, the first key/value pair (of the
            first frame) and the query of the second frame
        """
        if visuals is None:
            first = self.encode_image(frame1, frame_indices[0])
            second = self.encode_image(frame2, frame_indices[1])
        else:
            first, second = visuals

        f_H_target, f_H_ref = self.decode(second, first)
        pred = self.head_out(f_H_ref)
        target_pred = self.head_out_target(f_H_target)
        new_key = self.head_key(f_H_ref, first)
        new_value = self.encode_value(pred[0], new_key)

        return StepOutput(
            pred=pred,
            target_pred=target_pred,
            next_query=self.head_query(f_H_target, second),
            new_key=new_key,
            new_value=new_value,
            visual=second,
            record=None,
        )

    def forward_step(self, frame, prev_query, bank, prev_visual=None, mode='infer', rng=None, visual=None):
        """
        One step of the incremental pipeline.

        With ``prev_query=None`` this is the two-view initialisation and
        ``frame`` must be a pair of frames. Otherwise ``frame`` is the next
        frame, ``prev_query``/``prev_visual`` are the ``next_query`` and
        ``visual`` of the previous step, and the memory bank must hold at
        least one token.

        Parameters
        ----------
        ``frame`` : ``numpy.ndarray``, ``tuple``
            The next frame, or a pair of frames for the first step

        ``prev_query`` : ``pymemrecon.core.grids.TokenGrid``, ``None``
            Query tokens carried over from the previous step

        ``bank`` : ``pymemrecon.core.memory.MemoryBank``
            The spatial memory to read from

        ``prev_visual`` : ``pymemrecon.core.grids.TokenGrid``, ``None``
            Visual tokens of the previous frame (needed for its memory key)

        ``mode`` : ``str``
            ``'train'`` (attention dropout) or ``'infer'`` (attention
            clipping)

        ``rng`` : ``numpy.random.Generator``, ``None``
            Dropout generator for ``'train'`` mode

        ``visual`` : ``pymemrecon.core.grids.TokenGrid``, ``None``
            Precomputed visual tokens of ``frame``

        Returns
        -------
        ``pymemrecon.core.model.StepOutput``

        Raises
        ------
        ``pymemrecon.exceptions.PipelineOrderError`` :
            If a memory-conditioned step is requested with an empty bank, or
            without the previous frame's visual tokens
        """
        if prev_query is None:
            if not isinstance(frame, (tuple, list)) or len(frame) != 2:
                raise PipelineOrderError('the first step needs a pair of frames')
            return self.initialize(frame[0], frame[1])

        if bank.total_tokens == 0:
            raise PipelineOrderError(PIPELINE_ORDER_MSG)
        if prev_visual is None:
            raise PipelineOrderError('a memory-conditioned step needs the previous frame\'s visual tokens')

        frame_index = prev_query.frame_index + 1
        f_I = visual if visual is not None else self.encode_image(frame, frame_index)

        f_G, record = memory_read(
            prev_query, bank, mode=mode, rng=rng, dropout_p=self.config.attn_dropout_p
        )
        f_H_target, f_H_ref = self.decode(f_I, f_G)
        pred = self.head_out(f_H_ref)
        new_key = self.head_key(f_H_ref, prev_visual)

        return StepOutput(
            pred=pred,
            target_pred=self.head_out_target(f_H_target),
            next_query=self.head_query(f_H_target, f_I),
            new_key=new_key,
            new_value=self.encode_value(pred[0], new_key),
            visual=f_I,
            record=record,
        )
