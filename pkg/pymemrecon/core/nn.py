"""
Transformer building blocks on top of ``pymemrecon.core.tensor``.

Token grids are 2-D tensors of shape ``(num_tokens, channels)``; there is no
batch axis - a training step processes one clip.
"""
__all__ = [
    'Attention',
    'Block',
    'DecoderBlock',
    'LayerNorm',
    'Linear',
    'MLP',
    'Module',
    'parameter',
    'patchify',
    'unpatchify',
]


import numpy as np

from .tensor import (
    Tensor,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax,
    transpose,
)
from ..exceptions import (
    CheckpointError,
    DimensionError,
)


def parameter(array, dtype):
    """
    Returns a trainable tensor holding ``array`` in ``dtype``.
    """
    return Tensor(np.asarray(array, dtype=dtype), requires_grad=True)


class Module:
    """
    Minimal parameter container. Parameters are ``Tensor`` attributes with
    ``requires_grad=True``; sub-modules are ``Module`` attributes or lists
    of modules. Parameter order follows attribute assignment order, which
    makes the order (and therefore checkpoints) deterministic.
    """
    def named_parameters(self, prefix=''):
        """
        Generates ``(dotted_name, tensor)`` pairs for every parameter of
        this module and its sub-modules.
        """
        for name, value in vars(self).items():
            full_name = f'{prefix}{name}'
            if isinstance(value, Tensor) and value.requires_grad:
                yield full_name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f'{full_name}.')
            elif isinstance(value, (list, tuple)):
                for position, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f'{full_name}.{position}.')

    def parameters(self):
        return [param for _, param in self.named_parameters()]

    @property
    def num_parameters(self):
        return int(sum(param.size for param in self.parameters()))

    def zero_grad(self):
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self):
        """
        Returns an ordered dict of parameter name to a copy of its values.
        """
        return {name: param.numpy() for name, param in self.named_parameters()}

    def load_state_dict(self, state):
        """
        Replaces parameter values from ``state`` (name to array), casting to
        each parameter's dtype.

        Raises
        ------
        ``pymemrecon.exceptions.CheckpointError`` :
            If names or shapes do not match this module exactly
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(
                f'parameter names do not match - missing: {missing}, unexpected: {unexpected}'
            )
        for name, param in own.items():
            values = np.asarray(state[name])
            if values.shape != param.shape:
                raise CheckpointError(
                    f'parameter "{name}" has shape {param.shape}, checkpoint has {values.shape}'
                )
            param.data = values.astype(param.dtype)
            param.zero_grad()


class Linear(Module):

    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = parameter(rng.uniform(-limit, limit, size=(in_dim, out_dim)), dtype)
        self.bias = parameter(np.zeros(out_dim), dtype)

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):

    def __init__(self, dim, dtype=np.float32):
        self.gain = parameter(np.ones(dim), dtype)
        self.bias = parameter(np.zeros(dim), dtype)

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):

    def __init__(self, in_dim, hidden_dim, out_dim, rng, dtype=np.float32):
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype)
        self.fc2 = Linear(hidden_dim, out_dim, rng, dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))


class Attention(Module):
    """
    Multi-head scaled dot-product attention. Called with one argument it is
    self-attention; with a ``context`` grid it is cross-attention, queries
    from ``x`` and keys/values from ``context``.
    """
    def __init__(self, dim, num_heads, rng, dtype=np.float32):
        if dim % num_heads:
            raise DimensionError(f'attention width {dim} is not divisible by {num_heads} heads')
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = Linear(dim, dim, rng, dtype)
        self.key = Linear(dim, dim, rng, dtype)
        self.value = Linear(dim, dim, rng, dtype)
        self.proj = Linear(dim, dim, rng, dtype)

    def _split_heads(self, x):
        # (N, C) -> (heads, N, head_dim)
        return transpose(reshape(x, (x.shape[0], self.num_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, x, context=None):
        context = x if context is None else context
        q = self._split_heads(self.query(x))
        k = self._split_heads(self.key(context))
        v = self._split_heads(self.value(context))

        scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        weights = softmax(scores, axis=-1)
        heads = matmul(weights, v)

        merged = reshape(transpose(heads, (1, 0, 2)), (x.shape[0], self.num_heads * self.head_dim))
        return self.proj(merged)


class Block(Module):
    """
    Pre-norm transformer encoder block.
    """
    def __init__(self, dim, num_heads, mlp_ratio, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = Attention(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng, dtype)

    def __call__(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class DecoderBlock(Module):
    """
    Pre-norm decoder block: self-attention within the stream, then
    cross-attention to the other stream, then an MLP.
    """
    def __init__(self, dim, num_heads, mlp_ratio, rng, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype)
        self.self_attn = Attention(dim, num_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.norm_context = LayerNorm(dim, dtype)
        self.cross_attn = Attention(dim, num_heads, rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)
        self.mlp = MLP(dim, int(dim * mlp_ratio), dim, rng, dtype)

    def __call__(self, x, other):
        x = x + self.self_attn(self.norm1(x))
        x = x + self.cross_attn(self.norm2(x), self.norm_context(other))
        return x + self.mlp(self.norm3(x))


def patchify(grid, patch_size):
    """
    Splits an ``(H, W, c)`` grid into ``(H/p * W/p, p * p * c)`` patch rows,
    patches in row-major order.
    """
    height, width, channels = grid.shape
    rows, cols = height // patch_size, width // patch_size
    blocks = reshape(grid, (rows, patch_size, cols, patch_size, channels))
    blocks = transpose(blocks, (0, 2, 1, 3, 4))
    return reshape(blocks, (rows * cols, patch_size * patch_size * channels))


def unpatchify(tokens, patch_size, height, width):
    """
    Inverse of ``patchify``: ``(P, p * p * c)`` rows back to an
    ``(H, W, c)`` grid.
    """
    rows, cols = height // patch_size, width // patch_size
    channels = tokens.shape[-1] // (patch_size * patch_size)
    blocks = reshape(tokens, (rows, cols, patch_size, patch_size, channels))
    blocks = transpose(blocks, (0, 2, 1, 3, 4))
    return reshape(blocks, (height, width, channels))
