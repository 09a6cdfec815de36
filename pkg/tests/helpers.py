"""
Small shared fixtures: float64 micro model configs and tiny rendered scenes.
"""
import os

from pymemrecon.core.model import (
    ModelConfig,
    ReconstructionModel,
)
from pymemrecon.core.scenes import (
    SceneParams,
    generate_scene,
)


SLOW_TESTS = os.environ.get('PYMEMRECON_SLOW_TESTS') == '1'


def micro_config(**overrides):
    values = dict(
        image_size=16,
        patch_size=8,
        enc_dim=16,
        dec_dim=16,
        mem_enc_dim=16,
        enc_depth=1,
        dec_depth=1,
        mem_enc_depth=1,
        num_heads=2,
        mlp_ratio=2.0,
        attn_dropout_p=0.0,
        dtype='float64',
    )
    values.update(overrides)
    return ModelConfig(**values)


def micro_model(seed=0, **overrides):
    return ReconstructionModel(micro_config(**overrides), seed=seed)


def micro_scene(seed=0, n_frames=6, image_size=16, **params):
    return generate_scene(seed, SceneParams(n_frames=n_frames, image_size=image_size, **params))
