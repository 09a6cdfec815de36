"""
Run configuration: one frozen dataclass per concern, aggregated by
``RunConfig`` and serialised as strict, versioned JSON.
"""
__all__ = [
    'RunConfig',
    'CONFIG_SCHEMA_VERSION',
]


import json

from dataclasses import (
    dataclass,
    field,
    fields,
)
from pathlib import Path

from .core.memory import MemoryConfig
from .core.model import ModelConfig
from .core.objective import (
    CurriculumConfig,
    LossConfig,
)
from .core.optim import OptimizerConfig
from .core.scenes import DataConfig
from .exceptions import ConfigError
from .utils import (
    atomic_write_text,
    dump_json,
)


CONFIG_SCHEMA_VERSION = 1


_SECTIONS = {
    'model': ModelConfig,
    'memory': MemoryConfig,
    'loss': LossConfig,
    'curriculum': CurriculumConfig,
    'optimizer': OptimizerConfig,
    'data': DataConfig,
}


def _section_from_dict(name, cls, values, diagnostics):
    if not isinstance(values, dict):
        diagnostics.append(f'{name}: expected an object, got {type(values).__name__}')
        return cls()

    known = {f.name: f for f in fields(cls)}
    for key in sorted(set(values) - set(known)):
        diagnostics.append(f'{name}.{key}: unknown key')

    kwargs = {}
    for key, value in values.items():
        if key not in known:
            continue
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value

    try:
        return cls(**kwargs)
    except TypeError as exc:
        diagnostics.append(f'{name}: {exc}')
        return cls()


def _section_to_dict(section):
    return {
        f.name: list(value) if isinstance(value, tuple) else value
        for f in fields(section)
        for value in (getattr(section, f.name),)
    }


@dataclass(frozen=True)
class RunConfig:
    """
    Everything needed to reproduce a run. With a fixed ``seed`` a run is
    deterministic: every random draw comes from a named sub-stream of the
    seed (see ``pymemrecon.utils.seed_stream``).
    """
    model: ModelConfig = field(default_factory=ModelConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    epochs: int = 10
    steps_per_epoch: int = 20

    @property
    def total_steps(self):
        return self.epochs * self.steps_per_epoch

    def validate(self):
        """
        Returns the list of diagnostics of this config and all its sections,
        each prefixed with the dotted path of the offending key; empty when
        the config is valid.
        """
        diagnostics = []
        for name in _SECTIONS:
            try:
                errors = getattr(self, name).validate()
            except TypeError as exc:
                errors = [f'<values>: wrong value type ({exc})']
            diagnostics.extend(f'{name}.{error}' for error in errors)

        for name, minimum in (('seed', 0), ('epochs', 1), ('steps_per_epoch', 1)):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                diagnostics.append(f'{name}: must be an integer >= {minimum}, got {value!r}')

        if diagnostics:
            return diagnostics
        if not self.data.n_frames > (self.curriculum.n_frames - 1) * self.curriculum.t_min:
            diagnostics.append(
                f'data.n_frames: {self.data.n_frames} frames cannot hold a clip of '
                f'{self.curriculum.n_frames} frames at interval {self.curriculum.t_min}'
            )

        return diagnostics

    def check(self):
        """
        Raises ``ConfigError`` with the diagnostics if the config is invalid,
        otherwise returns the config.
        """
        diagnostics = self.validate()
        if diagnostics:
            raise ConfigError('invalid run config', diagnostics)
        return self

    def to_dict(self):
        out = {'schema_version': CONFIG_SCHEMA_VERSION}
        for name in _SECTIONS:
            out[name] = _section_to_dict(getattr(self, name))
        out.update(seed=self.seed, epochs=self.epochs, steps_per_epoch=self.steps_per_epoch)
        return out

    @classmethod
    def from_dict(cls, document):
        """
        Builds a config from a parsed JSON document. Missing keys take their
        defaults; unknown keys and a wrong schema version are rejected.

        Raises
        ------
        ``pymemrecon.exceptions.ConfigError`` :
            With one diagnostic per problem
        """
        if not isinstance(document, dict):
            raise ConfigError('invalid run config', ['<root>: expected a JSON object'])

        diagnostics = []
        version = document.get('schema_version', CONFIG_SCHEMA_VERSION)
        if version != CONFIG_SCHEMA_VERSION:
            diagnostics.append(
                f'schema_version: unsupported version {version!r}, expected {CONFIG_SCHEMA_VERSION}'
            )

        scalars = ('seed', 'epochs', 'steps_per_epoch')
        allowed = {'schema_version', *_SECTIONS, *scalars}
        for key in sorted(set(document) - allowed):
            diagnostics.append(f'{key}: unknown key')

        kwargs = {
            name: _section_from_dict(name, cls_, document[name], diagnostics)
            for name, cls_ in _SECTIONS.items()
            if name in document
        }
        kwargs.update({key: document[key] for key in scalars if key in document})

        if diagnostics:
            raise ConfigError('invalid run config', diagnostics)

        return cls(**kwargs).check()

    @classmethod
    def from_json(cls, text):
        try:
            document = json.loads(text)
        except ValueError as exc:
            raise ConfigError('invalid run config', [f'<root>: not valid JSON ({exc})'])
        return cls.from_dict(document)

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError('invalid run config', [f'<root>: cannot read "{path}" ({exc.strerror})'])
        return cls.from_json(text)

    def to_json(self):
        return dump_json(self.to_dict())

    def dump(self, path):
        atomic_write_text(path, self.to_json())
