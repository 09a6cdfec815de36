__all__ = [
    'CheckpointError',
    'ConfigError',
    'DegenerateInputError',
    'DimensionError',
    'EmptyGroundTruthError',
    'EmptyMemoryError',
    'MemReconError',
    'NonFiniteError',
    'PipelineOrderError',
    'RankError',
    'EMPTY_MEMORY_MSG',
    'EMPTY_GROUND_TRUTH_MSG',
    'PIPELINE_ORDER_MSG',
]


import textwrap


EMPTY_MEMORY_MSG = textwrap.dedent(
    """
    Empty memory bank - a memory read needs at least one key/value token in
    the working or long-term memory. Run the two-view initialisation first
    and insert its key/value tokens before reading.
    """
).strip()


EMPTY_GROUND_TRUTH_MSG = textwrap.dedent(
    """
    Empty ground truth - none of the supplied pointmaps has a valid pixel, so
    there is nothing to normalise or supervise against.
    """
).strip()


PIPELINE_ORDER_MSG = textwrap.dedent(
    """
    Pipeline order error - a memory-conditioned step was requested with an
    empty memory bank. Only the two-view initialisation step may run
    without memory.
    """
).strip()


class MemReconError(Exception):
    """
    Base class of all errors raised by ``pymemrecon``.
    """


class DimensionError(MemReconError, ValueError):
    """
    Operand shapes are incompatible.
    """


class NonFiniteError(MemReconError, ArithmeticError):
    """
    A tensor operation produced NaN or infinite values.
    """


class ConfigError(MemReconError, ValueError):
    """
    Invalid configuration - carries the list of schema diagnostics, one
    string per problem, each prefixed with the dotted path of the offending
    key.
    """
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])

    def __str__(self):
        if not self.diagnostics:
            return super().__str__()

        return '\n'.join([super().__str__(), *self.diagnostics])


class PipelineOrderError(MemReconError, RuntimeError):
    pass


class EmptyMemoryError(MemReconError, ValueError):
    pass


class EmptyGroundTruthError(MemReconError, ValueError):
    pass


class DegenerateInputError(MemReconError, ValueError):
    pass


class RankError(MemReconError, ValueError):
    pass


class CheckpointError(MemReconError, ValueError):
    pass
