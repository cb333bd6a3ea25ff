"""Error taxonomy shared across the package.

Everything derives from ValueError except I/O problems, which stay OSError
so the CLI can map validation failures and I/O failures to distinct exit
codes.
"""


class ValidationError(ValueError):
    """An input value violates a documented precondition."""


class ConfigError(ValidationError):
    """A configuration field is out of its allowed range."""


class DimensionError(ValidationError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(ValidationError):
    """An operation-level contract was violated (e.g. non-scalar loss)."""


class ParseError(ValidationError):
    """A prompt string does not match the grammar."""


class RenderError(ValidationError):
    """A scene could not be placed within the retry budget."""


class SamplerDivergenceError(ValidationError):
    """The sampler produced non-finite values; message names the step."""
