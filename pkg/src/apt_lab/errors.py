"""Exception types shared across the package."""


class AptLabError(Exception):
    """Base class for all package errors."""


class InvalidInputError(AptLabError, ValueError):
    """An operation received arguments outside its documented domain."""


class ConfigError(AptLabError, ValueError):
    """A configuration value is unknown, mistyped or violates an invariant."""


class PrerequisiteError(AptLabError):
    """A stage was requested before the stage it depends on has run."""


class CorpusFormatError(AptLabError, ValueError):
    """An image corpus file is malformed."""


class CheckpointFormatError(AptLabError, ValueError):
    """A checkpoint container could not be parsed."""
