"""Failure taxonomy for the pipeline.

Domain failures (a candidate that will not validate) are ordinary return
values, never exceptions. Exceptions are reserved for infrastructure and
configuration problems.
"""


class RedecError(Exception):
    """Base for everything this package raises on purpose."""


class ConfigError(RedecError):
    """Bad user input or configuration (CLI exit code 2)."""


class ToolMissing(RedecError):
    """External tool not found on PATH."""


class ToolTimeout(RedecError):
    """External tool exceeded its own timeout budget."""


class ToolFailure(RedecError):
    """External tool exited nonzero; message carries its stderr."""


class EmptyOutput(RedecError):
    """Decompiler produced no source text."""


class DecompileFailed(RedecError):
    """Umbrella for a backend that could not produce usable output."""


class EndpointUnavailable(RedecError):
    """Model endpoint still failing after the retry budget."""


class AuthError(RedecError):
    """Model endpoint rejected our credentials; retrying cannot help."""


class EmptyRepair(RedecError):
    """Model reply contained no extractable code."""


class AllInputsFailed(RedecError):
    """Oracle generation: the original binary failed on every input."""


class CorpusMalformed(RedecError):
    """Corpus directory does not match the expected layout."""
