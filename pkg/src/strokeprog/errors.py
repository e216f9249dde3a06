"""Shared exception hierarchy.

Every typed failure in the pipeline derives from PipelineError so callers
(and the CLI) can distinguish malformed-input problems from genuine bugs.
Concrete error classes live next to the code that raises them.
"""


class PipelineError(Exception):
    """Base class for all typed pipeline failures."""


class ValidationError(PipelineError):
    """A configuration or argument failed validation before any work ran."""
