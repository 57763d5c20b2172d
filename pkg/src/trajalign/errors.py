"""Exception hierarchy shared by every pipeline stage.

Each family maps to a distinct process exit code so callers scripting the
CLI can tell a bad config from a bad input file or a flaky provider.
"""


class PipelineError(Exception):
    exit_code = 1

    def __init__(self, message, stage=None):
        super().__init__(message)
        self.stage = stage

    def __str__(self):
        msg = super().__str__()
        return f"[{self.stage}] {msg}" if self.stage else msg


class ConfigError(PipelineError):
    exit_code = 2


class ParseError(PipelineError):
    exit_code = 3

    def __init__(self, message, line=None, field=None, stage=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, stage=stage)
        self.line = line
        self.field = field


class ProviderError(PipelineError):
    exit_code = 4


class RetryableProviderError(ProviderError):
    pass


class ProtocolError(ProviderError):
    """A provider answered, but the answer violates the wire contract."""


class ValidationError(PipelineError):
    exit_code = 5


class PreconditionError(ValidationError):
    pass


class TemplateError(ValidationError):
    pass


class DomainError(ValidationError, ValueError):
    pass


class EvaluationError(PipelineError):
    exit_code = 6


class UndefinedCorrelationError(EvaluationError, ValueError):
    pass
