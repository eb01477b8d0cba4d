"""Exception types shared across the package."""


class SGDLError(Exception):
    pass


class ParseError(SGDLError, ValueError):
    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        super().__init__(where + message)


class ConfigError(SGDLError, ValueError):
    pass


class SamplingError(SGDLError, RuntimeError):
    pass


class NumericError(SGDLError, FloatingPointError):
    def __init__(self, message, sample_id=None):
        self.sample_id = sample_id
        super().__init__(message if sample_id is None else f"{message} (sample {sample_id})")


class DegenerateFitError(SGDLError, ValueError):
    pass


class UnsupportedModeError(SGDLError, ValueError):
    """Raised when a diagnostic needs ground-truth noise flags that are absent."""


class ContractError(SGDLError, RuntimeError):
    pass


class StageError(SGDLError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
