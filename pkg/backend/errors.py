"""
Trinity Errors
Exception types raised by the library; the CLI maps them to exit codes
"""


class TrinityError(Exception):
    """Base class for every error raised by the Trinity modules"""


class InvalidInputError(TrinityError, ValueError):
    """Input violates an operation's precondition"""


class ConfigError(TrinityError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class MalformedRecordError(TrinityError):
    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{self.path}:{line_number}: {message}")


class StreamOrderError(TrinityError):
    """Event index went backwards for a sketch bucket"""


class StageError(TrinityError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")


class MissingUsersError(TrinityError):
    def __init__(self, user_ids):
        self.user_ids = sorted(user_ids)
        super().__init__(f"missing retrieval outputs for users: {self.user_ids}")
