"""Exception hierarchy shared by every stage; exit codes follow the CLI contract."""


class GelidError(Exception):
    """Base class for pipeline failures"""
    exit_code = 3


class ConfigError(GelidError):
    """Bad configuration file, flag or environment override"""
    exit_code = 1


class DataFormatError(GelidError, ValueError):
    """Input data that does not follow its documented format"""
    exit_code = 2


class SubtitleParseError(DataFormatError):
    """Malformed SRT/WebVTT content"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FrameFormatError(DataFormatError):
    """Malformed PPM frame or descriptor file"""


class SchemaVersionError(DataFormatError):
    """Artifact written with an unsupported schema version"""


class UndefinedMetricError(GelidError, ValueError):
    """Metric whose value is not defined for the given input"""
    exit_code = 2


class ExportError(GelidError):
    """Artifact could not be written"""
    exit_code = 2

    def __init__(self, path, cause):
        self.path = path
        self.cause = cause
        super().__init__(f"cannot write {path}: {cause}")

    def __reduce__(self):
        return type(self), (self.path, self.cause)


class InvariantViolation(GelidError):
    """Internal consistency check failed"""
    exit_code = 3


class StageError(GelidError):
    """Failure of one pipeline stage for one video"""

    def __init__(self, stage, video_id, cause):
        self.stage = stage
        self.video_id = video_id
        self.cause = cause
        where = f" (video {video_id})" if video_id else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")

    def __reduce__(self):
        return type(self), (self.stage, self.video_id, self.cause)

    @property
    def exit_code(self):
        if isinstance(self.cause, GelidError):
            return self.cause.exit_code
        if isinstance(self.cause, (ValueError, OSError)):
            return 2
        return 3
