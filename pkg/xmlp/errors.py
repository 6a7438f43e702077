"""
Exceptions raised by xmlp, grouped by the category reported on the command
line. Each class carries the process exit code used by `xmlp.main.main`.
"""
import typing as t


class XmlpError(Exception):
    category: str = "usage"
    exit_code: int = 1


class ConfigError(XmlpError):
    category = "config"
    exit_code = 2


class DataError(XmlpError):
    category = "data"
    exit_code = 3


class ParseError(DataError):
    """A dataset file violates its binary format."""

    def __init__(self, msg: str, path: t.Any = None, offset: t.Optional[int] = None):
        self.path = path
        self.offset = offset
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)


class CheckpointError(DataError):
    pass


class NumericError(XmlpError):
    category = "numeric"
    exit_code = 4


class ShapeError(XmlpError, ValueError):
    pass


class UsageError(XmlpError):
    pass
