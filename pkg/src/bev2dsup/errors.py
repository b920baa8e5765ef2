"""Exception types raised across the toolkit."""


class Bev2DError(Exception):
    """Base class for all toolkit errors."""


class BehindCamera(Bev2DError):
    """A point lies at or behind the camera's near plane."""


class NotVisible(Bev2DError):
    """A box fails the visibility policy for a camera."""


class SizeLimit(Bev2DError):
    pass


class EmptyMatch(Bev2DError):
    """There is nothing to supervise: no predictions at all."""


class NoDepth(Bev2DError):
    """No finite depth pixel falls inside the queried box."""


class FormatError(Bev2DError):
    """A file does not follow its documented format.

    ``offset`` is a byte offset for binary files, ``line`` a 1-based line
    number for text records. Either may be None.
    """

    def __init__(self, message, *, offset=None, line=None):
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.offset = offset
        self.line = line


class ChecksumMismatch(Bev2DError):
    pass


class UnsupportedVersion(Bev2DError):
    pass


class PlacementFailure(Bev2DError):
    """Rejection sampling could not place a non-overlapping box."""


class LabelAccessError(Bev2DError):
    """3D ground truth was requested from a scene that only carries 2D labels."""


class ConfigError(Bev2DError, ValueError):
    pass
