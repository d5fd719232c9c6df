"""
Error hierarchy shared by every module. The exit code of each class is what the CLI returns.
"""


class SlamError(Exception):
    """Base class for all engine errors"""

    exit_code = 1
    category = "error"


class UsageError(SlamError):
    """Bad flags, config keys or paths"""

    exit_code = 2
    category = "usage"


class ShapeMismatchError(SlamError, ValueError):
    """Array arguments with incompatible dimensions"""

    exit_code = 2
    category = "usage"


class IngestionError(SlamError):
    """Missing or garbled input file"""

    exit_code = 3
    category = "ingestion"

    def __init__(self, message: str, path=None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{message}: {self.path}" if self.path else message)


class NumericalError(SlamError):
    """Numerical failure inside an estimator"""

    exit_code = 4
    category = "numerical"


class BehindCameraError(NumericalError, ValueError):
    """Projection of a point with z <= 0"""


class DegenerateGeometryError(NumericalError):
    """No pose model supported by at least 4 inliers"""


class ScaleAlignmentError(NumericalError):
    """Scale alignment failed even after the remedy path"""


class TrackingFailureError(NumericalError):
    """Too many frames fell back to the motion model"""


class StaleRenderError(NumericalError):
    """Backward pass requested on an outdated forward cache"""


class ArtifactIOError(SlamError):
    """Writing an artifact failed"""

    exit_code = 5
    category = "io"

    def __init__(self, message: str, path=None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{message}: {self.path}" if self.path else message)
