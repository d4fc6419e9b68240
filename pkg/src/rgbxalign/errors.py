"""Exception types shared across the pipeline stages."""


class RgbxError(Exception):
    """Base class for all library errors."""


class ImageIOError(RgbxError):
    """Unreadable, unwritable, or unsupported image file."""


class MatchingError(RgbxError):
    """Match production or accumulation failed."""


class EstimationFailedError(RgbxError):
    """Homography estimation failed; caller should fall back to identity."""


class DensifyError(RgbxError):
    """Densification cannot proceed (e.g. no known pixels at any level)."""


class FilterError(RgbxError):
    """Self-match scoring or patch filtering failed."""


class MetricError(RgbxError):
    """Metric undefined for the given inputs."""


class ColmapParseError(RgbxError):
    """Malformed COLMAP text model."""


class PipelineError(RgbxError):
    """Run-level failure (empty input, unresolvable configuration)."""
