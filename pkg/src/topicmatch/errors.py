"""Exception types raised across the package.

Every error that callers are expected to catch derives from
:class:`TopicMatchError`, so ``except TopicMatchError`` at a CLI or
pipeline boundary is sufficient.
"""


class TopicMatchError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(TopicMatchError):
    """Array shape or channel width does not match the declared contract."""


class DegenerateWarp(TopicMatchError):
    """A projective warp sent a point to (or too close to) the plane at infinity."""


class DegeneratePose(TopicMatchError):
    """Relative pose has no usable epipolar geometry (near-zero baseline)."""


class UndefinedDistance(TopicMatchError):
    """Epipolar distance is undefined because a point sits on an epipole."""


class InsufficientMatches(TopicMatchError):
    """Fewer correspondences than the minimal solver requires."""


class NoConsensus(TopicMatchError):
    """RANSAC found no model supported by enough inliers."""


class EmptyInput(TopicMatchError):
    """An operation that needs at least one element received none."""


class EmptyTopic(TopicMatchError):
    """No covisible topic is available to drive in-topic augmentation."""


class AllMasked(TopicMatchError):
    """Every cell of a patch is masked out; no expectation can be formed."""


class NoGroundTruth(TopicMatchError):
    """A supervised loss was called without ground-truth pairs."""


class NoMatches(TopicMatchError):
    """A loss over matches was called with an empty match list."""


class NonFinite(TopicMatchError):
    """A quantity that must be finite is NaN or infinite."""


class NonFiniteLoss(NonFinite):
    """Training produced a non-finite loss; aborts with the offending pair id."""


class EmptyDataset(TopicMatchError):
    """Dataset generation was asked for zero pairs."""


class MissingFile(TopicMatchError):
    """A file referenced by a manifest does not exist."""


class ChecksumMismatch(TopicMatchError):
    """Stored checksum does not match the bytes on disk."""


class NoImages(TopicMatchError):
    """An image folder contains no readable images."""


class UnreadableImage(TopicMatchError):
    """A file could not be decoded as an image."""


class VersionMismatch(TopicMatchError):
    """A serialized container has an unsupported format version."""


class ConfigHashMismatch(TopicMatchError):
    """Checkpoint was produced under an incompatible model configuration."""


class PopulationMismatch(TopicMatchError):
    """Per-topic populations do not sum to the declared feature count."""


class ConfigError(TopicMatchError):
    """Invalid configuration value or unknown configuration key."""
