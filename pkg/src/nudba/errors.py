"""Exception types raised across the package.

Every failure mode that callers are expected to catch gets its own class
here so that tests and drivers can discriminate without string matching.
"""


class NudbaError(Exception):
    """Base class for all package-specific errors."""


# ---------------------------------------------------------------- geometry

class NonPositiveDepth(NudbaError):
    """A point to be projected has z <= 0 in the camera frame."""


class PixelOutOfBounds(NudbaError):
    """A pixel lookup fell outside the image rectangle."""


class DegenerateWarp(NudbaError):
    """A homography warp produced a point at or behind the epipolar horizon."""


class DegenerateParallax(NudbaError):
    """Triangulation rays are too close to parallel to intersect reliably."""


class NonUnitDirection(NudbaError):
    """A direction vector expected to be unit length is not."""


# ---------------------------------------------------------------- autodiff

class NonScalarOutput(NudbaError):
    """Reverse sweep was requested from a non-scalar tape value."""


class NonFiniteGradient(NudbaError):
    """A backward pass produced NaN or infinite adjoints."""


class UnregisteredPrimitive(NudbaError):
    """The tape recorded an op name with no registered backward rule."""


# ---------------------------------------------------------------- field

class EmptyField(NudbaError):
    """Field evaluation was requested on an empty batch of points."""


class InvalidShellIndex(NudbaError):
    """Cuboid shell index outside [0, num_shells]."""


# ---------------------------------------------------------------- sampling

class EmptyPointCloud(NudbaError):
    """Octree construction received no points inside the bounding box."""


class RayInsideBoxOnly(NudbaError):
    """Ray/box clipping was asked for a ray that never enters the box."""


class EmptySamples(NudbaError):
    """An operation that needs at least one ray sample received none."""


# ---------------------------------------------------------------- rendering

class MissingBaseline(NudbaError):
    """Disparity rendering requested without a stereo baseline."""


class MissingColorModel(NudbaError):
    """Photometric rendering requested but the field has no color head."""


class EmptyBatch(NudbaError):
    """A renderer was called with zero rays."""


# ---------------------------------------------------------------- losses

class NonFiniteTerm(NudbaError):
    """A loss term evaluated to NaN or infinity."""


# ---------------------------------------------------------------- dba

class PlaneOutsideBox(NudbaError):
    """Estimated ground plane does not intersect the scene bounding box."""


class InsufficientCorrespondences(NudbaError):
    """Too few valid flow correspondences to run an estimator."""


class InsufficientPoints(NudbaError):
    """Too few 3-D points survive filtering for plane fitting."""


class DegenerateGeometry(NudbaError):
    """Sampled points are collinear or otherwise unusable for a model fit."""


class DivergedLoss(NudbaError):
    """Training loss became NaN or infinite."""


# ---------------------------------------------------------------- io

class BadMagic(NudbaError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFile(NudbaError):
    """A binary file ended before the declared payload was complete."""


class DimensionMismatch(NudbaError):
    """Declared dimensions disagree with expected or cross-file dimensions."""


class ParseError(NudbaError):
    """A text file (trajectory, config, mesh) failed to parse."""


class CountMismatch(NudbaError):
    """Element counts in a file disagree with its header."""


class EmptyMesh(NudbaError):
    """Mesh extraction produced no vertices."""
