"""Exception types shared across the package."""


class SplatCalError(Exception):
    """Base class for all splatcal errors."""


class DomainError(SplatCalError):
    """An argument is outside its mathematical domain."""


class BehindCamera(SplatCalError):
    """A point lies at or behind the near plane and cannot be projected."""


class DimensionMismatch(SplatCalError):
    """Two images (or arrays) that must share a shape do not."""


class EmptyFrustum(SplatCalError):
    """No gaussian is visible from the camera; the view is unusable."""


class ZeroQuaternion(SplatCalError):
    """A quaternion collapsed to (near) zero norm and cannot be normalized."""


class NonFiniteGradient(SplatCalError):
    """A gradient contains NaN or Inf."""


class UnsupportedCameraModel(SplatCalError):
    """COLMAP camera model other than PINHOLE / SIMPLE_PINHOLE."""


class ParseError(SplatCalError):
    """Malformed text input; carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DanglingCameraRef(SplatCalError):
    """An image entry references a camera id that does not exist."""


class PlyHeaderError(SplatCalError):
    """Malformed or unsupported PLY header."""


class MissingProperty(SplatCalError):
    """A required PLY property is absent; carries the property name."""

    def __init__(self, name: str):
        super().__init__(f"missing PLY property: {name}")
        self.name = name


class ImageFormatError(SplatCalError):
    """Malformed image file; carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"byte {offset}: {message}")
        self.offset = offset


class CameraIdMismatch(SplatCalError):
    """Two calibrations do not share the expected camera/image ids."""
