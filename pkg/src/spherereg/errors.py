"""Exception hierarchy shared across the package."""


class SphereRegError(Exception):
    """Base class for all domain errors raised by spherereg."""


# geometry
class PointBehindCamera(SphereRegError):
    pass


class DegenerateConic(SphereRegError):
    pass


class NotAnEllipse(SphereRegError):
    pass


# detection
class EmptyMask(SphereRegError):
    pass


class FitFailed(SphereRegError):
    pass


class NoEdges(SphereRegError):
    pass


class RansacFailed(SphereRegError):
    pass


# meshes
class ParseError(SphereRegError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnsupportedFormat(SphereRegError):
    pass


class InsufficientSupport(SphereRegError):
    pass


class Diverged(SphereRegError):
    pass


class EmptyMesh(SphereRegError):
    pass


# registration
class PnpDegenerate(SphereRegError):
    pass


class NoConsistentMatch(SphereRegError):
    def __init__(self, message, score=None):
        super().__init__(message)
        self.score = score


class NotConverged(SphereRegError):
    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class SingularNormalEquations(SphereRegError):
    pass


class MissingControlDetections(SphereRegError):
    pass


# synthetic scenes
class PlacementFailed(SphereRegError):
    pass
