"""Exception hierarchy.

Every error raised by the package derives from :class:`MedRepError`. The CLI
maps the three intermediate families onto exit codes: input/config problems
(:class:`InputError`, exit 2), numeric failures (:class:`NumericError`,
exit 3) and stale or corrupt artifacts (:class:`ArtifactError`, exit 4).
"""


class MedRepError(Exception):
    exit_code = 1


class InputError(MedRepError):
    exit_code = 2


class NumericError(MedRepError):
    exit_code = 3


class ArtifactError(MedRepError):
    exit_code = 4


# vocabulary / files
class DuplicateConcept(InputError):
    pass


class BadDomain(InputError):
    pass


class UnknownConcept(InputError):
    pass


class ParseError(InputError):
    pass


class IoError(InputError):
    pass


class ConfigError(InputError):
    pass


# shapes and numerics
class ShapeError(InputError):
    pass


class BadDimension(InputError):
    pass


class DegenerateEmbedding(NumericError):
    pass


class DivergedError(NumericError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


# neighbors
class TooFewConcepts(InputError):
    pass


class NotIndexed(InputError):
    pass


# trajectories
class NotBinned(InputError):
    pass


class OrderError(InputError):
    pass


class TooLong(InputError):
    pass


# evaluation
class BadVisit(InputError):
    pass


class EmptyTrajectory(InputError):
    pass


class DegenerateLabels(InputError):
    pass


class UndefinedMetric(InputError):
    pass


# artifacts
class ContainerError(ArtifactError):
    """Bad magic, truncated payload or unsupported version."""


class ChecksumMismatch(ArtifactError):
    pass
