"""Exception hierarchy shared by every stage.

Each error carries an ``exit_code`` class attribute so the CLI can map it
to the documented process exit status without a lookup table.
"""


class SaeError(Exception):
    exit_code = 1


# validation / input problems -> exit 2
class ValidationError(SaeError):
    exit_code = 2


class ConfigError(ValidationError):
    pass


class MalformedHeader(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NonFiniteEntry(ValidationError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"non-finite entry at flat index {index}")


class NonBinaryEntry(ValidationError):
    pass


class RaggedRow(ValidationError):
    pass


class EmptyHeader(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class InvalidShape(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class IoFailure(SaeError):
    exit_code = 2


# numerical failures -> exit 3
class NumericalError(SaeError):
    exit_code = 3


class DegenerateData(NumericalError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch, batch, message=None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message or f"loss became non-finite at epoch {epoch}, batch {batch}")


class NoDefinedNeurons(NumericalError):
    pass


class InsufficientPositives(NumericalError):
    pass


class InsufficientNegatives(NumericalError):
    pass


# endpoint / naming failures -> exit 4
class EndpointError(SaeError):
    exit_code = 4


class EndpointUnreachable(EndpointError):
    pass


class MalformedResponse(EndpointError):
    pass


class EmptyConcept(EndpointError):
    pass


class TooManyUnparseable(EndpointError):
    pass


class ImageLoadFailure(EndpointError):
    pass


class OversizePayload(EndpointError):
    pass
