class RebalanceError(Exception):
    """Base class for every error raised by the rebalance library."""

    kind = "rebalance-error"

    def to_record(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class InvalidInputError(RebalanceError, ValueError):
    kind = "invalid-input"


class UsageError(RebalanceError):
    kind = "usage"


class ParseError(RebalanceError):
    """A GEMB/GHED/CSV payload could not be decoded.

    Args:
        message (str): What went wrong
        offset (int): Byte offset (or CSV row) where decoding stopped
    """

    kind = "parse"

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (offset {offset})")
        self.message = message
        self.offset = offset

    def __reduce__(self):
        return (self.__class__, (self.message, self.offset))


class MagicMismatchError(ParseError):
    kind = "magic-mismatch"


class VersionError(ParseError):
    kind = "unsupported-version"


class TruncationError(ParseError):
    kind = "truncated"


class LabelRangeError(ParseError):
    kind = "label-out-of-range"


class SizeOverflowError(ParseError):
    kind = "size-overflow"


class DegenerateSplitError(RebalanceError):
    kind = "degenerate-split"


class DegenerateStratumError(RebalanceError):
    kind = "degenerate-stratum"

    def __init__(self, message: str, stratum=None):
        super().__init__(message)
        self.stratum = stratum

    def __reduce__(self):
        return (self.__class__, (str(self), self.stratum))


class MissingAnnotationError(RebalanceError):
    kind = "missing-annotation"


class PoolExhaustedError(RebalanceError):
    kind = "pool-exhausted"


class DivergenceError(RebalanceError):
    kind = "divergence"

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.message = message
        self.step = step

    def __reduce__(self):
        return (self.__class__, (self.message, self.step))


# b * logit must stay inside [-1, 1] for the link to give a probability
class LinkValidityError(InvalidInputError):
    kind = "link-validity"


class TheoremViolationError(RebalanceError):
    kind = "theorem-violation"

    def __init__(self, message: str, instance=None):
        super().__init__(message)
        self.instance = instance

    def __reduce__(self):
        return (self.__class__, (str(self), self.instance))

    def to_record(self) -> dict:
        record = super().to_record()
        if self.instance is not None:
            record["counterexample"] = self.instance.model_dump()
        return record
