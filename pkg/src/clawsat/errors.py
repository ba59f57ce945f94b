"""Exception hierarchy shared by every module in the package."""


class ClawsatError(Exception):
    """Base class for all errors raised by this package."""


# corpus
class MalformedSource(ClawsatError):
    """Source text cannot be tokenized (empty, bad literal, illegal char)."""


class EmptyCorpus(ClawsatError):
    """An operation that needs programs received none."""


class ParseError(ClawsatError):
    """A JSONL corpus line is structurally invalid."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class DuplicateId(ClawsatError):
    """Two programs in one corpus share an id."""


# transform
class IllegalPayload(ClawsatError):
    """Payload violates the transformation rules (collision, special, shape)."""


class StaleSite(ClawsatError):
    """The referenced site does not exist in the target program."""


class NoSites(ClawsatError):
    """The program offers no transformable sites."""


class ExecutionTimeout(ClawsatError):
    """A fixture run exceeded its wall-clock budget."""


# model
class IdOutOfRange(ClawsatError):
    """A token id does not fit the model's vocabulary."""


class NonFiniteLoss(ClawsatError):
    """A loss or gradient evaluated to NaN/Inf."""


class VocabMismatch(ClawsatError):
    """Checkpoint vocabulary digest differs from the supplied vocabulary."""


class ShapeMismatch(ClawsatError):
    """Two checkpoints disagree on tensor names or shapes."""


# contrastive
class DegenerateBatch(ClawsatError):
    """Contrastive batch too small to contain a negative."""


class ZeroVector(ClawsatError):
    """Cosine similarity of a zero-norm vector is undefined."""


# train / analyze
class EmptyHistory(ClawsatError):
    """No epochs recorded, nothing to select from."""


class EmptyGold(ClawsatError):
    """F1 against an empty reference sequence is undefined."""


class EmptyTrainSet(ClawsatError):
    """Nearest-neighbour retrieval needs at least one training example."""


# cli / config
class ConfigError(ClawsatError):
    """Invalid configuration key or value."""
