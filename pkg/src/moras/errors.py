"""Exception hierarchy shared by all stages of the pipeline."""


class MorasError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MorasError, ValueError):
    """A tensor reached a layer with an incompatible shape."""

    def __init__(self, layer: str, expected, actual):
        self.layer = layer
        self.expected = expected
        self.actual = actual
        super().__init__(f"{layer}: expected shape {expected}, got {actual}")


class NumericError(MorasError, FloatingPointError):
    """A NaN or infinity appeared in a forward or backward pass."""


class GenomeError(MorasError, ValueError):
    """A genome has the wrong length or out-of-range genes."""


class ConfigError(MorasError, ValueError):
    """A configuration document or argument is invalid or incomplete."""


class FormatError(MorasError, ValueError):
    """A dataset or model file could not be parsed.

    Attributes:
        offset: byte offset at which parsing failed, if known.
    """

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class DatasetValidationError(MorasError, ValueError):
    """Dataset contents violate an invariant (e.g. label out of range)."""


class TrainingDivergence(MorasError, FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float, genome_id=None):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.genome_id = genome_id
        where = f"epoch {epoch}, batch {batch}"
        if genome_id is not None:
            where = f"genome {genome_id}, {where}"
        super().__init__(f"training diverged at {where} (loss={loss})")

    def with_genome(self, genome_id) -> "TrainingDivergence":
        return TrainingDivergence(self.epoch, self.batch, self.loss, genome_id)
