"""Exception types raised across the package."""


class DrFuseError(Exception):
    pass


class InvalidInputError(DrFuseError, ValueError):
    pass


class ShapeError(DrFuseError, ValueError):
    pass


class InvalidMaskError(DrFuseError, ValueError):
    pass


class InvalidConfigError(DrFuseError, ValueError):
    pass


class SchemaError(DrFuseError, ValueError):
    """A dataset record failed validation. Carries the record id and field."""

    def __init__(self, record_id, field, message):
        self.record_id = record_id
        self.field = field
        super().__init__(f"record {record_id!r}, field {field!r}: {message}")


class UndefinedMetricError(DrFuseError, ValueError):
    pass


class TrainingDivergenceError(DrFuseError, RuntimeError):
    def __init__(self, term, epoch=None):
        self.term = term
        self.epoch = epoch
        where = f" at epoch {epoch}" if epoch is not None else ""
        super().__init__(f"non-finite value in loss term {term!r}{where}")
