"""Exception types shared across the package."""


class BoundedAttentionError(Exception):
    pass


class AllMaskedRow(BoundedAttentionError, ValueError):
    """A softmax row had no finite entry, i.e. a query was allowed no keys."""


class UnknownNode(BoundedAttentionError, KeyError):
    pass


class ZeroMass(BoundedAttentionError, ValueError):
    pass


class DegenerateData(BoundedAttentionError, ValueError):
    pass


class ShapeMismatch(BoundedAttentionError, ValueError):
    pass


class SchemaError(BoundedAttentionError, ValueError):
    pass


class ValidationError(BoundedAttentionError, ValueError):
    def __init__(self, field, message=""):
        self.field = field
        super().__init__(f"{field}: {message}" if message else field)


class EmptyBox(BoundedAttentionError, ValueError):
    pass


class RoleConflict(BoundedAttentionError, ValueError):
    pass


class EmptySubject(BoundedAttentionError, ValueError):
    pass


class NonFiniteGradient(BoundedAttentionError, FloatingPointError):
    pass


class DivergedLoss(BoundedAttentionError, FloatingPointError):
    pass


class NoRecords(BoundedAttentionError, ValueError):
    pass


class UnknownColor(BoundedAttentionError, KeyError):
    pass
