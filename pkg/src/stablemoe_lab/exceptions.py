"""Error categories. The CLI prefixes messages with the category name."""


class StableMoEError(Exception):
    category = "error"


class ContractError(StableMoEError, ValueError):
    """A precondition of an operation was violated."""

    category = "contract"


class DimensionError(ContractError):
    """Tensor shapes are incompatible."""

    category = "dimension"


class IntegrityError(StableMoEError):
    """A checkpoint, export file or frozen router failed verification."""

    category = "integrity"
