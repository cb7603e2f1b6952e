"""Exception hierarchy shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class ValidationError(ValueError):
    """Input data violates a domain invariant (bad box, unknown label, ...)."""


class SchemaError(ValidationError):
    """A corpus or config file does not match the expected schema.

    ``path`` names the offending field, e.g. ``tokens[3].box``.
    """

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, component: str, value: float):
        self.step = step
        self.component = component
        self.value = value
        super().__init__(f"non-finite {component} loss ({value}) at step {step}")
