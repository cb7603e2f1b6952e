"""Desk-scale multi-modal (text + layout + image) document encoder."""

__version__ = "0.1.0"

from .errors import ContractError, DimensionError, DivergenceError, SchemaError, ValidationError  # noqa: E402
from .model import LayoutLMv2, ModelConfig  # noqa: E402

__all__ = ["ContractError", "DimensionError", "DivergenceError", "LayoutLMv2", "ModelConfig", "SchemaError",
           "ValidationError", "__version__"]
