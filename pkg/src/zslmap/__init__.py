"""Category-specific visual-semantic mappings for zero-shot classification."""

from zslmap.errors import (
    DatasetError,
    DefinitenessError,
    DimensionError,
    ZslError,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetError",
    "DefinitenessError",
    "DimensionError",
    "ZslError",
    "__version__",
]
