"""Coverage-aware bounds on contrastive losses with many negatives."""

from .errors import DivergenceError, FormatError, NegboundError, NumericalError

__version__ = "0.1.0"

__all__ = ["DivergenceError", "FormatError", "NegboundError", "NumericalError", "__version__"]
