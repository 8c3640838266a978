"""Software TPM 2.0 Enhanced Authorization simulator with an eID signing helper."""
from .errors import EidError, RaError, StateFileError, TpmError

__version__ = "0.1.0"

__all__ = ["EidError", "RaError", "StateFileError", "TpmError", "__version__"]
