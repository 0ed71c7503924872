"""Federated backdoor attacks and client-side trigger synthesis plus patching."""
from .errors import (ConfigurationError, FedPatchError, FormatError, InputError, OptimizationError, PatchingError,
                     TrainingError)

__version__ = "0.1.0"
