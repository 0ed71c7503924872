class FedPatchError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FedPatchError):
    pass


class InputError(FedPatchError):
    pass


class FormatError(FedPatchError):
    """Malformed IDX container."""


class TrainingError(FedPatchError):
    def __init__(self, message, client_id=None):
        if client_id is not None:
            message = f"client {client_id}: {message}"
        super().__init__(message)
        self.client_id = client_id


class OptimizationError(FedPatchError):
    """Trigger optimization produced a non-finite loss twice."""


class PatchingError(FedPatchError):
    pass
