class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    """The checker process died or the endpoint could not be reached."""


class ProtocolError(BackendError):
    """The checker answered with something that is not a valid response."""


class CheckTimeout(BackendError):
    """Raised by sessions when a check exceeds its deadline."""
