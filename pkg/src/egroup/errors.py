"""Exception types shared across the package."""


class EGroupError(Exception):
    """Base class for all errors raised by this package."""


class SetupError(EGroupError):
    """An endpoint could not be set up (e.g. the listen address is taken)."""


class ConnectError(EGroupError):
    """A peer could not be reached or refused the connection."""


class DeliveryError(EGroupError):
    """A message could not be handed to the transport (e.g. closed channel)."""


class FencingError(EGroupError):
    """Communication was blocked because it belongs to a superseded epoch."""

    def __init__(self, message, envelope_epoch=None, receiver_epoch=None):
        super().__init__(message)
        self.envelope_epoch = envelope_epoch
        self.receiver_epoch = receiver_epoch


class RetiredGroupError(EGroupError):
    """An operation was attempted on a group that has been retired."""


class ProtocolError(EGroupError):
    """Members of a collective call disagreed, or a wire message was malformed."""


class SpawnError(EGroupError):
    """Child processes could not be created or failed to register in time."""


class NotSpawnedError(EGroupError):
    """The calling process was not created by spawn (no bootstrap ticket)."""


class ShutdownError(EGroupError):
    """The local endpoint was closed while an operation was waiting on it."""


# Wire-level error outcomes name the exception class so the receiving side can
# re-raise the same type.
_BY_NAME = {
    cls.__name__: cls
    for cls in (
        EGroupError,
        SetupError,
        ConnectError,
        DeliveryError,
        FencingError,
        RetiredGroupError,
        ProtocolError,
        SpawnError,
        NotSpawnedError,
        ShutdownError,
    )
}


def error_from_name(name: str, message: str) -> EGroupError:
    """Rebuild an error shipped over the wire; unknown names degrade to the base class."""
    return _BY_NAME.get(name, EGroupError)(message)
