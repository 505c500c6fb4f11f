"""Exception hierarchy shared by every subsystem."""


class SimError(Exception):
    """Base class for all simulator errors."""


class InvariantViolation(SimError, ValueError):
    """A value was constructed or encoded outside its documented range."""


class DegenerateInput(SimError, ValueError):
    pass


class OffRoute(SimError):
    pass


# codec
class DecodeError(SimError):
    """Base for every wire-decoding failure."""


class Truncated(DecodeError):
    pass


class UnknownKind(DecodeError):
    pass


class FieldOutOfRange(DecodeError):
    pass


class UnknownEthertype(DecodeError):
    pass


# radio
class PayloadTooLarge(SimError, ValueError):
    pass


# connectivity / control plane
class StalePoA(SimError):
    pass


class ClockSkew(SimError):
    pass


class InsufficientHistory(SimError):
    pass


class UnknownRsu(SimError, KeyError):
    pass


# integrity / pipeline
class CorruptStream(SimError):
    pass


class AuthFailure(SimError):
    pass


class KeyUnavailable(SimError):
    pass


class CryptoFailure(SimError):
    """Sender-side sealing failed (missing or unusable keys)."""


class DecryptFailure(SimError):
    pass


class IntegrityFailure(SimError):
    pass


class StorageFailure(SimError):
    pass


# analytics
class DegenerateData(SimError, ValueError):
    pass


class InsufficientWindow(SimError, ValueError):
    pass


class NoRsuInRange(SimError):
    """No RSU hears the emergency vehicle; ``events`` holds what still ran."""

    def __init__(self, message, events=()):
        super().__init__(message)
        self.events = list(events)


# scenario
class ParseError(SimError):
    pass


class ValidationError(SimError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))
