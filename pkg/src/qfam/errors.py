"""Exception hierarchy shared across the package."""


class QfamError(Exception):
    """Base class for all errors raised by this package."""


# --- token codec ---

class TokenError(QfamError):
    pass


class TruncatedToken(TokenError):
    """Token bytes shorter than the minimum wire size."""


class LengthMismatch(TokenError):
    """Encrypted-body length field inconsistent with the total token length."""


class UnknownKeySequence(TokenError):
    """Token key sequence not present in the key store."""


class AuthenticationFailed(TokenError):
    """AEAD open failed: body, tag, or associated data was tampered with."""


class Expired(TokenError):
    """Token authenticated but its expiry lies in the past."""


# --- challenge ---

class Exhausted(QfamError):
    """All 2^28 candidate solutions were tried without success."""


class Cancelled(QfamError):
    """Cooperative cancellation requested while solving."""


# --- packet framing ---

class CodecError(QfamError):
    pass


class Truncated(CodecError):
    """Datagram ends before the message is complete."""


class UnknownType(CodecError):
    """First byte is not a recognised message tag."""


class OversizedDatagram(CodecError):
    """Encoded datagram exceeds the 1200-byte handshake cap."""


class MalformedToken(CodecError):
    """Retry packet carries bytes that do not parse as a token."""


# --- key exchange ---

class UnsupportedGroup(QfamError):
    """Key-exchange group id not in the supported registry."""


class InvalidPoint(QfamError):
    """Peer public share failed point validation."""


# --- transport / harness ---

class Timeout(QfamError):
    """No datagram arrived within the receive timeout."""


class ConfigError(QfamError):
    """Scenario configuration failed validation."""


class BackendError(QfamError):
    """Transport backend could not be set up or operated."""
