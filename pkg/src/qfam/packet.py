"""Framing for the simplified handshake wire messages.

One message per datagram, capped at 1200 bytes. Initial, Shlo and Reject use
a plain type tag; Retry uses a QUIC-style long-header first byte so the
mitigation bit can live in the RFC 9000 unused nibble:

    first byte = form(1) | fixed(1) | type(0b11) | unused(4)

with the mitigation bit as the MSB of the unused nibble. A legacy parser may
mask the whole nibble and still recover the token.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Union

from .errors import OversizedDatagram, Truncated, UnknownType

MAX_DATAGRAM = 1200

TAG_INITIAL = 0x01
TAG_SHLO = 0x03
TAG_REJECT = 0x04

RETRY_BASE = 0xF0  # form=1, fixed=1, long packet type 0b11, unused nibble 0
MITIGATION_BIT = 0x08

DEFAULT_VERSION = 0x00000001


class RejectReason(enum.IntEnum):
    BAD_TOKEN = 1
    BAD_CHALLENGE = 2
    OVERLOADED = 3
    UNSUPPORTED_GROUP = 4


def _cid(name: str, value: bytes) -> None:
    if len(value) > 20:
        raise ValueError(f"{name} longer than 20 bytes: {len(value)}")


@dataclass(frozen=True)
class InitialMessage:
    dcid: bytes
    scid: bytes
    token: bytes = b""
    group_id: int = 0x001D
    key_share: bytes = b""
    version: int = DEFAULT_VERSION

    def __post_init__(self) -> None:
        _cid("dcid", self.dcid)
        _cid("scid", self.scid)


@dataclass(frozen=True)
class RetryPacket:
    dcid: bytes
    scid: bytes
    token: bytes
    mitigation_bit: int = 0
    version: int = DEFAULT_VERSION

    def __post_init__(self) -> None:
        _cid("dcid", self.dcid)
        _cid("scid", self.scid)
        if self.mitigation_bit not in (0, 1):
            raise ValueError("mitigation_bit must be 0 or 1")


@dataclass(frozen=True)
class ShloMessage:
    scid: bytes
    group_id: int
    key_share: bytes

    def __post_init__(self) -> None:
        _cid("scid", self.scid)


@dataclass(frozen=True)
class RejectMessage:
    reason: RejectReason

    def __post_init__(self) -> None:
        object.__setattr__(self, "reason", RejectReason(self.reason))


HandshakeMessage = Union[InitialMessage, RetryPacket, ShloMessage, RejectMessage]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} more bytes at offset {self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("!I", self.take(4))[0]

    def lv8(self) -> bytes:
        return self.take(self.u8())

    def lv16(self) -> bytes:
        return self.take(self.u16())

    def rest(self) -> bytes:
        chunk = self.data[self.pos:]
        self.pos = len(self.data)
        return chunk

    def done(self) -> None:
        if self.pos != len(self.data):
            raise Truncated(
                f"{len(self.data) - self.pos} trailing bytes after message")


def _lv8(value: bytes) -> bytes:
    return bytes([len(value)]) + value


def _lv16(value: bytes) -> bytes:
    return struct.pack("!H", len(value)) + value


def encode_message(msg: HandshakeMessage) -> bytes:
    if isinstance(msg, InitialMessage):
        out = b"".join((
            bytes([TAG_INITIAL]),
            struct.pack("!I", msg.version),
            _lv8(msg.dcid), _lv8(msg.scid),
            _lv16(msg.token),
            struct.pack("!H", msg.group_id),
            _lv16(msg.key_share),
        ))
    elif isinstance(msg, RetryPacket):
        first = RETRY_BASE | (MITIGATION_BIT if msg.mitigation_bit else 0)
        out = b"".join((
            bytes([first]),
            struct.pack("!I", msg.version),
            _lv8(msg.dcid), _lv8(msg.scid),
            msg.token,
        ))
    elif isinstance(msg, ShloMessage):
        out = b"".join((
            bytes([TAG_SHLO]),
            _lv8(msg.scid),
            struct.pack("!H", msg.group_id),
            _lv16(msg.key_share),
        ))
    elif isinstance(msg, RejectMessage):
        out = bytes([TAG_REJECT, msg.reason])
    else:
        raise TypeError(f"not a handshake message: {type(msg).__name__}")
    if len(out) > MAX_DATAGRAM:
        raise OversizedDatagram(f"{len(out)} bytes exceeds {MAX_DATAGRAM}")
    return out


def decode_message(data: bytes) -> HandshakeMessage:
    if not data:
        raise Truncated("empty datagram")
    first = data[0]
    reader = _Reader(data)
    reader.u8()
    if first == TAG_INITIAL:
        version = reader.u32()
        msg: HandshakeMessage = InitialMessage(
            version=version,
            dcid=reader.lv8(),
            scid=reader.lv8(),
            token=reader.lv16(),
            group_id=reader.u16(),
            key_share=reader.lv16(),
        )
    elif first & RETRY_BASE == RETRY_BASE:
        msg = RetryPacket(
            mitigation_bit=(first >> 3) & 1,
            version=reader.u32(),
            dcid=reader.lv8(),
            scid=reader.lv8(),
            token=reader.rest(),
        )
        if len(msg.token) == 0:
            raise Truncated("retry packet carries no token")
    elif first == TAG_SHLO:
        msg = ShloMessage(
            scid=reader.lv8(),
            group_id=reader.u16(),
            key_share=reader.lv16(),
        )
    elif first == TAG_REJECT:
        code = reader.u8()
        try:
            msg = RejectMessage(reason=RejectReason(code))
        except ValueError:
            raise UnknownType(f"unknown reject reason {code}") from None
    else:
        raise UnknownType(f"unknown message tag 0x{first:02x}")
    reader.done()
    return msg


def decode_retry_legacy(data: bytes) -> bytes:
    """Parse a Retry datagram ignoring the unused nibble entirely.

    Models a client that predates the mitigation bit: it must still recover
    the token bytes.
    """
    if not data:
        raise Truncated("empty datagram")
    if data[0] & RETRY_BASE != RETRY_BASE:
        raise UnknownType("not a retry packet")
    reader = _Reader(data)
    reader.u8()
    reader.u32()
    reader.lv8()
    reader.lv8()
    return reader.rest()
