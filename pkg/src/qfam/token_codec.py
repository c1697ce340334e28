"""Enhanced Retry token: wire codec and AEAD sealing.

Wire form of a token:

    header(13) || etb_len(2, big-endian) || encrypted_body || icv(16)

Header packing:

    byte 0      (token_type << 7) | token_key_sequence
    bytes 1-8   TIN, big-endian
    bytes 9-12  (mrn << 4) | cci, one 32-bit big-endian word

The body is sealed with AES-128-GCM. The cleartext header rides along as
part of the associated data *except* the MRN, which the client overwrites
with its puzzle solution; authentication must survive that mutation.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field, replace

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthenticationFailed,
    Expired,
    LengthMismatch,
    TruncatedToken,
    UnknownKeySequence,
)

HEADER_LEN = 13
ICV_LEN = 16
MIN_TOKEN_LEN = HEADER_LEN + 2 + ICV_LEN  # 31, empty encrypted body

MRN_MAX = (1 << 28) - 1
CCI_MAX = 15

TOKEN_TYPE_RETRY = 0
TOKEN_TYPE_NEW_TOKEN = 1


def _check_range(name: str, value: int, bits: int) -> None:
    if not 0 <= value < (1 << bits):
        raise ValueError(f"{name} out of range for {bits} bits: {value}")


@dataclass(frozen=True)
class TokenHeader:
    token_type: int = TOKEN_TYPE_RETRY
    token_key_sequence: int = 0
    tin: int = 0
    mrn: int = 0
    cci: int = 0

    def __post_init__(self) -> None:
        _check_range("token_type", self.token_type, 1)
        _check_range("token_key_sequence", self.token_key_sequence, 7)
        _check_range("tin", self.tin, 64)
        _check_range("mrn", self.mrn, 28)
        _check_range("cci", self.cci, 4)

    def encode(self) -> bytes:
        word = (self.mrn << 4) | self.cci
        return struct.pack(
            "!BQI",
            (self.token_type << 7) | self.token_key_sequence,
            self.tin,
            word,
        )

    @classmethod
    def decode(cls, data: bytes) -> "TokenHeader":
        if len(data) < HEADER_LEN:
            raise TruncatedToken(f"header needs {HEADER_LEN} bytes, got {len(data)}")
        b0, tin, word = struct.unpack("!BQI", data[:HEADER_LEN])
        return cls(
            token_type=b0 >> 7,
            token_key_sequence=b0 & 0x7F,
            tin=tin,
            mrn=word >> 4,
            cci=word & 0x0F,
        )

    def with_mrn(self, mrn: int) -> "TokenHeader":
        return replace(self, mrn=mrn)


@dataclass(frozen=True)
class TokenBody:
    expiry: int  # absolute expiration, Unix seconds
    odcid: bytes = b""
    source_port: int = 0
    opaque: bytes = b""

    def __post_init__(self) -> None:
        _check_range("expiry", self.expiry, 64)
        _check_range("source_port", self.source_port, 16)
        if len(self.odcid) > 20:
            raise ValueError(f"odcid longer than 20 bytes: {len(self.odcid)}")
        if len(self.opaque) > 0xFFFF:
            raise ValueError("opaque data longer than 65535 bytes")

    def encode(self) -> bytes:
        return b"".join((
            struct.pack("!Q", self.expiry),
            bytes([len(self.odcid)]),
            self.odcid,
            struct.pack("!H", self.source_port),
            struct.pack("!H", len(self.opaque)),
            self.opaque,
        ))

    @classmethod
    def decode(cls, data: bytes) -> "TokenBody":
        if len(data) < 13:
            raise TruncatedToken("token body shorter than fixed fields")
        expiry = struct.unpack_from("!Q", data, 0)[0]
        odcil = data[8]
        pos = 9 + odcil
        if len(data) < pos + 4:
            raise TruncatedToken("token body ends inside ODCID or port")
        odcid = data[9:pos]
        source_port, opaque_len = struct.unpack_from("!HH", data, pos)
        pos += 4
        if len(data) != pos + opaque_len:
            raise LengthMismatch("opaque length inconsistent with body size")
        return cls(expiry=expiry, odcid=odcid, source_port=source_port,
                   opaque=data[pos:])


@dataclass(frozen=True)
class RetryToken:
    header: TokenHeader
    encrypted_body: bytes
    icv: bytes

    def __post_init__(self) -> None:
        if len(self.icv) != ICV_LEN:
            raise ValueError(f"icv must be {ICV_LEN} bytes, got {len(self.icv)}")
        if len(self.encrypted_body) > 0xFFFF:
            raise ValueError("encrypted body longer than 65535 bytes")


@dataclass(frozen=True)
class AssociatedData:
    """AEAD associated data binding a token to the client and Retry context.

    The MRN is deliberately absent: the client mutates it.
    """

    client_ip: str  # IPv4 or IPv6 literal; IPv4 embeds as ::ffff:a.b.c.d
    token_type: int
    token_key_sequence: int
    tin: int
    cci: int
    rscid: bytes = b""

    def __post_init__(self) -> None:
        _check_range("token_type", self.token_type, 1)
        _check_range("token_key_sequence", self.token_key_sequence, 7)
        _check_range("tin", self.tin, 64)
        _check_range("cci", self.cci, 4)
        if len(self.rscid) > 20:
            raise ValueError(f"rscid longer than 20 bytes: {len(self.rscid)}")

    def serialize(self) -> bytes:
        ip = ipaddress.ip_address(self.client_ip)
        if ip.version == 4:
            ip = ipaddress.IPv6Address(f"::ffff:{ip}")
        return b"".join((
            ip.packed,
            bytes([(self.token_type << 7) | self.token_key_sequence]),
            struct.pack("!Q", self.tin),
            bytes([self.cci]),
            bytes([len(self.rscid)]),
            self.rscid,
        ))

    @classmethod
    def for_header(cls, client_ip: str, header: TokenHeader,
                   rscid: bytes) -> "AssociatedData":
        return cls(
            client_ip=client_ip,
            token_type=header.token_type,
            token_key_sequence=header.token_key_sequence,
            tin=header.tin,
            cci=header.cci,
            rscid=rscid,
        )


@dataclass(frozen=True)
class TokenKeyStore:
    """Immutable key store; rotation builds a new store."""

    entries: dict[int, tuple[bytes, bytes]] = field(default_factory=dict)
    active_sequence: int = 0

    def __post_init__(self) -> None:
        if self.active_sequence not in self.entries:
            raise ValueError("active_sequence missing from entries")
        for seq, (key, iv_base) in self.entries.items():
            _check_range("sequence", seq, 7)
            if len(key) != 16:
                raise ValueError("AES-128-GCM key must be 16 bytes")
            if len(iv_base) != 12:
                raise ValueError("iv_base must be 12 bytes")

    def lookup(self, sequence: int) -> tuple[bytes, bytes]:
        try:
            return self.entries[sequence]
        except KeyError:
            raise UnknownKeySequence(f"no key for sequence {sequence}") from None

    @classmethod
    def generate(cls, sequence: int = 0) -> "TokenKeyStore":
        import secrets
        return cls(entries={sequence: (secrets.token_bytes(16),
                                       secrets.token_bytes(12))},
                   active_sequence=sequence)


def _nonce(iv_base: bytes, tin: int) -> bytes:
    # iv_base XOR (32 zero bits || TIN big-endian): TIN is random per token
    # and excluded from client mutation, so nonces never repeat in practice.
    pad = struct.pack("!IQ", 0, tin)
    return bytes(a ^ b for a, b in zip(iv_base, pad))


def encode_token(token: RetryToken) -> bytes:
    return b"".join((
        token.header.encode(),
        struct.pack("!H", len(token.encrypted_body)),
        token.encrypted_body,
        token.icv,
    ))


def decode_token(data: bytes) -> RetryToken:
    if len(data) < MIN_TOKEN_LEN:
        raise TruncatedToken(
            f"token needs at least {MIN_TOKEN_LEN} bytes, got {len(data)}")
    header = TokenHeader.decode(data)
    (etb_len,) = struct.unpack_from("!H", data, HEADER_LEN)
    if len(data) != HEADER_LEN + 2 + etb_len + ICV_LEN:
        raise LengthMismatch(
            f"etb_len {etb_len} inconsistent with total length {len(data)}")
    body_end = HEADER_LEN + 2 + etb_len
    return RetryToken(header=header,
                      encrypted_body=data[HEADER_LEN + 2:body_end],
                      icv=data[body_end:])


def seal_token(keys: TokenKeyStore, header: TokenHeader, body: TokenBody,
               ad: AssociatedData) -> RetryToken:
    if header.mrn != 0:
        raise ValueError("mrn must be 0 at issuance")
    if (ad.tin, ad.cci, ad.token_key_sequence) != (
            header.tin, header.cci, header.token_key_sequence):
        raise ValueError("associated data disagrees with token header")
    key, iv_base = keys.lookup(header.token_key_sequence)
    sealed = AESGCM(key).encrypt(_nonce(iv_base, header.tin),
                                 body.encode(), ad.serialize())
    return RetryToken(header=header,
                      encrypted_body=sealed[:-ICV_LEN],
                      icv=sealed[-ICV_LEN:])


def open_token(keys: TokenKeyStore, token: RetryToken, ad: AssociatedData,
               now: int) -> TokenBody:
    key, iv_base = keys.lookup(token.header.token_key_sequence)
    try:
        plaintext = AESGCM(key).decrypt(
            _nonce(iv_base, token.header.tin),
            token.encrypted_body + token.icv,
            ad.serialize(),
        )
    except InvalidTag:
        raise AuthenticationFailed("token failed AEAD authentication") from None
    body = TokenBody.decode(plaintext)
    if now > body.expiry:
        raise Expired(f"token expired at {body.expiry}, now {now}")
    return body
