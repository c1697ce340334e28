"""Real key-exchange workload.

The CPU asymmetry the flood exploits comes from here: the server must run a
scalar multiplication per handshake while an attacker can replay one
precomputed public share. secp384r1 is the most expensive supported group.
"""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass

from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)

from .errors import InvalidPoint, UnsupportedGroup


class KeyExchangeGroup(enum.Enum):
    X25519 = 0x001D
    SECP256R1 = 0x0017
    SECP384R1 = 0x0018

    @classmethod
    def from_id(cls, group_id: int) -> "KeyExchangeGroup":
        try:
            return cls(group_id)
        except ValueError:
            raise UnsupportedGroup(f"group id 0x{group_id:04x}") from None

    @classmethod
    def from_name(cls, name: str) -> "KeyExchangeGroup":
        try:
            return cls[name.upper()]
        except KeyError:
            raise UnsupportedGroup(name) from None


_EC_CURVES = {
    KeyExchangeGroup.SECP256R1: ec.SECP256R1(),
    KeyExchangeGroup.SECP384R1: ec.SECP384R1(),
}


@dataclass(frozen=True)
class KeyPair:
    group: KeyExchangeGroup
    private: object
    public: bytes  # x25519: 32 raw bytes; secp: uncompressed point


def generate_keyshare(group: KeyExchangeGroup) -> KeyPair:
    if group is KeyExchangeGroup.X25519:
        priv = X25519PrivateKey.generate()
        public = priv.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    elif group in _EC_CURVES:
        priv = ec.generate_private_key(_EC_CURVES[group])
        public = priv.public_key().public_bytes(
            serialization.Encoding.X962,
            serialization.PublicFormat.UncompressedPoint)
    else:
        raise UnsupportedGroup(str(group))
    return KeyPair(group=group, private=priv, public=public)


def compute_shared(group: KeyExchangeGroup, private: object,
                   peer_public: bytes) -> bytes:
    if group is KeyExchangeGroup.X25519:
        if len(peer_public) != 32:
            raise InvalidPoint(f"x25519 share must be 32 bytes, got {len(peer_public)}")
        try:
            peer = X25519PublicKey.from_public_bytes(peer_public)
            return private.exchange(peer)
        except ValueError as exc:
            raise InvalidPoint(str(exc)) from None
    if group in _EC_CURVES:
        try:
            peer = ec.EllipticCurvePublicKey.from_encoded_point(
                _EC_CURVES[group], peer_public)
        except ValueError as exc:
            raise InvalidPoint(str(exc)) from None
        return private.exchange(ec.ECDH(), peer)
    raise UnsupportedGroup(str(group))


_precomputed: dict[KeyExchangeGroup, bytes] = {}
_precomputed_lock = threading.Lock()


def precomputed_share(group: KeyExchangeGroup) -> bytes:
    """A fixed valid public share, generated once per process.

    Replaying it costs the attacker nothing per handshake while the server
    still pays full price to process it.
    """
    with _precomputed_lock:
        share = _precomputed.get(group)
        if share is None:
            share = generate_keyshare(group).public
            _precomputed[group] = share
        return share
