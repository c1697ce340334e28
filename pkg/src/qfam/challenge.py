"""Hash puzzle tied to a Retry token.

The client searches for a 28-bit number whose SHA-256 digest, computed over
the token context, starts with at least `cci` zero bits. The server checks
a proposed solution with a single hash.

Digest input is the fixed 31-byte serialization:

    icv(16) || tin(8, big-endian) || port(2, big-endian) || cci(1) || r(4, big-endian)
"""

from __future__ import annotations

import hashlib
import secrets
import struct
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .errors import Cancelled, Exhausted

MRN_SPACE = 1 << 28
CANCEL_CHECK_INTERVAL = 1 << 16


@dataclass(frozen=True)
class ChallengeInstance:
    icv: bytes
    tin: int
    port: int
    cci: int

    def __post_init__(self) -> None:
        if len(self.icv) != 16:
            raise ValueError(f"icv must be 16 bytes, got {len(self.icv)}")
        if not 0 <= self.tin < (1 << 64):
            raise ValueError("tin out of 64-bit range")
        if not 0 <= self.port < (1 << 16):
            raise ValueError("port out of 16-bit range")
        if not 0 <= self.cci <= 15:
            raise ValueError("cci out of range 0-15")

    def prefix(self) -> bytes:
        return self.icv + struct.pack("!QHB", self.tin, self.port, self.cci)


@dataclass(frozen=True)
class ChallengeSolution:
    mrn: int
    iterations: int
    wall_time_ns: int


def challenge_digest(instance: ChallengeInstance, r: int) -> bytes:
    if not 0 <= r < MRN_SPACE:
        raise ValueError("r out of 28-bit range")
    return hashlib.sha256(instance.prefix() + struct.pack("!I", r)).digest()


def leading_zero_bits(digest: bytes) -> int:
    count = 0
    for byte in digest:
        if byte == 0:
            count += 8
            continue
        count += 8 - byte.bit_length()
        break
    return count


def verify(instance: ChallengeInstance, mrn: int) -> bool:
    """One hash evaluation, regardless of difficulty."""
    return leading_zero_bits(challenge_digest(instance, mrn)) >= instance.cci


def solve(instance: ChallengeInstance, start: Optional[int] = None,
          should_cancel: Optional[Callable[[], bool]] = None) -> ChallengeSolution:
    """Search from `start` (default random), incrementing modulo 2^28.

    `should_cancel` is polled every 2^16 iterations so a flooding actor can
    abandon a stale challenge.
    """
    if start is None:
        start = secrets.randbelow(MRN_SPACE)
    elif not 0 <= start < MRN_SPACE:
        raise ValueError("start out of 28-bit range")

    prefix = instance.prefix()
    threshold = instance.cci
    sha256 = hashlib.sha256
    pack = struct.Struct("!I").pack
    t0 = time.perf_counter_ns()
    r = start
    for step in range(MRN_SPACE):
        if should_cancel is not None and step and step % CANCEL_CHECK_INTERVAL == 0:
            if should_cancel():
                raise Cancelled(f"solve cancelled after {step} iterations")
        digest = sha256(prefix + pack(r)).digest()
        if leading_zero_bits(digest) >= threshold:
            return ChallengeSolution(
                mrn=r,
                iterations=step + 1,
                wall_time_ns=time.perf_counter_ns() - t0,
            )
        r = (r + 1) % MRN_SPACE
    raise Exhausted("no 28-bit solution found")
