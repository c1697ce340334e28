import random

import pytest

from qfam.token_codec import (
    AssociatedData,
    RetryToken,
    TokenBody,
    TokenHeader,
    TokenKeyStore,
)

NOW = 1_700_000_000


@pytest.fixture
def key_store():
    return TokenKeyStore(
        entries={5: (bytes(range(16)), bytes(range(12)))},
        active_sequence=5,
    )


@pytest.fixture
def header():
    return TokenHeader(token_type=0, token_key_sequence=5,
                       tin=0x0123456789ABCDEF, mrn=0, cci=12)


@pytest.fixture
def body():
    return TokenBody(expiry=NOW + 30, odcid=b"\xaa" * 8, source_port=51000,
                     opaque=b"extra")


@pytest.fixture
def ad(header):
    return AssociatedData.for_header("192.0.2.7", header, rscid=b"\xbb" * 8)


def random_header(rng: random.Random) -> TokenHeader:
    return TokenHeader(
        token_type=rng.randint(0, 1),
        token_key_sequence=rng.randrange(128),
        tin=rng.getrandbits(64),
        mrn=rng.getrandbits(28),
        cci=rng.randrange(16),
    )


def random_token(rng: random.Random) -> RetryToken:
    return RetryToken(
        header=random_header(rng),
        encrypted_body=rng.randbytes(rng.randrange(0, 64)),
        icv=rng.randbytes(16),
    )
