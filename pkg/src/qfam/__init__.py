"""Proof-of-work enhanced QUIC-style Retry tokens, plus an attack/defense
experiment harness for handshake flooding at desk scale."""

__version__ = "0.1.0"
