"""Datagram transport with two backends.

* `UdpEndpoint` — real sockets, localhost or LAN.
* `InprocNetwork` — in-process channels with seedable loss and fixed
  latency, standing in for the LAN testbed in reproducible tests.

Both preserve datagram boundaries and report the true sender address; the
sender's port feeds the challenge, so it must survive the trip.
"""

from __future__ import annotations

import random
import socket
import threading
import time
from collections import deque
from typing import Optional

from .errors import BackendError, OversizedDatagram, Timeout
from .packet import MAX_DATAGRAM
from .server import Address


class Endpoint:
    """One datagram endpoint; polled by at most one task at a time."""

    address: Address

    def send(self, dest: Address, datagram: bytes) -> None:
        raise NotImplementedError

    def recv(self, timeout: Optional[float] = None) -> tuple[bytes, Address]:
        raise NotImplementedError

    def close(self) -> None:
        pass


def _check_size(datagram: bytes) -> None:
    if len(datagram) > MAX_DATAGRAM:
        raise OversizedDatagram(
            f"{len(datagram)} bytes exceeds {MAX_DATAGRAM}")


class UdpEndpoint(Endpoint):
    def __init__(self, host: str = "127.0.0.1", port: int = 0):
        try:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.bind((host, port))
        except OSError as exc:
            raise BackendError(f"cannot bind {host}:{port}: {exc}") from exc
        ip, bound_port = self._sock.getsockname()
        self.address = Address(ip=ip, port=bound_port)

    def send(self, dest: Address, datagram: bytes) -> None:
        _check_size(datagram)
        self._sock.sendto(datagram, (dest.ip, dest.port))

    def recv(self, timeout: Optional[float] = None) -> tuple[bytes, Address]:
        self._sock.settimeout(timeout)
        try:
            data, (ip, port) = self._sock.recvfrom(65535)
        except (socket.timeout, BlockingIOError):
            raise Timeout("no datagram within timeout") from None
        return data, Address(ip=ip, port=port)

    def close(self) -> None:
        self._sock.close()


class _Mailbox:
    def __init__(self) -> None:
        self.items: deque[tuple[float, bytes, Address]] = deque()
        self.cond = threading.Condition()


class InprocNetwork:
    """Registry of in-process endpoints with deterministic loss draws."""

    def __init__(self, seed: Optional[int] = None, loss: float = 0.0,
                 latency: float = 0.0):
        if not 0.0 <= loss <= 1.0:
            raise ValueError("loss must be within [0, 1]")
        self.loss = loss
        self.latency = latency
        self._rng = random.Random(seed)
        self._mailboxes: dict[Address, _Mailbox] = {}
        self._next_port = 40000
        self._lock = threading.Lock()

    def endpoint(self, ip: str = "10.0.0.1",
                 port: Optional[int] = None) -> "InprocEndpoint":
        with self._lock:
            if port is None:
                port = self._next_port
                self._next_port += 1
            addr = Address(ip=ip, port=port)
            if addr in self._mailboxes:
                raise BackendError(f"address already bound: {addr}")
            self._mailboxes[addr] = _Mailbox()
        return InprocEndpoint(self, addr)

    def _deliver(self, src: Address, dest: Address, datagram: bytes) -> None:
        with self._lock:
            dropped = self.loss > 0 and self._rng.random() < self.loss
            box = self._mailboxes.get(dest)
        if dropped or box is None:
            return
        ready = time.monotonic() + self.latency
        with box.cond:
            box.items.append((ready, datagram, src))
            box.cond.notify()


class InprocEndpoint(Endpoint):
    def __init__(self, network: InprocNetwork, address: Address):
        self._network = network
        self.address = address

    def send(self, dest: Address, datagram: bytes) -> None:
        _check_size(datagram)
        self._network._deliver(self.address, dest, datagram)

    def recv(self, timeout: Optional[float] = None) -> tuple[bytes, Address]:
        box = self._network._mailboxes[self.address]
        deadline = None if timeout is None else time.monotonic() + timeout
        with box.cond:
            while True:
                if box.items:
                    ready, datagram, src = box.items[0]
                    wait = ready - time.monotonic()
                    if wait <= 0:
                        box.items.popleft()
                        return datagram, src
                else:
                    wait = None
                if deadline is not None:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise Timeout("no datagram within timeout")
                    wait = remaining if wait is None else min(wait, remaining)
                box.cond.wait(wait)

    def close(self) -> None:
        with self._network._lock:
            self._network._mailboxes.pop(self.address, None)
