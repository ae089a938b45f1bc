"""Blocking packet-framed socket wrapper used by every network role."""

from __future__ import annotations

import socket
import threading
import time

from .errors import ConnectionClosed
from .packets import IncompletePacket, Packet, decode, encode

_CHUNK = 4096


class PacketConnection:
    """One MQTT conversation over a TCP socket.

    recv() returns whole packets; send() is safe to call from multiple
    threads.  A clean EOF on a packet boundary reads as None, an EOF in
    the middle of a packet raises ConnectionClosed.
    """

    def __init__(self, sock: socket.socket):
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._sock = sock
        self._buf = bytearray()
        self._send_lock = threading.Lock()
        try:
            self.peer = "%s:%d" % sock.getpeername()[:2]
        except OSError:
            self.peer = "?"

    def send(self, packet: Packet) -> None:
        data = encode(packet)
        with self._send_lock:
            try:
                self._sock.sendall(data)
            except OSError as exc:
                raise ConnectionClosed(f"send to {self.peer} failed: {exc}") from exc

    def recv(self, timeout: float | None = None) -> Packet | None:
        """Read one packet, or None on clean EOF.

        `timeout` bounds the whole wait; expiry raises TimeoutError with
        any partial bytes kept for the next call.
        """
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._buf:
                try:
                    packet, used = decode(bytes(self._buf))
                except IncompletePacket:
                    pass
                else:
                    del self._buf[:used]
                    return packet
            if deadline is None:
                self._sock.settimeout(None)
            else:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise TimeoutError(f"no packet from {self.peer} in {timeout}s")
                self._sock.settimeout(remaining)
            try:
                chunk = self._sock.recv(_CHUNK)
            except socket.timeout:
                raise TimeoutError(f"no packet from {self.peer} in {timeout}s") from None
            except OSError as exc:
                raise ConnectionClosed(f"recv from {self.peer} failed: {exc}") from exc
            if not chunk:
                if self._buf:
                    raise ConnectionClosed(f"{self.peer} closed mid-packet")
                return None
            self._buf += chunk

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self) -> "PacketConnection":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def open_connection(host: str, port: int, timeout: float) -> PacketConnection:
    """Dial a broker; raises OSError on refusal or timeout."""
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    return PacketConnection(sock)
