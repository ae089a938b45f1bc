"""Raw-protocol helpers for exercising brokers from tests."""

import socket
import threading
import time

from tdmqtt.errors import ConnectionClosed
from tdmqtt.packets import (
    BrokerRef,
    ConnAck,
    Connect,
    Publish,
    Reason,
    Subscribe,
    SubAck,
)
from tdmqtt.stream import PacketConnection, open_connection

RECV_TIMEOUT = 2.0


def connect(ref: BrokerRef, client_id: str = "", keep_alive: int = 0,
            timeout: float = RECV_TIMEOUT) -> PacketConnection:
    conn = open_connection(ref.host, ref.port, timeout)
    conn.send(Connect(client_id, keep_alive=keep_alive))
    ack = conn.recv(timeout=timeout)
    assert isinstance(ack, ConnAck) and ack.reason == 0, ack
    return conn


def subscribe(conn: PacketConnection, *filters: str, pid: int = 1) -> SubAck:
    conn.send(Subscribe(pid, filters))
    ack = conn.recv(timeout=RECV_TIMEOUT)
    assert isinstance(ack, SubAck), ack
    return ack


def drain(conn: PacketConnection, timeout: float = 0.3) -> list:
    """Collect packets until the peer goes quiet or hangs up."""
    got = []
    deadline = time.monotonic() + timeout
    while True:
        left = deadline - time.monotonic()
        if left <= 0:
            return got
        try:
            packet = conn.recv(timeout=left)
        except (TimeoutError, ConnectionClosed):
            return got
        if packet is None:
            return got
        got.append(packet)


def wait_until(predicate, timeout: float = 5.0, interval: float = 0.01) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if predicate():
            return
        time.sleep(interval)
    raise AssertionError("condition not reached in %.1fs" % timeout)


class SilentBroker:
    """Completes handshakes, then never speaks again.

    Models a hung broker: the TCP connection stays open, pings go
    unanswered.  Census requests get a topic list so a master will
    happily register it.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0,
                 topics: tuple[str, ...] = ()):
        self._topics = topics
        self._listener = socket.socket()
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self._conns = []
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    @property
    def address(self) -> BrokerRef:
        host, port = self._listener.getsockname()[:2]
        return BrokerRef(host, port)

    def stop(self):
        try:
            self._listener.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._listener.close()
        for conn in self._conns:
            conn.close()

    def _serve(self):
        while True:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                return
            threading.Thread(target=self._handle, args=(sock,),
                             daemon=True).start()

    def _handle(self, sock):
        conn = PacketConnection(sock)
        self._conns.append(conn)
        try:
            if not isinstance(conn.recv(timeout=5), Connect):
                return
            conn.send(ConnAck(Reason.SUCCESS))
            packet = conn.recv(timeout=5)
            if isinstance(packet, Subscribe):
                conn.send(SubAck(packet.packet_id,
                                 (Reason.SUCCESS,) * len(packet.filters)))
                for topic in self._topics:
                    conn.send(Publish(topic, b"", retain=True))
            while True:  # the silence
                if conn.recv() is None:
                    return
        except Exception:
            pass
        finally:
            conn.close()


def admin_command(address: tuple[str, int], line: str) -> str:
    with socket.create_connection(address, timeout=2.0) as sock:
        sock.sendall(line.encode() + b"\n")
        reply = b""
        while not reply.endswith(b"\n"):
            chunk = sock.recv(256)
            if not chunk:
                break
            reply += chunk
    return reply.decode().strip()
