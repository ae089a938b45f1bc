"""Edge broker: a small MQTT 5 broker that also remembers where topics went.

Beyond plain publish/subscribe it keeps a relocation table.  When a topic
has been handed to another broker, publishers and subscribers that touch
it are cut off with a DISCONNECT naming the new broker (USE ANOTHER
SERVER + server reference) or, when the destination is unknown, a plain
TOPIC FILTER NOT ACCEPTED.

Every publish updates the per-topic message table regardless of the
retain flag, so a later subscribe replays the latest message of each
matching topic.  That replay is what lets a wildcard subscriber
enumerate the broker's whole topic population.
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading

from .packets import (
    BrokerRef,
    ConnAck,
    Connect,
    Disconnect,
    MalformedFilter,
    MalformedPacket,
    PingReq,
    PingResp,
    PubAck,
    Publish,
    Reason,
    SubAck,
    Subscribe,
    topic_matches,
    validate_filter,
)
from .errors import ConnectionClosed
from .stream import PacketConnection

logger = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT = 10.0


class _Session:
    def __init__(self, conn: PacketConnection, client_id: str):
        self.conn = conn
        self.client_id = client_id
        self.filters: list[str] = []
        self._pid = itertools.count(1)

    def next_packet_id(self) -> int:
        return (next(self._pid) - 1) % 0xFFFF + 1


class EdgeBroker:
    """Runs until stop(); every client connection gets its own thread."""

    def __init__(self, host: str = "127.0.0.1", port: int = 1883,
                 admin_port: int | None = None):
        self._host = host
        self._port = port
        self._admin_port = admin_port
        self._lock = threading.RLock()
        self._sessions: dict[str, _Session] = {}
        self._messages: dict[str, tuple[bytes, int]] = {}  # topic -> last message
        self._relocations: dict[str, BrokerRef | None] = {}
        self._anon = itertools.count(1)
        self._listener: socket.socket | None = None
        self._admin_listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._running = False

    # -- lifecycle ----------------------------------------------------------

    def start(self) -> "EdgeBroker":
        self._listener = self._bind(self._port)
        self._port = self._listener.getsockname()[1]
        self._running = True
        self._spawn(self._accept_loop, self._listener, self._serve_client)
        if self._admin_port is not None:
            self._admin_listener = self._bind(self._admin_port)
            self._admin_port = self._admin_listener.getsockname()[1]
            self._spawn(self._accept_loop, self._admin_listener, self._serve_admin)
        logger.info("edge broker listening on %s", self.address)
        return self

    def stop(self) -> None:
        self._running = False
        for listener in (self._listener, self._admin_listener):
            if listener is not None:
                try:
                    # a bare close() leaves the accept loop blocked
                    listener.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                listener.close()
        with self._lock:
            sessions = list(self._sessions.values())
        for session in sessions:
            session.conn.close()
        for thread in self._threads:
            thread.join(timeout=2)

    def _bind(self, port: int) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self._host, port))
        sock.listen(64)
        return sock

    def _spawn(self, target, *args) -> None:
        thread = threading.Thread(target=target, args=args, daemon=True)
        thread.start()
        self._threads = [t for t in self._threads if t.is_alive()]
        self._threads.append(thread)

    @property
    def address(self) -> BrokerRef:
        return BrokerRef(self._host, self._port)

    @property
    def admin_address(self) -> tuple[str, int]:
        if self._admin_port is None:
            raise RuntimeError("broker started without an admin port")
        return (self._host, self._admin_port)

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._messages)

    # -- accept/serve -------------------------------------------------------

    def _accept_loop(self, listener: socket.socket, handler) -> None:
        while self._running:
            try:
                sock, _ = listener.accept()
            except OSError:
                return  # listener closed by stop()
            self._spawn(handler, sock)

    def _serve_client(self, sock: socket.socket) -> None:
        conn = PacketConnection(sock)
        session = None
        try:
            first = conn.recv(timeout=HANDSHAKE_TIMEOUT)
            if not isinstance(first, Connect):
                return
            session = self._register(conn, first.client_id)
            conn.send(ConnAck(Reason.SUCCESS))
            while True:
                packet = conn.recv()
                if packet is None or isinstance(packet, Disconnect):
                    return
                if isinstance(packet, PingReq):
                    conn.send(PingResp())
                elif isinstance(packet, Subscribe):
                    if not self._handle_subscribe(session, packet):
                        return
                elif isinstance(packet, Publish):
                    if not self._handle_publish(session, packet):
                        return
                elif isinstance(packet, PubAck):
                    pass  # delivery acknowledgements are not tracked
                else:
                    logger.debug("closing %s: unexpected %r", conn.peer, packet)
                    return
        except (ConnectionClosed, MalformedPacket, TimeoutError, OSError) as exc:
            logger.debug("session %s ended: %s", conn.peer, exc)
        finally:
            if session is not None:
                self._unregister(session)
            conn.close()

    def _register(self, conn: PacketConnection, client_id: str) -> _Session:
        with self._lock:
            if not client_id:
                client_id = f"anon-{next(self._anon)}"
            old = self._sessions.get(client_id)
            session = _Session(conn, client_id)
            self._sessions[client_id] = session
        if old is not None:
            logger.debug("evicting older session for %r", client_id)
            old.conn.close()
        return session

    def _unregister(self, session: _Session) -> None:
        with self._lock:
            # an eviction may already have replaced this id
            if self._sessions.get(session.client_id) is session:
                del self._sessions[session.client_id]

    # -- packet handlers ----------------------------------------------------

    def _handle_subscribe(self, session: _Session, sub: Subscribe) -> bool:
        """Returns False when the session was redirected and must close."""
        reasons = []
        accepted = []
        for filt in sub.filters:
            try:
                validate_filter(filt)
            except MalformedFilter:
                reasons.append(Reason.TOPIC_FILTER_NOT_ACCEPTED)
            else:
                reasons.append(Reason.SUCCESS)
                accepted.append(filt)
        with self._lock:
            session.filters.extend(accepted)
            replay = sorted(
                topic for topic in self._messages
                if any(topic_matches(f, topic) for f in accepted)
            )
            snapshot = [(t, *self._messages[t]) for t in replay]
            moved = next(
                ((f, self._relocations[f]) for f in accepted
                 if f in self._relocations),
                None,
            )
        session.conn.send(SubAck(sub.packet_id, tuple(reasons)))
        for topic, payload, qos in snapshot:
            self._deliver(session, topic, payload, qos, retain=True)
        if moved is not None:
            topic, target = moved
            logger.debug("subscriber asked for relocated %r", topic)
            session.conn.send(_relocation_disconnect(target))
            return False
        return True

    def _handle_publish(self, session: _Session, pub: Publish) -> bool:
        with self._lock:
            if pub.topic in self._relocations:
                target = self._relocations[pub.topic]
            else:
                target = _NOT_MOVED
                self._messages[pub.topic] = (pub.payload, pub.qos)
                receivers = [
                    s for s in self._sessions.values()
                    if s is not session
                    and any(topic_matches(f, pub.topic) for f in s.filters)
                ]
        if target is not _NOT_MOVED:
            session.conn.send(_relocation_disconnect(target))
            return False
        if pub.qos == 1:
            session.conn.send(PubAck(pub.packet_id, Reason.SUCCESS))
        for receiver in receivers:
            self._deliver(receiver, pub.topic, pub.payload, pub.qos,
                          retain=False)
        return True

    def _deliver(self, session: _Session, topic: str, payload: bytes,
                 qos: int, retain: bool) -> None:
        packet_id = session.next_packet_id() if qos == 1 else None
        try:
            session.conn.send(Publish(topic, payload, qos=qos,
                                      packet_id=packet_id, retain=retain))
        except ConnectionClosed:
            pass  # its own thread will unregister it

    # -- relocation ---------------------------------------------------------

    def relocate_topic(self, topic: str, target: BrokerRef | None) -> None:
        """Mark a topic as moved and disconnect everyone touching it.

        Subscribers whose filters cover the topic (wildcards included) are
        told where it went; the topic leaves the local message table so it
        no longer appears in topic enumerations.
        """
        with self._lock:
            self._relocations[topic] = target
            self._messages.pop(topic, None)
            affected = [
                s for s in self._sessions.values()
                if any(topic_matches(f, topic) for f in s.filters)
            ]
        logger.info("topic %r relocated to %s; notifying %d subscriber(s)",
                    topic, target or "unknown", len(affected))
        notice = _relocation_disconnect(target)
        for session in affected:
            try:
                session.conn.send(notice)
            except ConnectionClosed:
                pass
            session.conn.close()

    # -- admin channel ------------------------------------------------------

    def _serve_admin(self, sock: socket.socket) -> None:
        """Line protocol: RELOCATE <topic> [host:port], answered OK / ERR."""
        try:
            with sock, sock.makefile("rw", encoding="utf-8", newline="\n") as f:
                for line in f:
                    reply = self._admin_command(line.strip())
                    f.write(reply + "\n")
                    f.flush()
        except OSError:
            pass

    def _admin_command(self, line: str) -> str:
        parts = line.split()
        if not parts:
            return "ERR empty command"
        if parts[0].upper() != "RELOCATE" or len(parts) not in (2, 3):
            return f"ERR unknown command {parts[0]!r}"
        topic = parts[1]
        target = None
        if len(parts) == 3:
            try:
                target = BrokerRef.parse(parts[2])
            except ValueError as exc:
                return f"ERR {exc}"
        self.relocate_topic(topic, target)
        return "OK"


_NOT_MOVED = object()


def _relocation_disconnect(target: BrokerRef | None) -> Disconnect:
    if target is None:
        return Disconnect(Reason.TOPIC_FILTER_NOT_ACCEPTED)
    return Disconnect(Reason.USE_ANOTHER_SERVER, server_reference=target)
